//! Raw numerical kernels behind the tape operations.
//!
//! Everything here works on flat f32 slices with explicit extents and is a
//! pure function of its inputs: identical inputs give bit-identical outputs.
//! Feature maps are row-major `[T, H, W, C]`; conv kernels are
//! `[kt, kh, kw, Cin, Cout]`. Convolutions are lowered to im2col plus a
//! single-threaded sgemm, chunked along output timesteps to bound the
//! scratch-column buffer.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

/// Extents of a conv3d problem, resolved from input/kernel shapes.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_t: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub k_t: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub c_out: usize,
    pub stride: [usize; 3],
    pub pad_before: [usize; 3],
    pub out_t: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<ConvGeom> {
        if input_shape.len() != 4 {
            return Err(Error::shape("conv3d", format!("input must be rank 4, got {input_shape:?}")));
        }
        if kernel_shape.len() != 5 {
            return Err(Error::shape("conv3d", format!("kernel must be rank 5, got {kernel_shape:?}")));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::shape("conv3d", format!("stride components must be >= 1, got {stride:?}")));
        }
        let (in_t, in_h, in_w, c_in) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (k_t, k_h, k_w, kc_in, c_out) =
            (kernel_shape[0], kernel_shape[1], kernel_shape[2], kernel_shape[3], kernel_shape[4]);
        if kc_in != c_in {
            return Err(Error::shape(
                "conv3d",
                format!("input channels {c_in} != kernel input channels {kc_in}"),
            ));
        }
        let dims = [in_t, in_h, in_w];
        let ks = [k_t, k_h, k_w];
        let mut out = [0usize; 3];
        let mut pad_before = [0usize; 3];
        for i in 0..3 {
            match padding {
                Padding::Valid => {
                    if ks[i] > dims[i] {
                        return Err(Error::shape(
                            "conv3d",
                            format!("kernel extent {} exceeds input extent {} (valid padding)", ks[i], dims[i]),
                        ));
                    }
                    out[i] = (dims[i] - ks[i]) / stride[i] + 1;
                }
                Padding::Same => {
                    out[i] = dims[i].div_ceil(stride[i]);
                    let needed = (out[i] - 1) * stride[i] + ks[i];
                    let total = needed.saturating_sub(dims[i]);
                    pad_before[i] = total / 2;
                }
            }
        }
        Ok(ConvGeom {
            in_t,
            in_h,
            in_w,
            c_in,
            k_t,
            k_h,
            k_w,
            c_out,
            stride,
            pad_before,
            out_t: out[0],
            out_h: out[1],
            out_w: out[2],
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.out_t, self.out_h, self.out_w, self.c_out]
    }

    fn col_width(&self) -> usize {
        self.k_t * self.k_h * self.k_w * self.c_in
    }
}

/// C := A[m,k] * B[k,n] + beta*C, row-major, single-threaded.
fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C := A^T[k,m]^T... A is [k, m] interpreted column-wise: C[m,n] = sum_k A[k,m]*B[k,n].
fn sgemm_at_b(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C := A[m,k] * B^T where B is [n, k]: C[m,n] = sum_k A[m,k]*B[n,k].
fn sgemm_a_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fill the im2col rows for one output timestep `ot`.
///
/// Row layout matches the kernel flattening `[kt, kh, kw, Cin]`; positions
/// outside the padded input contribute zeros.
fn im2col_slice(geom: &ConvGeom, input: &[f32], ot: usize, col: &mut [f32]) {
    let cw = geom.col_width();
    let row_stride_w = geom.c_in;
    col.fill(0.0);
    for oh in 0..geom.out_h {
        for ow in 0..geom.out_w {
            let row = (oh * geom.out_w + ow) * cw;
            for kt in 0..geom.k_t {
                let it = (ot * geom.stride[0] + kt) as isize - geom.pad_before[0] as isize;
                if it < 0 || it >= geom.in_t as isize {
                    continue;
                }
                for kh in 0..geom.k_h {
                    let ih = (oh * geom.stride[1] + kh) as isize - geom.pad_before[1] as isize;
                    if ih < 0 || ih >= geom.in_h as isize {
                        continue;
                    }
                    for kw in 0..geom.k_w {
                        let iw = (ow * geom.stride[2] + kw) as isize - geom.pad_before[2] as isize;
                        if iw < 0 || iw >= geom.in_w as isize {
                            continue;
                        }
                        let src = ((it as usize * geom.in_h + ih as usize) * geom.in_w
                            + iw as usize)
                            * geom.c_in;
                        let dst = row + ((kt * geom.k_h + kh) * geom.k_w + kw) * row_stride_w;
                        col[dst..dst + geom.c_in].copy_from_slice(&input[src..src + geom.c_in]);
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-gradient slice for output timestep `ot` back into
/// the input gradient (the adjoint of [`im2col_slice`]).
fn col2im_add(geom: &ConvGeom, dcol: &[f32], ot: usize, dinput: &mut [f32]) {
    let cw = geom.col_width();
    for oh in 0..geom.out_h {
        for ow in 0..geom.out_w {
            let row = (oh * geom.out_w + ow) * cw;
            for kt in 0..geom.k_t {
                let it = (ot * geom.stride[0] + kt) as isize - geom.pad_before[0] as isize;
                if it < 0 || it >= geom.in_t as isize {
                    continue;
                }
                for kh in 0..geom.k_h {
                    let ih = (oh * geom.stride[1] + kh) as isize - geom.pad_before[1] as isize;
                    if ih < 0 || ih >= geom.in_h as isize {
                        continue;
                    }
                    for kw in 0..geom.k_w {
                        let iw = (ow * geom.stride[2] + kw) as isize - geom.pad_before[2] as isize;
                        if iw < 0 || iw >= geom.in_w as isize {
                            continue;
                        }
                        let dst = ((it as usize * geom.in_h + ih as usize) * geom.in_w
                            + iw as usize)
                            * geom.c_in;
                        let src = row + ((kt * geom.k_h + kh) * geom.k_w + kw) * geom.c_in;
                        for c in 0..geom.c_in {
                            dinput[dst + c] += dcol[src + c];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward(geom: &ConvGeom, input: &[f32], kernel: &[f32]) -> Vec<f32> {
    let positions_per_t = geom.out_h * geom.out_w;
    let cw = geom.col_width();
    let mut out = vec![0.0f32; geom.out_t * positions_per_t * geom.c_out];
    // 1x1x1 stride-1 unpadded kernels reduce to a plain matmul over channels.
    if cw == geom.c_in
        && geom.stride == [1, 1, 1]
        && geom.out_t == geom.in_t
        && geom.out_h == geom.in_h
        && geom.out_w == geom.in_w
    {
        sgemm(geom.out_t * positions_per_t, geom.c_in, geom.c_out, input, kernel, 0.0, &mut out);
        return out;
    }
    let mut col = vec![0.0f32; positions_per_t * cw];
    for ot in 0..geom.out_t {
        im2col_slice(geom, input, ot, &mut col);
        let dst = &mut out[ot * positions_per_t * geom.c_out..(ot + 1) * positions_per_t * geom.c_out];
        sgemm(positions_per_t, cw, geom.c_out, &col, kernel, 0.0, dst);
    }
    out
}

/// Gradients of conv3d. Either output may be requested independently.
pub fn conv3d_backward(
    geom: &ConvGeom,
    input: &[f32],
    kernel: &[f32],
    dout: &[f32],
    need_dinput: bool,
    need_dkernel: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let positions_per_t = geom.out_h * geom.out_w;
    let cw = geom.col_width();
    let identity_case = cw == geom.c_in
        && geom.stride == [1, 1, 1]
        && geom.out_t == geom.in_t
        && geom.out_h == geom.in_h
        && geom.out_w == geom.in_w;

    let mut dinput = need_dinput.then(|| vec![0.0f32; geom.in_t * geom.in_h * geom.in_w * geom.c_in]);
    let mut dkernel = need_dkernel.then(|| vec![0.0f32; cw * geom.c_out]);

    if identity_case {
        let rows = geom.out_t * positions_per_t;
        if let Some(di) = dinput.as_mut() {
            sgemm_a_bt(rows, geom.c_out, geom.c_in, dout, kernel, 0.0, di);
        }
        if let Some(dk) = dkernel.as_mut() {
            sgemm_at_b(geom.c_in, rows, geom.c_out, input, dout, 0.0, dk);
        }
        return (dinput, dkernel);
    }

    let mut col = vec![0.0f32; positions_per_t * cw];
    let mut dcol = vec![0.0f32; positions_per_t * cw];
    for ot in 0..geom.out_t {
        let dslice = &dout[ot * positions_per_t * geom.c_out..(ot + 1) * positions_per_t * geom.c_out];
        if dkernel.is_some() || dinput.is_some() {
            if dkernel.is_some() {
                im2col_slice(geom, input, ot, &mut col);
            }
            if let Some(dk) = dkernel.as_mut() {
                // accumulate: dK += col^T * dOut
                sgemm_at_b(cw, positions_per_t, geom.c_out, &col, dslice, 1.0, dk);
            }
            if let Some(di) = dinput.as_mut() {
                sgemm_a_bt(positions_per_t, geom.c_out, cw, dslice, kernel, 0.0, &mut dcol);
                col2im_add(geom, &dcol, ot, di);
            }
        }
    }
    (dinput, dkernel)
}

/// out[r, :] = input[r, :] * W[Din, Dout] + bias, rows = leading extents.
pub fn affine_forward(rows: usize, d_in: usize, d_out: usize, input: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * d_out];
    for r in 0..rows {
        out[r * d_out..(r + 1) * d_out].copy_from_slice(bias);
    }
    sgemm(rows, d_in, d_out, input, weight, 1.0, &mut out);
    out
}

pub fn affine_backward(
    rows: usize,
    d_in: usize,
    d_out: usize,
    input: &[f32],
    weight: &[f32],
    dout: &[f32],
    need_dinput: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let dinput = need_dinput.then(|| {
        let mut di = vec![0.0f32; rows * d_in];
        sgemm_a_bt(rows, d_out, d_in, dout, weight, 0.0, &mut di);
        di
    });
    let mut dweight = vec![0.0f32; d_in * d_out];
    sgemm_at_b(d_in, rows, d_out, input, dout, 0.0, &mut dweight);
    let mut dbias = vec![0.0f32; d_out];
    for r in 0..rows {
        for j in 0..d_out {
            dbias[j] += dout[r * d_out + j];
        }
    }
    (dinput, dweight, dbias)
}

/// f64 reference conv3d by direct summation (used by the finite-difference
/// replay; independent of the im2col/gemm path above).
pub(crate) fn conv3d_forward_f64(geom: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; geom.out_t * geom.out_h * geom.out_w * geom.c_out];
    for ot in 0..geom.out_t {
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let obase = ((ot * geom.out_h + oh) * geom.out_w + ow) * geom.c_out;
                for kt in 0..geom.k_t {
                    let it = (ot * geom.stride[0] + kt) as isize - geom.pad_before[0] as isize;
                    if it < 0 || it >= geom.in_t as isize {
                        continue;
                    }
                    for kh in 0..geom.k_h {
                        let ih = (oh * geom.stride[1] + kh) as isize - geom.pad_before[1] as isize;
                        if ih < 0 || ih >= geom.in_h as isize {
                            continue;
                        }
                        for kw in 0..geom.k_w {
                            let iw = (ow * geom.stride[2] + kw) as isize - geom.pad_before[2] as isize;
                            if iw < 0 || iw >= geom.in_w as isize {
                                continue;
                            }
                            let ibase = ((it as usize * geom.in_h + ih as usize) * geom.in_w
                                + iw as usize)
                                * geom.c_in;
                            let kbase = ((kt * geom.k_h + kh) * geom.k_w + kw) * geom.c_in;
                            for ci in 0..geom.c_in {
                                let iv = input[ibase + ci];
                                let krow = (kbase + ci) * geom.c_out;
                                for co in 0..geom.c_out {
                                    out[obase + co] += iv * kernel[krow + co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn affine_forward_f64(
    rows: usize,
    d_in: usize,
    d_out: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * d_out];
    for r in 0..rows {
        for j in 0..d_out {
            let mut acc = bias[j];
            for i in 0..d_in {
                acc += input[r * d_in + i] * weight[i * d_out + j];
            }
            out[r * d_out + j] = acc;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct six-nested-loop conv3d used as the independent oracle.
    fn conv3d_oracle(geom: &ConvGeom, input: &[f32], kernel: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f64; geom.out_t * geom.out_h * geom.out_w * geom.c_out];
        for ot in 0..geom.out_t {
            for oh in 0..geom.out_h {
                for ow in 0..geom.out_w {
                    for co in 0..geom.c_out {
                        let mut acc = 0.0f64;
                        for kt in 0..geom.k_t {
                            for kh in 0..geom.k_h {
                                for kw in 0..geom.k_w {
                                    let it = (ot * geom.stride[0] + kt) as isize - geom.pad_before[0] as isize;
                                    let ih = (oh * geom.stride[1] + kh) as isize - geom.pad_before[1] as isize;
                                    let iw = (ow * geom.stride[2] + kw) as isize - geom.pad_before[2] as isize;
                                    if it < 0 || ih < 0 || iw < 0 {
                                        continue;
                                    }
                                    let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                    if it >= geom.in_t || ih >= geom.in_h || iw >= geom.in_w {
                                        continue;
                                    }
                                    for ci in 0..geom.c_in {
                                        let iv = input[((it * geom.in_h + ih) * geom.in_w + iw) * geom.c_in + ci];
                                        let kv = kernel[(((kt * geom.k_h + kh) * geom.k_w + kw) * geom.c_in + ci)
                                            * geom.c_out
                                            + co];
                                        acc += iv as f64 * kv as f64;
                                    }
                                }
                            }
                        }
                        out[((ot * geom.out_h + oh) * geom.out_w + ow) * geom.c_out + co] = acc;
                    }
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = Rng::new(991);
        for (stride, padding) in [
            ([1, 1, 1], Padding::Valid),
            ([1, 2, 2], Padding::Same),
            ([2, 2, 2], Padding::Same),
        ] {
            let input: Vec<f32> = (0..3 * 5 * 5 * 4).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let kernel: Vec<f32> = (0..3 * 3 * 3 * 4 * 2).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
            let geom = ConvGeom::resolve(&[3, 5, 5, 4], &[3, 3, 3, 4, 2], stride, padding).unwrap();
            let fast = conv3d_forward(&geom, &input, &kernel);
            let slow = conv3d_oracle(&geom, &input, &kernel);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-5, "{a} vs {b} ({stride:?} {padding:?})");
            }
        }
    }

    #[test]
    fn conv_all_ones_counts_kernel_volume() {
        let geom = ConvGeom::resolve(&[4, 4, 4, 1], &[3, 3, 3, 1, 1], [1, 1, 1], Padding::Valid).unwrap();
        let out = conv3d_forward(&geom, &vec![1.0; 64], &vec![1.0; 27]);
        assert_eq!(out.len(), 8);
        for v in out {
            assert_eq!(v, 27.0);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let err = ConvGeom::resolve(&[3, 5, 5, 4], &[3, 3, 3, 3, 2], [1, 1, 1], Padding::Valid);
        assert!(err.is_err());
    }

    #[test]
    fn conv_rejects_oversized_kernel_with_valid_padding() {
        let err = ConvGeom::resolve(&[2, 5, 5, 1], &[3, 3, 3, 1, 1], [1, 1, 1], Padding::Valid);
        assert!(err.is_err());
    }

    #[test]
    fn affine_matches_dot_product_oracle() {
        let mut rng = Rng::new(55);
        let input: Vec<f32> = (0..5 * 8).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let weight: Vec<f32> = (0..8 * 3).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let bias: Vec<f32> = (0..3).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let out = affine_forward(5, 8, 3, &input, &weight, &bias);
        for r in 0..5 {
            for j in 0..3 {
                let mut acc = bias[j] as f64;
                for i in 0..8 {
                    acc += input[r * 8 + i] as f64 * weight[i * 3 + j] as f64;
                }
                assert!((out[r * 3 + j] as f64 - acc).abs() <= 1e-6);
            }
        }
    }
}
