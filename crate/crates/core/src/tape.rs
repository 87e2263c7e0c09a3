//! Wengert-tape reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value plus the references needed to run the backward rule.
//! [`Tape::backward`] replays the nodes in reverse recording order and
//! accumulates gradients; each `requires_grad` leaf ends up holding
//! dLoss/dLeaf exactly once per call. Tapes are single-owner: one training
//! step builds one tape and drops it.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Precomputed bilinear taps for one RoI pooling call: for every spatial
/// bin, the (h*W + w, weight) pairs it averages, weights already divided
/// by the per-bin sample count.
#[derive(Debug, Clone)]
struct RoiSamples {
    bins: usize,
    taps: Vec<Vec<(usize, f32)>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d { input: usize, kernel: usize, geom: ConvGeom },
    Affine { input: usize, weight: usize, bias: usize, rows: usize, d_in: usize, d_out: usize },
    Relu { input: usize },
    Sigmoid { input: usize },
    Mul { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// Broadcast-add a `[C]` vector at every `(t, h, w)` position.
    AddChannel { map: usize, vec: usize },
    TileConcat { vec: usize, map: usize },
    GlobalAvgPool { input: usize },
    RoiPoolTemporal { input: usize, samples: RoiSamples },
    Reshape { input: usize },
    /// Concatenate two rank-2 tensors along rows.
    ConcatRows { a: usize, b: usize, rows_a: usize },
    Scale { input: usize, factor: f32 },
    /// Softmax over every element of the tensor, jointly.
    SoftmaxAll { input: usize },
    /// Multiply a `[T,H,W,1]` weight map into a `[T,H,W,C]` map.
    BroadcastChannelMul { weights: usize, map: usize },
    Sum { input: usize },
    /// Stack rank-1 tensors of equal length into a rank-2 tensor.
    StackRows { parts: Vec<usize> },
    /// Mean binary cross-entropy on logits; labels are not differentiated.
    BceWithLogits { logits: usize, labels: usize },
}

pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), requires: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Record a leaf. `requires_grad` controls whether backward populates
    /// its gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if populated.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ---- forward ops -------------------------------------------------

    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: [usize; 3], padding: Padding) -> Result<Var> {
        let geom = ConvGeom::resolve(
            self.values[input.0].shape(),
            self.values[kernel.0].shape(),
            stride,
            padding,
        )?;
        let out = kernels::conv3d_forward(&geom, self.values[input.0].data(), self.values[kernel.0].data());
        let req = self.req(&[input, kernel]);
        let t = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(t, Op::Conv3d { input: input.0, kernel: kernel.0, geom }, req))
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.values[input.0].shape().to_vec();
        let wshape = self.values[weight.0].shape();
        let bshape = self.values[bias.0].shape();
        if wshape.len() != 2 {
            return Err(Error::shape("affine", format!("weight must be rank 2, got {wshape:?}")));
        }
        let (d_in, d_out) = (wshape[0], wshape[1]);
        if *ishape.last().unwrap() != d_in {
            return Err(Error::shape(
                "affine",
                format!("input last extent {} != weight input extent {}", ishape.last().unwrap(), d_in),
            ));
        }
        if bshape != [d_out] {
            return Err(Error::shape("affine", format!("bias shape {bshape:?} != [{d_out}]")));
        }
        let rows = self.values[input.0].numel() / d_in;
        let out = kernels::affine_forward(
            rows,
            d_in,
            d_out,
            self.values[input.0].data(),
            self.values[weight.0].data(),
            self.values[bias.0].data(),
        );
        let mut oshape = ishape;
        *oshape.last_mut().unwrap() = d_out;
        let req = self.req(&[input, weight, bias]);
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::Affine { input: input.0, weight: weight.0, bias: bias.0, rows, d_in, d_out }, req))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<f32> = self.values[input.0].data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.values[input.0].shape().to_vec(), out).unwrap();
        let req = self.requires[input.0];
        self.push(t, Op::Relu { input: input.0 }, req)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out: Vec<f32> = self.values[input.0].data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let t = Tensor::new(self.values[input.0].shape().to_vec(), out).unwrap();
        let req = self.requires[input.0];
        self.push(t, Op::Sigmoid { input: input.0 }, req)
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                "elementwise_mul",
                format!("{:?} vs {:?}", self.values[a.0].shape(), self.values[b.0].shape()),
            ));
        }
        let out: Vec<f32> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), out)?;
        let req = self.req(&[a, b]);
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.values[a.0].shape(), self.values[b.0].shape()),
            ));
        }
        let out: Vec<f32> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), out)?;
        let req = self.req(&[a, b]);
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, req))
    }

    /// map[t,h,w,:] + vec for a rank-4 map and rank-1 vec.
    pub fn add_channel(&mut self, map: Var, vec: Var) -> Result<Var> {
        let mshape = self.values[map.0].shape().to_vec();
        let vshape = self.values[vec.0].shape();
        if mshape.len() != 4 || vshape.len() != 1 || mshape[3] != vshape[0] {
            return Err(Error::shape(
                "add_channel",
                format!("map {mshape:?} vs vec {vshape:?}"),
            ));
        }
        let c = mshape[3];
        let vdata = self.values[vec.0].data();
        let out: Vec<f32> = self.values[map.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vdata[i % c])
            .collect();
        let t = Tensor::new(mshape, out)?;
        let req = self.req(&[map, vec]);
        Ok(self.push(t, Op::AddChannel { map: map.0, vec: vec.0 }, req))
    }

    /// Tile a `[N]` vector over every position of a `[T,H,W,M]` map and
    /// concatenate along channels: output `[T,H,W,N+M]` with the vector in
    /// channels `0..N`.
    pub fn tile_and_concat(&mut self, vec: Var, map: Var) -> Result<Var> {
        let vshape = self.values[vec.0].shape();
        let mshape = self.values[map.0].shape().to_vec();
        if vshape.len() != 1 {
            return Err(Error::shape("tile_and_concat", format!("vec must be rank 1, got {vshape:?}")));
        }
        if mshape.len() != 4 {
            return Err(Error::shape("tile_and_concat", format!("map must be rank 4, got {mshape:?}")));
        }
        let n = vshape[0];
        let m = mshape[3];
        let positions = mshape[0] * mshape[1] * mshape[2];
        let vdata = self.values[vec.0].data();
        let mdata = self.values[map.0].data();
        let mut out = Vec::with_capacity(positions * (n + m));
        for p in 0..positions {
            out.extend_from_slice(vdata);
            out.extend_from_slice(&mdata[p * m..(p + 1) * m]);
        }
        let t = Tensor::new(vec![mshape[0], mshape[1], mshape[2], n + m], out)?;
        let req = self.req(&[vec, map]);
        Ok(self.push(t, Op::TileConcat { vec: vec.0, map: map.0 }, req))
    }

    /// Per-channel mean over all T*H*W positions of a rank-4 map.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.values[input.0].shape();
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input must be rank 4, got {shape:?}")));
        }
        let c = shape[3];
        let positions = shape[0] * shape[1] * shape[2];
        let data = self.values[input.0].data();
        let mut acc = vec![0.0f64; c];
        for p in 0..positions {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += data[p * c + j] as f64;
            }
        }
        let out: Vec<f32> = acc.iter().map(|&v| (v / positions as f64) as f32).collect();
        let t = Tensor::new(vec![c], out)?;
        let req = self.requires[input.0];
        Ok(self.push(t, Op::GlobalAvgPool { input: input.0 }, req))
    }

    /// RoI pooling extended in time: bilinear-sampled average pooling of the
    /// box region into `bins x bins` spatial cells, averaged over the
    /// temporal axis to a single timestep. Output `[1, bins, bins, C]`.
    ///
    /// `box_yx` is (y1, x1, y2, x2) normalized to [0,1]; coordinates are
    /// clamped and a zero-area result is rejected naming `actor_id`.
    pub fn roi_pool_temporal(
        &mut self,
        input: Var,
        box_yx: [f32; 4],
        actor_id: u32,
        bins: usize,
    ) -> Result<Var> {
        let shape = self.values[input.0].shape();
        if shape.len() != 4 {
            return Err(Error::shape("roi_pool_temporal", format!("input must be rank 4, got {shape:?}")));
        }
        if bins == 0 {
            return Err(Error::Config("roi_pool_temporal: bins must be >= 1".into()));
        }
        let (t_ext, h_ext, w_ext, c) = (shape[0], shape[1], shape[2], shape[3]);
        let y1 = box_yx[0].clamp(0.0, 1.0);
        let x1 = box_yx[1].clamp(0.0, 1.0);
        let y2 = box_yx[2].clamp(0.0, 1.0);
        let x2 = box_yx[3].clamp(0.0, 1.0);
        if y2 - y1 <= f32::EPSILON || x2 - x1 <= f32::EPSILON {
            return Err(Error::DegenerateBox { actor_id });
        }

        let samples = roi_samples(y1 as f64, x1 as f64, y2 as f64, x2 as f64, h_ext, w_ext, bins);
        let data = self.values[input.0].data();
        let mut out = vec![0.0f32; bins * bins * c];
        let inv_t = 1.0 / t_ext as f64;
        for (bin, taps) in samples.taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for &(pos, w) in taps {
                    for t in 0..t_ext {
                        acc += w as f64 * data[(t * h_ext * w_ext + pos) * c + ch] as f64;
                    }
                }
                out[bin * c + ch] = (acc * inv_t) as f32;
            }
        }
        let t = Tensor::new(vec![1, bins, bins, c], out)?;
        let req = self.requires[input.0];
        Ok(self.push(t, Op::RoiPoolTemporal { input: input.0, samples }, req))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.values[input.0].numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.values[input.0].shape(), shape),
            ));
        }
        let t = Tensor::new(shape, self.values[input.0].data().to_vec())?;
        let req = self.requires[input.0];
        Ok(self.push(t, Op::Reshape { input: input.0 }, req))
    }

    /// Concatenate two rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.values[a.0].shape().to_vec();
        let bshape = self.values[b.0].shape().to_vec();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[1] {
            return Err(Error::shape("concat_rows", format!("{ashape:?} vs {bshape:?}")));
        }
        let mut out = self.values[a.0].data().to_vec();
        out.extend_from_slice(self.values[b.0].data());
        let t = Tensor::new(vec![ashape[0] + bshape[0], ashape[1]], out)?;
        let req = self.req(&[a, b]);
        Ok(self.push(t, Op::ConcatRows { a: a.0, b: b.0, rows_a: ashape[0] }, req))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let out: Vec<f32> = self.values[input.0].data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(self.values[input.0].shape().to_vec(), out).unwrap();
        let req = self.requires[input.0];
        self.push(t, Op::Scale { input: input.0, factor }, req)
    }

    /// Softmax jointly over every element (used for position attention).
    pub fn softmax_all(&mut self, input: Var) -> Var {
        let data = self.values[input.0].data();
        let max = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = data.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let out: Vec<f32> = exps.iter().map(|&e| (e / denom) as f32).collect();
        let t = Tensor::new(self.values[input.0].shape().to_vec(), out).unwrap();
        let req = self.requires[input.0];
        self.push(t, Op::SoftmaxAll { input: input.0 }, req)
    }

    /// weights `[T,H,W,1]` scaled into map `[T,H,W,C]` per position.
    pub fn broadcast_channel_mul(&mut self, weights: Var, map: Var) -> Result<Var> {
        let wshape = self.values[weights.0].shape().to_vec();
        let mshape = self.values[map.0].shape().to_vec();
        if wshape.len() != 4 || mshape.len() != 4 || wshape[3] != 1 || wshape[..3] != mshape[..3] {
            return Err(Error::shape(
                "broadcast_channel_mul",
                format!("weights {wshape:?} vs map {mshape:?}"),
            ));
        }
        let c = mshape[3];
        let wdata = self.values[weights.0].data();
        let out: Vec<f32> = self.values[map.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * wdata[i / c])
            .collect();
        let t = Tensor::new(mshape, out)?;
        let req = self.req(&[weights, map]);
        Ok(self.push(t, Op::BroadcastChannelMul { weights: weights.0, map: map.0 }, req))
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, input: Var) -> Var {
        let acc: f64 = self.values[input.0].data().iter().map(|&v| v as f64).sum();
        let t = Tensor::scalar(acc as f32);
        let req = self.requires[input.0];
        self.push(t, Op::Sum { input: input.0 }, req)
    }

    /// Stack rank-1 vectors of equal length into a `[rows, len]` tensor.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("stack_rows", "no rows to stack".to_string()));
        }
        let len = self.values[parts[0].0].numel();
        let mut out = Vec::with_capacity(parts.len() * len);
        for &p in parts {
            let v = &self.values[p.0];
            if v.rank() != 1 || v.numel() != len {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row shape {:?} incompatible with length {len}", v.shape()),
                ));
            }
            out.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![parts.len(), len], out)?;
        let req = self.req(parts);
        Ok(self.push(t, Op::StackRows { parts: parts.iter().map(|v| v.0).collect() }, req))
    }

    /// Numerically stable mean binary cross-entropy over all elements of
    /// `logits` against multi-hot `labels` (entries must be exactly 0 or 1).
    pub fn bce_with_logits(&mut self, logits: Var, labels: Var) -> Result<Var> {
        if self.values[logits.0].shape() != self.values[labels.0].shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.values[logits.0].shape(), self.values[labels.0].shape()),
            ));
        }
        for &y in self.values[labels.0].data() {
            if y != 0.0 && y != 1.0 {
                return Err(Error::Data(format!("bce_with_logits: label {y} outside {{0, 1}}")));
            }
        }
        let zs = self.values[logits.0].data();
        let ys = self.values[labels.0].data();
        let mut acc = 0.0f64;
        for (&z, &y) in zs.iter().zip(ys) {
            let z = z as f64;
            let y = y as f64;
            acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let t = Tensor::scalar((acc / zs.len() as f64) as f32);
        let req = self.req(&[logits, labels]);
        Ok(self.push(t, Op::BceWithLogits { logits: logits.0, labels: labels.0 }, req))
    }

    // ---- backward ------------------------------------------------------

    /// Populate gradients of `loss` w.r.t. every `requires_grad` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape()),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.dispatch_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn dispatch_backward(&self, i: usize, g: &[f32], grads: &mut Vec<Option<Vec<f32>>>) {
        let acc = |grads: &mut Vec<Option<Vec<f32>>>, idx: usize, contrib: Vec<f32>| {
            match &mut grads[idx] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(&contrib) {
                        *b += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, geom } => {
                let (di, dk) = kernels::conv3d_backward(
                    geom,
                    self.values[*input].data(),
                    self.values[*kernel].data(),
                    g,
                    self.requires[*input],
                    self.requires[*kernel],
                );
                if let Some(di) = di {
                    acc(grads, *input, di);
                }
                if let Some(dk) = dk {
                    acc(grads, *kernel, dk);
                }
            }
            Op::Affine { input, weight, bias, rows, d_in, d_out } => {
                let (di, dw, db) = kernels::affine_backward(
                    *rows,
                    *d_in,
                    *d_out,
                    self.values[*input].data(),
                    self.values[*weight].data(),
                    g,
                    self.requires[*input],
                );
                if let Some(di) = di {
                    acc(grads, *input, di);
                }
                if self.requires[*weight] {
                    acc(grads, *weight, dw);
                }
                if self.requires[*bias] {
                    acc(grads, *bias, db);
                }
            }
            Op::Relu { input } => {
                if self.requires[*input] {
                    let x = self.values[*input].data();
                    let di: Vec<f32> = g.iter().zip(x).map(|(&go, &xi)| if xi > 0.0 { go } else { 0.0 }).collect();
                    acc(grads, *input, di);
                }
            }
            Op::Sigmoid { input } => {
                if self.requires[*input] {
                    let s = self.values[i].data();
                    let di: Vec<f32> = g.iter().zip(s).map(|(&go, &si)| go * si * (1.0 - si)).collect();
                    acc(grads, *input, di);
                }
            }
            Op::Mul { a, b } => {
                if self.requires[*a] {
                    let bd = self.values[*b].data();
                    acc(grads, *a, g.iter().zip(bd).map(|(&go, &bv)| go * bv).collect());
                }
                if self.requires[*b] {
                    let ad = self.values[*a].data();
                    acc(grads, *b, g.iter().zip(ad).map(|(&go, &av)| go * av).collect());
                }
            }
            Op::Add { a, b } => {
                if self.requires[*a] {
                    acc(grads, *a, g.to_vec());
                }
                if self.requires[*b] {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::AddChannel { map, vec } => {
                if self.requires[*map] {
                    acc(grads, *map, g.to_vec());
                }
                if self.requires[*vec] {
                    let c = self.values[*vec].numel();
                    let mut dv = vec![0.0f32; c];
                    for (j, &go) in g.iter().enumerate() {
                        dv[j % c] += go;
                    }
                    acc(grads, *vec, dv);
                }
            }
            Op::TileConcat { vec, map } => {
                let n = self.values[*vec].numel();
                let m = self.values[*map].shape()[3];
                let positions = g.len() / (n + m);
                if self.requires[*vec] {
                    let mut dv = vec![0.0f32; n];
                    for p in 0..positions {
                        for j in 0..n {
                            dv[j] += g[p * (n + m) + j];
                        }
                    }
                    acc(grads, *vec, dv);
                }
                if self.requires[*map] {
                    let mut dm = vec![0.0f32; positions * m];
                    for p in 0..positions {
                        dm[p * m..(p + 1) * m].copy_from_slice(&g[p * (n + m) + n..(p + 1) * (n + m)]);
                    }
                    acc(grads, *map, dm);
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.requires[*input] {
                    let shape = self.values[*input].shape();
                    let positions = shape[0] * shape[1] * shape[2];
                    let c = shape[3];
                    let inv = 1.0 / positions as f32;
                    let mut di = vec![0.0f32; positions * c];
                    for p in 0..positions {
                        for j in 0..c {
                            di[p * c + j] = g[j] * inv;
                        }
                    }
                    acc(grads, *input, di);
                }
            }
            Op::RoiPoolTemporal { input, samples } => {
                if self.requires[*input] {
                    let shape = self.values[*input].shape();
                    let (t_ext, h_ext, w_ext, c) = (shape[0], shape[1], shape[2], shape[3]);
                    let inv_t = 1.0 / t_ext as f32;
                    let mut di = vec![0.0f32; t_ext * h_ext * w_ext * c];
                    for (bin, taps) in samples.taps.iter().enumerate() {
                        debug_assert!(bin < samples.bins * samples.bins);
                        for ch in 0..c {
                            let go = g[bin * c + ch] * inv_t;
                            for &(pos, w) in taps {
                                for t in 0..t_ext {
                                    di[(t * h_ext * w_ext + pos) * c + ch] += go * w;
                                }
                            }
                        }
                    }
                    acc(grads, *input, di);
                }
            }
            Op::Reshape { input } => {
                if self.requires[*input] {
                    acc(grads, *input, g.to_vec());
                }
            }
            Op::ConcatRows { a, b, rows_a } => {
                let cols = self.values[*a].shape()[1];
                if self.requires[*a] {
                    acc(grads, *a, g[..rows_a * cols].to_vec());
                }
                if self.requires[*b] {
                    acc(grads, *b, g[rows_a * cols..].to_vec());
                }
            }
            Op::Scale { input, factor } => {
                if self.requires[*input] {
                    acc(grads, *input, g.iter().map(|&go| go * factor).collect());
                }
            }
            Op::SoftmaxAll { input } => {
                if self.requires[*input] {
                    let s = self.values[i].data();
                    let dot: f64 = g.iter().zip(s).map(|(&go, &si)| go as f64 * si as f64).sum();
                    let di: Vec<f32> = g
                        .iter()
                        .zip(s)
                        .map(|(&go, &si)| si * (go - dot as f32))
                        .collect();
                    acc(grads, *input, di);
                }
            }
            Op::BroadcastChannelMul { weights, map } => {
                let c = self.values[*map].shape()[3];
                if self.requires[*weights] {
                    let md = self.values[*map].data();
                    let mut dw = vec![0.0f32; self.values[*weights].numel()];
                    for (j, (&go, &mv)) in g.iter().zip(md).enumerate() {
                        dw[j / c] += go * mv;
                    }
                    acc(grads, *weights, dw);
                }
                if self.requires[*map] {
                    let wd = self.values[*weights].data();
                    let dm: Vec<f32> = g.iter().enumerate().map(|(j, &go)| go * wd[j / c]).collect();
                    acc(grads, *map, dm);
                }
            }
            Op::Sum { input } => {
                if self.requires[*input] {
                    acc(grads, *input, vec![g[0]; self.values[*input].numel()]);
                }
            }
            Op::StackRows { parts } => {
                let len = g.len() / parts.len();
                for (r, &p) in parts.iter().enumerate() {
                    if self.requires[p] {
                        acc(grads, p, g[r * len..(r + 1) * len].to_vec());
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if self.requires[*logits] {
                    let zs = self.values[*logits].data();
                    let ys = self.values[*labels].data();
                    let inv_n = 1.0 / zs.len() as f32;
                    let di: Vec<f32> = zs
                        .iter()
                        .zip(ys)
                        .map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) * inv_n)
                        .collect();
                    acc(grads, *logits, di);
                }
            }
        }
    }
}

impl Tape {
    /// Re-execute the recorded graph up to `loss` in f64 with one leaf
    /// element perturbed by `delta`, returning the scalar loss value.
    ///
    /// This is the forward half of the finite-difference gradient oracle:
    /// it shares nothing with the f32 backward rules it is used to check,
    /// only the recorded operation list and leaf values.
    pub fn replay_f64(&self, loss: Var, leaf: Var, elem: usize, delta: f64) -> f64 {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(loss.0 + 1);
        for i in 0..=loss.0 {
            let v: Vec<f64> = match &self.ops[i] {
                Op::Leaf => {
                    let mut d: Vec<f64> = self.values[i].data().iter().map(|&x| x as f64).collect();
                    if i == leaf.0 {
                        d[elem] += delta;
                    }
                    d
                }
                Op::Conv3d { input, kernel, geom } => {
                    kernels::conv3d_forward_f64(geom, &vals[*input], &vals[*kernel])
                }
                Op::Affine { input, weight, bias, rows, d_in, d_out } => {
                    kernels::affine_forward_f64(*rows, *d_in, *d_out, &vals[*input], &vals[*weight], &vals[*bias])
                }
                Op::Relu { input } => vals[*input].iter().map(|&x| x.max(0.0)).collect(),
                Op::Sigmoid { input } => vals[*input].iter().map(|&x| sigmoid_f64(x)).collect(),
                Op::Mul { a, b } => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x * y).collect(),
                Op::Add { a, b } => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x + y).collect(),
                Op::AddChannel { map, vec } => {
                    let c = vals[*vec].len();
                    vals[*map].iter().enumerate().map(|(j, &x)| x + vals[*vec][j % c]).collect()
                }
                Op::TileConcat { vec, map } => {
                    let n = vals[*vec].len();
                    let m = self.values[*map].shape()[3];
                    let positions = vals[*map].len() / m;
                    let mut out = Vec::with_capacity(positions * (n + m));
                    for p in 0..positions {
                        out.extend_from_slice(&vals[*vec]);
                        out.extend_from_slice(&vals[*map][p * m..(p + 1) * m]);
                    }
                    out
                }
                Op::GlobalAvgPool { input } => {
                    let shape = self.values[*input].shape();
                    let positions = shape[0] * shape[1] * shape[2];
                    let c = shape[3];
                    let mut out = vec![0.0f64; c];
                    for p in 0..positions {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o += vals[*input][p * c + j];
                        }
                    }
                    out.iter_mut().for_each(|o| *o /= positions as f64);
                    out
                }
                Op::RoiPoolTemporal { input, samples } => {
                    let shape = self.values[*input].shape();
                    let (t_ext, h_ext, w_ext, c) = (shape[0], shape[1], shape[2], shape[3]);
                    let mut out = vec![0.0f64; samples.bins * samples.bins * c];
                    for (bin, taps) in samples.taps.iter().enumerate() {
                        for ch in 0..c {
                            let mut acc = 0.0f64;
                            for &(pos, wgt) in taps {
                                for t in 0..t_ext {
                                    acc += wgt as f64 * vals[*input][(t * h_ext * w_ext + pos) * c + ch];
                                }
                            }
                            out[bin * c + ch] = acc / t_ext as f64;
                        }
                    }
                    out
                }
                Op::Reshape { input } => vals[*input].clone(),
                Op::ConcatRows { a, b, .. } => {
                    let mut out = vals[*a].clone();
                    out.extend_from_slice(&vals[*b]);
                    out
                }
                Op::Scale { input, factor } => vals[*input].iter().map(|&x| x * *factor as f64).collect(),
                Op::SoftmaxAll { input } => {
                    let max = vals[*input].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = vals[*input].iter().map(|&x| (x - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    exps.iter().map(|&e| e / denom).collect()
                }
                Op::BroadcastChannelMul { weights, map } => {
                    let c = self.values[*map].shape()[3];
                    vals[*map].iter().enumerate().map(|(j, &x)| x * vals[*weights][j / c]).collect()
                }
                Op::Sum { input } => vec![vals[*input].iter().sum()],
                Op::StackRows { parts } => {
                    let mut out = Vec::new();
                    for &p in parts {
                        out.extend_from_slice(&vals[p]);
                    }
                    out
                }
                Op::BceWithLogits { logits, labels } => {
                    let mut acc = 0.0f64;
                    for (&z, &y) in vals[*logits].iter().zip(&vals[*labels]) {
                        acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                    }
                    vec![acc / vals[*logits].len() as f64]
                }
            };
            vals.push(v);
        }
        vals[loss.0][0]
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear sampling plan for an RoI: per spatial bin, taps into the
/// `H x W` grid. The per-axis sample count adapts to the bin size
/// (one sample per covered feature cell, at least one).
fn roi_samples(y1: f64, x1: f64, y2: f64, x2: f64, h: usize, w: usize, bins: usize) -> RoiSamples {
    let y1f = y1 * h as f64;
    let y2f = y2 * h as f64;
    let x1f = x1 * w as f64;
    let x2f = x2 * w as f64;
    let bin_h = (y2f - y1f) / bins as f64;
    let bin_w = (x2f - x1f) / bins as f64;
    let n_y = (bin_h.ceil() as usize).max(1);
    let n_x = (bin_w.ceil() as usize).max(1);
    let inv_count = 1.0 / (n_y * n_x) as f64;

    let axis_taps = |start: f64, bin: f64, idx: usize, n: usize, extent: usize| -> Vec<(usize, f64)> {
        let mut taps = Vec::with_capacity(2 * n);
        for k in 0..n {
            let p = start + (idx as f64 + (k as f64 + 0.5) / n as f64) * bin;
            let u = p - 0.5;
            let i0 = u.floor();
            let frac = u - i0;
            let lo = (i0 as isize).clamp(0, extent as isize - 1) as usize;
            let hi = (i0 as isize + 1).clamp(0, extent as isize - 1) as usize;
            taps.push((lo, 1.0 - frac));
            taps.push((hi, frac));
        }
        taps
    };

    let mut taps = Vec::with_capacity(bins * bins);
    for i in 0..bins {
        let ys = axis_taps(y1f, bin_h, i, n_y, h);
        for j in 0..bins {
            let xs = axis_taps(x1f, bin_w, j, n_x, w);
            let mut bin_taps: Vec<(usize, f32)> = Vec::with_capacity(ys.len() * xs.len());
            for &(yi, wy) in &ys {
                for &(xi, wx) in &xs {
                    let weight = wy * wx * inv_count;
                    if weight != 0.0 {
                        bin_taps.push((yi * w + xi, weight as f32));
                    }
                }
            }
            taps.push(bin_taps);
        }
    }
    RoiSamples { bins, taps }
}
