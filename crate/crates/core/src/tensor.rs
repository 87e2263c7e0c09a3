//! Dense row-major f32 tensors and the ACAMT on-disk format.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Dense rank-N f32 tensor, row-major, with an optional gradient buffer.
///
/// Invariants: `data.len()` always equals the product of the extents, and
/// the gradient buffer, when present, has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// He-initialized tensor: normal with std sqrt(2 / fan_in).
    pub fn he_init(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..numel).map(|_| (rng.normal() * std) as f32).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo as f64, hi as f64) as f32).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("grad length {} != data length {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Write in ACAMT format (see module docs of [`crate::tensor`]):
    /// magic "ACAMT", version 0x01, dtype 0x00 (f32 LE), u32 rank,
    /// rank x u32 extents, then the raw little-endian f32 payload.
    pub fn write_acamt<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(b"ACAMT")?;
        w.write_all(&[0x01, 0x00])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_acamt<R: Read>(r: &mut R) -> Result<Self> {
        fn fmt_err(msg: &str) -> Error {
            Error::Format(format!("ACAMT: {msg}"))
        }
        let mut head = [0u8; 7];
        read_exact(r, &mut head).map_err(|_| fmt_err("truncated header"))?;
        if &head[0..5] != b"ACAMT" {
            return Err(fmt_err("bad magic bytes"));
        }
        if head[5] != 0x01 {
            return Err(fmt_err(&format!("unsupported version {:#04x}", head[5])));
        }
        if head[6] != 0x00 {
            return Err(fmt_err(&format!("unsupported dtype {:#04x}", head[6])));
        }
        let mut rank_buf = [0u8; 4];
        read_exact(r, &mut rank_buf).map_err(|_| fmt_err("truncated rank"))?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        if rank == 0 || rank > 8 {
            return Err(fmt_err(&format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut ext = [0u8; 4];
            read_exact(r, &mut ext).map_err(|_| fmt_err("truncated extents"))?;
            shape.push(u32::from_le_bytes(ext) as usize);
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(fmt_err("zero extent"));
        }
        let mut payload = vec![0u8; numel * 4];
        read_exact(r, &mut payload).map_err(|_| fmt_err("truncated payload"))?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe).unwrap_or(0) != 0 {
            return Err(fmt_err("trailing bytes after payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_acamt(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufReader::new(&mut f);
        Tensor::read_acamt(&mut buf)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<()> {
    r.read_exact(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn acamt_round_trip_bit_exact() {
        let mut rng = Rng::new(3);
        let t = Tensor::uniform(vec![2, 3, 4], -5.0, 5.0, &mut rng);
        let mut buf = Vec::new();
        t.write_acamt(&mut buf).unwrap();
        let back = Tensor::read_acamt(&mut &buf[..]).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn acamt_rejects_corruption() {
        let t = Tensor::full(vec![2, 2], 1.5);
        let mut buf = Vec::new();
        t.write_acamt(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(Tensor::read_acamt(&mut &bad_magic[..]).is_err());

        let mut bad_version = buf.clone();
        bad_version[5] = 0x02;
        assert!(Tensor::read_acamt(&mut &bad_version[..]).is_err());

        let truncated = &buf[..buf.len() - 3];
        assert!(Tensor::read_acamt(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(Tensor::read_acamt(&mut &trailing[..]).is_err());
    }
}
