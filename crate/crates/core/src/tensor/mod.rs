//! Dense 64-bit tensors with reverse-mode automatic differentiation and
//! exact multiply-accumulate (MAC) accounting.
//!
//! A [`Tensor`] is a flat row-major buffer plus shape metadata; a 2D
//! `HW x C` view and a 3D `H x W x C` view are reinterpretations of the
//! same buffer. Computation is recorded on a [`Tape`](tape::Tape) which
//! replays backward rules in reverse topological order.

pub mod flops;
pub mod tape;

use std::io::Write;

use rand::Rng;

use crate::cursor::Cursor;
use crate::error::{fmt_shape, Error, Result};

/// Magic bytes of the binary tensor format.
pub const TENSOR_MAGIC: [u8; 4] = *b"EAGT";
/// Current version of the binary tensor format.
pub const TENSOR_FORMAT_VERSION: u32 = 1;

/// Dense n-dimensional array of 64-bit reals with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that the extents match the buffer and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {}",
                fmt_shape(&shape)
            )));
        }
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {} implies {} elements, buffer has {}",
                fmt_shape(&shape),
                numel,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite value {v} in tensor")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Marks the tensor as a gradient leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Entries drawn i.i.d. uniform from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Writes the binary form: magic "EAGT", version u32 LE, rank u32 LE,
    /// extents as u32 LE each, then the data as little-endian f64.
    pub fn write_into(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses the binary form from an offset-tracking cursor.
    pub fn read_from(cur: &mut Cursor<'_>) -> Result<Self> {
        let magic = cur.take(4, "tensor magic")?;
        if magic != TENSOR_MAGIC {
            return Err(cur.error_at(cur.pos() - 4, "bad tensor magic, expected \"EAGT\""));
        }
        let version = cur.read_u32("tensor version")?;
        if version != TENSOR_FORMAT_VERSION {
            return Err(cur.error_at(
                cur.pos() - 4,
                format!("unsupported tensor version {version}"),
            ));
        }
        let rank = cur.read_u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(cur.error_at(cur.pos() - 4, format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.read_u32("tensor extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(
                cur.take(8, "tensor data")?.try_into().unwrap(),
            ));
        }
        Tensor::new(shape, data)
    }

    /// Convenience wrapper: parse a tensor that occupies an entire buffer.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf);
        let t = Tensor::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(cur.error_here("trailing bytes after tensor payload"));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_into(&mut buf).expect("vec write cannot fail");
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_buffer() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.0, 42.0]).unwrap();
        let bytes = t.to_bytes();
        let back = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(back.shape, t.shape);
        let bits_a: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn serialization_rejects_bad_magic() {
        let t = Tensor::scalar(1.0);
        let mut bytes = t.to_bytes();
        bytes[0] = b'X';
        let err = Tensor::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn serialization_rejects_truncation() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = t.to_bytes();
        let err = Tensor::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }
}
