//! Dense row-major tensors and their on-disk form.
//!
//! Spatial features are channel-last: a BEV grid is `[H, W, C]`.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            );
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Element at a rank-3 `[row, col, channel]` index.
    pub fn at3(&self, r: usize, c: usize, ch: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        self.data[(r * self.shape[1] + c) * self.shape[2] + ch]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).expect("castable"))
                .collect(),
        }
    }

    /// Flat little-endian buffer behind a 16-byte header: rank as `u32`, then
    /// three `u32` extents (unused slots are zero). Rank is at most 3.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.rank() > 3 {
            return dim_err("serialize", format!("rank {} exceeds 3", self.rank()));
        }
        let mut out = Vec::with_capacity(16 + self.numel() * T::BYTES);
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for i in 0..3 {
            let e = self.shape.get(i).copied().unwrap_or(0);
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} too large")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "trailing bytes: expected {used}, got {}",
                bytes.len()
            )));
        }
        Ok(t)
    }

    /// Decodes one tensor from the front of `bytes`, returning bytes consumed.
    pub(crate) fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 16 {
            return Err(Error::Format("tensor header truncated".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        let rank = word(0) as usize;
        if rank > 3 {
            return Err(Error::Format(format!("rank {rank} exceeds 3")));
        }
        let shape: Vec<usize> = (0..rank).map(|i| word(i + 1) as usize).collect();
        let numel: usize = shape.iter().product();
        let end = 16 + numel * T::BYTES;
        if bytes.len() < end {
            return Err(Error::Format(format!(
                "tensor body truncated: need {end} bytes, have {}",
                bytes.len()
            )));
        }
        let data = bytes[16..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok((Tensor { shape, data }, end))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = t.to_bytes().unwrap();
        assert_eq!(b.len(), 16 + 8);
        assert_eq!(&b[0..4], &2u32.to_le_bytes());
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &0u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(Tensor::<f32>::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let t = Tensor::<f32>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let b = t.to_bytes().unwrap();
        assert!(Tensor::<f64>::from_bytes(&b).is_err());
    }

    #[test]
    fn rank_four_is_not_serializable() {
        let t = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        assert!(t.to_bytes().is_err());
    }
}
