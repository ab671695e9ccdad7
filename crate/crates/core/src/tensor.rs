//! Dense row-major `f64` tensors and the `.tns` file format.
//!
//! A [`Tensor`] is a plain value: a shape and a flat buffer. Gradient
//! bookkeeping lives in [`crate::autodiff::Graph`], which wraps tensors in
//! nodes.
//!
//! The `.tns` layout is:
//!
//! ```text
//! b"TNS1\0\0\0\0" | u32 LE header length | JSON header | LE row-major payload
//! ```
//!
//! where the header is `{"dtype":"f32"|"f64","shape":[...]}`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TNS_MAGIC: &[u8; 8] = b"TNS1\0\0\0\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_tns(&self, path: &Path, dtype: DType) -> Result<()> {
        let bytes = self.to_tns_bytes(dtype);
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_tns(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_tns_bytes(&bytes)
    }

    pub fn to_tns_bytes(&self, dtype: DType) -> Vec<u8> {
        let header = serde_json::to_vec(&TnsHeader { dtype, shape: self.shape.clone() })
            .expect("header serialization is infallible");
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let mut out = Vec::with_capacity(12 + header.len() + width * self.data.len());
        out.extend_from_slice(TNS_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match dtype {
            DType::F32 => self
                .data
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => self
                .data
                .iter()
                .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn from_tns_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != TNS_MAGIC {
            return Err(Error::Format("missing TNS1 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12 + hlen;
        if bytes.len() < body {
            return Err(Error::Format("truncated tns header".into()));
        }
        let header: TnsHeader = serde_json::from_slice(&bytes[12..body])?;
        let n: usize = header.shape.iter().product();
        let payload = &bytes[body..];
        let data = match header.dtype {
            DType::F32 => {
                if payload.len() != 4 * n {
                    return Err(Error::Format("tns payload length mismatch".into()));
                }
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            DType::F64 => {
                if payload.len() != 8 * n {
                    return Err(Error::Format("tns payload length mismatch".into()));
                }
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
        };
        Tensor::new(&header.shape, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct TnsHeader {
    dtype: DType,
    shape: Vec<usize>,
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn tns_header_layout() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let b = t.to_tns_bytes(DType::F64);
        assert_eq!(&b[..8], TNS_MAGIC);
        let hlen = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[12..12 + hlen]).unwrap();
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["shape"], serde_json::json!([2]));
        assert_eq!(b.len(), 12 + hlen + 16);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(Tensor::from_tns_bytes(b"NOPE0000\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn tns_f64_round_trip_is_bit_exact(seed in any::<u64>(), a in 1usize..5, b in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&[a, b], 3.0, &mut rng);
            let back = Tensor::from_tns_bytes(&t.to_tns_bytes(DType::F64)).unwrap();
            prop_assert!(t.bit_eq(&back));
            let back32 = Tensor::from_tns_bytes(&t.to_tns_bytes(DType::F32)).unwrap();
            prop_assert!(t.max_abs_diff(&back32) < 1e-5 * 20.0);
        }
    }
}
