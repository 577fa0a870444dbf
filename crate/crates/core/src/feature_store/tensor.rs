//! Named float tensor container (`.h2tt`), used for attention weights and
//! one-hot PAM exports.
//!
//! Layout: magic `H2TT`, version `u32`, tensor count `u32`, then an index of
//! `(name: u32 len + UTF-8, ndim: u32, dims: ndim × u32)` entries, then every
//! tensor's data as little-endian `f32` in index order.

use std::path::Path;

use super::bytes::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{H2tError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"H2TT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(H2tError::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn from_array2(name: impl Into<String>, a: &ndarray::Array2<f64>) -> Self {
        Self {
            name: name.into(),
            shape: a.shape().to_vec(),
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array2(&self) -> Result<ndarray::Array2<f64>> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => {
                return Err(H2tError::invalid(format!(
                    "tensor {:?} has shape {:?}, expected a matrix",
                    self.name, self.shape
                )))
            }
        };
        Ok(ndarray::Array2::from_shape_vec(
            (r, c),
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| H2tError::invalid(format!("missing weight tensor {name:?}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(TENSOR_MAGIC);
        w.u32(TENSOR_VERSION);
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.string(&t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u32(d as u32);
            }
        }
        for t in &self.tensors {
            for &v in &t.data {
                w.f32(v);
            }
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(TENSOR_MAGIC)?;
        let version = r.u32()?;
        if version != TENSOR_VERSION {
            return Err(H2tError::format(format!(
                "version mismatch: expected {TENSOR_VERSION}, found {version}"
            )));
        }
        let count = r.u32()? as usize;
        r.section("tensor index");
        let mut index = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            index.push((name, shape));
        }
        r.section("tensor data");
        let mut tensors = Vec::with_capacity(index.len());
        for (name, shape) in index {
            let n = shape.iter().product();
            let data = r.f32_vec(n)?;
            tensors.push(Tensor { name, shape, data });
        }
        r.finish()?;
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&read_file(path)?).map_err(|e| e.context(path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut f = TensorFile::default();
        f.push(Tensor::new("a", vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap());
        f.push(Tensor::new("scalar", vec![], vec![0.5]).unwrap());
        let back = TensorFile::decode(&f.encode()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.require("a").unwrap().to_array2().unwrap()[[1, 2]], 5.0);
        assert!(back.require("missing").is_err());
    }

    #[test]
    fn shape_checked() {
        assert!(Tensor::new("x", vec![2, 2], vec![1.0; 3]).is_err());
        let bytes = {
            let mut f = TensorFile::default();
            f.push(Tensor::new("x", vec![4], vec![1.0; 4]).unwrap());
            f.encode()
        };
        assert!(TensorFile::decode(&bytes[..bytes.len() - 2]).is_err());
    }
}
