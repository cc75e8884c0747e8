//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "CNETCKPT"
//! version  u32      1
//! step     u64      training-step counter
//! count    u32      number of arrays
//! per array:
//!   name_len u16, name (UTF-8)
//!   ndim     u8, dims u64 × ndim
//!   data     f64 × Π dims, row-major
//! checksum u32      CRC-32 of every preceding byte
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::format::{write_atomic, FormatError, Reader, Writer};

pub const MAGIC: &[u8; 8] = b"CNETCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn scalar(name: String, v: f64) -> Self {
        Self {
            name,
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(name: String, v: &Array1<f64>) -> Self {
        Self {
            name,
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn matrix(name: String, m: &Array2<f64>) -> Self {
        Self {
            name,
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_scalar(&self) -> Result<f64, String> {
        if !self.shape.is_empty() {
            return Err(format!("`{}`: expected scalar, found shape {:?}", self.name, self.shape));
        }
        Ok(self.data[0])
    }

    pub fn to_vector(&self, len: usize) -> Result<Array1<f64>, String> {
        if self.shape != [len] {
            return Err(format!("`{}`: expected shape [{len}], found {:?}", self.name, self.shape));
        }
        Ok(Array1::from(self.data.clone()))
    }

    pub fn to_matrix(&self, rows: usize, cols: usize) -> Result<Array2<f64>, String> {
        if self.shape != [rows, cols] {
            return Err(format!(
                "`{}`: expected shape [{rows}, {cols}], found {:?}",
                self.name, self.shape
            ));
        }
        Ok(Array2::from_shape_vec((rows, cols), self.data.clone()).expect("shape checked"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.step);
        w.u32(self.arrays.len() as u32);
        for a in &self.arrays {
            w.u16(a.name.len() as u16);
            w.bytes(a.name.as_bytes());
            w.u8(a.shape.len() as u8);
            for &d in &a.shape {
                w.u64(d as u64);
            }
            w.f64s(&a.data);
        }
        w.into_checked()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(buf);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            r.record = Some(i);
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.bytes(name_len)?)
                .map_err(|_| r.invalid("array name is not UTF-8"))?
                .to_owned();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.invalid("array size overflows"))?;
            let data = r.f64s(len)?;
            if arrays.iter().any(|a: &NamedArray| a.name == name) {
                return Err(r.invalid(format!("duplicate array `{name}`")));
            }
            arrays.push(NamedArray { name, shape, data });
        }
        r.record = None;
        r.finish()?;
        Ok(Self { step, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
