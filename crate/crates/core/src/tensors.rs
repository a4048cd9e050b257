//! Named dense `f64` tensors packed into one flat buffer, and the binary
//! checkpoint container used to persist them.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SRNASCKP"
//! version      u32       1
//! header_len   u64       byte length of the JSON header
//! header       UTF-8 JSON {"tensors": [{"name", "shape", "offset"}...], "meta": {...}}
//! payload      f64 LE    every tensor in row-major order; offsets count f64 elements
//! ```
//!
//! The header is plain JSON so tools in other languages can locate a tensor
//! by name and read `prod(shape)` doubles starting at `offset`.

use std::io::{self, Read, Write};

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRNASCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Location of a matrix (or a vector, with `cols == 1`) inside a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("slot inside buffer")
    }

    pub fn vec<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range()])
    }

    pub fn row<'a>(&self, data: &'a [f64], row: usize) -> &'a [f64] {
        let start = self.offset + row * self.cols;
        &data[start..start + self.cols]
    }

    pub fn row_mut<'a>(&self, data: &'a mut [f64], row: usize) -> &'a mut [f64] {
        let start = self.offset + row * self.cols;
        &mut data[start..start + self.cols]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero-filled tensor and returns its slot.
    pub fn push(&mut self, name: &str, shape: &[usize]) -> Slot {
        assert!(self.spec(name).is_none(), "duplicate tensor {name}");
        let offset = self.data.len();
        let spec = TensorSpec { name: name.to_string(), shape: shape.to_vec(), offset };
        self.data.resize(offset + spec.len(), 0.0);
        self.specs.push(spec);
        let (rows, cols) = match shape {
            [] => (1, 1),
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => (shape[0], shape[1..].iter().product()),
        };
        Slot { offset, rows, cols }
    }

    /// A store with the same tensors, all zero.
    pub fn zeros_like(&self) -> Self {
        TensorStore { specs: self.specs.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.spec(name)?.clone();
        Some(&mut self.data[spec.offset..spec.offset + spec.len()])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &TensorStore) -> bool {
        self.specs == other.specs
    }

    /// Copies every tensor of `self` into a combined store under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &TensorStore) {
        for spec in &other.specs {
            let slot = self.push(&format!("{prefix}{}", spec.name), &spec.shape);
            self.data[slot.range()].copy_from_slice(&other.data[spec.offset..spec.offset + spec.len()]);
        }
    }

    /// Extracts the tensors under `prefix` into a store laid out like `template`.
    pub fn extract_prefixed(&self, prefix: &str, template: &TensorStore) -> Result<TensorStore, CheckpointError> {
        let mut out = template.zeros_like();
        for spec in &template.specs {
            let name = format!("{prefix}{}", spec.name);
            let src = self.spec(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if src.shape != spec.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: spec.shape.clone(),
                    found: src.shape.clone(),
                });
            }
            out.data[spec.offset..spec.offset + spec.len()]
                .copy_from_slice(&self.data[src.offset..src.offset + src.len()]);
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorSpec>,
    meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    store: &TensorStore,
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&Header { tensors: store.specs.clone(), meta: meta.clone() })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(store.data.len() * 8);
    for v in &store.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(TensorStore, serde_json::Value), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(CheckpointError::Corrupt("payload is not a whole number of f64 values".into()));
    }
    let data: Vec<f64> = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    for spec in &header.tensors {
        if spec.offset + spec.len() > data.len() {
            return Err(CheckpointError::Corrupt(format!("tensor {} runs past the payload", spec.name)));
        }
    }
    Ok((TensorStore { specs: header.tensors, data }, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = TensorStore::new();
        let a = store.push("a", &[2, 3]);
        let b = store.push("b", &[4]);
        store.data_mut()[a.range()].copy_from_slice(&[1.0, -2.5, 0.1, f64::MIN_POSITIVE, 1e300, -0.0]);
        store.data_mut()[b.range()].copy_from_slice(&[0.3, 0.7, 9.0, -1.0 / 3.0]);
        let meta = serde_json::json!({"epoch": 3});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, &meta).unwrap();
        let (back, meta_back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(meta_back, meta);
        assert!(back.same_layout(&store));
        let bits = |s: &TensorStore| s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&store));
    }

    #[test]
    fn header_is_readable_without_this_crate() {
        let mut store = TensorStore::new();
        store.push("w", &[2, 2]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, &serde_json::Value::Null).unwrap();
        assert_eq!(&buf[..8], b"SRNASCKP");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        let n = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&buf[20..20 + n]).unwrap();
        assert_eq!(header["tensors"][0]["name"], "w");
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([2, 2]));
        assert_eq!(buf.len(), 20 + n + 4 * 8);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_checkpoint(&b"NOTACKPT\x01\0\0\0"[..]), Err(CheckpointError::BadMagic)));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &TensorStore::new(), &serde_json::Value::Null).unwrap();
        buf[8] = 9;
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn prefixed_extraction_checks_shapes() {
        let mut inner = TensorStore::new();
        inner.push("x", &[3]);
        inner.get_mut("x").unwrap().copy_from_slice(&[1.0, 2.0, 3.0]);
        let mut outer = TensorStore::new();
        outer.extend_prefixed("p/", &inner);
        assert_eq!(outer.get("p/x").unwrap(), &[1.0, 2.0, 3.0]);
        assert_eq!(outer.extract_prefixed("p/", &inner).unwrap(), inner);
        assert!(matches!(outer.extract_prefixed("q/", &inner), Err(CheckpointError::MissingTensor(_))));
    }
}
