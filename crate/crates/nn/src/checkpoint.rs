//! Self-describing checkpoint container.
//!
//! Layout:
//!
//! ```text
//! UNITCKPT1\n
//! <u64 LE header length>
//! <header: UTF-8 JSON {"meta": ..., "arrays": [{"name", "rows", "cols"}]}>
//! <every array's values as f64 LE, row-major, in header order>
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::NnError;

const MAGIC: &[u8] = b"UNITCKPT1\n";

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push_arrays(&mut self, arrays: impl IntoIterator<Item = (String, Array2<f64>)>) {
        self.arrays.extend(arrays);
    }

    /// Removes and returns every array whose name starts with `prefix`,
    /// preserving order.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Array2<f64>)> {
        let (taken, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut self.arrays)
            .into_iter()
            .partition(|(n, _)| n.starts_with(prefix));
        self.arrays = kept;
        taken
            .into_iter()
            .map(|(n, a)| (n[prefix.len()..].to_string(), a))
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayHeader {
                    name: name.clone(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, a) in &self.arrays {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(NnError::Format("bad checkpoint magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut buf = [0u8; 8];
        for h in header.arrays {
            let mut data = Vec::with_capacity(h.rows * h.cols);
            for _ in 0..h.rows * h.cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let a = Array2::from_shape_vec((h.rows, h.cols), data)
                .map_err(|e| NnError::Format(e.to_string()))?;
            arrays.push((h.name, a));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let f = File::open(path)?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let mut ck = Checkpoint::new(serde_json::json!({"step": 3, "kind": "test"}));
        ck.push_arrays([
            ("a".to_string(), Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - j as f64 * 0.5)),
            ("b".to_string(), Array2::zeros((1, 1))),
        ]);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_foreign_bytes() {
        let err = Checkpoint::read_from(&b"RIFF0000WAVEfmt "[..]).unwrap_err();
        assert!(matches!(err, NnError::Format(_)));
    }

    #[test]
    fn take_prefixed_strips_prefix() {
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.push_arrays([
            ("p.x".to_string(), Array2::zeros((1, 1))),
            ("q.y".to_string(), Array2::zeros((1, 1))),
        ]);
        let p = ck.take_prefixed("p.");
        assert_eq!(p[0].0, "x");
        assert_eq!(ck.arrays.len(), 1);
    }
}
