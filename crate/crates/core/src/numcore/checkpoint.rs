//! Tensor file format.
//!
//! A JSON document:
//!
//! ```text
//! { "format": "copycap-tensors", "version": 1,
//!   "tensors": [ { "name": "...", "shape": [r, c], "trainable": true,
//!                  "data": [row-major f64 values] }, ... ] }
//! ```
//!
//! Values are written with shortest round-trip formatting, so a load after
//! a save reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

pub const TENSOR_FORMAT: &str = "copycap-tensors";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "default_trainable")]
    pub trainable: bool,
    pub data: Vec<f64>,
}

fn default_trainable() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorFile {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorRecord>,
}

impl TensorFile {
    pub fn from_store(store: &ParamStore) -> Self {
        let tensors = store
            .iter()
            .map(|(_, name, t, trainable)| TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable,
                data: t.data().to_vec(),
            })
            .collect();
        Self { format: TENSOR_FORMAT.to_string(), version: 1, tensors }
    }

    pub fn into_store(self) -> Result<ParamStore, TensorError> {
        if self.format != TENSOR_FORMAT || self.version != 1 {
            return Err(TensorError::Format(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let mut store = ParamStore::new();
        for rec in self.tensors {
            let t = Tensor::new(rec.shape, rec.data)
                .map_err(|e| TensorError::Format(format!("tensor {}: {e}", rec.name)))?;
            store.insert(rec.name, t, rec.trainable);
        }
        Ok(store)
    }
}

pub fn save_tensors(store: &ParamStore, path: &Path) -> Result<(), TensorError> {
    let json = serde_json::to_string(&TensorFile::from_store(store)).map_err(|e| TensorError::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<ParamStore, TensorError> {
    let text = fs::read_to_string(path)?;
    let file: TensorFile = serde_json::from_str(&text).map_err(|e| TensorError::Format(e.to_string()))?;
    file.into_store()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 12345.678]).unwrap(), true);
        store.insert("emb", Tensor::new(vec![3], vec![std::f64::consts::PI, 0.0, -2.5]).unwrap(), false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        save_tensors(&store, &path).unwrap();
        let back = load_tensors(&path).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_wrong_format() {
        let file = TensorFile { format: "other".into(), version: 1, tensors: vec![] };
        assert!(file.into_store().is_err());
        let bad = TensorFile {
            format: TENSOR_FORMAT.into(),
            version: 1,
            tensors: vec![TensorRecord { name: "x".into(), shape: vec![2], trainable: true, data: vec![1.0] }],
        };
        assert!(bad.into_store().is_err());
    }
}
