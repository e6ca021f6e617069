//! Parameter persistence: a flat little-endian f64 blob plus a JSON manifest
//! of named shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NumericError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightManifest {
    pub entries: Vec<TensorEntry>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    pub manifest: WeightManifest,
    pub data: Vec<f64>,
}

impl WeightStore {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<(), NumericError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(NumericError::ShapeMismatch(format!("{n} elements declared, {} given", values.len())));
        }
        self.manifest.entries.push(TensorEntry { name: name.into(), shape, offset: self.data.len() });
        self.data.extend_from_slice(values);
        self.manifest.total = self.data.len();
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        let e = self.manifest.entries.iter().find(|e| e.name == name)?;
        let n: usize = e.shape.iter().product();
        Some((&e.shape, &self.data[e.offset..e.offset + n]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_parts(manifest: WeightManifest, bytes: &[u8]) -> Result<Self, NumericError> {
        if bytes.len() != manifest.total * 8 {
            return Err(NumericError::Io(format!("expected {} bytes, found {}", manifest.total * 8, bytes.len())));
        }
        for e in &manifest.entries {
            if e.offset + e.shape.iter().product::<usize>() > manifest.total {
                return Err(NumericError::Io(format!("entry {} out of range", e.name)));
            }
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { manifest, data })
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<(), NumericError> {
        let io = |e: std::io::Error| NumericError::Io(e.to_string());
        fs::write(stem.with_extension("bin"), self.to_bytes()).map_err(io)?;
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| NumericError::Io(e.to_string()))?;
        fs::write(stem.with_extension("json"), json).map_err(io)
    }

    pub fn load(stem: &Path) -> Result<Self, NumericError> {
        let io = |e: std::io::Error| NumericError::Io(e.to_string());
        let manifest: WeightManifest = serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).map_err(io)?)
            .map_err(|e| NumericError::Io(e.to_string()))?;
        Self::from_parts(manifest, &fs::read(stem.with_extension("bin")).map_err(io)?)
    }
}
