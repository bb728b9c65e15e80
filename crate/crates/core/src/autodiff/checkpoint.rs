//! JSON checkpoint file: a format version, named parameter arrays and an
//! optional opaque metadata object (the trainer stores its config there).
//!
//! Floats are written in shortest round-trip form and parsed with
//! `float_roundtrip`, so save followed by load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: Vec<StoredTensor>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            params: Vec::new(),
            metadata: serde_json::Value::Null,
        }
    }

    pub fn add_params(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.params.push(StoredTensor {
                name: name.to_string(),
                shape: t.value.shape().to_vec(),
                data: t.value.data().to_vec(),
            });
        }
    }

    /// Overwrites every parameter of `params` from the stored entry of the
    /// same name. Shapes must agree.
    pub fn load_into(&self, params: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let stored = self
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            let target = params.by_name_mut(&name).expect("name from the same set");
            if stored.shape != target.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    stored.shape,
                    target.value.shape()
                )));
            }
            target.value = Tensor::new(stored.shape.clone(), stored.data.clone())
                .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        for p in &ckpt.params {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(Error::Format(format!(
                    "parameter {}: shape {:?} does not match {} values",
                    p.name,
                    p.shape,
                    p.data.len()
                )));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
