//! `model.json` (descriptor) + `model.bin` (little-endian f32 tensors in
//! descriptor order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DESCRIPTOR_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "model.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub version: u32,
    pub architecture: String,
    pub layers: Vec<LayerEntry>,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: ModelDescriptor,
    pub tensors: Vec<Tensor<f32>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl Checkpoint {
    /// Builds a checkpoint, checking that every tensor matches its layer entry.
    pub fn new(descriptor: ModelDescriptor, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        if descriptor.layers.len() != tensors.len() {
            return Err(NnError::Checkpoint(format!(
                "{} layer entries for {} tensors",
                descriptor.layers.len(),
                tensors.len()
            )));
        }
        for (entry, t) in descriptor.layers.iter().zip(&tensors) {
            if entry.shape != t.shape() {
                return Err(NnError::Checkpoint(format!(
                    "layer {} declared {:?}, tensor is {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(NnError::NonFinite(format!("checkpoint tensor {}", entry.name)));
            }
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn descriptor_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.descriptor)?;
        s.push('\n');
        Ok(s)
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(total * 4);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(DESCRIPTOR_FILE), self.descriptor_json()?.as_bytes())?;
        write_atomic(&dir.join(WEIGHTS_FILE), &self.weight_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let descriptor: ModelDescriptor = serde_json::from_slice(&fs::read(dir.join(DESCRIPTOR_FILE))?)?;
        if descriptor.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", descriptor.version)));
        }
        let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
        let expected: usize = descriptor
            .layers
            .iter()
            .map(|l| l.shape.iter().product::<usize>() * 4)
            .sum();
        if bytes.len() != expected {
            return Err(NnError::Checkpoint(format!(
                "{} holds {} bytes, descriptor needs {}",
                WEIGHTS_FILE,
                bytes.len(),
                expected
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(descriptor.layers.len());
        for entry in &descriptor.layers {
            let n: usize = entry.shape.iter().product();
            let data = bytes[offset..offset + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += n * 4;
            tensors.push(Tensor::from_vec(&entry.shape, data)?);
        }
        Self::new(descriptor, tensors)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.descriptor
            .layers
            .iter()
            .position(|l| l.name == name)
            .map(|i| &self.tensors[i])
    }
}
