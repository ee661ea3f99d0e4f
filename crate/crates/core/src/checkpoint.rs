//! Checkpoint container: a length-prefixed JSON header (tensor names,
//! shapes, byte offsets, lineage tag, config hash) followed by a
//! little-endian f32 payload. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PFCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor inside the payload section.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    /// What kind of model the parameters belong to (denoiser, nerf_field, ...).
    pub kind: String,
    /// Lineage tag (pretrained/partial/full/multiview for denoisers,
    /// initial/final for fields).
    pub lineage: String,
    pub steps_trained: u64,
    /// Hash of the canonical config JSON the producer ran with.
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<u8>,
}

impl Checkpoint {
    pub fn from_params(
        kind: &str,
        lineage: &str,
        steps_trained: u64,
        config_hash: &str,
        params: &ParamSet,
    ) -> Self {
        let mut tensors = Vec::with_capacity(params.len());
        let mut payload = Vec::new();
        // entries sorted by name so the byte layout is independent of
        // registration order
        let mut named: Vec<(&str, &Tensor)> = params.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        for (name, t) in named {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                version: 1,
                kind: kind.to_string(),
                lineage: lineage.to_string(),
                steps_trained,
                config_hash: config_hash.to_string(),
                tensors,
            },
            payload,
        }
    }

    /// Copies stored tensor values into `params`, matching by name. Every
    /// parameter must be present with the right shape.
    pub fn load_into(&self, params: &mut ParamSet) -> Result<()> {
        for idx in 0..params.len() {
            let name = params.name(idx).to_string();
            let entry = self
                .header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::State(format!("checkpoint missing tensor {name:?}")))?;
            let t = params.value_mut(idx);
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::State(format!(
                    "tensor {name:?} shape mismatch: checkpoint {:?}, model {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            let start = entry.offset as usize;
            let n = t.numel();
            let bytes = self
                .payload
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Io(format!("checkpoint payload truncated at {name:?}")))?;
            for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            t.zero_grad();
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::State(format!("checkpoint missing tensor {name:?}")))?;
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let bytes = self
            .payload
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Io(format!("checkpoint payload truncated at {name:?}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(entry.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
            return Err(Error::Io("not a checkpoint file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_bytes = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Io("checkpoint header truncated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        Ok(Checkpoint { header, payload: bytes[12 + hlen..].to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
