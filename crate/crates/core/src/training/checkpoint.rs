//! DAFR checkpoint files.
//!
//! Layout, little-endian: magic `DAFR`, version u16, header length u32, header
//! JSON, then raw f32 payloads: every parameter tensor in header order,
//! followed by the momentum buffers in the same order. The header carries a
//! 64-bit FNV-1a digest of the payload.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::detector::{DetectorConfig, ParamStore};
use crate::training::{TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DAFR";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Digests of the datasets a run trained on, as 16 hex digits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetDigests {
    pub source: String,
    pub target: String,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub velocity: Vec<Vec<f32>>,
    /// Number of completed iterations.
    pub iteration: usize,
    pub train_config: TrainConfig,
    pub detector_config: DetectorConfig,
    pub datasets: DatasetDigests,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    iteration: usize,
    train_config: TrainConfig,
    detector_config: DetectorConfig,
    datasets: DatasetDigests,
    payload_digest: String,
    tool_version: String,
}

fn digest(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        if self.velocity.len() != self.params.len() {
            return Err(TrainError::Shape("one momentum buffer per parameter required".into()));
        }
        let mut payload = Vec::with_capacity(8 * self.params.numel());
        for (_, t) in self.params.iter() {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (buf, t) in self.velocity.iter().zip(self.params.tensors()) {
            if buf.len() != t.numel() {
                return Err(TrainError::Shape("momentum buffer length differs from its tensor".into()));
            }
            for v in buf {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            tensors: self.params.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
            iteration: self.iteration,
            train_config: self.train_config.clone(),
            detector_config: self.detector_config.clone(),
            datasets: self.datasets.clone(),
            payload_digest: digest(&payload),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + h.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |m: String| TrainError::Checkpoint(m);
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a DAFR checkpoint".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = bytes.get(10..).unwrap_or_default();
        if body.len() < hlen {
            return Err(corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        let numel: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != 8 * numel {
            return Err(corrupt(format!("payload holds {} bytes, expected {}", payload.len(), 8 * numel)));
        }
        if digest(payload) != header.payload_digest {
            return Err(corrupt("payload digest mismatch".into()));
        }
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n = e.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data).map_err(|e| corrupt(e.to_string()))?);
        }
        let velocity = header.tensors.iter().map(|e| floats.by_ref().take(e.shape.iter().product()).collect()).collect();
        Ok(Self {
            params,
            velocity,
            iteration: header.iteration,
            train_config: header.train_config,
            detector_config: header.detector_config,
            datasets: header.datasets,
        })
    }

    /// Warnings for using this checkpoint under `expected`; empty when compatible.
    pub fn compatibility_warnings(&self, expected: &TrainConfig) -> Vec<String> {
        let mut w = Vec::new();
        if self.train_config.ablation != expected.ablation {
            w.push(format!(
                "checkpoint was trained with ablation {} but {} was requested",
                self.train_config.ablation.label(),
                expected.ablation.label()
            ));
        }
        if self.train_config.lambda != expected.lambda {
            w.push(format!("checkpoint lambda {} differs from requested {}", self.train_config.lambda, expected.lambda));
        }
        w
    }
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads for inference, logging a warning for every mismatch with `expected`.
pub fn load_for_inference(path: &Path, expected: &TrainConfig) -> Result<(Checkpoint, Vec<String>), TrainError> {
    let c = load_checkpoint(path)?;
    let warnings = c.compatibility_warnings(expected);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((c, warnings))
}

/// 64-bit FNV-1a of a checkpoint file, as 16 hex digits.
pub fn file_digest(path: &Path) -> Result<String, TrainError> {
    Ok(digest(&fs::read(path)?))
}
