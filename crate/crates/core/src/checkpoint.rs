//! Θ checkpoints.
//!
//! Layout: the magic bytes `MMLCKPT\0`, a little-endian `u32` format version,
//! a `u64` manifest length, the JSON manifest, then every array as raw
//! little-endian `f64` values at the offsets the manifest lists. A JSON
//! sidecar next to the file carries training metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::encoder::{EncoderConfig, LearnerParams, ParamEntry};
use crate::error::{Error, Result};
use crate::matching::Similarity;
use crate::meta::{MetaParams, FEATURE_DIM};

pub const MAGIC: &[u8; 8] = b"MMLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f64` values from the start of the data section.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    encoder: EncoderConfig,
    similarity: Similarity,
    arrays: Vec<ArrayEntry>,
    learner: Vec<ParamEntry>,
}

/// Θ with the network description it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: MetaParams,
    pub encoder: EncoderConfig,
    pub similarity: Similarity,
    pub config_hash: String,
    pub seed: u64,
}

/// Training metadata written beside the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub best_iteration: usize,
    pub best_val_acc: Option<f64>,
    pub iterations: usize,
    pub test_query_cap: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let parts: [(&str, Vec<usize>, &[f64]); 5] = [
            ("forget_w", vec![FEATURE_DIM], &m.forget_w),
            ("forget_b", vec![], std::slice::from_ref(&m.forget_b)),
            ("input_w", vec![FEATURE_DIM], &m.input_w),
            ("input_b", vec![], std::slice::from_ref(&m.input_b)),
            ("c0", vec![m.c0.len()], m.c0.flat()),
        ];
        let mut arrays = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in &parts {
            arrays.push(ArrayEntry {
                name: name.to_string(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
        }
        let manifest = Manifest {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            encoder: self.encoder.clone(),
            similarity: self.similarity,
            arrays,
            learner: m.c0.manifest().to_vec(),
        };
        let json = serde_json::to_vec(&manifest).expect("plain data serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &parts {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| err("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let data = &bytes[20 + len..];
        if !data.len().is_multiple_of(8) {
            return Err(err("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = |name: &str| -> Result<Vec<f64>> {
            let entry = manifest
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("array {name} missing")))?;
            let n: usize = entry.shape.iter().product();
            values
                .get(entry.offset..entry.offset + n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Checkpoint(format!("array {name} runs past the data section")))
        };
        let forget_w = array("forget_w")?;
        let input_w = array("input_w")?;
        if forget_w.len() != FEATURE_DIM || input_w.len() != FEATURE_DIM {
            return Err(err("gate weights have the wrong length"));
        }
        manifest.encoder.validate()?;
        if manifest.learner != manifest.encoder.manifest() {
            return Err(err("learner manifest does not match the encoder"));
        }
        let c0 = LearnerParams::new(array("c0")?, manifest.learner)?;
        Ok(Self {
            meta: MetaParams {
                forget_w,
                forget_b: array("forget_b")?[0],
                input_w,
                input_b: array("input_b")?[0],
                c0,
            },
            encoder: manifest.encoder,
            similarity: manifest.similarity,
            config_hash: manifest.config_hash,
            seed: manifest.seed,
        })
    }

    pub fn save(&self, path: &Path, sidecar: &Sidecar) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        let mut text = serde_json::to_string_pretty(sidecar).expect("plain data serializes");
        text.push('\n');
        write_atomic(&sidecar_path(path), text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    let p = sidecar_path(path);
    let text = fs::read_to_string(&p)?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
}
