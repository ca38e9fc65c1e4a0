//! Self-describing checkpoint files.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, JSON header,
//! little-endian `f32` payload, then a SHA-256 digest of everything before it.
//! Every array in the header carries its own offset and digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::latent_space::LatentRange;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume_io::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VSYNCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Vqgan,
    Sdm,
}

/// Adam state captured in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub name: String,
    pub step: u64,
    pub config: AdamConfig,
    pub moments: Vec<(String, Tensor<f32>, Tensor<f32>)>,
}

impl OptimizerState {
    pub fn capture<T: Scalar>(name: &str, opt: &Adam<T>) -> Self {
        Self {
            name: name.to_string(),
            step: opt.step,
            config: opt.config,
            moments: opt
                .moments()
                .map(|(k, m, v)| (k.to_string(), m.cast(), v.cast()))
                .collect(),
        }
    }

    /// Copy the captured moments and step count into `opt`.
    pub fn restore<T: Scalar>(&self, opt: &mut Adam<T>) -> Result<()> {
        for (k, m, v) in &self.moments {
            opt.set_moments(k, m.cast(), v.cast())?;
        }
        opt.step = self.step;
        opt.config = self.config;
        Ok(())
    }
}

/// Everything needed to resume a phase or run inference from it.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub version: u32,
    pub phase: Phase,
    pub config: RunConfig,
    pub schedule: Option<DiffusionSchedule>,
    pub latent_range: LatentRange,
    pub seed: u64,
    pub step: usize,
    pub params: ParamStore<f32>,
    pub optimizers: Vec<OptimizerState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    offset: usize,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    name: String,
    step: u64,
    config: AdamConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    phase: Phase,
    config: RunConfig,
    schedule: Option<DiffusionSchedule>,
    latent_range: LatentRange,
    seed: u64,
    step: usize,
    optimizers: Vec<OptimizerMeta>,
    arrays: Vec<ArrayEntry>,
}

fn param_key(name: &str) -> String {
    format!("param/{name}")
}

fn moment_key(opt: &str, which: &str, name: &str) -> String {
    format!("adam/{opt}/{which}/{name}")
}

fn array_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl CheckpointBundle {
    fn arrays(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(k, t)| (param_key(k), t)).collect();
        for o in &self.optimizers {
            for (k, m, v) in &o.moments {
                out.push((moment_key(&o.name, "m", k), m));
                out.push((moment_key(&o.name, "v", k), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.arrays() {
            let bytes = array_bytes(t);
            entries.push(ArrayEntry {
                name,
                shape: t.shape().to_vec(),
                offset: payload.len() / 4,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            version: self.version,
            phase: self.phase,
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            latent_range: self.latent_range,
            seed: self.seed,
            step: self.step,
            optimizers: self
                .optimizers
                .iter()
                .map(|o| OptimizerMeta {
                    name: o.name.clone(),
                    step: o.step,
                    config: o.config,
                })
                .collect(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header).expect("header is always serializable");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Decode and verify. Checks run in order: magic, header, version,
    /// whole-file digest, per-array digests.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |msg: String| Error::Corrupt {
            path: origin.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file".into()))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| corrupt(format!("header: {e}")))?;
        let found = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("header has no version".into()))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version {
                found: found.min(u32::MAX as u64) as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| corrupt(format!("header: {e}")))?;
        if bytes.len() < hend + 32 {
            return Err(corrupt("file truncated".into()));
        }
        let body_end = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(corrupt(
                "file digest mismatch (truncated or modified)".into(),
            ));
        }
        let payload = &bytes[hend..body_end];
        let mut arrays = std::collections::HashMap::new();
        for e in &header.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let chunk = payload
                .get(start..start + n * 4)
                .ok_or_else(|| corrupt(format!("array `{}` out of bounds", e.name)))?;
            if hex::encode(Sha256::digest(chunk)) != e.sha256 {
                return Err(corrupt(format!("array `{}` digest mismatch", e.name)));
            }
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        let mut params = ParamStore::new();
        for e in &header.arrays {
            if let Some(name) = e.name.strip_prefix("param/") {
                params.insert(name, arrays[&e.name].clone());
            }
        }
        let mut optimizers = Vec::new();
        for o in &header.optimizers {
            let prefix = format!("adam/{}/m/", o.name);
            let mut moments = Vec::new();
            for e in &header.arrays {
                if let Some(name) = e.name.strip_prefix(&prefix) {
                    let v = arrays
                        .get(&moment_key(&o.name, "v", name))
                        .ok_or_else(|| corrupt(format!("missing second moment for `{name}`")))?;
                    moments.push((name.to_string(), arrays[&e.name].clone(), v.clone()));
                }
            }
            optimizers.push(OptimizerState {
                name: o.name.clone(),
                step: o.step,
                config: o.config,
                moments,
            });
        }
        Ok(Self {
            version: header.version,
            phase: header.phase,
            config: header.config,
            schedule: header.schedule,
            latent_range: header.latent_range,
            seed: header.seed,
            step: header.step,
            params,
            optimizers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_phase(&self, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Config(format!(
                "expected a {phase:?} checkpoint, found {:?}",
                self.phase
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerState> {
        self.optimizers.iter().find(|o| o.name == name)
    }
}

/// SHA-256 over names, shapes and values of a parameter store.
pub fn param_fingerprint<T: Scalar>(ps: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (k, t) in ps.iter() {
        h.update(k.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
