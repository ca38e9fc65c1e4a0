//! Dataset manifests (`id<TAB>volume<TAB>map|-<TAB>split`) and seeded batching.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{load_map, load_volume, preprocess, preprocess_map, SemanticMap, Volume};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: PathBuf,
    /// Absent for unlabeled scans (usable for the autoencoder phase only).
    pub map: Option<PathBuf>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, seed: u64) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id `{}`", e.id)));
            }
        }
        Ok(Self { entries, seed })
    }

    pub fn is_labeled(&self) -> bool {
        self.entries.iter().all(|e| e.map.is_some())
    }

    pub fn split(&self, tag: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|e| e.split == tag)
                .cloned()
                .collect(),
            seed: self.seed,
        }
    }

    /// Serialize as text. Relative paths are written as given.
    pub fn to_text(&self) -> String {
        let mut s = format!("# seed={}\n", self.seed);
        for e in &self.entries {
            let map = e
                .map
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.volume.display(),
                map,
                e.split
            ));
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut seed = 0;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed=") {
                    seed = v.trim().parse().map_err(|_| Error::Format {
                        path: origin.to_path_buf(),
                        msg: format!("line {}: bad seed `{v}`", no + 1),
                    })?;
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Format {
                    path: origin.to_path_buf(),
                    msg: format!(
                        "line {}: expected 4 tab-separated columns, got {}",
                        no + 1,
                        cols.len()
                    ),
                });
            }
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                volume: PathBuf::from(cols[1]),
                map: (cols[2] != "-").then(|| PathBuf::from(cols[2])),
                split: cols[3].to_string(),
            });
        }
        Self::new(entries, seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text, path)?;
        // Relative entries resolve against the manifest's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.volume.is_relative() {
                e.volume = base.join(&e.volume);
            }
            if let Some(p) = e.map.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        super::atomic_write(path, self.to_text().as_bytes())
    }
}

/// One loaded, preprocessed scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub split: String,
    pub volume: Volume<T>,
    pub map: Option<SemanticMap>,
}

/// Samples in manifest order, preprocessed to a common shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub seed: u64,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(manifest: &DatasetManifest, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let raw = load_volume::<T>(&e.volume)?;
                let volume = preprocess(&raw, shape)?;
                let map = match &e.map {
                    Some(p) => Some(preprocess_map(&load_map(p, num_classes)?, shape)?),
                    None => None,
                };
                Ok(Sample {
                    id: e.id.clone(),
                    split: e.split.clone(),
                    volume,
                    map,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            seed: manifest.seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, tag: &str) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .filter(|s| s.split == tag)
                .cloned()
                .collect(),
            seed: self.seed,
        }
    }

    pub fn maps(&self) -> Result<Vec<&SemanticMap>> {
        self.samples
            .iter()
            .map(|s| {
                s.map
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("entry `{}` has no semantic map", s.id)))
            })
            .collect()
    }
}

/// Entry indices of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub epoch: usize,
    pub indices: Vec<usize>,
}

/// Endless, deterministic sequence of batches: each epoch is a seeded
/// permutation of all entries, chopped into `batch_size` pieces (the last
/// batch of an epoch may be short).
#[derive(Debug, Clone)]
pub struct BatchPlan {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::Range {
                key: "batch_size".into(),
                msg: "must be >= 1".into(),
            });
        }
        let mut plan = Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        plan.order = plan.epoch_order(0);
        Ok(plan)
    }

    /// Permutation used for `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }
}

impl Iterator for BatchPlan {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.order = self.epoch_order(self.epoch);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            epoch: self.epoch,
            indices,
        })
    }
}

/// Batch plan over the entries of `manifest`.
pub fn make_batches(manifest: &DatasetManifest, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    BatchPlan::new(manifest.entries.len(), batch_size, seed)
}
