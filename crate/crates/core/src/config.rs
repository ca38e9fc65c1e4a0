//! Run configuration: a TOML document layered as defaults, then file, then
//! `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::DEFAULT_COSINE_OFFSET;
use crate::error::{Error, Result};
use crate::metrics::SegHarnessConfig;
use crate::nn::AdamConfig;
use crate::vqgan::{CompressionConfig, VqGanLossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Target `(H, W, L)` every scan is preprocessed to.
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            shape: [32, 32, 8],
            num_classes: 3,
            manifest: None,
        }
    }
}

/// Procedural dataset generated by `gen-toy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n: 80,
            n_test: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqGanPhaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub loss: VqGanLossConfig,
}

impl Default for VqGanPhaseConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            checkpoint_every: 0,
            loss: VqGanLossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub s: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            s: DEFAULT_COSINE_OFFSET,
            train_steps: 5000,
            batch_size: 2,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub feature_seed: u64,
    /// Record a sampling snapshot every this many reverse steps.
    pub snapshot_every: Option<usize>,
    /// Peak used for PSNR on `[-1, 1]` volumes.
    pub psnr_peak: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            feature_seed: 7,
            snapshot_every: None,
            psnr_peak: 2.0,
        }
    }
}

/// Everything a run needs. Some denoiser and harness fields are derived
/// from the data and compression settings by [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub toy: ToyConfig,
    pub compression: CompressionConfig,
    pub vqgan: VqGanPhaseConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub optimizer: AdamConfig,
    pub seg: SegHarnessConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            data: DataConfig::default(),
            toy: ToyConfig::default(),
            compression: CompressionConfig::default(),
            vqgan: VqGanPhaseConfig::default(),
            denoiser: DenoiserConfig {
                widths: vec![16, 32],
                num_groups: 4,
                time_dim: 16,
                semantic_channels: 8,
                spade_hidden: 8,
                ..DenoiserConfig::default()
            },
            diffusion: DiffusionConfig::default(),
            optimizer: AdamConfig::default(),
            seg: SegHarnessConfig::desk(3, [32, 32, 8]),
            eval: EvalConfig::default(),
        };
        c.resolve();
        c
    }
}

fn range(key: &str, msg: impl Into<String>) -> Error {
    Error::Range {
        key: key.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Fill fields that follow from others: the denoiser's channel, class and
    /// compression settings, and the harness class count and patch.
    pub fn resolve(&mut self) {
        self.denoiser.in_channels = self.compression.n_z;
        self.denoiser.num_classes = self.data.num_classes;
        self.denoiser.compression = self.compression.t;
        self.seg.num_classes = self.data.num_classes;
        self.seg.in_channels = self.compression.in_channels;
        for a in 0..3 {
            self.seg.patch[a] = self.seg.patch[a].min(self.data.shape[a]);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.compression.t;
        if t == 0 {
            return Err(range("compression.t", "must be >= 1"));
        }
        if let Some(d) = self.data.shape.iter().find(|&&d| d == 0 || d % t != 0) {
            return Err(range(
                "compression.t",
                format!(
                    "compression.t = {t} does not divide data.shape {:?} (axis {d})",
                    self.data.shape
                ),
            ));
        }
        self.compression.validate()?;
        let latent = self.compression.latent_dims(self.data.shape)?;
        self.denoiser.validate()?;
        self.denoiser.check_latent_dims(latent).map_err(|_| {
            range(
                "denoiser.widths",
                format!(
                    "{} levels need latent dims {latent:?} (data.shape / compression.t) divisible by {}",
                    self.denoiser.levels(),
                    1usize << (self.denoiser.levels() - 1)
                ),
            )
        })?;
        if self.data.num_classes < 2 {
            return Err(range("data.num_classes", "must be >= 2"));
        }
        if self.vqgan.batch_size == 0 {
            return Err(range("vqgan.batch_size", "must be >= 1"));
        }
        if self.diffusion.batch_size == 0 {
            return Err(range("diffusion.batch_size", "must be >= 1"));
        }
        if self.diffusion.steps == 0 {
            return Err(range("diffusion.T", "must be >= 1"));
        }
        if !(self.diffusion.s > 0.0) {
            return Err(range("diffusion.s", "must be > 0"));
        }
        if self.toy.n_test > self.toy.n {
            return Err(range("toy.n_test", "exceeds toy.n"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(range("optimizer.lr", "must be > 0"));
        }
        if self.eval.snapshot_every == Some(0) {
            return Err(range("eval.snapshot_every", "must be >= 1"));
        }
        self.seg.validate()?;
        let seg_levels = 1usize << (self.seg.widths.len() - 1);
        if self.data.shape.iter().any(|d| d % seg_levels != 0) {
            return Err(range(
                "seg.widths",
                format!("data.shape must be divisible by {seg_levels}"),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }
}

/// Parse a scalar override value: TOML syntax when it parses, bare string
/// otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Defaults, then `text`, then overrides; returns the resolved, validated
/// config. Unknown keys are config errors naming the key path.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let de = toml::Value::Table(doc);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner().to_string().trim()))
    })?;
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_valid_defaults() {
        let c = parse_config_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.diffusion.steps, 300);
        assert_eq!(
            c.optimizer,
            AdamConfig {
                lr: 3e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8
            }
        );
    }

    #[test]
    fn override_is_reflected() {
        let c = parse_config_str("", &["diffusion.T=10".into()]).unwrap();
        assert_eq!(c.diffusion.steps, 10);
        let c = parse_config_str("[diffusion]\nT = 50\n", &["diffusion.T=10".into()]).unwrap();
        assert_eq!(c.diffusion.steps, 10);
        let c = parse_config_str("", &["data.manifest=runs/m.tsv".into()]).unwrap();
        assert_eq!(c.data.manifest, Some(PathBuf::from("runs/m.tsv")));
    }

    #[test]
    fn file_beats_defaults() {
        let c = parse_config_str("seed = 9\n[compression]\nK = 64\n", &[]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.compression.codebook_size, 64);
    }

    #[test]
    fn indivisible_compression_names_both_keys() {
        let e = parse_config_str("", &["compression.t=3".into()]).unwrap_err();
        let msg = e.to_string();
        assert!(
            msg.contains("compression.t") && msg.contains("data.shape"),
            "{msg}"
        );
        assert!(matches!(e, Error::Range { .. }));
    }

    #[test]
    fn unknown_key_names_its_path() {
        let e = parse_config_str("[vqgan.loss]\nbogus = 1\n", &[]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("vqgan.loss"), "{e}");
        assert!(parse_config_str("", &["nope=1".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_range_errors() {
        let e = parse_config_str("", &["vqgan.batch_size=0".into()]).unwrap_err();
        assert!(matches!(e, Error::Range { ref key, .. } if key == "vqgan.batch_size"));
    }

    #[test]
    fn derived_fields_follow_sources() {
        let c = parse_config_str(
            "",
            &["compression.n_z=4".into(), "data.num_classes=2".into()],
        )
        .unwrap();
        assert_eq!(c.denoiser.in_channels, 4);
        assert_eq!(c.denoiser.num_classes, 2);
        assert_eq!(c.seg.num_classes, 2);
        assert_eq!(c.seg.patch, [32, 32, 8]);
    }

    #[test]
    fn resolved_config_roundtrips_through_toml() {
        let c = parse_config_str("", &["seed=4".into()]).unwrap();
        assert_eq!(parse_config_str(&c.to_toml(), &[]).unwrap(), c);
    }
}
