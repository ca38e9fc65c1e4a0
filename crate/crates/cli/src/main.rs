mod montage;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use volsynth::config::{parse_config, RunConfig};
use volsynth::denoiser::Denoiser;
use volsynth::metrics::{summary_text, FeatureExtractor, MetricRecord};
use volsynth::nn::ParamStore;
use volsynth::pipeline::{
    distribution_gap, faithfulness_run, noise_volumes, paired_metrics, synthesize, synthesize_set,
    train_sdm_phase, train_vqgan_phase, CheckpointBundle, CheckpointPlan, TrainReport,
};
use volsynth::volume_io::{
    generate_toy_dataset, load_map, preprocess_map, read_nifti, save_nifti, Dataset, DatasetManifest, ToyParams,
};
use volsynth::vqgan::VqGan;
use volsynth::Error;

/// Semantic-map-conditioned synthesis of 3D medical volumes with a latent
/// diffusion model.
#[derive(Debug, Parser)]
#[command(name = "volsynth", version)]
struct Cli {
    /// TOML run configuration. Keys not given take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set diffusion.T=10`.
    /// Repeatable; applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run seed. Takes precedence over `seed` in the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory. Created if missing; the resolved configuration is
    /// written to `config.toml` inside it.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/latest")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the procedural toy dataset (NIfTI volumes, label maps and
    /// `manifest.tsv`) into the output directory.
    GenToy,
    /// Train the VQ-GAN autoencoder on every entry of a manifest.
    TrainVqgan {
        /// Dataset manifest; defaults to `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Manifest split to train on.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the semantic denoiser on the latents of a frozen VQ-GAN.
    TrainSdm {
        /// Dataset manifest; every entry must have a label map.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        /// VQ-GAN checkpoint from `train-vqgan`.
        #[arg(long)]
        vqgan: PathBuf,
    },
    /// Synthesize one volume from a label map.
    Sample {
        #[arg(long)]
        vqgan: PathBuf,
        #[arg(long)]
        sdm: PathBuf,
        /// Label map (NIfTI); resampled to `data.shape`.
        #[arg(long)]
        map: PathBuf,
        /// Also decode and save the latent every K reverse steps.
        #[arg(long, value_name = "K")]
        snapshot_every: Option<usize>,
    },
    /// Synthesize a volume per test map and report Fréchet distances,
    /// RMSE, PSNR and SSIM against the real test volumes.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        vqgan: PathBuf,
        #[arg(long)]
        sdm: PathBuf,
    },
    /// Train a segmenter on real training scans and compare its Dice on real
    /// and synthetic test volumes.
    Faithfulness {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        vqgan: PathBuf,
        #[arg(long)]
        sdm: PathBuf,
    },
    /// Render central slices of NIfTI volumes into a PNG grid with one row
    /// per plane (axial, coronal, sagittal) and one column per input.
    Montage {
        /// Volumes or label maps, one column each.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output file name inside the output directory.
        #[arg(long, default_value = "montage.png")]
        name: String,
        /// Pixel enlargement factor.
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Print parameter counts per component for the configuration (or for
    /// the configurations stored in checkpoints).
    Info {
        #[arg(long)]
        vqgan: Option<PathBuf>,
        #[arg(long)]
        sdm: Option<PathBuf>,
    },
}

/// Runs never depend on thread scheduling; with this variable set, files
/// that record wall-clock time are also skipped so that whole output
/// directories compare byte for byte.
fn deterministic() -> bool {
    std::env::var("VOLSYNTH_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Config(_) | Error::Range { .. } => 2,
        Error::Divergence { .. } | Error::SamplingDivergence { .. } | Error::Numeric(_) => 4,
        Error::Corrupt { .. } | Error::Version { .. } => 5,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(parse_config(cli.config.as_deref(), &overrides)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn manifest_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match flag.clone().or_else(|| cfg.data.manifest.clone()) {
        Some(p) => Ok(p),
        None => Err(Error::Config("no manifest: pass --manifest or set data.manifest".into()).into()),
    }
}

fn load_split(flag: &Option<PathBuf>, split: &str, cfg: &RunConfig) -> Result<Dataset<f32>> {
    let path = manifest_path(flag, cfg)?;
    let manifest = DatasetManifest::load(&path)?;
    let data = Dataset::<f32>::load(&manifest.split(split), cfg.data.shape, cfg.data.num_classes)?;
    if data.is_empty() {
        return Err(Error::Data(format!("split `{split}` of {} is empty", path.display())).into());
    }
    Ok(data)
}

fn save_report(out: &Path, stem: &str, report: &TrainReport) -> Result<()> {
    write(&out.join(format!("{stem}_losses.csv")), &report.csv())?;
    write(&out.join(format!("{stem}_metrics.csv")), &summary_text(&report.final_metrics))?;
    if !deterministic() {
        write(&out.join(format!("{stem}_wallclock.txt")), &format!("{:.3}\n", report.wall_clock_secs))?;
    }
    for m in &report.final_metrics {
        println!("{} ({}) = {}", m.metric, m.dataset, m.value);
    }
    Ok(())
}

fn count(ps: &ParamStore<f32>, prefix: &str) -> usize {
    ps.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let seed = cfg.seed;

    match &cli.command {
        Command::GenToy => {
            let p = ToyParams {
                n: cfg.toy.n,
                shape: cfg.data.shape,
                num_classes: cfg.data.num_classes,
                seed: cfg.toy.seed,
                n_test: cfg.toy.n_test,
            };
            let m = generate_toy_dataset(&out, &p)?;
            println!("wrote {} entries to {}", m.entries.len(), out.join("manifest.tsv").display());
        }
        Command::TrainVqgan { manifest, split } => {
            let data = load_split(manifest, split, &cfg)?;
            let path = out.join("vqgan.ckpt");
            let plan = CheckpointPlan { path: Some(&path), every: cfg.vqgan.checkpoint_every };
            let (_, report) = train_vqgan_phase(&data, &cfg, seed, plan)?;
            save_report(&out, "vqgan", &report)?;
            println!("checkpoint: {}", path.display());
        }
        Command::TrainSdm { manifest, split, vqgan } => {
            let vq = CheckpointBundle::load(vqgan)?;
            let data = load_split(manifest, split, &cfg)?;
            let path = out.join("sdm.ckpt");
            let plan = CheckpointPlan { path: Some(&path), every: cfg.diffusion.checkpoint_every };
            let (_, report) = train_sdm_phase(&data, &vq, &cfg, seed, plan)?;
            save_report(&out, "sdm", &report)?;
            println!("checkpoint: {}", path.display());
        }
        Command::Sample { vqgan, sdm, map, snapshot_every } => {
            let vq = CheckpointBundle::load(vqgan)?;
            let sd = CheckpointBundle::load(sdm)?;
            let m = preprocess_map(&load_map(map, cfg.data.num_classes)?, cfg.data.shape)?;
            let every = snapshot_every.or(cfg.eval.snapshot_every);
            let s = synthesize::<f32>(&m, &vq, &sd, seed, every)?;
            let path = out.join("sample.nii");
            save_nifti(&s.volume, &path)?;
            if !s.snapshots.is_empty() {
                let dir = out.join("snapshots");
                fs::create_dir_all(&dir)?;
                for (t, v) in &s.snapshots {
                    save_nifti(v, dir.join(format!("t{t:04}.nii")))?;
                }
            }
            println!("sample: {} ({} snapshots)", path.display(), s.snapshots.len());
        }
        Command::Evaluate { manifest, split, vqgan, sdm } => {
            let vq = CheckpointBundle::load(vqgan)?;
            let sd = CheckpointBundle::load(sdm)?;
            let test = load_split(manifest, split, &cfg)?;
            let maps = test.maps()?;
            let synthetic = synthesize_set::<f32>(&maps, &vq, &sd, seed)?;
            let dir = out.join("synthetic");
            fs::create_dir_all(&dir)?;
            for (s, v) in test.samples.iter().zip(&synthetic) {
                save_nifti(v, dir.join(format!("{}_synth.nii", s.id)))?;
            }
            let real: Vec<_> = test.samples.iter().map(|s| s.volume.clone()).collect();
            let noise = noise_volumes::<f32>(real.len(), cfg.data.shape, cfg.compression.in_channels, seed)?;
            let fx = FeatureExtractor::fixed_random(cfg.eval.feature_seed, cfg.compression.in_channels);
            let gap = distribution_gap(&real, &synthetic, &noise, &fx)?;
            let mut records = vec![
                MetricRecord::new("frechet", "synthetic", gap.synthetic),
                MetricRecord::new("frechet", "noise", gap.noise),
                MetricRecord::new("frechet_ratio", "noise/synthetic", gap.ratio()),
            ];
            records.extend(paired_metrics(&real, &synthetic, cfg.eval.psnr_peak)?);
            write(&out.join("summary.csv"), &summary_text(&records))?;
            print!("{}", summary_text(&records));
        }
        Command::Faithfulness { manifest, vqgan, sdm } => {
            let vq = CheckpointBundle::load(vqgan)?;
            let sd = CheckpointBundle::load(sdm)?;
            let train = load_split(manifest, "train", &cfg)?;
            let test = load_split(manifest, "test", &cfg)?;
            let synthetic = synthesize_set::<f32>(&test.maps()?, &vq, &sd, seed)?;
            let report = faithfulness_run(&train, &test, &synthetic, &cfg.seg, seed)?;
            let t = report.table;
            let records = vec![
                MetricRecord::new("dice", "real-train", t.real_train),
                MetricRecord::new("dice", "real-test", t.real_test),
                MetricRecord::new("dice", "synthetic", t.synthetic),
            ];
            write(&out.join("dice.csv"), &summary_text(&records))?;
            let mut losses = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                losses.push_str(&format!("{i},{l}\n"));
            }
            write(&out.join("seg_losses.csv"), &losses)?;
            print!("{}", summary_text(&records));
        }
        Command::Montage { inputs, name, scale } => {
            let images = inputs
                .iter()
                .map(|p| Ok(read_nifti(p)?))
                .collect::<Result<Vec<_>>>()?;
            let img = montage::render(&images, *scale)?;
            let path = out.join(name);
            montage::write_png(&img, &path)?;
            println!("montage ({} rows: {}): {}", 3, montage::PLANES.join(", "), path.display());
        }
        Command::Info { vqgan, sdm } => {
            let vq_cfg = match vqgan {
                Some(p) => CheckpointBundle::load(p)?.config,
                None => cfg.clone(),
            };
            let sd_cfg = match sdm {
                Some(p) => CheckpointBundle::load(p)?.config,
                None => cfg.clone(),
            };
            let vq = VqGan::new(vq_cfg.compression.clone())?.init_params::<f32>(0);
            let dn = Denoiser::new(sd_cfg.denoiser.clone())?.init_params::<f32>(0);
            let rows = [
                ("VQ-GAN encoder", count(&vq, "enc.")),
                ("VQ-GAN decoder", count(&vq, "dec.")),
                ("codebook", count(&vq, "codebook")),
                ("2D discriminator", count(&vq, "d2d.")),
                ("3D discriminator", count(&vq, "d3d.")),
                ("semantic map encoder", count(&dn, "sem.")),
                ("denoising U-Net", count(&dn, "sdm.")),
            ];
            let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
            for (name, n) in rows {
                println!("{name:<width$}  {n:>10}");
            }
            let total: usize = rows.iter().map(|r| r.1).sum();
            println!("{:<width$}  {total:>10}", "total");
            if vq_cfg.compression != sd_cfg.compression {
                bail!(Error::Config("the two checkpoints use different compression settings".into()));
            }
        }
    }
    Ok(())
}
