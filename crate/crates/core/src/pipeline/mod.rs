//! Two-phase training (autoencoder, then latent diffusion) and map-to-volume
//! synthesis.

mod checkpoint;
mod evaluation;

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Trainable};
use crate::config::RunConfig;
use crate::denoiser::{Denoiser, DENOISER_PREFIXES};
use crate::diffusion::{
    build_cosine_schedule, noise_with, sample_loop, sample_timestep, DiffusionSchedule,
};
use crate::error::{Error, Result};
use crate::latent_space::{codebook_range, minmax_map, Direction, LatentRange};
use crate::metrics::MetricRecord;
use crate::nn::{Adam, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume_io::{one_hot, one_hot_batch, BatchPlan, Dataset, SemanticMap, Volume};
use crate::vqgan::{codebook_usage, quantize, VqGan, VqGanLossRecord, VqGanTrainer};

pub use checkpoint::{
    param_fingerprint, CheckpointBundle, OptimizerState, Phase, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use evaluation::{
    distribution_gap, faithfulness_run, noise_volumes, paired_metrics, synthesize_set,
    DistributionGap,
};

/// Per-step loss log plus summary numbers of one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub phase: Phase,
    pub header: String,
    pub lines: Vec<String>,
    pub wall_clock_secs: f64,
    pub final_metrics: Vec<MetricRecord>,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut s = self.header.clone();
        s.push('\n');
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.final_metrics
            .iter()
            .find(|m| m.metric == name)
            .map(|m| m.value)
    }
}

/// Where and how often a phase writes intermediate checkpoints. A failed
/// run leaves the last successfully written file in place.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckpointPlan<'a> {
    pub path: Option<&'a Path>,
    pub every: usize,
}

impl CheckpointPlan<'_> {
    fn due(&self, done: usize) -> bool {
        self.path.is_some() && self.every > 0 && done % self.every == 0
    }
}

fn batch_of<T: Scalar>(data: &Dataset<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = idx
        .iter()
        .map(|&i| data.samples[i].volume.batched())
        .collect();
    Tensor::stack(&items)
}

/// Mean squared voxel error of `D(q(E(x)))` over a dataset, plus the
/// codebook indices used along the way.
pub fn reconstruction_mse<T: Scalar>(
    model: &VqGan,
    ps: &ParamStore<T>,
    data: &Dataset<T>,
) -> Result<(f64, Vec<usize>)> {
    let cb = model.codebook(ps)?;
    let mut total = 0.0;
    let mut indices = Vec::new();
    for s in &data.samples {
        let x = s.volume.batched();
        let q = quantize(&model.encode(ps, &x)?, &cb)?;
        indices.extend_from_slice(&q.indices);
        let xh = model.decode(ps, &q.z_q)?;
        total += x
            .data()
            .iter()
            .zip(xh.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            / x.len() as f64;
    }
    Ok((total / data.len() as f64, indices))
}

fn vqgan_bundle<T: Scalar>(
    model: &VqGan,
    tr: &VqGanTrainer<T>,
    config: &RunConfig,
    seed: u64,
) -> Result<CheckpointBundle> {
    let params: ParamStore<f32> = tr.params.cast();
    let latent_range = codebook_range(&model.codebook(&params)?)?;
    Ok(CheckpointBundle {
        version: CHECKPOINT_VERSION,
        phase: Phase::Vqgan,
        config: config.clone(),
        schedule: None,
        latent_range,
        seed,
        step: tr.step,
        params,
        optimizers: vec![
            OptimizerState::capture("ae", &tr.opt_ae),
            OptimizerState::capture("disc", &tr.opt_disc),
        ],
    })
}

/// Train the VQ-GAN on every sample of `data` for `config.vqgan.steps`
/// steps. Deterministic in `seed`.
pub fn train_vqgan_phase<T: Scalar>(
    data: &Dataset<T>,
    config: &RunConfig,
    seed: u64,
    ckpt: CheckpointPlan<'_>,
) -> Result<(CheckpointBundle, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let model = VqGan::new(config.compression.clone())?;
    let mut tr = VqGanTrainer::<T>::new(&model, config.vqgan.loss.clone(), config.optimizer, seed);
    let mut plan = BatchPlan::new(data.len(), config.vqgan.batch_size, seed)?;
    let (mse0, _) = reconstruction_mse(&model, &tr.params, data)?;
    let mut lines = Vec::with_capacity(config.vqgan.steps);
    for _ in 0..config.vqgan.steps {
        let b = plan.next().expect("batch plan is endless");
        let rec = tr.train_step(&model, &batch_of(data, &b.indices)?)?;
        if tr.step % 100 == 0 {
            log::info!(
                "vqgan step {} L_rec {:.4} lambda {:.3}",
                rec.step,
                rec.rec,
                rec.lambda
            );
        }
        lines.push(rec.to_line());
        if ckpt.due(tr.step) {
            vqgan_bundle(&model, &tr, config, seed)?.save(ckpt.path.expect("due implies path"))?;
        }
    }
    let bundle = vqgan_bundle(&model, &tr, config, seed)?;
    if let Some(p) = ckpt.path {
        bundle.save(p)?;
    }
    let (mse, indices) = reconstruction_mse(&model, &tr.params, data)?;
    let used = codebook_usage(&indices, config.compression.codebook_size)
        .iter()
        .filter(|&&c| c > 0)
        .count();
    let report = TrainReport {
        phase: Phase::Vqgan,
        header: VqGanLossRecord::HEADER.to_string(),
        lines,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        final_metrics: vec![
            MetricRecord::new("recon_mse_initial", "train", mse0),
            MetricRecord::new("recon_mse_final", "train", mse),
            MetricRecord::new("codes_used", "train", used as f64),
        ],
    };
    Ok((bundle, report))
}

/// Frozen autoencoder restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct FrozenVqGan<T> {
    pub model: VqGan,
    pub params: ParamStore<T>,
    pub range: LatentRange,
}

impl<T: Scalar> FrozenVqGan<T> {
    pub fn from_bundle(b: &CheckpointBundle) -> Result<Self> {
        b.expect_phase(Phase::Vqgan)?;
        Ok(Self {
            model: VqGan::new(b.config.compression.clone())?,
            params: b.params.cast(),
            range: b.latent_range,
        })
    }

    /// Normalised latent `minmax(E(x))` in `[-1, 1]`.
    pub fn latent(&self, v: &Volume<T>) -> Result<Tensor<T>> {
        let z = self.model.encode(&self.params, &v.batched())?;
        minmax_map(&z, self.range, Direction::Forward)
    }

    /// Map a `[-1, 1]` latent back through the codebook and decoder.
    pub fn decode_normalized(&self, z: &Tensor<T>) -> Result<Volume<T>> {
        let z = minmax_map(z, self.range, Direction::Inverse)?;
        let q = quantize(&z, &self.model.codebook(&self.params)?)?;
        let x = self.model.decode(&self.params, &q.z_q)?;
        Volume::from_batched(&x, 0, [1.0; 3])
    }
}

fn sdm_bundle<T: Scalar>(
    params: &ParamStore<T>,
    opt: &Adam<T>,
    config: &RunConfig,
    schedule: &DiffusionSchedule,
    range: LatentRange,
    seed: u64,
    step: usize,
) -> CheckpointBundle {
    CheckpointBundle {
        version: CHECKPOINT_VERSION,
        phase: Phase::Sdm,
        config: config.clone(),
        schedule: Some(schedule.clone()),
        latent_range: range,
        seed,
        step,
        params: params.cast(),
        optimizers: vec![OptimizerState::capture("sdm", opt)],
    }
}

fn check_same_compression(config: &RunConfig, vq: &CheckpointBundle) -> Result<()> {
    if config.compression != vq.config.compression {
        return Err(Error::Config(
            "compression settings differ from those of the VQ-GAN checkpoint".into(),
        ));
    }
    Ok(())
}

/// Train the semantic denoiser on the latents of a frozen VQ-GAN. Every
/// sample must carry a semantic map.
pub fn train_sdm_phase<T: Scalar>(
    data: &Dataset<T>,
    vq: &CheckpointBundle,
    config: &RunConfig,
    seed: u64,
    ckpt: CheckpointPlan<'_>,
) -> Result<(CheckpointBundle, TrainReport)> {
    config.validate()?;
    check_same_compression(config, vq)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let maps = data.maps()?;
    let start = Instant::now();
    let frozen = FrozenVqGan::<T>::from_bundle(vq)?;
    let before = param_fingerprint(&frozen.params);

    // The encoder is frozen, so each sample's latent is fixed for the run.
    let latents = data
        .samples
        .iter()
        .map(|s| frozen.latent(&s.volume))
        .collect::<Result<Vec<_>>>()?;
    let schedule = build_cosine_schedule(config.diffusion.steps, config.diffusion.s)?;
    let denoiser = Denoiser::new(config.denoiser.clone())?;
    let mut params = denoiser.init_params::<T>(seed);
    let mut opt = Adam::new(config.optimizer, &params, &DENOISER_PREFIXES);
    let mut plan = BatchPlan::new(data.len(), config.diffusion.batch_size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1FF_0510);
    let trainable = Trainable::Prefixes(DENOISER_PREFIXES.iter().map(|s| s.to_string()).collect());

    let mut lines = Vec::with_capacity(config.diffusion.train_steps);
    let mut losses = Vec::with_capacity(config.diffusion.train_steps);
    for step in 0..config.diffusion.train_steps {
        let b = plan.next().expect("batch plan is endless");
        let mut zs = Vec::with_capacity(b.indices.len());
        let mut eps_all = Vec::with_capacity(b.indices.len());
        let mut ts = Vec::with_capacity(b.indices.len());
        for &i in &b.indices {
            let t = sample_timestep(&schedule, &mut rng);
            let eps = Tensor::randn(latents[i].shape(), &mut rng);
            zs.push(noise_with(&latents[i], schedule.alpha_bar(t), &eps)?);
            eps_all.push(eps);
            ts.push(t);
        }
        let bm: Vec<&SemanticMap> = b.indices.iter().map(|&i| maps[i]).collect();
        let mut g = Graph::with_trainable(trainable.clone());
        let z = g.constant(Tensor::stack(&zs)?);
        let eps = g.constant(Tensor::stack(&eps_all)?);
        let m = g.constant(one_hot_batch(&bm)?);
        let pred = denoiser.forward(&mut g, &params, z, &ts, m)?;
        let n = g.value(pred).len();
        let loss = g.sq_dist(pred, eps)?;
        let loss = g.scale(loss, T::one() / T::from_usize_lossy(n));
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("denoiser loss = {value}"),
            });
        }
        let grads = g.backward(loss)?;
        opt.update(&mut params, &grads)?;
        losses.push(value);
        lines.push(format!("{step},{value}"));
        if (step + 1) % 100 == 0 {
            log::info!("sdm step {} L_simple {:.5}", step + 1, value);
        }
        if ckpt.due(step + 1) {
            sdm_bundle(
                &params,
                &opt,
                config,
                &schedule,
                frozen.range,
                seed,
                step + 1,
            )
            .save(ckpt.path.expect("due implies path"))?;
        }
    }
    if param_fingerprint(&frozen.params) != before {
        return Err(Error::Numeric(
            "VQ-GAN parameters changed during denoiser training".into(),
        ));
    }
    let bundle = sdm_bundle(
        &params,
        &opt,
        config,
        &schedule,
        frozen.range,
        seed,
        config.diffusion.train_steps,
    );
    if let Some(p) = ckpt.path {
        bundle.save(p)?;
    }
    let tail = &losses[losses.len().saturating_sub(100)..];
    let mut final_metrics = Vec::new();
    if !tail.is_empty() {
        final_metrics.push(MetricRecord::new(
            "L_simple_last100",
            "train",
            tail.iter().sum::<f64>() / tail.len() as f64,
        ));
    }
    let head = &losses[..losses.len().min(100)];
    if !head.is_empty() {
        final_metrics.push(MetricRecord::new(
            "L_simple_first100",
            "train",
            head.iter().sum::<f64>() / head.len() as f64,
        ));
    }
    let report = TrainReport {
        phase: Phase::Sdm,
        header: "step,L_simple".into(),
        lines,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        final_metrics,
    };
    Ok((bundle, report))
}

/// A synthesized volume and decoded intermediate states `(t, volume)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis<T> {
    pub volume: Volume<T>,
    pub snapshots: Vec<(usize, Volume<T>)>,
}

/// Generate a volume for `map` using only the map: reverse diffusion in the
/// normalised latent space, inverse min-max, codebook lookup, decoding.
pub fn synthesize<T: Scalar>(
    map: &SemanticMap,
    vq: &CheckpointBundle,
    sdm: &CheckpointBundle,
    seed: u64,
    snapshot_every: Option<usize>,
) -> Result<Synthesis<T>> {
    sdm.expect_phase(Phase::Sdm)?;
    check_same_compression(&sdm.config, vq)?;
    let frozen = FrozenVqGan::<T>::from_bundle(vq)?;
    let schedule = sdm
        .schedule
        .as_ref()
        .ok_or_else(|| Error::Config("denoiser checkpoint has no schedule".into()))?;
    let denoiser = Denoiser::new(sdm.config.denoiser.clone())?;
    let params: ParamStore<T> = sdm.params.cast();
    let latent = frozen.model.config.latent_dims(map.dims)?;
    denoiser.config.check_latent_dims(latent)?;
    if map.num_classes != denoiser.config.num_classes {
        return Err(Error::Config(format!(
            "map has {} classes, denoiser expects {}",
            map.num_classes, denoiser.config.num_classes
        )));
    }
    let m = one_hot::<T>(map)?;
    let mut ms = vec![1];
    ms.extend_from_slice(m.shape());
    let m = m.reshape(&ms)?;
    let shape = [1, latent[0], latent[1], latent[2], frozen.model.config.n_z];
    let traj = sample_loop(
        &shape,
        |z, t| denoiser.predict_noise(&params, z, &[t], &m),
        schedule,
        seed,
        snapshot_every,
    )?;
    let volume = frozen.decode_normalized(&traj.latent)?;
    let snapshots = traj
        .snapshots
        .iter()
        .map(|(t, z)| Ok((*t, frozen.decode_normalized(z)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Synthesis { volume, snapshots })
}
