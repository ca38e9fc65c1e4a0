//! Set-level experiments built on trained checkpoints: batch synthesis, the
//! distribution-gap comparison against a noise baseline, paired image
//! metrics and the segmentation faithfulness check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{synthesize, CheckpointBundle};
use crate::error::{Error, Result};
use crate::metrics::{
    extract_features, faithfulness_harness, frechet_distance, rmse_psnr, ssim, FeatureExtractor,
    HarnessReport, LabeledSet, MetricRecord, Provenance, SegHarnessConfig,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume_io::{Dataset, SemanticMap, Volume};

/// One synthetic volume per map; map `i` uses seed `seed + i`.
pub fn synthesize_set<T: Scalar>(
    maps: &[&SemanticMap],
    vq: &CheckpointBundle,
    sdm: &CheckpointBundle,
    seed: u64,
) -> Result<Vec<Volume<T>>> {
    maps.iter()
        .enumerate()
        .map(|(i, m)| {
            log::info!("synthesizing {}/{}", i + 1, maps.len());
            Ok(synthesize::<T>(m, vq, sdm, seed.wrapping_add(i as u64), None)?.volume)
        })
        .collect()
}

/// `n` volumes of i.i.d. uniform noise on `[-1, 1]`, the intensity range of
/// preprocessed data.
pub fn noise_volumes<T: Scalar>(
    n: usize,
    dims: [usize; 3],
    channels: usize,
    seed: u64,
) -> Result<Vec<Volume<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = Tensor::from_fn(&[dims[0], dims[1], dims[2], channels], |_| {
                T::lit(rng.gen_range(-1.0..=1.0))
            });
            Volume::new(t, [1.0; 3])
        })
        .collect()
}

/// Fréchet distances of the synthetic and noise sets to the real set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionGap {
    pub synthetic: f64,
    pub noise: f64,
}

impl DistributionGap {
    /// How many times closer the synthetic set is than the noise set.
    pub fn ratio(&self) -> f64 {
        self.noise / self.synthetic
    }
}

pub fn distribution_gap<T: Scalar>(
    real: &[Volume<T>],
    synthetic: &[Volume<T>],
    noise: &[Volume<T>],
    extractor: &FeatureExtractor,
) -> Result<DistributionGap> {
    let r = extract_features(real, extractor)?;
    let s = extract_features(synthetic, extractor)?;
    let n = extract_features(noise, extractor)?;
    Ok(DistributionGap {
        synthetic: frechet_distance(&s, &r)?,
        noise: frechet_distance(&n, &r)?,
    })
}

/// Mean RMSE, PSNR and SSIM over `(real, synthetic)` pairs built from the
/// same map.
pub fn paired_metrics<T: Scalar>(
    real: &[Volume<T>],
    synthetic: &[Volume<T>],
    peak: f64,
) -> Result<Vec<MetricRecord>> {
    if real.len() != synthetic.len() || real.is_empty() {
        return Err(Error::Data(format!(
            "{} real vs {} synthetic volumes",
            real.len(),
            synthetic.len()
        )));
    }
    let (mut rmse, mut psnr, mut ss) = (0.0, 0.0, 0.0);
    for (a, b) in real.iter().zip(synthetic) {
        let (r, p) = rmse_psnr(a, b, peak)?;
        rmse += r;
        psnr += p;
        ss += ssim(a, b)?;
    }
    let n = real.len() as f64;
    Ok(vec![
        MetricRecord::new("rmse", "synthetic", rmse / n),
        MetricRecord::new("psnr", "synthetic", psnr / n),
        MetricRecord::new("ssim", "synthetic", ss / n),
    ])
}

fn labeled<T: Scalar>(data: &Dataset<T>, provenance: Provenance) -> Result<LabeledSet<T>> {
    let items = data
        .samples
        .iter()
        .map(|s| {
            let m = s
                .map
                .clone()
                .ok_or_else(|| Error::Data(format!("entry `{}` has no semantic map", s.id)))?;
            Ok((s.volume.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSet::new(provenance, items))
}

/// Train the segmenter on `train`, then score `train`, `test` and the
/// synthetic volumes paired with the test maps they were generated from.
pub fn faithfulness_run<T: Scalar>(
    train: &Dataset<T>,
    test: &Dataset<T>,
    synthetic: &[Volume<T>],
    config: &SegHarnessConfig,
    seed: u64,
) -> Result<HarnessReport> {
    let test_set = labeled(test, Provenance::RealTest)?;
    if synthetic.len() != test_set.items.len() {
        return Err(Error::Data(format!(
            "{} synthetic volumes for {} test maps",
            synthetic.len(),
            test_set.items.len()
        )));
    }
    let synth = LabeledSet::new(
        Provenance::Synthetic,
        synthetic
            .iter()
            .cloned()
            .zip(test_set.items.iter().map(|(_, m)| m.clone()))
            .collect(),
    );
    faithfulness_harness(
        &labeled(train, Provenance::RealTrain)?,
        &test_set,
        &synth,
        config,
        seed,
    )
}
