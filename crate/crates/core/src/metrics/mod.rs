//! Image-quality metrics, Fréchet distance over volumetric features, Dice
//! overlap and the segmentation-based faithfulness harness.

mod seg;

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeom, Graph};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume_io::{SemanticMap, Volume};

pub use seg::{
    faithfulness_harness, DiceTable, HarnessReport, LabeledSet, Provenance, SegHarnessConfig,
    SegNet, SegTrainer, DESK_SEG_LR,
};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape<T: Scalar>(a: &Volume<T>, b: &Volume<T>) -> Result<()> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::shape(format!(
            "{:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    Ok(())
}

/// `(rmse, psnr)` with `psnr = 20 log10(peak / rmse)`, capped at 99 dB.
pub fn rmse_psnr<T: Scalar>(a: &Volume<T>, b: &Volume<T>, peak: f64) -> Result<(f64, f64)> {
    same_shape(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Range {
            key: "peak".into(),
            msg: format!("must be > 0, got {peak}"),
        });
    }
    let n = a.data.len() as f64;
    let mse = a
        .data
        .data()
        .iter()
        .zip(b.data.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    let rmse = mse.sqrt();
    let psnr = if rmse == 0.0 {
        PSNR_CAP
    } else {
        (20.0 * (peak / rmse).log10()).min(PSNR_CAP)
    };
    Ok((rmse, psnr))
}

/// Normalized 2D Gaussian window of side `size`.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Mean over depth slices (and channels) of 2D SSIM computed with a
/// Gaussian-weighted 7x7 window over all valid window positions. Inputs in
/// `[-1, 1]` are mapped to `[0, 1]` first.
pub fn ssim<T: Scalar>(a: &Volume<T>, b: &Volume<T>) -> Result<f64> {
    same_shape(a, b)?;
    let [h, w, l] = a.dims();
    let c = a.channels();
    let win = SSIM_WINDOW.min(h).min(w);
    if win < SSIM_WINDOW {
        log::warn!("SSIM window shrunk from {SSIM_WINDOW} to {win} for a {h}x{w} slice");
    }
    let kernel = gaussian_window(win, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let px = |t: &Tensor<T>, i: usize, j: usize, k: usize, ch: usize| {
        (t.data()[((i * w + j) * l + k) * c + ch].as_f64() + 1.0) / 2.0
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..l {
        for ch in 0..c {
            for i0 in 0..=h - win {
                for j0 in 0..=w - win {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for di in 0..win {
                        for dj in 0..win {
                            let wt = kernel[di * win + dj];
                            let x = px(&a.data, i0 + di, j0 + dj, k, ch);
                            let y = px(&b.data, i0 + di, j0 + dj, k, ch);
                            ma += wt * x;
                            mb += wt * y;
                            saa += wt * x * x;
                            sbb += wt * y * y;
                            sab += wt * (x * y);
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-class Dice and the mean over classes present in the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    pub per_class: Vec<f64>,
    /// Mean over classes present in `gt` (background included).
    pub mean: f64,
    /// Mean over foreground classes present in `gt`; 1.0 if there are none.
    pub foreground_mean: f64,
}

/// `2 |P_c & G_c| / (|P_c| + |G_c|)` per class, 1.0 when both are empty.
pub fn dice(pred: &SemanticMap, gt: &SemanticMap) -> Result<DiceScores> {
    if pred.dims != gt.dims || pred.num_classes != gt.num_classes {
        return Err(Error::shape(format!(
            "dice: {:?}/{} classes vs {:?}/{} classes",
            pred.dims, pred.num_classes, gt.dims, gt.num_classes
        )));
    }
    let k = gt.num_classes;
    let (mut inter, mut np, mut ng) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            if np[c] + ng[c] == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / (np[c] + ng[c]) as f64
            }
        })
        .collect();
    let avg = |from: usize| {
        let present: Vec<f64> = (from..k)
            .filter(|&c| ng[c] > 0)
            .map(|c| per_class[c])
            .collect();
        if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    Ok(DiceScores {
        mean: avg(0),
        foreground_mean: avg(1),
        per_class,
    })
}

/// Where feature-extractor weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtractorKind {
    FixedRandom { seed: u64 },
    Trained,
    External,
}

/// Volumetric feature network: strided 3D convolutions with leaky ReLU, then
/// global average pooling to `dim` features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub kind: ExtractorKind,
    convs: Vec<Conv3d>,
    pub params: ParamStore<f64>,
    pub dim: usize,
}

impl FeatureExtractor {
    pub const DEFAULT_DIM: usize = 64;

    fn architecture(in_channels: usize, dim: usize) -> Vec<Conv3d> {
        vec![
            Conv3d::new("fx.conv0", in_channels, 16, ConvGeom::cube(3, 2, 1)),
            Conv3d::new("fx.conv1", 16, 32, ConvGeom::cube(3, 2, 1)),
            Conv3d::new("fx.conv2", 32, dim, ConvGeom::cube(3, 1, 1)),
        ]
    }

    pub fn fixed_random(seed: u64, in_channels: usize) -> Self {
        let convs = Self::architecture(in_channels, Self::DEFAULT_DIM);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for c in &convs {
            c.init(&mut params, &mut rng);
        }
        Self {
            kind: ExtractorKind::FixedRandom { seed },
            convs,
            params,
            dim: Self::DEFAULT_DIM,
        }
    }

    /// Same architecture with externally supplied weights (`fx.conv{0,1,2}.{w,b}`).
    pub fn with_params(
        kind: ExtractorKind,
        in_channels: usize,
        params: ParamStore<f64>,
    ) -> Result<Self> {
        let dim = params.get("fx.conv2.b")?.len();
        if dim < 2 {
            return Err(Error::Config("feature dimension must be >= 2".into()));
        }
        let convs = Self::architecture(in_channels, dim);
        for c in &convs {
            let want = [
                c.geom.kernel[0],
                c.geom.kernel[1],
                c.geom.kernel[2],
                c.cin,
                c.cout,
            ];
            if params.get(&c.weight_name())?.shape() != want {
                return Err(Error::shape(format!(
                    "{} must be {want:?}",
                    c.weight_name()
                )));
            }
        }
        Ok(Self {
            kind,
            convs,
            params,
            dim,
        })
    }

    /// One `dim`-vector per volume.
    pub fn features<T: Scalar>(&self, v: &Volume<T>) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let mut h = g.constant(v.batched().cast::<f64>());
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&mut g, &self.params, h)?;
            if i + 1 < self.convs.len() {
                h = g.leaky_relu(h, 0.2);
            }
        }
        let sites = (g.value(h).len() / self.dim) as f64;
        let pooled = g.sum_spatial(h);
        Ok(g.value(pooled).data().iter().map(|v| v / sites).collect())
    }
}

/// Mean and covariance (n - 1 denominator) of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianSummary {
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "need at least 2 feature vectors, got {n}"
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape(
                "feature vectors of unequal length".to_string(),
            ));
        }
        // Shifted by the first row so identical rows give an exactly zero covariance.
        let origin = DVector::from_column_slice(&rows[0]);
        let mut offset = DVector::zeros(d);
        for r in rows {
            offset += DVector::from_column_slice(r) - &origin;
        }
        let mean = &origin + offset / n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let x = DVector::from_column_slice(r) - &mean;
            cov += &x * x.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov, n })
    }
}

pub fn extract_features<T: Scalar>(
    volumes: &[Volume<T>],
    extractor: &FeatureExtractor,
) -> Result<GaussianSummary> {
    if volumes.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 volumes, got {}",
            volumes.len()
        )));
    }
    let rows = volumes
        .iter()
        .map(|v| extractor.features(v))
        .collect::<Result<Vec<_>>>()?;
    GaussianSummary::from_features(&rows)
}

const PSD_TOLERANCE: f64 = 1e-6;

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clipped at zero (beyond tolerance they are an error).
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig
        .eigenvalues
        .iter()
        .find(|&&v| v < -PSD_TOLERANCE * scale)
    {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite (eigenvalue {bad})"
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `||mu_p - mu_q||^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2))`, clamped at 0.
/// The trace of the cross term is taken as `tr((R S_q R)^(1/2))` with
/// `R = S_p^(1/2)`, which has the same eigenvalues and is symmetric.
pub fn frechet_distance(p: &GaussianSummary, q: &GaussianSummary) -> Result<f64> {
    if p.mean.len() != q.mean.len() || p.cov.shape() != q.cov.shape() {
        return Err(Error::shape(format!(
            "feature dims {} vs {}",
            p.mean.len(),
            q.mean.len()
        )));
    }
    let root_p = psd_sqrt(&p.cov, "first covariance")?;
    psd_sqrt(&q.cov, "second covariance")?;
    let inner = &root_p * &q.cov * &root_p;
    let cross = psd_sqrt(&inner, "covariance product")?.trace();
    let d = (&p.mean - &q.mean).norm_squared() + p.cov.trace() + q.cov.trace() - 2.0 * cross;
    if d < -PSD_TOLERANCE {
        return Err(Error::Numeric(format!(
            "Fréchet distance came out negative ({d})"
        )));
    }
    Ok(d.max(0.0))
}

/// One `metric,dataset,value` record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub metric: String,
    pub dataset: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(metric: impl Into<String>, dataset: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            dataset: dataset.into(),
            value,
        }
    }
}

pub fn summary_text(records: &[MetricRecord]) -> String {
    let mut s = String::from("metric,dataset,value\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.metric, r.dataset, r.value));
    }
    s
}

pub fn write_summary(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    crate::volume_io::atomic_write(path.as_ref(), summary_text(records).as_bytes())
}

pub fn parse_summary(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Data(format!("summary line `{l}` needs 3 fields")));
            }
            let value = f[2]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad value in `{l}`")))?;
            Ok(MetricRecord::new(f[0], f[1], value))
        })
        .collect()
}
