//! Mask-faithfulness harness: a small 3D U-Net trained on real scans only,
//! then scored by Dice on real and synthetic sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Conv3d, ConvTranspose3d, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume_io::{one_hot_batch, BatchPlan, SemanticMap, Volume};

use super::dice;

const LEAKY_SLOPE: f64 = 0.01;
const DICE_SMOOTH: f64 = 1e-5;

/// Where a set of labeled volumes came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RealTrain,
    RealTest,
    Synthetic,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::RealTrain => "real-train",
            Provenance::RealTest => "real-test",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// Volumes paired with their maps, tagged with a provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet<T> {
    pub provenance: Provenance,
    pub items: Vec<(Volume<T>, SemanticMap)>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn new(provenance: Provenance, items: Vec<(Volume<T>, SemanticMap)>) -> Self {
        Self { provenance, items }
    }

    fn num_classes(&self) -> Option<usize> {
        self.items.first().map(|(_, m)| m.num_classes)
    }
}

/// Learning rate used by [`SegHarnessConfig::desk`].
pub const DESK_SEG_LR: f64 = 1e-3;

/// Segmentation network and its training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegHarnessConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// Channel width per U-Net level.
    pub widths: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch: [usize; 3],
}

impl Default for SegHarnessConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            in_channels: 1,
            kernel: 3,
            widths: vec![8, 16],
            lr: 5e-5,
            epochs: 10,
            batch_size: 4,
            patch: [64, 64, 64],
        }
    }
}

impl SegHarnessConfig {
    /// Small-dataset setting: the patch shrunk to the volume and the
    /// learning rate raised to [`DESK_SEG_LR`], since a few dozen volumes
    /// give too few steps per epoch for the default rate to converge.
    pub fn desk(num_classes: usize, patch: [usize; 3]) -> Self {
        Self {
            num_classes,
            patch,
            lr: DESK_SEG_LR,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, msg: &str| {
            Err(Error::Range {
                key: format!("seg.{key}"),
                msg: msg.into(),
            })
        };
        if self.num_classes < 2 {
            return range("num_classes", "must be >= 2");
        }
        if self.kernel % 2 == 0 {
            return range("kernel", "must be odd");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return range("widths", "need at least one positive width");
        }
        if self.batch_size == 0 || self.in_channels == 0 {
            return range("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0) {
            return range("lr", "must be > 0");
        }
        Ok(())
    }
}

/// 3D U-Net: two convolutions per level with instance normalization and
/// leaky ReLU, strided downsampling, transposed-convolution upsampling.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub config: SegHarnessConfig,
    enc: Vec<[Conv3d; 2]>,
    up: Vec<ConvTranspose3d>,
    dec: Vec<[Conv3d; 2]>,
    head: Conv3d,
}

impl SegNet {
    pub fn new(config: SegHarnessConfig) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let k = config.kernel;
        let same = ConvGeom::cube(k, 1, k / 2);
        let enc = (0..w.len())
            .map(|i| {
                let first = if i == 0 {
                    Conv3d::new("seg.enc0.a", config.in_channels, w[0], same)
                } else {
                    Conv3d::new(
                        format!("seg.enc{i}.a"),
                        w[i - 1],
                        w[i],
                        ConvGeom::cube(k, 2, k / 2),
                    )
                };
                [
                    first,
                    Conv3d::new(format!("seg.enc{i}.b"), w[i], w[i], same),
                ]
            })
            .collect();
        let up = (1..w.len())
            .map(|i| ConvTranspose3d::doubling(format!("seg.up{i}"), w[i], w[i - 1]))
            .collect();
        let dec = (0..w.len().saturating_sub(1))
            .map(|i| {
                [
                    Conv3d::new(format!("seg.dec{i}.a"), 2 * w[i], w[i], same),
                    Conv3d::new(format!("seg.dec{i}.b"), w[i], w[i], same),
                ]
            })
            .collect();
        let head = Conv3d::new(
            "seg.head",
            w[0],
            config.num_classes,
            ConvGeom::cube(1, 1, 0),
        );
        Ok(Self {
            config,
            enc,
            up,
            dec,
            head,
        })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        for c in self.enc.iter().chain(&self.dec).flatten() {
            c.init(&mut ps, &mut rng);
        }
        for u in &self.up {
            u.init(&mut ps, &mut rng);
        }
        self.head.init(&mut ps, &mut rng);
        ps
    }

    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        convs: &[Conv3d; 2],
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for c in convs {
            h = c.forward(g, ps, h)?;
            h = g.group_norm(h, c.cout)?;
            h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
        }
        Ok(h)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.config.widths.len() - 1);
        if dims.iter().any(|&d| d % f != 0) {
            return Err(Error::shape(format!(
                "segmentation input {dims:?} must be divisible by {f}"
            )));
        }
        Ok(())
    }

    /// Class logits `[N, H, W, L, K]`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[4] != self.config.in_channels {
            return Err(Error::shape(format!("segmentation input {s:?}")));
        }
        self.check_dims([s[1], s[2], s[3]])?;
        let mut skips = Vec::new();
        let mut h = x;
        for convs in &self.enc {
            h = self.block(g, ps, convs, h)?;
            skips.push(h);
        }
        for i in (0..self.dec.len()).rev() {
            h = self.up[i].forward(g, ps, h)?;
            h = g.concat(h, skips[i])?;
            h = self.block(g, ps, &self.dec[i], h)?;
        }
        self.head.forward(g, ps, h)
    }

    /// Soft Dice loss plus voxel-wise cross-entropy.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        logits: Var,
        target_one_hot: Var,
    ) -> Result<Var> {
        let ls = g.log_softmax(logits);
        let voxels = g.value(ls).len() / self.config.num_classes;
        let picked = g.mul(ls, target_one_hot)?;
        let ce = g.sum(picked);
        let ce = g.scale(ce, -T::one() / T::from_usize_lossy(voxels));

        let p = g.exp(ls);
        let pg = g.mul(p, target_one_hot)?;
        let inter = g.sum_spatial(pg);
        let sp = g.sum_spatial(p);
        let sg = g.sum_spatial(target_one_hot);
        let num = g.scale(inter, T::lit(2.0));
        let num = g.add_scalar(num, T::lit(DICE_SMOOTH));
        let den = g.add(sp, sg)?;
        let den = g.add_scalar(den, T::lit(DICE_SMOOTH));
        let d = g.div(num, den)?;
        let d = g.mean(d);
        let dice_loss = g.scale(d, -T::one());
        let dice_loss = g.add_scalar(dice_loss, T::one());
        g.add(ce, dice_loss)
    }

    /// Arg-max label map for one volume.
    pub fn predict<T: Scalar>(&self, ps: &ParamStore<T>, v: &Volume<T>) -> Result<SemanticMap> {
        let mut g = Graph::inference();
        let x = g.constant(v.batched());
        let l = self.logits(&mut g, ps, x)?;
        let k = self.config.num_classes;
        let labels = g
            .value(l)
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect();
        SemanticMap::new(v.dims(), labels, k)
    }
}

/// Random crop of a volume/map pair to `patch` (whole axis when smaller).
fn crop<T: Scalar, R: Rng>(
    v: &Volume<T>,
    m: &SemanticMap,
    patch: [usize; 3],
    rng: &mut R,
) -> Result<(Tensor<T>, SemanticMap)> {
    let d = v.dims();
    let c = v.channels();
    let size = [patch[0].min(d[0]), patch[1].min(d[1]), patch[2].min(d[2])];
    if size == d {
        return Ok((v.data.clone(), m.clone()));
    }
    let off: Vec<usize> = (0..3).map(|a| rng.gen_range(0..=d[a] - size[a])).collect();
    let mut data = Vec::with_capacity(size.iter().product::<usize>() * c);
    let mut labels = Vec::with_capacity(size.iter().product());
    for i in 0..size[0] {
        for j in 0..size[1] {
            for k in 0..size[2] {
                let (x, y, z) = (i + off[0], j + off[1], k + off[2]);
                let base = ((x * d[1] + y) * d[2] + z) * c;
                data.extend_from_slice(&v.data.data()[base..base + c]);
                labels.push(m.get(x, y, z));
            }
        }
    }
    Ok((
        Tensor::new(vec![size[0], size[1], size[2], c], data)?,
        SemanticMap::new(size, labels, m.num_classes)?,
    ))
}

/// Training state of the segmentation network.
#[derive(Debug, Clone)]
pub struct SegTrainer<T> {
    pub net: SegNet,
    pub params: ParamStore<T>,
    opt: Adam<T>,
    rng: ChaCha8Rng,
    /// Provenance of every batch seen so far.
    pub provenance_log: Vec<Provenance>,
    pub losses: Vec<f64>,
}

impl<T: Scalar> SegTrainer<T> {
    pub fn new(config: SegHarnessConfig, seed: u64) -> Result<Self> {
        let net = SegNet::new(config)?;
        let params = net.init_params(seed);
        let adam = AdamConfig {
            lr: net.config.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            opt: Adam::new(adam, &params, &["seg."]),
            params,
            net,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE),
            provenance_log: Vec::new(),
            losses: Vec::new(),
        })
    }

    /// One update on items `indices` of `set`; refuses anything but real
    /// training data.
    pub fn step(&mut self, set: &LabeledSet<T>, indices: &[usize]) -> Result<f64> {
        self.provenance_log.push(set.provenance);
        if set.provenance != Provenance::RealTrain {
            return Err(Error::Data(format!(
                "segmentation training received a {} batch",
                set.provenance.label()
            )));
        }
        let mut xs = Vec::with_capacity(indices.len());
        let mut maps = Vec::with_capacity(indices.len());
        for &i in indices {
            let (v, m) = &set.items[i];
            let (x, pm) = crop(v, m, self.net.config.patch, &mut self.rng)?;
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            xs.push(x.reshape(&s)?);
            maps.push(pm);
        }
        let refs: Vec<&SemanticMap> = maps.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack(&xs)?);
        let y = g.constant(one_hot_batch(&refs)?);
        let logits = self.net.logits(&mut g, &self.params, x)?;
        let loss = self.net.loss(&mut g, logits, y)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.losses.len(),
                msg: format!("segmentation loss = {value}"),
            });
        }
        let grads = g.backward(loss)?;
        self.opt.update(&mut self.params, &grads)?;
        self.losses.push(value);
        Ok(value)
    }

    /// `epochs` passes over `set` in seeded shuffled batches.
    pub fn fit(&mut self, set: &LabeledSet<T>, seed: u64) -> Result<()> {
        let plan = BatchPlan::new(set.items.len(), self.net.config.batch_size, seed)?;
        let steps = plan.batches_per_epoch() * self.net.config.epochs;
        for batch in plan.take(steps) {
            self.step(set, &batch.indices)?;
        }
        Ok(())
    }

    /// Mean over items of the foreground-class Dice.
    pub fn evaluate(&self, set: &LabeledSet<T>) -> Result<f64> {
        if set.items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for (v, m) in &set.items {
            let pred = self.net.predict(&self.params, v)?;
            total += dice(&pred, m)?.foreground_mean;
        }
        Ok(total / set.items.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceTable {
    pub real_train: f64,
    pub real_test: f64,
    pub synthetic: f64,
}

#[derive(Debug, Clone)]
pub struct HarnessReport {
    pub table: DiceTable,
    pub losses: Vec<f64>,
    pub provenance_log: Vec<Provenance>,
}

/// Train on `real_train` only, then score all three sets.
pub fn faithfulness_harness<T: Scalar>(
    real_train: &LabeledSet<T>,
    real_test: &LabeledSet<T>,
    synthetic: &LabeledSet<T>,
    config: &SegHarnessConfig,
    seed: u64,
) -> Result<HarnessReport> {
    for set in [real_train, real_test, synthetic] {
        if set.items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(k) = set.num_classes() {
            if k != config.num_classes || set.items.iter().any(|(_, m)| m.num_classes != k) {
                return Err(Error::Config(format!(
                    "{} set has {k}-class maps, harness expects {}",
                    set.provenance.label(),
                    config.num_classes
                )));
            }
        }
    }
    let mut trainer = SegTrainer::<T>::new(config.clone(), seed)?;
    trainer.fit(real_train, seed)?;
    let table = DiceTable {
        real_train: trainer.evaluate(real_train)?,
        real_test: trainer.evaluate(real_test)?,
        synthetic: trainer.evaluate(synthetic)?,
    };
    log::info!(
        "faithfulness Dice: real-train {:.4}, real-test {:.4}, synthetic {:.4}",
        table.real_train,
        table.real_test,
        table.synthetic
    );
    Ok(HarnessReport {
        table,
        losses: trainer.losses,
        provenance_log: trainer.provenance_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::{generate_toy_samples, preprocess, ToyParams};

    fn toy_set(n: usize, seed: u64, prov: Provenance) -> LabeledSet<f32> {
        let p = ToyParams {
            n,
            shape: [16, 16, 4],
            num_classes: 3,
            seed,
            n_test: 0,
        };
        let items = generate_toy_samples(&p)
            .unwrap()
            .into_iter()
            .map(|(_, _, v, m)| (preprocess(&v, [16, 16, 4]).unwrap(), m))
            .collect();
        LabeledSet::new(prov, items)
    }

    fn quick() -> SegHarnessConfig {
        SegHarnessConfig {
            num_classes: 3,
            widths: vec![4, 8],
            epochs: 2,
            batch_size: 2,
            patch: [16, 16, 4],
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_mirror_reference_settings() {
        let c = SegHarnessConfig::default();
        assert_eq!(
            (
                c.num_classes,
                c.in_channels,
                c.kernel,
                c.batch_size,
                c.epochs
            ),
            (2, 1, 3, 4, 10)
        );
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.patch, [64, 64, 64]);
    }

    #[test]
    fn loss_is_low_for_confident_correct_logits() {
        let net = SegNet::new(SegHarnessConfig {
            num_classes: 2,
            ..quick()
        })
        .unwrap();
        let mut g = Graph::<f64>::new();
        let target = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let good =
            g.constant(Tensor::new(vec![1, 1, 1, 2, 2], vec![20.0, -20.0, -20.0, 20.0]).unwrap());
        let bad =
            g.constant(Tensor::new(vec![1, 1, 1, 2, 2], vec![-20.0, 20.0, 20.0, -20.0]).unwrap());
        let t = g.constant(target);
        let lg = net.loss(&mut g, good, t).unwrap();
        let lb = net.loss(&mut g, bad, t).unwrap();
        assert!(g.value(lg).item() < 1e-6);
        assert!(g.value(lb).item() > 10.0);
    }

    #[test]
    fn training_rejects_foreign_provenance() {
        let mut tr = SegTrainer::<f32>::new(quick(), 0).unwrap();
        let test = toy_set(2, 1, Provenance::RealTest);
        assert!(matches!(tr.step(&test, &[0]), Err(Error::Data(_))));
    }

    #[test]
    fn aliasing_and_isolation() {
        let train = toy_set(4, 1, Provenance::RealTrain);
        let test = toy_set(2, 2, Provenance::RealTest);
        let alias = LabeledSet {
            provenance: Provenance::Synthetic,
            ..test.clone()
        };
        let r = faithfulness_harness(&train, &test, &alias, &quick(), 3).unwrap();
        assert_eq!(r.table.synthetic, r.table.real_test);
        assert!(r.provenance_log.iter().all(|&p| p == Provenance::RealTrain));
        assert_eq!(r.provenance_log.len(), 4);
        let again = faithfulness_harness(&train, &test, &alias, &quick(), 3).unwrap();
        assert_eq!(r.table, again.table);
    }

    #[test]
    fn class_count_mismatch_is_an_error() {
        let train = toy_set(2, 1, Provenance::RealTrain);
        let test = toy_set(2, 2, Provenance::RealTest);
        let cfg = SegHarnessConfig {
            num_classes: 2,
            ..quick()
        };
        assert!(matches!(
            faithfulness_harness(&train, &test, &test, &cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn crops_respect_patch() {
        let set = toy_set(1, 4, Provenance::RealTrain);
        let (v, m) = &set.items[0];
        let (x, pm) = crop(v, m, [8, 8, 64], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x.shape(), &[8, 8, 4, 1]);
        assert_eq!(pm.dims, [8, 8, 4]);
    }
}
