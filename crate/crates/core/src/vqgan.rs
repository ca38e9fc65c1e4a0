//! Perceptual compression stage: 3D encoder, codebook quantization with a
//! straight-through gradient, decoder, 2D/3D patch discriminators, a fixed
//! slice-wise feature network, and the composite training objective.
//!
//! Parameter paths: `enc.*`, `dec.*`, `codebook`, `d2d.*`, `d3d.*`. The
//! perceptual feature network lives in its own store and is never trained.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Trainable, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Conv3d, ConvTranspose3d, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerical-stability constant in the adaptive adversarial weight.
pub const LAMBDA_DELTA: f64 = 1e-6;
/// Upper clamp of the adaptive adversarial weight.
pub const LAMBDA_MAX: f64 = 1e4;

const LEAKY_SLOPE: f64 = 0.2;

/// Architecture of the autoencoder and its codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    /// Spatial compression factor; a power of two.
    pub t: usize,
    pub n_z: usize,
    #[serde(rename = "K")]
    pub codebook_size: usize,
    pub base_channels: usize,
    pub num_groups: usize,
    /// Residual blocks at the latent resolution, in both encoder and decoder.
    pub res_blocks: usize,
    pub in_channels: usize,
    pub disc_channels: usize,
    /// Widths of the fixed slice-wise feature network.
    pub perceptual_channels: Vec<usize>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            t: 2,
            n_z: 8,
            codebook_size: 512,
            base_channels: 16,
            num_groups: 4,
            res_blocks: 1,
            in_channels: 1,
            disc_channels: 8,
            perceptual_channels: vec![8, 8],
        }
    }
}

impl CompressionConfig {
    /// The full-scale setting: t = 4, K = 16384, n_z = 8.
    pub fn full_scale() -> Self {
        Self {
            t: 4,
            n_z: 8,
            codebook_size: 16384,
            base_channels: 32,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.t.trailing_zeros() as usize
    }

    /// Channel width after `i` downsampling steps.
    pub fn width(&self, i: usize) -> usize {
        self.base_channels << i.min(2)
    }

    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, msg: &str| {
            Err(Error::Range {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.t == 0 || !self.t.is_power_of_two() {
            return range("compression.t", "must be a power of two >= 1");
        }
        if self.codebook_size < 2 {
            return range("compression.K", "codebook needs K >= 2");
        }
        if self.n_z == 0 {
            return range("compression.n_z", "must be >= 1");
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.disc_channels == 0 {
            return range("compression.base_channels", "channel counts must be >= 1");
        }
        for i in 0..=self.levels() {
            if self.num_groups == 0 || self.width(i) % self.num_groups != 0 {
                return range(
                    "compression.num_groups",
                    &format!(
                        "must divide every encoder width (width {} at level {i})",
                        self.width(i)
                    ),
                );
            }
        }
        Ok(())
    }

    /// Latent spatial dims for a volume of `dims`.
    pub fn latent_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        if dims.iter().any(|&d| d == 0 || d % self.t != 0) {
            return Err(Error::shape(format!(
                "volume dims {dims:?} must be divisible by the compression factor t = {}",
                self.t
            )));
        }
        Ok([dims[0] / self.t, dims[1] / self.t, dims[2] / self.t])
    }
}

/// Loss weights and schedule of the autoencoder phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqGanLossConfig {
    /// Weight of the perceptual term.
    pub perceptual_weight: f64,
    /// Multiplier on the adaptive adversarial weight; 0 disables the GAN.
    pub disc_weight: f64,
    /// First step at which adversarial terms are active.
    pub disc_start: usize,
    /// Depth slices shown to the 2D discriminator per volume per step.
    pub slices_per_step: usize,
    pub perceptual_seed: u64,
}

impl Default for VqGanLossConfig {
    fn default() -> Self {
        Self {
            perceptual_weight: 1.0,
            disc_weight: 1.0,
            disc_start: 0,
            slices_per_step: 2,
            perceptual_seed: 1234,
        }
    }
}

/// `K x n_z` table of code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub entries: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(entries: Tensor<T>) -> Result<Self> {
        if entries.rank() != 2 {
            return Err(Error::shape(format!(
                "codebook must be K x n_z, got {:?}",
                entries.shape()
            )));
        }
        if entries.shape()[0] == 0 {
            return Err(Error::Config("empty codebook".into()));
        }
        if !entries.all_finite() {
            return Err(Error::Domain("codebook has non-finite entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Index of the nearest entry (squared Euclidean), lowest index on ties.
    pub fn nearest(&self, v: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for k in 0..self.len() {
            let d: T = self
                .row(k)
                .iter()
                .zip(v)
                .map(|(&a, &b)| (b - a) * (b - a))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Output of [`quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult<T> {
    pub z_q: Tensor<T>,
    /// One index per latent site, in row-major site order.
    pub indices: Vec<usize>,
    /// `||sg[z_hat] - z_q||^2`
    pub codebook_term: T,
    /// `||sg[z_q] - z_hat||^2`
    pub commitment_term: T,
}

/// Snap every `n_z`-vector of `z_hat` (trailing axis) to its nearest
/// codebook entry.
pub fn quantize<T: Scalar>(
    z_hat: &Tensor<T>,
    codebook: &Codebook<T>,
) -> Result<QuantizationResult<T>> {
    if codebook.is_empty() {
        return Err(Error::Config("empty codebook".into()));
    }
    let d = codebook.dim();
    if z_hat.channels() != d {
        return Err(Error::shape(format!(
            "latent has {} channels, codebook entries have {d}",
            z_hat.channels()
        )));
    }
    let mut zq = Vec::with_capacity(z_hat.len());
    let mut indices = Vec::with_capacity(z_hat.len() / d);
    let mut term = T::zero();
    for site in z_hat.data().chunks(d) {
        let k = codebook.nearest(site);
        indices.push(k);
        for (&a, &b) in site.iter().zip(codebook.row(k)) {
            term += (a - b) * (a - b);
            zq.push(b);
        }
    }
    Ok(QuantizationResult {
        z_q: Tensor::new(z_hat.shape().to_vec(), zq)?,
        indices,
        codebook_term: term,
        commitment_term: term,
    })
}

/// Differentiable quantization inside a graph. Returns the straight-through
/// latent (value `z_q`, gradient passed to `z_hat` unchanged), the codebook
/// and commitment terms, and the chosen indices.
pub fn quantize_graph<T: Scalar>(
    g: &mut Graph<T>,
    z_hat: Var,
    codebook: Var,
) -> Result<(Var, Var, Var, Vec<usize>)> {
    let cb = Codebook::new(g.value(codebook).clone())?;
    let q = quantize(g.value(z_hat), &cb)?;
    let shape = g.shape(z_hat).to_vec();
    let zq_st = g.straight_through(z_hat, q.z_q)?;
    let rows = g.gather_rows(codebook, &q.indices)?;
    let rows = g.reshape(rows, &shape)?;
    let z_sg = g.detach(z_hat);
    let cb_term = g.sq_dist(z_sg, rows)?;
    let rows_sg = g.detach(rows);
    let commit = g.sq_dist(rows_sg, z_hat)?;
    Ok((zq_st, cb_term, commit, q.indices))
}

/// `||x - x_hat||^2 + codebook_term + commitment_term` (sums, not means).
pub fn vq_loss<T: Scalar>(
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    q: &QuantizationResult<T>,
) -> Result<T> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(format!(
            "vq_loss: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let rec: T = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(rec + q.codebook_term + q.commitment_term)
}

/// `grad_rec / (grad_gan + delta)`, clamped to `[0, 1e4]`.
pub fn adaptive_lambda(grad_rec_norm: f64, grad_gan_norm: f64) -> Result<f64> {
    if grad_rec_norm < 0.0
        || grad_gan_norm < 0.0
        || grad_rec_norm.is_nan()
        || grad_gan_norm.is_nan()
    {
        return Err(Error::Domain(format!(
            "gradient norms must be non-negative, got {grad_rec_norm} and {grad_gan_norm}"
        )));
    }
    Ok((grad_rec_norm / (grad_gan_norm + LAMBDA_DELTA)).clamp(0.0, LAMBDA_MAX))
}

/// Discriminator and generator terms from raw discriminator logits.
/// `D = sigmoid(logit)`; both terms are means over patch outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanTerms<T> {
    /// `-log D(x_hat)` (non-saturating generator surrogate, descended).
    pub generator: T,
    /// `log D(x) + log(1 - D(x_hat))` (ascended by the discriminator).
    pub discriminator: T,
}

pub fn gan_terms_from_logits<T: Scalar>(real: &[T], fake: &[T]) -> GanTerms<T> {
    let mean = |v: &[T], f: &dyn Fn(T) -> T| {
        v.iter().map(|&a| f(a)).sum::<T>() / T::from_usize_lossy(v.len())
    };
    let sp = crate::autograd::softplus::<T>;
    let log_d_real = mean(real, &|l| -sp(-l));
    let log_1m_d_fake = mean(fake, &|l| -sp(l));
    GanTerms {
        generator: mean(fake, &|l| sp(-l)),
        discriminator: log_d_real + log_1m_d_fake,
    }
}

/// Seeded uniform choice of `s` distinct depth slices out of `depth`
/// (all of them when `s >= depth`).
pub fn sample_slices<R: Rng + ?Sized>(depth: usize, s: usize, rng: &mut R) -> Vec<usize> {
    if s >= depth {
        return (0..depth).collect();
    }
    let mut idx = sample(rng, depth, s).into_vec();
    idx.sort_unstable();
    idx
}

/// One layer of the fixed feature network.
#[derive(Debug, Clone)]
pub enum FeatureLayer {
    Identity,
    /// In-plane 3x3 convolution followed by leaky ReLU.
    Conv(Conv3d),
}

/// Fixed slice-wise feature extractor `phi`.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    pub layers: Vec<FeatureLayer>,
}

impl PerceptualNet {
    pub fn identity() -> Self {
        Self {
            layers: vec![FeatureLayer::Identity],
        }
    }

    /// Stack of in-plane random convolutions drawn from `seed`.
    pub fn fixed_random<T: Scalar>(
        seed: u64,
        in_channels: usize,
        widths: &[usize],
    ) -> (Self, ParamStore<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv3d::new(format!("phi.{i}"), cin, w, ConvGeom::planar(3, 1, 1));
            conv.init(&mut ps, &mut rng);
            layers.push(FeatureLayer::Conv(conv));
            cin = w;
        }
        (Self { layers }, ps)
    }

    /// Feature maps after every layer.
    pub fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = match layer {
                FeatureLayer::Identity => h,
                FeatureLayer::Conv(c) => {
                    let y = c.forward(g, ps, h)?;
                    g.leaky_relu(y, T::lit(LEAKY_SLOPE))
                }
            };
            out.push(h);
        }
        Ok(out)
    }

    /// `sum_l ||phi_l(x) - phi_l(x_hat)||^2`.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        x_hat: Var,
    ) -> Result<Var> {
        let fx = self.features(g, ps, x)?;
        let fy = self.features(g, ps, x_hat)?;
        let mut total: Option<Var> = None;
        for (a, b) in fx.into_iter().zip(fy) {
            let d = g.sq_dist(a, b)?;
            total = Some(match total {
                Some(t) => g.add(t, d)?,
                None => d,
            });
        }
        total.ok_or_else(|| Error::Config("perceptual network has no layers".into()))
    }
}

/// Value-level perceptual loss.
pub fn perceptual_loss<T: Scalar>(
    net: &PerceptualNet,
    ps: &ParamStore<T>,
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
) -> Result<T> {
    let mut g = Graph::inference();
    let a = g.constant(x.clone());
    let b = g.constant(x_hat.clone());
    let l = net.loss(&mut g, ps, a, b)?;
    Ok(g.value(l).item())
}

/// Pre-activation residual block: `x + conv(silu(gn(conv(silu(gn(x))))))`.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv3d,
    conv2: Conv3d,
    groups: usize,
}

impl ResBlock {
    fn new(name: &str, ch: usize, groups: usize) -> Self {
        Self {
            conv1: Conv3d::new(format!("{name}.conv1"), ch, ch, ConvGeom::cube(3, 1, 1)),
            conv2: Conv3d::new(format!("{name}.conv2"), ch, ch, ConvGeom::cube(3, 1, 1)),
            groups,
        }
    }

    fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(ps, rng);
        self.conv2.init_scaled(ps, rng, 0.5);
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = g.group_norm(x, self.groups)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, ps, h)?;
        let h = g.group_norm(h, self.groups)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h)?;
        g.add(x, h)
    }
}

/// Patch discriminator: strided convolutions ending in a one-channel logit map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv3d>,
}

impl Discriminator {
    fn new(name: &str, cin: usize, ch: usize, planar: bool) -> Self {
        let geom = |stride| {
            if planar {
                ConvGeom::planar(3, stride, 1)
            } else {
                ConvGeom::cube(3, stride, 1)
            }
        };
        Self {
            convs: vec![
                Conv3d::new(format!("{name}.conv0"), cin, ch, geom(2)),
                Conv3d::new(format!("{name}.conv1"), ch, 2 * ch, geom(2)),
                Conv3d::new(format!("{name}.out"), 2 * ch, 1, geom(1)),
            ],
        }
    }

    fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        for c in &self.convs {
            c.init(ps, rng);
        }
    }

    /// Raw logits; `D = sigmoid(logits)`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, ps, h)?;
            if i + 1 < self.convs.len() {
                h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
            }
        }
        Ok(h)
    }
}

/// Network definitions; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct VqGan {
    pub config: CompressionConfig,
    enc_in: Conv3d,
    enc_down: Vec<Conv3d>,
    enc_res: Vec<ResBlock>,
    enc_out: Conv3d,
    dec_in: Conv3d,
    dec_res: Vec<ResBlock>,
    dec_up: Vec<ConvTranspose3d>,
    dec_out: Conv3d,
    pub d2d: Discriminator,
    pub d3d: Discriminator,
}

/// Name of the decoder's last-layer weight (the layer the adaptive weight is
/// computed against).
pub const DECODER_LAST_LAYER: &str = "dec.conv_out.w";

impl VqGan {
    pub fn new(config: CompressionConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let levels = c.levels();
        let top = c.width(levels);
        let k3 = ConvGeom::cube(3, 1, 1);
        let enc_down = (0..levels)
            .map(|i| {
                Conv3d::new(
                    format!("enc.down{i}"),
                    c.width(i),
                    c.width(i + 1),
                    ConvGeom::cube(3, 2, 1),
                )
            })
            .collect();
        let dec_up = (0..levels)
            .rev()
            .map(|i| ConvTranspose3d::doubling(format!("dec.up{i}"), c.width(i + 1), c.width(i)))
            .collect();
        Ok(Self {
            enc_in: Conv3d::new("enc.conv_in", c.in_channels, c.base_channels, k3),
            enc_down,
            enc_res: (0..c.res_blocks)
                .map(|i| ResBlock::new(&format!("enc.res{i}"), top, c.num_groups))
                .collect(),
            enc_out: Conv3d::new("enc.conv_out", top, c.n_z, ConvGeom::cube(1, 1, 0)),
            dec_in: Conv3d::new("dec.conv_in", c.n_z, top, k3),
            dec_res: (0..c.res_blocks)
                .map(|i| ResBlock::new(&format!("dec.res{i}"), top, c.num_groups))
                .collect(),
            dec_up,
            dec_out: Conv3d::new("dec.conv_out", c.base_channels, c.in_channels, k3),
            d2d: Discriminator::new("d2d", c.in_channels, c.disc_channels, true),
            d3d: Discriminator::new("d3d", c.in_channels, c.disc_channels, false),
            config,
        })
    }

    /// Fresh parameters for every learnable component.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        self.enc_in.init(&mut ps, &mut rng);
        for c in &self.enc_down {
            c.init(&mut ps, &mut rng);
        }
        for r in &self.enc_res {
            r.init(&mut ps, &mut rng);
        }
        self.enc_out.init(&mut ps, &mut rng);
        self.dec_in.init(&mut ps, &mut rng);
        for r in &self.dec_res {
            r.init(&mut ps, &mut rng);
        }
        for u in &self.dec_up {
            u.init(&mut ps, &mut rng);
        }
        self.dec_out.init(&mut ps, &mut rng);
        let k = self.config.codebook_size;
        let bound = 1.0 / k as f64;
        ps.insert(
            "codebook",
            Tensor::rand_uniform(&[k, self.config.n_z], -bound, bound, &mut rng),
        );
        self.d2d.init(&mut ps, &mut rng);
        self.d3d.init(&mut ps, &mut rng);
        ps
    }

    fn check_input<T: Scalar>(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[4] != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected [N, H, W, L, {}], got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config
            .latent_dims([shape[1], shape[2], shape[3]])
            .map(|_| ())
    }

    /// `z_hat = E(x)`: `[N, H, W, L, C] -> [N, H/t, W/t, L/t, n_z]`.
    pub fn encode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        self.check_input::<T>(g.shape(x))?;
        let mut h = self.enc_in.forward(g, ps, x)?;
        for c in &self.enc_down {
            h = g.silu(h);
            h = c.forward(g, ps, h)?;
        }
        for r in &self.enc_res {
            h = r.forward(g, ps, h)?;
        }
        let h = g.group_norm(h, self.config.num_groups)?;
        let h = g.silu(h);
        self.enc_out.forward(g, ps, h)
    }

    /// `x_hat = D(z_q)`. Also returns the tape length just before the last
    /// layer, for [`Graph::backward_from`].
    pub fn decode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        z: Var,
    ) -> Result<(Var, usize)> {
        let s = g.shape(z).to_vec();
        if s.len() != 5 || s[4] != self.config.n_z {
            return Err(Error::shape(format!(
                "expected latent [N, h, w, l, {}], got {s:?}",
                self.config.n_z
            )));
        }
        let mut h = self.dec_in.forward(g, ps, z)?;
        for r in &self.dec_res {
            h = r.forward(g, ps, h)?;
        }
        for u in &self.dec_up {
            h = g.group_norm(h, self.config.num_groups)?;
            h = g.silu(h);
            h = u.forward(g, ps, h)?;
        }
        let h = g.group_norm(h, self.config.num_groups)?;
        let h = g.silu(h);
        let cut = g.len();
        Ok((self.dec_out.forward(g, ps, h)?, cut))
    }

    pub fn codebook<T: Scalar>(&self, ps: &ParamStore<T>) -> Result<Codebook<T>> {
        Codebook::new(ps.get("codebook")?.clone())
    }

    pub fn encode<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, ps, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn decode<T: Scalar>(&self, ps: &ParamStore<T>, z_q: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let zv = g.constant(z_q.clone());
        let (x, _) = self.decode_graph(&mut g, ps, zv)?;
        Ok(g.value(x).clone())
    }

    /// `D(q(E(x)))`.
    pub fn reconstruct<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.encode(ps, x)?;
        let q = quantize(&z, &self.codebook(ps)?)?;
        self.decode(ps, &q.z_q)
    }

    /// Per-discriminator adversarial terms for a real/reconstructed pair.
    /// `slices` picks the depth slices shown to the 2D discriminator.
    pub fn adversarial_losses<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        x_hat: &Tensor<T>,
        slices: &[usize],
    ) -> Result<(GanTerms<T>, GanTerms<T>)> {
        let mut g = Graph::inference();
        let real = g.constant(x.clone());
        let fake = g.constant(x_hat.clone());
        let terms = |g: &mut Graph<T>, d: &Discriminator, r: Var, f: Var| -> Result<GanTerms<T>> {
            let lr = d.logits(g, ps, r)?;
            let lf = d.logits(g, ps, f)?;
            Ok(gan_terms_from_logits(
                g.value(lr).data(),
                g.value(lf).data(),
            ))
        };
        let rs = g.select_depth(real, slices)?;
        let fs = g.select_depth(fake, slices)?;
        let t2 = terms(&mut g, &self.d2d, rs, fs)?;
        let t3 = terms(&mut g, &self.d3d, real, fake)?;
        Ok((t2, t3))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqGanLossRecord {
    pub step: usize,
    pub rec: f64,
    pub codebook: f64,
    pub commit: f64,
    pub perceptual: f64,
    pub generator: f64,
    pub disc_2d: f64,
    pub disc_3d: f64,
    pub lambda: f64,
}

impl VqGanLossRecord {
    pub const HEADER: &'static str = "step,L_rec,L_codebook,L_commit,L_perc,L_G,L_D2D,L_D3D,lambda";

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.rec,
            self.codebook,
            self.commit,
            self.perceptual,
            self.generator,
            self.disc_2d,
            self.disc_3d,
            self.lambda
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(Error::Data(format!("loss record needs 9 fields: `{line}`")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Data(format!("bad number `{}` in loss record", f[i])))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad step `{}`", f[0])))?,
            rec: num(1)?,
            codebook: num(2)?,
            commit: num(3)?,
            perceptual: num(4)?,
            generator: num(5)?,
            disc_2d: num(6)?,
            disc_3d: num(7)?,
            lambda: num(8)?,
        })
    }
}

/// Mutable state of the autoencoder phase.
#[derive(Debug, Clone)]
pub struct VqGanTrainer<T> {
    pub params: ParamStore<T>,
    pub perceptual_params: ParamStore<T>,
    pub perceptual: PerceptualNet,
    pub opt_ae: Adam<T>,
    pub opt_disc: Adam<T>,
    pub loss: VqGanLossConfig,
    pub step: usize,
    slice_rng: ChaCha8Rng,
}

/// Parameter prefixes updated by the autoencoder optimizer.
pub const AUTOENCODER_PREFIXES: [&str; 3] = ["enc.", "dec.", "codebook"];
/// Parameter prefixes updated by the discriminator optimizer.
pub const DISCRIMINATOR_PREFIXES: [&str; 2] = ["d2d.", "d3d."];

impl<T: Scalar> VqGanTrainer<T> {
    pub fn new(model: &VqGan, loss: VqGanLossConfig, adam: AdamConfig, seed: u64) -> Self {
        let params = model.init_params(seed);
        let (perceptual, perceptual_params) = PerceptualNet::fixed_random(
            loss.perceptual_seed,
            model.config.in_channels,
            &model.config.perceptual_channels,
        );
        Self::from_parts(params, perceptual, perceptual_params, loss, adam, seed)
    }

    pub fn from_parts(
        params: ParamStore<T>,
        perceptual: PerceptualNet,
        perceptual_params: ParamStore<T>,
        loss: VqGanLossConfig,
        adam: AdamConfig,
        seed: u64,
    ) -> Self {
        Self {
            opt_ae: Adam::new(adam, &params, &AUTOENCODER_PREFIXES),
            opt_disc: Adam::new(adam, &params, &DISCRIMINATOR_PREFIXES),
            params,
            perceptual_params,
            perceptual,
            loss,
            step: 0,
            slice_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_511C),
        }
    }

    fn adversarial_active(&self) -> bool {
        self.loss.disc_weight > 0.0 && self.step >= self.loss.disc_start
    }

    /// One alternating update on a batch `[N, H, W, L, C]`: the autoencoder
    /// and codebook descend the full objective, then both discriminators
    /// ascend their terms.
    pub fn train_step(&mut self, model: &VqGan, batch: &Tensor<T>) -> Result<VqGanLossRecord> {
        let n = batch.shape()[0];
        let inv_n = T::one() / T::from_usize_lossy(n);
        let adversarial = self.adversarial_active();
        let depth = batch.shape()[3];
        let slices = sample_slices(depth, self.loss.slices_per_step, &mut self.slice_rng);

        let mut g = Graph::with_trainable(Trainable::Prefixes(
            AUTOENCODER_PREFIXES.iter().map(|s| s.to_string()).collect(),
        ));
        let x = g.constant(batch.clone());
        let z_hat = model.encode_graph(&mut g, &self.params, x)?;
        let cb = self.params.var(&mut g, "codebook")?;
        let (zq, cb_term, commit, _) = quantize_graph(&mut g, z_hat, cb)?;
        let (x_hat, cut) = model.decode_graph(&mut g, &self.params, zq)?;
        let rec = g.sq_dist(x, x_hat)?;
        let rec = g.scale(rec, inv_n);
        let cb_term = g.scale(cb_term, inv_n);
        let commit = g.scale(commit, inv_n);
        let mut total = g.add(rec, cb_term)?;
        total = g.add(total, commit)?;
        let perc = if self.loss.perceptual_weight > 0.0 {
            let p = self
                .perceptual
                .loss(&mut g, &self.perceptual_params, x, x_hat)?;
            let p = g.scale(p, inv_n);
            let weighted = g.scale(p, T::lit(self.loss.perceptual_weight));
            total = g.add(total, weighted)?;
            g.value(p).item().as_f64()
        } else {
            0.0
        };

        let mut lambda = 0.0;
        let mut gen_value = 0.0;
        if adversarial {
            let fake3 = model.d3d.logits(&mut g, &self.params, x_hat)?;
            let sp3 = g.scale(fake3, -T::one());
            let sp3 = g.softplus(sp3);
            let g3 = g.mean(sp3);
            let sel = g.select_depth(x_hat, &slices)?;
            let fake2 = model.d2d.logits(&mut g, &self.params, sel)?;
            let sp2 = g.scale(fake2, -T::one());
            let sp2 = g.softplus(sp2);
            let g2 = g.mean(sp2);
            let gen = g.add(g2, g3)?;
            gen_value = g.value(gen).item().as_f64();

            let last = |grads: &crate::autograd::Grads<T>| {
                grads
                    .param(DECODER_LAST_LAYER)
                    .map(|t| t.sq_norm().as_f64().sqrt())
                    .unwrap_or(0.0)
            };
            let rec_norm = last(&g.backward_from(rec, cut)?);
            let gan_norm = last(&g.backward_from(gen, cut)?);
            lambda = adaptive_lambda(rec_norm, gan_norm)?;
            let weighted = g.scale(gen, T::lit(lambda * self.loss.disc_weight));
            total = g.add(total, weighted)?;
        }

        let total_value = g.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                msg: format!("autoencoder loss = {total_value}"),
            });
        }
        let grads = g.backward(total)?;
        self.opt_ae.update(&mut self.params, &grads)?;

        let mut record = VqGanLossRecord {
            step: self.step,
            rec: g.value(rec).item().as_f64(),
            codebook: g.value(cb_term).item().as_f64(),
            commit: g.value(commit).item().as_f64(),
            perceptual: perc,
            generator: gen_value,
            disc_2d: 0.0,
            disc_3d: 0.0,
            lambda,
        };

        if adversarial {
            let fake_value = g.value(x_hat).clone();
            drop(g);
            let mut gd = Graph::with_trainable(Trainable::Prefixes(
                DISCRIMINATOR_PREFIXES
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ));
            let real = gd.constant(batch.clone());
            let fake = gd.constant(fake_value);
            let mut terms = Vec::with_capacity(2);
            let r2 = gd.select_depth(real, &slices)?;
            let f2 = gd.select_depth(fake, &slices)?;
            for (d, r, f) in [(&model.d2d, r2, f2), (&model.d3d, real, fake)] {
                let lr = d.logits(&mut gd, &self.params, r)?;
                let lf = d.logits(&mut gd, &self.params, f)?;
                // -(log D(x) + log(1 - D(x_hat))) = softplus(-lr) + softplus(lf)
                let nr = gd.scale(lr, -T::one());
                let a = gd.softplus(nr);
                let a = gd.mean(a);
                let b = gd.softplus(lf);
                let b = gd.mean(b);
                terms.push(gd.add(a, b)?);
            }
            record.disc_2d = -gd.value(terms[0]).item().as_f64();
            record.disc_3d = -gd.value(terms[1]).item().as_f64();
            let dl = gd.add(terms[0], terms[1])?;
            if !gd.value(dl).item().is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    msg: "discriminator loss non-finite".into(),
                });
            }
            let grads = gd.backward(dl)?;
            self.opt_disc.update(&mut self.params, &grads)?;
        }

        self.step += 1;
        Ok(record)
    }
}

/// How often each codebook entry is selected over a set of latents.
pub fn codebook_usage(indices: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for &i in indices {
        h[i] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CompressionConfig {
        CompressionConfig {
            t: 2,
            n_z: 2,
            codebook_size: 8,
            base_channels: 4,
            num_groups: 2,
            res_blocks: 1,
            in_channels: 1,
            disc_channels: 2,
            perceptual_channels: vec![2],
        }
    }

    fn rand_volume(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn nearest_by_inspection_and_tie_break() {
        let cb = Codebook::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
        let z = Tensor::new(vec![1, 2], vec![0.2, 0.1]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert_eq!(q.z_q.data(), &[0.0, 0.0]);
        let tie = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(quantize(&tie, &cb).unwrap().indices, vec![0]);
    }

    #[test]
    fn empty_codebook_is_config_error() {
        assert!(matches!(
            Codebook::<f32>::new(Tensor::zeros(&[0, 2])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Tensor<f64> = Tensor::randn(&[4, 4, 2, 2], &mut rng);
        let cb = Codebook::new(Tensor::randn(&[16, 2], &mut rng)).unwrap();
        let q = quantize(&z, &cb).unwrap();
        for (s, site) in z.data().chunks(2).enumerate() {
            let mut best = (f64::INFINITY, 0);
            for k in 0..16 {
                let e = &cb.entries.data()[k * 2..k * 2 + 2];
                let d = (site[0] - e[0]).powi(2) + (site[1] - e[1]).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            assert_eq!(q.indices[s], best.1);
        }
    }

    #[test]
    fn vq_loss_cases() {
        let cb = Codebook::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap()).unwrap();
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2, 1]);
        // z_hat = z_q: all terms vanish
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(vq_loss(&x, &x, &q).unwrap(), 0.0);
        // single site (1, 1) snapped to (0, 0): 2 + 2
        let z = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(vq_loss(&x, &x, &q).unwrap(), 4.0);
        assert!(vq_loss(&x, &Tensor::ones(&[1, 2]), &q).is_err());
    }

    #[test]
    fn adaptive_lambda_cases() {
        assert!((adaptive_lambda(1.0, 1.0).unwrap() - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!((adaptive_lambda(2.0, 1.0).unwrap() - 2.0).abs() < 1e-5);
        assert_eq!(adaptive_lambda(1.0, 0.0).unwrap(), 1e4);
        assert!(adaptive_lambda(-1.0, 1.0).is_err());
    }

    #[test]
    fn gan_terms_at_half() {
        let t = gan_terms_from_logits(&[0.0f64], &[0.0]);
        assert!((t.discriminator - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let confident = gan_terms_from_logits(&[0.0f64], &[40.0]);
        assert!(confident.generator < 1e-12);
    }

    #[test]
    fn slice_sampler_replays_with_seed() {
        let a = sample_slices(32, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_slices(32, 2, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
        assert_eq!(
            sample_slices(2, 5, &mut ChaCha8Rng::seed_from_u64(0)),
            vec![0, 1]
        );
    }

    #[test]
    fn encode_decode_shapes() {
        let model = VqGan::new(tiny()).unwrap();
        let ps = model.init_params::<f64>(0);
        let x = rand_volume(&[1, 8, 8, 4, 1], 1);
        let z = model.encode(&ps, &x).unwrap();
        assert_eq!(z.shape(), &[1, 4, 4, 2, 2]);
        let y = model.reconstruct(&ps, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
        assert!(model
            .encode(&ps, &rand_volume(&[1, 7, 8, 4, 1], 1))
            .is_err());
        assert!(model.decode(&ps, &Tensor::zeros(&[1, 4, 4, 2, 3])).is_err());
    }

    #[test]
    fn encode_32_cube_with_t2() {
        let model = VqGan::new(CompressionConfig { n_z: 3, ..tiny() }).unwrap();
        let ps = model.init_params::<f32>(0);
        let z = model
            .encode(&ps, &Tensor::zeros(&[1, 32, 32, 8, 1]))
            .unwrap();
        assert_eq!(z.shape(), &[1, 16, 16, 4, 3]);
    }

    #[test]
    fn encoder_parameter_perturbation_changes_output() {
        let model = VqGan::new(tiny()).unwrap();
        let mut ps = model.init_params::<f64>(0);
        let x = rand_volume(&[1, 4, 4, 4, 1], 2);
        let z0 = model.encode(&ps, &x).unwrap();
        ps.get_mut("enc.conv_in.w").unwrap().data_mut()[13] += 1e-3;
        let z1 = model.encode(&ps, &x).unwrap();
        assert!(z0.zip_map(&z1, |a, b| (a - b).abs()).max_abs() > 0.0);
    }

    #[test]
    fn used_codebook_entry_perturbation_changes_decode() {
        let model = VqGan::new(tiny()).unwrap();
        let mut ps = model.init_params::<f64>(0);
        let x = rand_volume(&[1, 4, 4, 4, 1], 2);
        let z = model.encode(&ps, &x).unwrap();
        let q = quantize(&z, &model.codebook(&ps).unwrap()).unwrap();
        let y0 = model.decode(&ps, &q.z_q).unwrap();
        let used = q.indices[0];
        ps.get_mut("codebook").unwrap().data_mut()[used * 2] += 0.5;
        let q1 = quantize(&z, &model.codebook(&ps).unwrap()).unwrap();
        let y1 = model.decode(&ps, &q1.z_q).unwrap();
        assert!(y0.zip_map(&y1, |a, b| (a - b).abs()).max_abs() > 0.0);
    }

    #[test]
    fn perceptual_identity_layer_is_plain_squared_error() {
        let x = rand_volume(&[1, 3, 3, 2, 1], 4);
        let y = rand_volume(&[1, 3, 3, 2, 1], 5);
        let ps = ParamStore::new();
        let l = perceptual_loss(&PerceptualNet::identity(), &ps, &x, &y).unwrap();
        let want: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((l - want).abs() < 1e-12);
        assert_eq!(
            perceptual_loss(&PerceptualNet::identity(), &ps, &x, &x).unwrap(),
            0.0
        );
    }

    #[test]
    fn perceptual_two_layer_matches_slice_loop() {
        let (net, ps) = PerceptualNet::fixed_random::<f64>(9, 1, &[2, 3]);
        let x = rand_volume(&[1, 4, 3, 2, 1], 6);
        let y = rand_volume(&[1, 4, 3, 2, 1], 7);
        let got = perceptual_loss(&net, &ps, &x, &y).unwrap();

        // Independent slice-wise 2D convolution with zero padding.
        let conv2d = |input: &Vec<Vec<Vec<f64>>>, name: &str, cin: usize, cout: usize| {
            let w = ps.get(&format!("{name}.w")).unwrap().data();
            let b = ps.get(&format!("{name}.b")).unwrap().data();
            let (h, wd) = (input.len(), input[0].len());
            let mut out = vec![vec![vec![0.0; cout]; wd]; h];
            for i in 0..h {
                for j in 0..wd {
                    for co in 0..cout {
                        let mut acc = b[co];
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (ii, jj) =
                                    (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += input[ii as usize][jj as usize][ci]
                                        * w[((di * 3 + dj) * cin + ci) * cout + co];
                                }
                            }
                        }
                        out[i][j][co] = if acc > 0.0 { acc } else { 0.2 * acc };
                    }
                }
            }
            out
        };
        let mut want = 0.0;
        for l in 0..2 {
            let slice = |t: &Tensor<f64>| -> Vec<Vec<Vec<f64>>> {
                (0..4)
                    .map(|i| {
                        (0..3)
                            .map(|j| vec![t.data()[(i * 3 + j) * 2 + l]])
                            .collect()
                    })
                    .collect()
            };
            let (a1, b1) = (
                conv2d(&slice(&x), "phi.0", 1, 2),
                conv2d(&slice(&y), "phi.0", 1, 2),
            );
            let (a2, b2) = (conv2d(&a1, "phi.1", 2, 3), conv2d(&b1, "phi.1", 2, 3));
            for (fa, fb) in [(&a1, &b1), (&a2, &b2)] {
                for (ra, rb) in fa.iter().zip(fb) {
                    for (ca, cb) in ra.iter().zip(rb) {
                        for (u, v) in ca.iter().zip(cb) {
                            want += (u - v) * (u - v);
                        }
                    }
                }
            }
        }
        assert!(
            (got - want).abs() < 1e-10 * want.max(1.0),
            "{got} vs {want}"
        );
    }

    #[test]
    fn loss_record_line_roundtrip() {
        let r = VqGanLossRecord {
            step: 3,
            rec: 1.5,
            codebook: 0.25,
            commit: 0.25,
            perceptual: 2.0,
            generator: 0.7,
            disc_2d: -1.3,
            disc_3d: -1.4,
            lambda: 0.9,
        };
        assert_eq!(VqGanLossRecord::parse_line(&r.to_line()).unwrap(), r);
        assert_eq!(VqGanLossRecord::HEADER.split(',').count(), 9);
    }

    #[test]
    fn train_step_reports_finite_components() {
        let model = VqGan::new(tiny()).unwrap();
        let mut tr =
            VqGanTrainer::<f64>::new(&model, VqGanLossConfig::default(), AdamConfig::default(), 1);
        let batch = Tensor::stack(&[
            rand_volume(&[1, 8, 8, 4, 1], 1),
            rand_volume(&[1, 8, 8, 4, 1], 2),
        ])
        .unwrap();
        let before = tr.params.get("d3d.out.w").unwrap().clone();
        let r = tr.train_step(&model, &batch).unwrap();
        for v in [
            r.rec,
            r.codebook,
            r.commit,
            r.perceptual,
            r.generator,
            r.lambda,
        ] {
            assert!(v.is_finite() && v >= 0.0);
        }
        assert!(r.disc_2d.is_finite() && r.disc_3d.is_finite());
        assert!(r.disc_2d <= 0.0 && r.disc_3d <= 0.0);
        assert_ne!(tr.params.get("d3d.out.w").unwrap(), &before);
        assert_eq!(tr.step, 1);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::rand_uniform(&[1, 2, 2, 2, 2], -1.0, 1.0, &mut rng));
        let cb = g.param(
            "codebook",
            &Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng),
        );
        let (zq, _, _, _) = quantize_graph(&mut g, z, cb).unwrap();
        let w = Tensor::rand_uniform(&[1, 2, 2, 2, 2], -2.0, 2.0, &mut rng);
        let wv = g.constant(w.clone());
        let prod = g.mul(zq, wv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let gz = grads.get(z).unwrap();
        for (a, b) in gz.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        // No gradient reaches the codebook through the straight-through path.
        assert!(grads.param("codebook").map_or(true, |t| t.max_abs() == 0.0));
    }

    #[test]
    fn lambda_is_scale_invariant() {
        for (a, b) in [(3.0, 2.0), (0.5, 7.0), (120.0, 80.0)] {
            let base = adaptive_lambda(a, b).unwrap();
            for c in [10.0, 1e3] {
                let scaled = adaptive_lambda(c * a, c * b).unwrap();
                assert!((scaled - base).abs() <= 1e-6 * base.max(1.0), "{a} {b} {c}");
            }
        }
    }

    /// Smooth surrogate whose true derivative is the straight-through
    /// gradient: the quantization offset and the stop-gradient operands are
    /// frozen at their values from the anchor point.
    fn surrogate_loss(
        model: &VqGan,
        ps: &ParamStore<f64>,
        perc: (&PerceptualNet, &ParamStore<f64>),
        x: &Tensor<f64>,
        anchor: (&Tensor<f64>, &Tensor<f64>, &[usize]),
    ) -> f64 {
        let (z0, zq0, idx) = anchor;
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let zh = model.encode_graph(&mut g, ps, xv).unwrap();
        let offset = g.constant(zq0.zip_map(z0, |a, b| a - b));
        let zin = g.add(zh, offset).unwrap();
        let (xh, _) = model.decode_graph(&mut g, ps, zin).unwrap();
        let rec = g.sq_dist(xv, xh).unwrap();
        let p = perc.0.loss(&mut g, perc.1, xv, xh).unwrap();
        let cb = ps.var(&mut g, "codebook").unwrap();
        let rows = g.gather_rows(cb, idx).unwrap();
        let rows = g.reshape(rows, z0.shape()).unwrap();
        let z0v = g.constant(z0.clone());
        let cb_term = g.sq_dist(z0v, rows).unwrap();
        let zq0v = g.constant(zq0.clone());
        let commit = g.sq_dist(zq0v, zh).unwrap();
        [rec, p, cb_term, commit]
            .iter()
            .map(|&v| g.value(v).item())
            .sum()
    }

    #[test]
    fn vq_and_perceptual_gradients_match_finite_differences() {
        let cfg = CompressionConfig {
            base_channels: 1,
            num_groups: 1,
            codebook_size: 4,
            ..tiny()
        };
        let model = VqGan::new(cfg).unwrap();
        let all: ParamStore<f64> = model.init_params(5);
        let mut ps = ParamStore::new();
        for p in AUTOENCODER_PREFIXES {
            ps.merge(p, &all.extract(p));
        }
        let n_params: usize = ps.iter().map(|(_, t)| t.len()).sum();
        assert!(n_params <= 1000, "{n_params} parameters");
        let (perc, pps) = PerceptualNet::fixed_random::<f64>(3, 1, &[2]);
        let x = rand_volume(&[1, 4, 4, 2, 1], 8);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let zh = model.encode_graph(&mut g, &ps, xv).unwrap();
        let cb = ps.var(&mut g, "codebook").unwrap();
        let (zq, cb_term, commit, idx) = quantize_graph(&mut g, zh, cb).unwrap();
        let (xh, _) = model.decode_graph(&mut g, &ps, zq).unwrap();
        let rec = g.sq_dist(xv, xh).unwrap();
        let p = perc.loss(&mut g, &pps, xv, xh).unwrap();
        let mut total = g.add(rec, p).unwrap();
        total = g.add(total, cb_term).unwrap();
        total = g.add(total, commit).unwrap();
        let grads = g.backward(total).unwrap();
        let z0 = g.value(zh).clone();
        let zq0 = g.value(zq).clone();
        let anchor = (&z0, &zq0, idx.as_slice());
        let f0 = surrogate_loss(&model, &ps, (&perc, &pps), &x, anchor);
        assert!((f0 - g.value(total).item()).abs() < 1e-10 * f0.max(1.0));

        let h = 1e-5;
        let names: Vec<String> = ps.names().map(str::to_string).collect();
        for name in names {
            let len = ps.get(&name).unwrap().len();
            for i in 0..len {
                let mut plus = ps.clone();
                plus.get_mut(&name).unwrap().data_mut()[i] += h;
                let mut minus = ps.clone();
                minus.get_mut(&name).unwrap().data_mut()[i] -= h;
                let num = (surrogate_loss(&model, &plus, (&perc, &pps), &x, anchor)
                    - surrogate_loss(&model, &minus, (&perc, &pps), &x, anchor))
                    / (2.0 * h);
                let ana = grads.param(&name).map_or(0.0, |t| t.data()[i]);
                let tol = 1e-4 * num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() <= tol,
                    "{name}[{i}]: numeric {num} vs autograd {ana}"
                );
            }
        }
    }

    #[test]
    fn ablated_objective_decreases() {
        let model = VqGan::new(tiny()).unwrap();
        let loss = VqGanLossConfig {
            perceptual_weight: 0.0,
            disc_weight: 0.0,
            ..VqGanLossConfig::default()
        };
        let adam = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut tr = VqGanTrainer::<f64>::new(&model, loss, adam, 2);
        let data: Vec<Tensor<f64>> = (0..4)
            .map(|i| rand_volume(&[1, 8, 8, 4, 1], 20 + i))
            .collect();
        let mut totals = Vec::new();
        for step in 0..50 {
            let b = Tensor::stack(&[data[step % 4].clone(), data[(step + 1) % 4].clone()]).unwrap();
            let r = tr.train_step(&model, &b).unwrap();
            assert_eq!((r.generator, r.lambda, r.perceptual), (0.0, 0.0, 0.0));
            totals.push(r.rec + r.codebook + r.commit);
        }
        let first: f64 = totals[..5].iter().sum();
        let last: f64 = totals[45..].iter().sum();
        assert!(last < first, "first {first} last {last}");
    }
}
