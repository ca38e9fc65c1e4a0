//! Semantic-conditioned 3D denoising U-Net.
//!
//! Encoder resblocks see only the noisy latent and the timestep (per-channel
//! scale and shift from the time embedding). Decoder resblocks additionally
//! receive semantic-map features through SPADE modulation. Spatial and
//! cross-slice attention follow the resblocks at the lowest-resolution levels.
//!
//! Parameter paths: `sdm.*` for the U-Net, `sem.*` for the map encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMode, ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvTranspose3d, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Latent channels (`n_z`).
    pub in_channels: usize,
    /// Channel width at each resolution level, finest first.
    pub widths: Vec<usize>,
    /// Number of lowest-resolution levels carrying both attention modes.
    pub attention_levels: usize,
    pub num_groups: usize,
    pub time_dim: usize,
    pub num_classes: usize,
    /// Width of the semantic feature pyramid.
    pub semantic_channels: usize,
    /// Hidden width of each SPADE modulation network.
    pub spade_hidden: usize,
    /// Volume-to-latent downsampling factor the map encoder must undo.
    pub compression: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            widths: vec![32, 64],
            attention_levels: 2,
            num_groups: 8,
            time_dim: 32,
            num_classes: 2,
            semantic_channels: 16,
            spade_hidden: 16,
            compression: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, msg: String| {
            Err(Error::Range {
                key: format!("denoiser.{key}"),
                msg,
            })
        };
        if self.widths.is_empty() || self.widths.contains(&0) {
            return range(
                "widths",
                "need at least one level and positive widths".into(),
            );
        }
        if self.num_groups == 0 {
            return range("num_groups", "must be >= 1".into());
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if w % self.num_groups != 0 {
                return range(
                    "num_groups",
                    format!("{} does not divide width {w} at level {i}", self.num_groups),
                );
            }
        }
        if self.in_channels == 0 || self.semantic_channels == 0 || self.spade_hidden == 0 {
            return range("in_channels", "channel counts must be >= 1".into());
        }
        if self.time_dim < 2 {
            return range("time_dim", "must be >= 2".into());
        }
        if self.num_classes < 2 {
            return range("num_classes", "must be >= 2".into());
        }
        if self.compression == 0 || !self.compression.is_power_of_two() {
            return range("compression", "must be a power of two".into());
        }
        if self.attention_levels > self.levels() {
            return range(
                "attention_levels",
                format!("exceeds the {} levels", self.levels()),
            );
        }
        Ok(())
    }

    fn has_attention(&self, level: usize) -> bool {
        level + self.attention_levels >= self.levels()
    }

    /// Check that `latent` dims survive `levels - 1` halvings.
    pub fn check_latent_dims(&self, latent: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.levels() - 1);
        if latent.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::shape(format!(
                "latent dims {latent:?} must be divisible by {f} for {} U-Net levels",
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `[sin(t f_0), .., sin(t f_{h-1}), cos(t f_0), ..]`
/// with `f_i = 10000^(-i/h)`, `h = dim/2`; odd `dim` gets a trailing zero.
pub fn time_embed<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut e = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        e[i] = T::lit(a.sin());
        e[half + i] = T::lit(a.cos());
    }
    e
}

/// `[N, dim]` embedding of one timestep per sample.
pub fn time_embed_batch<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let data = ts.iter().flat_map(|&t| time_embed::<T>(t, dim)).collect();
    Tensor::new(vec![ts.len(), dim], data).expect("sized above")
}

/// `w * f + b` with per-sample, per-channel `w, b: [N, C]`.
pub fn scale_shift<T: Scalar>(g: &mut Graph<T>, f: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.channel_mul(f, w)?;
    g.channel_add(y, b)
}

/// Two-layer projection of the time embedding to `(w(t), b(t))`; the output
/// heads start at zero so `w = 1`, `b = 0` initially.
#[derive(Debug, Clone)]
struct TimeProjection {
    hidden: Linear,
    w: Linear,
    b: Linear,
}

impl TimeProjection {
    fn new(name: &str, time_dim: usize, ch: usize) -> Self {
        Self {
            hidden: Linear::new(format!("{name}.hidden"), time_dim, time_dim),
            w: Linear::new(format!("{name}.w"), time_dim, ch),
            b: Linear::new(format!("{name}.b"), time_dim, ch),
        }
    }

    fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.hidden.init(ps, rng, 1.0);
        self.w.init(ps, rng, 0.0);
        self.b.init(ps, rng, 0.0);
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        temb: Var,
    ) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, ps, temb)?;
        let h = g.silu(h);
        let w = self.w.forward(g, ps, h)?;
        let w = g.add_scalar(w, T::one());
        let b = self.b.forward(g, ps, h)?;
        Ok((w, b))
    }
}

/// Time-gated linear path from `z_t` to the output, `s(t) * z_t` with a
/// per-channel gate whose head starts at zero. At high noise the target is
/// almost `z_t` itself, which the normalised U-Net path cannot reproduce to
/// the precision the reverse step needs.
#[derive(Debug, Clone)]
struct InputSkip {
    hidden: Linear,
    gate: Linear,
}

impl InputSkip {
    fn new(time_dim: usize, ch: usize) -> Self {
        Self {
            hidden: Linear::new("sdm.input_skip.hidden", time_dim, time_dim),
            gate: Linear::new("sdm.input_skip.gate", time_dim, ch),
        }
    }

    fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.hidden.init(ps, rng, 1.0);
        self.gate.init(ps, rng, 0.0);
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        z_t: Var,
        temb: Var,
    ) -> Result<Var> {
        let h = self.hidden.forward(g, ps, temb)?;
        let h = g.silu(h);
        let s = self.gate.forward(g, ps, h)?;
        g.channel_mul(z_t, s)
    }
}

/// `gamma(m) * group_norm(f) + beta(m)` with convolutional `gamma`, `beta`.
#[derive(Debug, Clone)]
pub struct Spade {
    shared: Conv3d,
    gamma: Conv3d,
    beta: Conv3d,
    groups: usize,
}

impl Spade {
    fn new(name: &str, sem_ch: usize, hidden: usize, ch: usize, groups: usize) -> Self {
        let k3 = ConvGeom::cube(3, 1, 1);
        Self {
            shared: Conv3d::new(format!("{name}.shared"), sem_ch, hidden, k3),
            gamma: Conv3d::new(format!("{name}.gamma"), hidden, ch, k3),
            beta: Conv3d::new(format!("{name}.beta"), hidden, ch, k3),
            groups,
        }
    }

    /// `gamma` starts near one (unit bias), `beta` near zero.
    fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.shared.init(ps, rng);
        self.gamma.init_scaled(ps, rng, 0.1);
        self.beta.init_scaled(ps, rng, 0.1);
        let b = ps.get_mut(&self.gamma.bias_name()).expect("just inserted");
        *b = Tensor::ones(b.shape());
    }

    /// The modulation maps `(gamma, beta)` at the resolution of `sem`.
    pub fn modulation<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        sem: Var,
    ) -> Result<(Var, Var)> {
        let h = self.shared.forward(g, ps, sem)?;
        let h = g.silu(h);
        Ok((self.gamma.forward(g, ps, h)?, self.beta.forward(g, ps, h)?))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        f: Var,
        sem: Var,
    ) -> Result<Var> {
        let (gamma, beta) = self.modulation(g, ps, sem)?;
        spade_modulate(g, f, gamma, beta, self.groups)
    }
}

/// `gamma * group_norm(f) + beta`, all maps of identical shape.
pub fn spade_modulate<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
) -> Result<Var> {
    let fs = g.shape(f).to_vec();
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if g.shape(v) != fs.as_slice() {
            return Err(Error::shape(format!(
                "SPADE {name} {:?} does not match features {fs:?}",
                g.shape(v)
            )));
        }
    }
    let n = g.group_norm(f, groups)?;
    let y = g.mul(gamma, n)?;
    g.add(y, beta)
}

/// `gn -> silu -> conv -> w(t) h + b(t) -> gn -> silu -> conv`, plus skip.
#[derive(Debug, Clone)]
struct EncoderResBlock {
    conv1: Conv3d,
    conv2: Conv3d,
    time: TimeProjection,
    groups: usize,
}

impl EncoderResBlock {
    fn new(name: &str, ch: usize, time_dim: usize, groups: usize) -> Self {
        let k3 = ConvGeom::cube(3, 1, 1);
        Self {
            conv1: Conv3d::new(format!("{name}.conv1"), ch, ch, k3),
            conv2: Conv3d::new(format!("{name}.conv2"), ch, ch, k3),
            time: TimeProjection::new(&format!("{name}.time"), time_dim, ch),
            groups,
        }
    }

    fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(ps, rng);
        self.conv2.init_scaled(ps, rng, 0.5);
        self.time.init(ps, rng);
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let h = g.group_norm(x, self.groups)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, ps, h)?;
        let (w, b) = self.time.forward(g, ps, temb)?;
        let h = scale_shift(g, h, w, b)?;
        let h = g.group_norm(h, self.groups)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h)?;
        g.add(x, h)
    }
}

/// `SPADE -> silu -> conv -> w(t) h + b(t) -> SPADE -> silu -> conv`, plus a
/// 1x1 projected skip (input and output widths differ after concatenation).
#[derive(Debug, Clone)]
struct DecoderResBlock {
    spade1: Spade,
    conv1: Conv3d,
    spade2: Spade,
    conv2: Conv3d,
    skip: Conv3d,
    time: TimeProjection,
}

impl DecoderResBlock {
    fn new(name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig) -> Self {
        let k3 = ConvGeom::cube(3, 1, 1);
        let (s, h, gr) = (cfg.semantic_channels, cfg.spade_hidden, cfg.num_groups);
        Self {
            spade1: Spade::new(&format!("{name}.spade1"), s, h, cin, gr),
            conv1: Conv3d::new(format!("{name}.conv1"), cin, cout, k3),
            spade2: Spade::new(&format!("{name}.spade2"), s, h, cout, gr),
            conv2: Conv3d::new(format!("{name}.conv2"), cout, cout, k3),
            skip: Conv3d::new(format!("{name}.skip"), cin, cout, ConvGeom::cube(1, 1, 0)),
            time: TimeProjection::new(&format!("{name}.time"), cfg.time_dim, cout),
        }
    }

    fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.spade1.init(ps, rng);
        self.conv1.init(ps, rng);
        self.spade2.init(ps, rng);
        self.conv2.init_scaled(ps, rng, 0.5);
        self.skip.init(ps, rng);
        self.time.init(ps, rng);
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        temb: Var,
        sem: Var,
    ) -> Result<Var> {
        let h = self.spade1.forward(g, ps, x, sem)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, ps, h)?;
        let (w, b) = self.time.forward(g, ps, temb)?;
        let h = scale_shift(g, h, w, b)?;
        let h = self.spade2.forward(g, ps, h, sem)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h)?;
        let s = self.skip.forward(g, ps, x)?;
        g.add(s, h)
    }
}

/// `x + attention(q(gn x), k(gn x), v(gn x))` with 1x1 projections.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    q: Conv3d,
    k: Conv3d,
    v: Conv3d,
    mode: AttentionMode,
    groups: usize,
}

impl AttentionBlock {
    pub fn new(name: &str, ch: usize, mode: AttentionMode, groups: usize) -> Self {
        let k1 = ConvGeom::cube(1, 1, 0);
        Self {
            q: Conv3d::new(format!("{name}.q"), ch, ch, k1),
            k: Conv3d::new(format!("{name}.k"), ch, ch, k1),
            v: Conv3d::new(format!("{name}.v"), ch, ch, k1),
            mode,
            groups,
        }
    }

    pub fn query_name(&self) -> (String, String) {
        (self.q.weight_name(), self.q.bias_name())
    }

    pub fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.q.init(ps, rng);
        self.k.init(ps, rng);
        self.v.init_scaled(ps, rng, 0.5);
    }

    /// Output and the attention node (for weight inspection).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let h = g.group_norm(x, self.groups)?;
        let q = self.q.forward(g, ps, h)?;
        let k = self.k.forward(g, ps, h)?;
        let v = self.v.forward(g, ps, h)?;
        let a = g.attention(q, k, v, self.mode)?;
        Ok((g.add(x, a)?, a))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, ps, x)?.0)
    }
}

/// Map encoder: full-resolution one-hot map to one feature map per U-Net
/// level, with learned strided downsampling.
#[derive(Debug, Clone)]
struct SemanticEncoder {
    conv_in: Conv3d,
    to_latent: Vec<Conv3d>,
    pyramid: Vec<Conv3d>,
    num_classes: usize,
}

impl SemanticEncoder {
    fn new(cfg: &DenoiserConfig) -> Self {
        let s = cfg.semantic_channels;
        let down = |name: String| Conv3d::new(name, s, s, ConvGeom::cube(3, 2, 1));
        Self {
            conv_in: Conv3d::new("sem.conv_in", cfg.num_classes, s, ConvGeom::cube(3, 1, 1)),
            to_latent: (0..cfg.compression.trailing_zeros())
                .map(|i| down(format!("sem.down{i}")))
                .collect(),
            pyramid: (1..cfg.levels())
                .map(|i| down(format!("sem.level{i}")))
                .collect(),
            num_classes: cfg.num_classes,
        }
    }

    fn init<T: Scalar, R: Rng>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.conv_in.init(ps, rng);
        for c in self.to_latent.iter().chain(&self.pyramid) {
            c.init(ps, rng);
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, m: Var) -> Result<Vec<Var>> {
        if g.shape(m).len() != 5 || g.value(m).channels() != self.num_classes {
            return Err(Error::shape(format!(
                "semantic input {:?} must be [N, H, W, L, {}]",
                g.shape(m),
                self.num_classes
            )));
        }
        let mut h = self.conv_in.forward(g, ps, m)?;
        h = g.silu(h);
        for c in &self.to_latent {
            h = c.forward(g, ps, h)?;
            h = g.silu(h);
        }
        let mut out = vec![h];
        for c in &self.pyramid {
            h = c.forward(g, ps, h)?;
            h = g.silu(h);
            out.push(h);
        }
        Ok(out)
    }
}

/// Network definition; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    conv_in: Conv3d,
    enc: Vec<EncoderResBlock>,
    enc_attn: Vec<Vec<AttentionBlock>>,
    down: Vec<Conv3d>,
    dec: Vec<DecoderResBlock>,
    dec_attn: Vec<Vec<AttentionBlock>>,
    up: Vec<ConvTranspose3d>,
    conv_out: Conv3d,
    input_skip: InputSkip,
    semantic: SemanticEncoder,
}

/// Prefixes of every trainable denoiser parameter.
pub const DENOISER_PREFIXES: [&str; 2] = ["sdm.", "sem."];

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let w = &c.widths;
        let k3 = ConvGeom::cube(3, 1, 1);
        let attn = |prefix: &str, i: usize| -> Vec<AttentionBlock> {
            if !c.has_attention(i) {
                return Vec::new();
            }
            vec![
                AttentionBlock::new(
                    &format!("sdm.{prefix}{i}.spatial"),
                    w[i],
                    AttentionMode::Spatial,
                    c.num_groups,
                ),
                AttentionBlock::new(
                    &format!("sdm.{prefix}{i}.cross"),
                    w[i],
                    AttentionMode::CrossSlice,
                    c.num_groups,
                ),
            ]
        };
        Ok(Self {
            conv_in: Conv3d::new("sdm.conv_in", c.in_channels, w[0], k3),
            enc: (0..c.levels())
                .map(|i| {
                    EncoderResBlock::new(&format!("sdm.enc{i}"), w[i], c.time_dim, c.num_groups)
                })
                .collect(),
            enc_attn: (0..c.levels()).map(|i| attn("enc_attn", i)).collect(),
            down: (1..c.levels())
                .map(|i| {
                    Conv3d::new(
                        format!("sdm.down{}", i - 1),
                        w[i - 1],
                        w[i],
                        ConvGeom::cube(3, 2, 1),
                    )
                })
                .collect(),
            dec: (0..c.levels())
                .map(|i| {
                    // Deepest level reads its own skip; others also receive the upsampled path.
                    DecoderResBlock::new(&format!("sdm.dec{i}"), 2 * w[i], w[i], c)
                })
                .collect(),
            dec_attn: (0..c.levels()).map(|i| attn("dec_attn", i)).collect(),
            up: (1..c.levels())
                .map(|i| ConvTranspose3d::doubling(format!("sdm.up{}", i - 1), w[i], w[i - 1]))
                .collect(),
            conv_out: Conv3d::new("sdm.conv_out", w[0], c.in_channels, k3),
            input_skip: InputSkip::new(c.time_dim, c.in_channels),
            semantic: SemanticEncoder::new(c),
            config,
        })
    }

    /// Fresh parameters; the output convolution and the skip gate start at zero.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        self.conv_in.init(&mut ps, &mut rng);
        for i in 0..self.config.levels() {
            self.enc[i].init(&mut ps, &mut rng);
            for a in &self.enc_attn[i] {
                a.init(&mut ps, &mut rng);
            }
        }
        for d in &self.down {
            d.init(&mut ps, &mut rng);
        }
        for i in 0..self.config.levels() {
            self.dec[i].init(&mut ps, &mut rng);
            for a in &self.dec_attn[i] {
                a.init(&mut ps, &mut rng);
            }
        }
        for u in &self.up {
            u.init(&mut ps, &mut rng);
        }
        self.conv_out.init_scaled(&mut ps, &mut rng, 0.0);
        self.semantic.init(&mut ps, &mut rng);
        self.input_skip.init(&mut ps, &mut rng);
        ps
    }

    /// Every SPADE block, for forcing and inspection.
    pub fn spade_blocks(&self) -> Vec<&Spade> {
        self.dec
            .iter()
            .flat_map(|d| [&d.spade1, &d.spade2])
            .collect()
    }

    pub fn attention_blocks(&self) -> Vec<&AttentionBlock> {
        self.enc_attn
            .iter()
            .chain(&self.dec_attn)
            .flatten()
            .collect()
    }

    /// Semantic feature pyramid, finest (latent resolution) first.
    pub fn semantic_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        m: Var,
    ) -> Result<Vec<Var>> {
        self.semantic.forward(g, ps, m)
    }

    pub fn semantic_encode<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        m: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let mv = g.constant(m.clone());
        let out = self.semantic_graph(&mut g, ps, mv)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// `eps_theta(z_t, t, m)` inside a graph; `ts` holds one step per sample
    /// and `m` is the full-resolution one-hot map batch.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        z_t: Var,
        ts: &[usize],
        m: Var,
    ) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 5 || zs[4] != self.config.in_channels {
            return Err(Error::shape(format!(
                "z_t {zs:?} must be [N, h, w, l, {}]",
                self.config.in_channels
            )));
        }
        if ts.len() != zs[0] {
            return Err(Error::shape(format!(
                "{} timesteps for a batch of {}",
                ts.len(),
                zs[0]
            )));
        }
        self.config.check_latent_dims([zs[1], zs[2], zs[3]])?;
        let ms = g.shape(m).to_vec();
        let f = self.config.compression;
        if ms.len() != 5 || ms[0] != zs[0] || (1..4).any(|a| ms[a] != zs[a] * f) {
            return Err(Error::shape(format!(
                "semantic map {ms:?} must be the volume-resolution counterpart of latent {zs:?} (factor {f})"
            )));
        }
        let sem = self.semantic_graph(g, ps, m)?;
        let temb = g.constant(time_embed_batch(ts, self.config.time_dim));

        let mut h = self.conv_in.forward(g, ps, z_t)?;
        let mut skips = Vec::with_capacity(self.config.levels());
        for i in 0..self.config.levels() {
            h = self.enc[i].forward(g, ps, h, temb)?;
            for a in &self.enc_attn[i] {
                h = a.forward(g, ps, h)?;
            }
            skips.push(h);
            if i + 1 < self.config.levels() {
                h = self.down[i].forward(g, ps, h)?;
            }
        }
        for i in (0..self.config.levels()).rev() {
            let x = g.concat(h, skips[i])?;
            h = self.dec[i].forward(g, ps, x, temb, sem[i])?;
            for a in &self.dec_attn[i] {
                h = a.forward(g, ps, h)?;
            }
            if i > 0 {
                h = self.up[i - 1].forward(g, ps, h)?;
            }
        }
        let h = g.group_norm(h, self.config.num_groups)?;
        let h = g.silu(h);
        let out = self.conv_out.forward(g, ps, h)?;
        let skip = self.input_skip.forward(g, ps, z_t, temb)?;
        g.add(out, skip)
    }

    pub fn predict_noise<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        z_t: &Tensor<T>,
        ts: &[usize],
        m: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let z = g.constant(z_t.clone());
        let mv = g.constant(m.clone());
        let out = self.forward(&mut g, ps, z, ts, mv)?;
        Ok(g.value(out).clone())
    }
}
