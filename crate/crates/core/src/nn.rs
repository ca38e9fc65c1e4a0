//! Named parameters, layer building blocks and the Adam optimizer.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Insertion-ordered map from parameter path (`"enc.down0.w"`) to array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of the parameters under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Leaf for parameter `name` in `g`.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    /// Parameters under `prefix`, re-keyed without the prefix.
    pub fn extract(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Insert every parameter of `other` under `prefix`.
    pub fn merge(&mut self, prefix: &str, other: &Self) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Uniform initializer with unit-variance fan-in scaling, bound
/// `gain * sqrt(3 / fan_in)`. `gain = 0` gives zeros.
pub fn init_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// 3D convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl Conv3d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            geom,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.init_scaled(ps, rng, 1.0);
    }

    /// `gain = 0` gives a zero-initialized layer.
    pub fn init_scaled<T: Scalar, R: Rng + ?Sized>(
        &self,
        ps: &mut ParamStore<T>,
        rng: &mut R,
        gain: f64,
    ) {
        let k = self.geom.kernel;
        let fan_in = self.geom.kernel_volume() * self.cin;
        ps.insert(
            self.weight_name(),
            init_uniform(&[k[0], k[1], k[2], self.cin, self.cout], fan_in, gain, rng),
        );
        ps.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = ps.var(g, &self.weight_name())?;
        let b = ps.var(g, &self.bias_name())?;
        let y = g.conv3d(x, w, self.geom)?;
        g.bias_add(y, b)
    }
}

/// Transposed 3D convolution with bias (learned upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl ConvTranspose3d {
    /// Kernel 4, stride 2, padding 1: exactly doubles every axis.
    pub fn doubling(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            geom: ConvGeom::cube(4, 2, 1),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        let k = self.geom.kernel;
        // Each output voxel sees roughly kernel_volume / stride^3 taps.
        let taps = self.geom.kernel_volume() / self.geom.stride.iter().product::<usize>();
        ps.insert(
            format!("{}.w", self.name),
            init_uniform(
                &[k[0], k[1], k[2], self.cout, self.cin],
                taps * self.cin,
                1.0,
                rng,
            ),
        );
        ps.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = ps.var(g, &format!("{}.w", self.name))?;
        let b = ps.var(g, &format!("{}.b", self.name))?;
        let y = g.conv_transpose3d(x, w, self.geom)?;
        g.bias_add(y, b)
    }
}

/// Dense layer on `[N, D]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R, gain: f64) {
        ps.insert(
            format!("{}.w", self.name),
            init_uniform(&[self.din, self.dout], self.din, gain, rng),
        );
        ps.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = ps.var(g, &format!("{}.w", self.name))?;
        let b = ps.var(g, &format!("{}.b", self.name))?;
        let y = g.matmul(x, w)?;
        g.bias_add(y, b)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer over an explicit registry of parameter names. Gradients
/// for parameters outside the registry are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Register every parameter of `ps` whose name starts with one of `prefixes`.
    pub fn new(config: AdamConfig, ps: &ParamStore<T>, prefixes: &[&str]) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, t) in ps.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                m.insert(name.to_string(), Tensor::zeros(t.shape()));
                v.insert(name.to_string(), Tensor::zeros(t.shape()));
            }
        }
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Names of the parameters this optimizer updates.
    pub fn registry(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.m
            .iter()
            .zip(self.v.values())
            .map(|((k, m), v)| (k.as_str(), m, v))
    }

    pub fn set_moments(&mut self, name: &str, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        let slot = self
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("`{name}` not in optimizer registry")))?;
        *slot = m;
        *self.v.get_mut(name).expect("m and v share keys") = v;
        Ok(())
    }

    /// One update using gradients from `grads` (looked up by parameter name).
    pub fn update(&mut self, ps: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        self.update_with(ps, |name| grads.param(name))
    }

    pub fn update_with<'a>(
        &mut self,
        ps: &mut ParamStore<T>,
        grad_of: impl Fn(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<()>
    where
        T: 'a,
    {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (name, m) in self.m.iter_mut() {
            let Some(gr) = grad_of(name) else { continue };
            let v = self.v.get_mut(name).expect("m and v share keys");
            let p = ps.get_mut(name)?;
            if p.shape() != gr.shape() {
                return Err(Error::shape(format!(
                    "gradient shape mismatch for `{name}`"
                )));
            }
            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), gr.data());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (T::one() - b1) * gd[i];
                vd[i] = b2 * vd[i] + (T::one() - b2) * gd[i] * gd[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_defaults_match_training_setup() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.lr), (0.9, 0.999, 3e-4));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("a", Tensor::from_fn(&[3], |i| i as f64));
        ps.insert("b", Tensor::zeros(&[1]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &ps,
            &["a"],
        );
        assert_eq!(opt.registry().collect::<Vec<_>>(), vec!["a"]);
        let mut g = Graph::new();
        let a = ps.var(&mut g, "a").unwrap();
        let b = ps.var(&mut g, "b").unwrap();
        let s = g.square(a);
        let sa = g.sum(s);
        let sb = g.sum(b);
        let l = g.add(sa, sb).unwrap();
        let grads = g.backward(l).unwrap();
        opt.update(&mut ps, &grads).unwrap();
        // bias-corrected first step is lr * sign(g)
        let a = ps.get("a").unwrap().data();
        assert!((a[0] - 0.0).abs() < 1e-12);
        assert!((a[1] - 0.9).abs() < 1e-6);
        assert!((a[2] - 1.9).abs() < 1e-6);
        assert_eq!(ps.get("b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("x", Tensor::from_fn(&[4], |i| i as f64 - 2.0));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &ps,
            &[""],
        );
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = ps.var(&mut g, "x").unwrap();
            let l = g.square(x);
            let l = g.sum(l);
            let grads = g.backward(l).unwrap();
            opt.update(&mut ps, &grads).unwrap();
        }
        assert!(ps.get("x").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn extract_and_merge_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        Conv3d::new("enc.c", 2, 3, ConvGeom::cube(3, 1, 1)).init(&mut ps, &mut rng);
        let sub = ps.extract("enc.");
        assert!(sub.contains("c.w"));
        let mut back = ParamStore::new();
        back.merge("enc.", &sub);
        assert_eq!(back, ps);
        assert_eq!(ps.count("enc."), 27 * 2 * 3 + 3);
    }
}
