//! Cosine noise schedule, closed-form forward noising, the noise-regression
//! loss and ancestral reverse sampling.
//!
//! Step indices run `1..=T`; array slot `t - 1` holds step `t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta: Vec<f64>,
    /// Cumulative product of `1 - beta`.
    pub alpha_bar: Vec<f64>,
    pub s: f64,
}

impl DiffusionSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Range {
                key: "t".into(),
                msg: format!("step {t} outside [1, {}]", self.steps),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `alpha_bar_{t-1}`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t))
    }
}

/// `alpha_bar_t = f(t) / f(0)`, `f(t) = cos^2(((t/T + s)/(1 + s)) pi/2)`;
/// betas are clipped to `0.999` and `alpha_bar` is then the running product
/// of `1 - beta`, so the last step keeps a small positive `alpha_bar_T`.
pub fn build_cosine_schedule(steps: usize, s: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs T >= 1".into()));
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Range {
            key: "diffusion.s".into(),
            msg: format!("cosine offset must be > 0, got {s}"),
        });
    }
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut beta = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for t in 1..=steps {
        let b = (1.0 - (f(t) / f0) / (f(t - 1) / f0)).clamp(f64::MIN_POSITIVE, MAX_BETA);
        prod *= 1.0 - b;
        beta.push(b);
        alpha_bar.push(prod);
    }
    Ok(DiffusionSchedule {
        steps,
        beta,
        alpha_bar,
        s,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisingResult<T> {
    pub z_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: usize,
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &DiffusionSchedule,
) -> Result<NoisingResult<T>> {
    schedule.check_t(t)?;
    Ok(NoisingResult {
        z_t: noise_with(z0, schedule.alpha_bar(t), eps)?,
        eps: eps.clone(),
        t,
    })
}

/// Closed-form noising at an explicit `alpha_bar` value.
pub fn noise_with<T: Scalar>(z0: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let (a, b) = (T::lit(alpha_bar.sqrt()), T::lit((1.0 - alpha_bar).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Mean squared error over all elements.
pub fn simple_loss<T: Scalar>(eps: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<T> {
    if eps.shape() != eps_pred.shape() {
        return Err(Error::shape(format!(
            "eps {:?} vs prediction {:?}",
            eps.shape(),
            eps_pred.shape()
        )));
    }
    let sum: T = eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / T::from_usize_lossy(eps.len().max(1)))
}

/// One ancestral step `z_t -> z_{t-1}`. `noise` must be `None` exactly when
/// `t = 1`.
pub fn reverse_step<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    schedule: &DiffusionSchedule,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    if z_t.shape() != eps_pred.shape() {
        return Err(Error::shape(format!(
            "z_t {:?} vs eps_pred {:?}",
            z_t.shape(),
            eps_pred.shape()
        )));
    }
    let beta = schedule.beta(t);
    let a = 1.0 - beta;
    let inv_sqrt_a = T::lit(1.0 / a.sqrt());
    let coef = T::lit(beta / (1.0 - schedule.alpha_bar(t)).sqrt());
    let mean = z_t.zip_map(eps_pred, |z, e| inv_sqrt_a * (z - coef * e));
    match (t, noise) {
        (1, None) => Ok(mean),
        (1, Some(_)) => Err(Error::Config("no noise is added at t = 1".into())),
        (_, None) => Err(Error::Config(format!(
            "reverse step at t = {t} needs a noise draw"
        ))),
        (_, Some(n)) => {
            if n.shape() != z_t.shape() {
                return Err(Error::shape(format!(
                    "noise {:?} vs z_t {:?}",
                    n.shape(),
                    z_t.shape()
                )));
            }
            let sigma = T::lit(schedule.posterior_variance(t).sqrt());
            Ok(mean.zip_map(n, |m, e| m + sigma * e))
        }
    }
}

/// Final latent plus the `(t, z_t)` states recorded along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory<T> {
    pub latent: Tensor<T>,
    pub snapshots: Vec<(usize, Tensor<T>)>,
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`. `predict` maps
/// `(z_t, t)` to the predicted noise; the semantic map is captured by the
/// caller. With `snapshot_every = Some(k)`, the state entering every `k`-th
/// step is recorded, starting with `z_T`.
pub fn sample_loop<T, F>(
    shape: &[usize],
    mut predict: F,
    schedule: &DiffusionSchedule,
    seed: u64,
    snapshot_every: Option<usize>,
) -> Result<SampleTrajectory<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
{
    if snapshot_every == Some(0) {
        return Err(Error::Range {
            key: "snapshot_every".into(),
            msg: "must be >= 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::randn(shape, &mut rng);
    let mut snapshots = Vec::new();
    for (i, t) in (1..=schedule.steps).rev().enumerate() {
        if snapshot_every.is_some_and(|k| i % k == 0) {
            snapshots.push((t, z.clone()));
        }
        let eps = predict(&z, t)?;
        let noise = (t > 1).then(|| Tensor::randn(shape, &mut rng));
        z = reverse_step(&z, t, &eps, schedule, noise.as_ref())?;
        if !z.all_finite() {
            return Err(Error::SamplingDivergence { t });
        }
    }
    Ok(SampleTrajectory {
        latent: z,
        snapshots,
    })
}

/// Uniform training step in `[1, T]`.
pub fn sample_timestep<R: rand::Rng + ?Sized>(schedule: &DiffusionSchedule, rng: &mut R) -> usize {
    rng.gen_range(1..=schedule.steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (
            m,
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0),
        )
    }

    #[test]
    fn schedule_shape_for_t1000() {
        let s = build_cosine_schedule(1000, DEFAULT_COSINE_OFFSET).unwrap();
        for t in 1..1000 {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            assert!(s.beta[t] >= s.beta[t - 1]);
        }
        assert!(s.beta.iter().all(|&b| b > 0.0 && b <= MAX_BETA));
        assert!(s.alpha_bar[0] < 1.0 && s.alpha_bar[999] > 0.0);
        assert!(s.alpha_bar(1000) < 0.01);
    }

    #[test]
    fn schedule_matches_closed_form_before_clipping() {
        let (steps, off) = (1000, 0.008);
        let s = build_cosine_schedule(steps, off).unwrap();
        let f = |t: f64| {
            (((t / steps as f64 + off) / (1.0 + off)) * std::f64::consts::PI / 2.0)
                .cos()
                .powi(2)
        };
        for t in [1usize, 10, 100, 500, 900] {
            let want = f(t as f64) / f(0.0);
            assert!(
                (s.alpha_bar(t) - want).abs() < 1e-9 * want.max(1e-3),
                "t={t}"
            );
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = build_cosine_schedule(1, DEFAULT_COSINE_OFFSET).unwrap();
        assert_eq!(s.beta.len(), 1);
        assert!(s.beta[0] > 0.0 && s.beta[0] <= MAX_BETA);
        assert!(matches!(
            build_cosine_schedule(0, 0.008),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_limits_and_range() {
        let z0 = randn(&[8], 1);
        let eps = randn(&[8], 2);
        assert_eq!(noise_with(&z0, 1.0, &eps).unwrap(), z0);
        assert_eq!(noise_with(&z0, 0.0, &eps).unwrap(), eps);
        let s = build_cosine_schedule(10, 0.008).unwrap();
        assert!(matches!(
            forward_sample(&z0, 0, &eps, &s),
            Err(Error::Range { .. })
        ));
        assert!(forward_sample(&z0, 11, &eps, &s).is_err());
    }

    #[test]
    fn forward_monte_carlo_moments() {
        let s = build_cosine_schedule(100, 0.008).unwrap();
        let n = 10_000;
        let z0 = Tensor::full(&[n], 0.6);
        for t in [1, 30, 70, 100] {
            let r = forward_sample(&z0, t, &randn(&[n], t as u64), &s).unwrap();
            let (m, v) = mean_var(r.z_t.data());
            let (mu, var) = (s.alpha_bar(t).sqrt() * 0.6, 1.0 - s.alpha_bar(t));
            assert!(
                (m - mu).abs() < 3.0 * (var / n as f64).sqrt(),
                "t={t} mean {m} vs {mu}"
            );
            assert!(
                (v - var).abs() < 3.0 * var * (2.0 / (n as f64 - 1.0)).sqrt(),
                "t={t} var {v} vs {var}"
            );
        }
    }

    #[test]
    fn iterated_single_steps_match_closed_form() {
        let s = build_cosine_schedule(50, 0.008).unwrap();
        let n = 10_000;
        let mut z = Tensor::full(&[n], -0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 1..=50 {
            let e: Tensor<f64> = Tensor::randn(&[n], &mut rng);
            let (a, b) = ((1.0 - s.beta(t)).sqrt(), s.beta(t).sqrt());
            z = z.zip_map(&e, |z, e| a * z + b * e);
            if t % 10 == 0 {
                let (m, v) = mean_var(z.data());
                let (mu, var) = (s.alpha_bar(t).sqrt() * -0.4, 1.0 - s.alpha_bar(t));
                assert!((m - mu).abs() < 3.0 * (var / n as f64).sqrt(), "t={t}");
                assert!(
                    (v - var).abs() < 3.0 * var * (2.0 / (n as f64 - 1.0)).sqrt(),
                    "t={t}"
                );
            }
        }
    }

    #[test]
    fn simple_loss_cases() {
        let e = randn(&[4, 3], 1);
        assert_eq!(simple_loss(&e, &e).unwrap(), 0.0);
        assert_eq!(
            simple_loss(&Tensor::<f64>::zeros(&[5]), &Tensor::ones(&[5])).unwrap(),
            1.0
        );
        let p = randn(&[4, 3], 2);
        let mut acc = 0.0;
        for i in 0..12 {
            acc += (e.data()[i] - p.data()[i]).powi(2);
        }
        assert!((simple_loss(&e, &p).unwrap() - acc / 12.0).abs() < 1e-12);
        assert!(simple_loss(&e, &randn(&[12], 2)).is_err());
    }

    #[test]
    fn perfect_oracle_recovery_at_t1() {
        let s = build_cosine_schedule(300, 0.008).unwrap();
        let z0 = randn(&[2, 3, 4], 1);
        let eps = randn(&[2, 3, 4], 2);
        let r = forward_sample(&z0, 1, &eps, &s).unwrap();
        let back = reverse_step(&r.z_t, 1, &eps, &s, None).unwrap();
        assert!(z0.zip_map(&back, |a, b| (a - b).abs()).max_abs() < 1e-10);
        assert_eq!(s.posterior_variance(1), 0.0);
        assert!(reverse_step(&r.z_t, 1, &eps, &s, Some(&eps)).is_err());
        assert!(reverse_step(&r.z_t, 2, &eps, &s, None).is_err());
    }

    #[test]
    fn reverse_step_moments() {
        let s = build_cosine_schedule(100, 0.008).unwrap();
        let n = 10_000;
        let z = Tensor::full(&[n], 0.3);
        let eps = Tensor::full(&[n], 0.1);
        let t = 40;
        let out = reverse_step(&z, t, &eps, &s, Some(&randn(&[n], 5))).unwrap();
        let mu = (0.3 - s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt() * 0.1) / (1.0 - s.beta(t)).sqrt();
        let var = s.posterior_variance(t);
        let (m, v) = mean_var(out.data());
        assert!((m - mu).abs() < 3.0 * (var / n as f64).sqrt());
        assert!((v - var).abs() < 3.0 * var * (2.0 / (n as f64 - 1.0)).sqrt());
    }

    #[test]
    fn sample_loop_determinism_and_snapshots() {
        let s = build_cosine_schedule(12, 0.008).unwrap();
        let pred = |z: &Tensor<f64>, _t: usize| Ok(z.map(|v| 0.1 * v));
        let a = sample_loop(&[3, 4], pred, &s, 7, Some(12)).unwrap();
        let b = sample_loop(&[3, 4], pred, &s, 7, None).unwrap();
        let c = sample_loop(&[3, 4], pred, &s, 8, None).unwrap();
        assert_eq!(a.latent, b.latent);
        assert_ne!(a.latent, c.latent);
        assert_eq!(a.snapshots.len(), 1);
        assert_eq!(a.snapshots[0].0, 12);
        assert_eq!(
            a.snapshots[0].1,
            Tensor::randn(&[3, 4], &mut ChaCha8Rng::seed_from_u64(7))
        );
        let every4 = sample_loop(&[3, 4], pred, &s, 7, Some(4)).unwrap();
        assert_eq!(
            every4.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![12, 8, 4]
        );
    }

    #[test]
    fn zero_denoiser_variance_recursion() {
        let s = build_cosine_schedule(10, 0.008).unwrap();
        let n = 20_000;
        let out = sample_loop(
            &[n],
            |z: &Tensor<f64>, _| Ok(Tensor::zeros(z.shape())),
            &s,
            3,
            None,
        )
        .unwrap();
        let mut var = 1.0;
        for t in (1..=10).rev() {
            var = var / (1.0 - s.beta(t)) + s.posterior_variance(t);
        }
        let (m, v) = mean_var(out.latent.data());
        assert!(m.abs() < 3.0 * (var / n as f64).sqrt());
        assert!(
            (v - var).abs() < 3.0 * var * (2.0 / (n as f64 - 1.0)).sqrt(),
            "{v} vs {var}"
        );
    }

    #[test]
    fn divergence_names_the_step() {
        let s = build_cosine_schedule(5, 0.008).unwrap();
        let r = sample_loop(
            &[2],
            |z: &Tensor<f64>, t| {
                Ok(if t == 3 {
                    z.map(|_| f64::NAN)
                } else {
                    z.clone()
                })
            },
            &s,
            0,
            None,
        );
        assert!(matches!(r, Err(Error::SamplingDivergence { t: 3 })));
    }
}
