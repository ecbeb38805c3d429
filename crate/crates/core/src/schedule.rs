//! Diffusion-process arithmetic: variance schedules, forward noising and the
//! reverse-step updates. Timesteps are 1-based; `t = 0` is clean data.

use interslice_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Per-timestep `β_t`, accumulated `ᾱ_t = Π_{s≤t}(1 − β_s)` and reverse
/// variances `σ_t² = β_t`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma_sqs: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas evenly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        let sigma_sqs = betas.clone();
        Ok(Self { betas, alpha_bars, sigma_sqs })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma_sq(&self, t: usize) -> f64 {
        self.sigma_sqs[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn combine<T: Scalar>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Tensor<T> {
    let (ca, cb) = (T::of(ca), T::of(cb));
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// Standard-normal tensor drawn element by element from `rng`.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Closed-form forward marginal: `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    same_shape(x0, eps, "q_sample")?;
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// One forward transition `√(1 − β_t) · x + √β_t · z`.
pub fn forward_step<T: Scalar, R: Rng + ?Sized>(
    x_prev: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    sched.check_timestep(t)?;
    let z = standard_normal(x_prev.shape(), rng);
    let b = sched.beta(t);
    Ok(combine(x_prev, (1.0 - b).sqrt(), &z, b.sqrt()))
}

/// Reverse-step mean `(x_t − β_t / √(1 − ᾱ_t) · eps) / √(1 − β_t)`.
pub fn posterior_mean<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    same_shape(x_t, eps_pred, "posterior_mean")?;
    sched.check_timestep(t)?;
    let b = sched.beta(t);
    let inv = 1.0 / (1.0 - b).sqrt();
    Ok(combine(x_t, inv, eps_pred, -inv * b / (1.0 - sched.alpha_bar(t)).sqrt()))
}

/// Ancestral step: the posterior mean plus `σ_t · z`, without noise at `t = 1`.
pub fn ddpm_step<T: Scalar, R: Rng + ?Sized>(
    x_t: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mean = posterior_mean(x_t, t, eps_pred, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    let z = standard_normal(x_t.shape(), rng);
    Ok(combine(&mean, 1.0, &z, sched.sigma_sq(t).sqrt()))
}

/// `S` evenly strided timesteps ending at `T`, ascending.
pub fn make_ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("DDIM needs 1 <= steps <= {total}, got {steps}")));
    }
    let stride = total / steps;
    Ok((0..steps).map(|i| total - (steps - 1 - i) * stride).collect())
}

/// Clean-data estimate `(x_t − √(1 − ᾱ_t) · eps) / √ᾱ_t`.
pub fn predict_x0<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    same_shape(x_t, eps_pred, "predict_x0")?;
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    Ok(combine(x_t, inv, eps_pred, -inv * (1.0 - ab).sqrt()))
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`; `t_prev = 0` returns
/// the clean-data estimate.
pub fn ddim_step<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    t_prev: usize,
    eps_pred: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::Ordering(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let x0 = predict_x0(x_t, t, eps_pred, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    Ok(combine(&x0, ab_prev.sqrt(), eps_pred, (1.0 - ab_prev).sqrt()))
}
