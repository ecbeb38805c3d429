//! Reverse-diffusion chains: single in-between slices and whole-volume super-resolution.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use interslice_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{downsample_volume, upsampled_depth, IntensityRange, Volume};
use crate::denoiser::Model;
use crate::network::stable_hash;
use crate::schedule::{ddim_step, ddpm_step, make_ddim_timesteps, standard_normal, NoiseSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Ancestral sampling over all `T` steps.
    Ddpm,
    /// Deterministic sampling over an evenly strided subsequence of `steps` timesteps.
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Number of DDIM steps; ignored in DDPM mode.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplerMode::Ddim, steps: 100, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.mode == SamplerMode::Ddim && (self.steps == 0 || self.steps > sched.steps()) {
            return Err(Error::Config(format!("DDIM steps must lie in 1..={}, got {}", sched.steps(), self.steps)));
        }
        Ok(())
    }

    /// Timesteps visited, in the order they are denoised.
    pub fn timesteps(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        self.validate(sched)?;
        let mut ts = match self.mode {
            SamplerMode::Ddpm => (1..=sched.steps()).collect(),
            SamplerMode::Ddim => make_ddim_timesteps(sched.steps(), self.steps)?,
        };
        ts.reverse();
        Ok(ts)
    }
}

/// Runs the reverse chain from `x_t` (pure noise at `t = T`) with noise
/// predictor `predict(x, t)`; `rng` feeds the DDPM noise.
pub fn reverse_chain<T, R, F>(
    x_t: Tensor<T>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
    mut predict: F,
) -> Result<Tensor<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
{
    let ts = cfg.timesteps(sched)?;
    let mut x = x_t;
    for (i, &t) in ts.iter().enumerate() {
        let eps = predict(&x, t)?;
        if !eps.all_finite() {
            return Err(Error::Numerical { step: t as u64, message: "noise prediction is not finite".into() });
        }
        x = match cfg.mode {
            SamplerMode::Ddpm => ddpm_step(&x, t, &eps, sched, rng)?,
            SamplerMode::Ddim => ddim_step(&x, t, ts.get(i + 1).copied().unwrap_or(0), &eps, sched)?,
        };
    }
    if !x.all_finite() {
        return Err(Error::Numerical { step: 0, message: "sample is not finite".into() });
    }
    Ok(x)
}

/// Samples the slice at offset `k ∈ (0, 1)` between `lower` and `upper`
/// (`[1, 1, H, W]`, normalized intensities), clamped to `[-1, 1]`.
pub fn generate_inbetween_slice<T: Scalar>(
    model: &Model<T>,
    lower: &Tensor<T>,
    upper: &Tensor<T>,
    k: f64,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::Domain(format!("in-between offset {k} must lie strictly inside (0, 1)")));
    }
    if lower.ndim() != 4 || lower.dim(0) != 1 {
        return Err(Error::Dimension(format!("expected one [1, 1, H, W] slice, got {:?}", lower.shape())));
    }
    if sched.steps() != model.config().timesteps {
        return Err(Error::Config("schedule length differs from the model's timestep range".into()));
    }
    let cond = model.condition(lower, upper, &[k])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x_t = standard_normal(lower.shape(), &mut rng);
    let x0 = reverse_chain(x_t, sched, cfg, &mut rng, |x, t| model.predict_noise(x, &[t], &cond))?;
    let (lo, hi) = (T::of(-1.0), T::of(1.0));
    Ok(x0.map(|v| v.max(lo).min(hi)))
}

/// Seed of the slice at offset `j` after LR slice `pair`.
pub fn slice_seed(seed: u64, pair: usize, j: usize) -> u64 {
    seed ^ stable_hash(&format!("{pair}:{j}"))
}

fn edge_pad(values: &[f32], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let row = &values[y.min(h - 1) * w..][..w];
        out.extend((0..pw).map(|x| row[x.min(w - 1)]));
    }
    out
}

/// Raises slice spacing resolution by `ratio`: every LR slice is copied
/// bit for bit to position `m·ratio` and the slices between are generated.
/// Slices are generated on `jobs` threads; the result does not depend on `jobs`.
pub fn super_resolve_volume(
    model: &Model<f32>,
    lr: &Volume,
    ratio: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    jobs: usize,
) -> Result<Volume> {
    if ratio < 2 {
        return Err(Error::Config(format!("ratio must be at least 2, got {ratio}")));
    }
    if lr.depth() < 2 {
        return Err(Error::Data("need at least two slices to interpolate between".into()));
    }
    cfg.validate(sched)?;
    let [d, h, w] = lr.dims();
    let stride = model.config().stride();
    let (ph, pw) = (h.max(8).div_ceil(stride) * stride, w.max(8).div_ceil(stride) * stride);

    // normalized copy of the input for the network; outputs are mapped back
    // into the input's intensity convention
    let (lo, hi) = match lr.range {
        IntensityRange::Raw => lr.min_max(),
        IntensityRange::Normalized { .. } => (-1.0, 1.0),
    };
    let to_net = |v: f32| if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 };
    let from_net = |v: f32| if hi > lo { (v + 1.0) / 2.0 * (hi - lo) + lo } else { lo };
    let net_slice = |z: usize| -> Tensor<f32> {
        let s: Vec<f32> = lr.slice(z).iter().map(|&v| to_net(v)).collect();
        Tensor::from_vec(&[1, 1, ph, pw], edge_pad(&s, h, w, ph, pw))
    };

    let tasks: Vec<(usize, usize)> = (0..d - 1).flat_map(|m| (1..ratio).map(move |j| (m, j))).collect();
    let results: Mutex<Vec<Option<Result<Vec<f32>>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(m, j)) = tasks.get(i) else { break };
        let slice_cfg = SamplerConfig { seed: slice_seed(cfg.seed, m, j), ..*cfg };
        let k = j as f64 / ratio as f64;
        let out = generate_inbetween_slice(model, &net_slice(m), &net_slice(m + 1), k, sched, &slice_cfg).map(|t| {
            let t = t.data();
            (0..h).flat_map(|y| t[y * pw..y * pw + w].iter().map(|&v| from_net(v))).collect()
        });
        log::debug!("generated slice {} of {}", i + 1, tasks.len());
        let failed = out.is_err();
        results.lock().expect("no panics while holding the lock")[i] = Some(out);
        if failed {
            next.store(tasks.len(), Ordering::Relaxed);
        }
    };
    std::thread::scope(|scope| {
        for _ in 1..jobs.max(1) {
            scope.spawn(work);
        }
        work();
    });

    let dims = [upsampled_depth(d, ratio), h, w];
    let mut spacing = lr.spacing;
    spacing[0] /= ratio as f64;
    let mut voxels = vec![0f32; dims[0] * h * w];
    for z in 0..d {
        voxels[z * ratio * h * w..][..h * w].copy_from_slice(lr.slice(z));
    }
    let results = results.into_inner().expect("workers finished");
    for (&(m, j), r) in tasks.iter().zip(results) {
        let slice = r.ok_or_else(|| Error::Data("slice generation was abandoned".into()))??;
        voxels[(m * ratio + j) * h * w..][..h * w].copy_from_slice(&slice);
    }
    Volume::new(dims, spacing, voxels, lr.range)
}

/// Decimates `hr` by `ratio` and super-resolves it back; the returned pair is
/// `(lr, sr)`. The SR grid covers the first `(D_lr − 1)·ratio + 1` HR slices.
pub fn round_trip(
    model: &Model<f32>,
    hr: &Volume,
    ratio: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    jobs: usize,
) -> Result<(Volume, Volume)> {
    let lr = downsample_volume(hr, ratio)?;
    let sr = super_resolve_volume(model, &lr, ratio, sched, cfg, jobs)?;
    Ok((lr, sr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::PyramidTap;
    use crate::data::{make_phantom_volume, normalize_volume};
    use crate::network::{ConditioningMode, ModelConfig};
    use crate::schedule::q_sample;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn tiny(mode: ConditioningMode) -> Model<f32> {
        let cfg = ModelConfig {
            levels: 2,
            base_channels: 4,
            channel_mults: vec![1, 2],
            groups: 2,
            mode,
            tap: PyramidTap::Decoder,
            timesteps: 1000,
        };
        Model::init_dense(cfg, 3).unwrap()
    }

    #[test]
    fn ddim_chain_with_oracle_predictor_recovers_x0() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Tensor<f64> = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
        let eps: Tensor<f64> = standard_normal(&[1, 1, 8, 8], &mut rng);
        let x_t = q_sample(&x0, 1000, &eps, &s).unwrap();
        for steps in [1, 10, 100, 1000] {
            let cfg = SamplerConfig { mode: SamplerMode::Ddim, steps, seed: 0 };
            // the exact noise relating the current iterate to x0
            let oracle = |x: &Tensor<f64>, t: usize| {
                let ab = s.alpha_bar(t);
                Ok(x.zip_map(&x0, |xv, x0v| (xv - ab.sqrt() * x0v) / (1.0 - ab).sqrt()))
            };
            let out = reverse_chain(x_t.clone(), &s, &cfg, &mut rng, oracle).unwrap();
            let err = out.zip_map(&x0, |a, b| (a - b).abs()).max_abs();
            assert!(err < 1e-6, "steps {steps}: {err}");
        }
    }

    #[test]
    fn ddpm_visits_every_timestep_and_ddim_the_subsequence() {
        let s = sched();
        let ddpm = SamplerConfig { mode: SamplerMode::Ddpm, steps: 3, seed: 0 }.timesteps(&s).unwrap();
        assert_eq!(ddpm.len(), 1000);
        assert_eq!((ddpm[0], ddpm[999]), (1000, 1));
        let ddim = SamplerConfig::default().timesteps(&s).unwrap();
        assert_eq!(ddim.len(), 100);
        assert_eq!((ddim[0], ddim[99]), (1000, 10));
        assert!(SamplerConfig { steps: 1001, ..SamplerConfig::default() }.timesteps(&s).is_err());
    }

    #[test]
    fn ddim_and_ddpm_from_same_start_differ_finitely() {
        let s = sched();
        let x_t: Tensor<f64> = standard_normal(&[1, 1, 4, 4], &mut ChaCha8Rng::seed_from_u64(2));
        let zero = |x: &Tensor<f64>, _| Ok(Tensor::zeros(x.shape()));
        let full = SamplerConfig { mode: SamplerMode::Ddim, steps: 1000, seed: 0 };
        let a = reverse_chain(x_t.clone(), &s, &full, &mut ChaCha8Rng::seed_from_u64(3), zero).unwrap();
        let ddpm = SamplerConfig { mode: SamplerMode::Ddpm, ..full };
        let b = reverse_chain(x_t, &s, &ddpm, &mut ChaCha8Rng::seed_from_u64(3), zero).unwrap();
        let diff = a.zip_map(&b, |x, y| (x - y).abs()).max_abs();
        assert!(diff.is_finite() && diff > 0.0);
    }

    #[test]
    fn non_finite_prediction_is_a_numerical_fault() {
        let s = sched();
        let x_t: Tensor<f64> = Tensor::zeros(&[1, 1, 4, 4]);
        let cfg = SamplerConfig { steps: 5, ..SamplerConfig::default() };
        let nan = |x: &Tensor<f64>, _| Ok(Tensor::full(x.shape(), f64::NAN));
        let err = reverse_chain(x_t, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(0), nan).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn generated_slice_is_clamped_deterministic_and_shaped() {
        let m = tiny(ConditioningMode::Hierarchical);
        let v = normalize_volume(&make_phantom_volume(1, 9, 8, 8).unwrap());
        let (lo, hi): (Tensor<f32>, Tensor<f32>) = (v.slice_tensor(0), v.slice_tensor(2));
        let cfg = SamplerConfig { steps: 10, seed: 4, ..SamplerConfig::default() };
        let a = generate_inbetween_slice(&m, &lo, &hi, 0.5, &sched(), &cfg).unwrap();
        assert_eq!(a.shape(), lo.shape());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, generate_inbetween_slice(&m, &lo, &hi, 0.5, &sched(), &cfg).unwrap());
        assert!(generate_inbetween_slice(&m, &lo, &hi, 1.0, &sched(), &cfg).is_err());
        assert!(generate_inbetween_slice(&m, &lo, &hi, 0.0, &sched(), &cfg).is_err());
    }

    #[test]
    fn super_resolution_geometry_and_pass_through() {
        let m = tiny(ConditioningMode::Concatenated);
        let mut lr = make_phantom_volume(2, 8, 10, 9).unwrap().truncate_depth(5).unwrap();
        lr.spacing = [2.8, 0.7, 0.7];
        let cfg = SamplerConfig { steps: 4, seed: 9, ..SamplerConfig::default() };
        let sr = super_resolve_volume(&m, &lr, 4, &sched(), &cfg, 1).unwrap();
        assert_eq!(sr.dims(), [17, 10, 9]);
        assert!((sr.spacing[0] - 0.7).abs() < 1e-12);
        assert_eq!(sr.spacing[1..], lr.spacing[1..]);
        for z in 0..5 {
            let (a, b) = (sr.slice(4 * z), lr.slice(z));
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // generated positions: (D_lr - 1)(R - 1) of them, none left unfilled
        let generated: Vec<usize> = (0..17).filter(|z| z % 4 != 0).collect();
        assert_eq!(generated.len(), 4 * 3);
        let (min, max) = lr.min_max();
        for &z in &generated {
            assert!(sr.slice(z).iter().all(|&v| v >= min - 1e-5 && v <= max + 1e-5));
        }
        let threaded = super_resolve_volume(&m, &lr, 4, &sched(), &cfg, 3).unwrap();
        assert_eq!(threaded, sr);
        assert!(super_resolve_volume(&m, &lr, 1, &sched(), &cfg, 1).is_err());
    }

    #[test]
    fn slice_seeds_are_distinct() {
        let mut seeds: Vec<u64> = (0..6).flat_map(|m| (1..5).map(move |j| slice_seed(7, m, j))).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 24);
    }
}
