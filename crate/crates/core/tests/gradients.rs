//! Finite-difference checks of analytic gradients through the full model.

use interslice_core::conditioning::PyramidTap;
use interslice_core::data::{make_phantom_volume, normalize_volume};
use interslice_core::denoiser::Model;
use interslice_core::network::{ConditioningMode, ModelConfig};
use interslice_core::schedule::{standard_normal, NoiseSchedule};
use interslice_core::trainer::{loss_with_noise, sample_training_tuple, SlicePairSample};
use interslice_tensor::{ParamStore, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(mode: ConditioningMode) -> ModelConfig {
    ModelConfig {
        levels: 3,
        base_channels: 8,
        channel_mults: vec![1, 2, 2],
        groups: 4,
        mode,
        tap: PyramidTap::Decoder,
        timesteps: 1000,
    }
}

fn batch(seed: u64) -> Vec<SlicePairSample<f64>> {
    let v = normalize_volume(&make_phantom_volume(seed, 9, 16, 16).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![sample_training_tuple(&v, &[2, 3, 4], &mut rng).unwrap()]
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Random `(tensor, element)` coordinates drawn from the tensors whose names pass `keep`.
fn coordinates(store: &ParamStore<f64>, n: usize, seed: u64, keep: impl Fn(&str) -> bool) -> Vec<(usize, usize)> {
    let tensors: Vec<usize> = store.iter().enumerate().filter(|(_, (name, _))| keep(name)).map(|(i, _)| i).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = tensors[rng.random_range(0..tensors.len())];
            (t, rng.random_range(0..store.tensors()[t].len()))
        })
        .collect()
}

fn check_loss_gradients(mode: ConditioningMode) {
    let model: Model<f64> = Model::init_dense(config(mode), 21).unwrap();
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let b = batch(3);
    let eps = vec![standard_normal(&[1, 1, 16, 16], &mut ChaCha8Rng::seed_from_u64(4))];
    let ts = [370];
    let (_, grads) = loss_with_noise(&model, &b, &ts, &eps, &sched).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (t, i) in coordinates(model.params(), 20, 5, |_| true) {
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().tensors_mut()[t].data_mut()[i] += delta;
            loss_with_noise(&m, &b, &ts, &eps, &sched).unwrap().0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads[t].data()[i];
        let name = model.params().iter().nth(t).unwrap().0;
        let e = rel_err(analytic, numeric);
        assert!(e <= 1e-4, "{name}[{i}]: analytic {analytic:e} numeric {numeric:e}");
        worst = worst.max(e);
    }
    assert!(worst.is_finite());
}

#[test]
fn loss_gradients_match_finite_differences() {
    check_loss_gradients(ConditioningMode::Hierarchical);
}

#[test]
fn ablated_loss_gradients_match_finite_differences() {
    check_loss_gradients(ConditioningMode::Concatenated);
}

/// Sum of every pyramid level as a function of the conditioning parameters and `k`.
fn pyramid_sum(model: &Model<f64>, lower: &Tensor<f64>, upper: &Tensor<f64>, k: f64) -> f64 {
    let p = model.hife_forward(lower, upper, &[k]).unwrap();
    p.levels.iter().map(|t| t.sum()).sum()
}

#[test]
fn pyramid_gradients_match_finite_differences() {
    let model: Model<f64> = Model::init_dense(config(ConditioningMode::Hierarchical), 22).unwrap();
    let b = batch(7);
    let (lower, upper, k) = (b[0].lower.clone(), b[0].upper.clone(), 0.375);

    let mut s = Session::new(model.params());
    let (l, u) = (s.graph.input(lower.clone()), s.graph.input(upper.clone()));
    let kv = s.graph.leaf(Tensor::from_vec(&[1, 1], vec![k]));
    let cond = model.condition_vars(&mut s, l, u, kv);
    let sums: Vec<_> = cond.levels.iter().map(|&v| s.graph.sum(v)).collect();
    let mut total = sums[0];
    for &v in &sums[1..] {
        total = s.graph.add(total, v);
    }
    let mut grads = s.graph.backward(total);
    let dk = grads.get(kv).unwrap().data()[0];
    let params = s.collect(&mut grads);

    let h = 1e-5;
    let numeric_k =
        (pyramid_sum(&model, &lower, &upper, k + h) - pyramid_sum(&model, &lower, &upper, k - h)) / (2.0 * h);
    assert!(rel_err(dk, numeric_k) <= 1e-4, "d/dk: analytic {dk:e} numeric {numeric_k:e}");

    for (t, i) in coordinates(model.params(), 20, 8, |n| n.starts_with("hife.")) {
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().tensors_mut()[t].data_mut()[i] += delta;
            pyramid_sum(&m, &lower, &upper, k)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = params[t].data()[i];
        assert!(rel_err(analytic, numeric) <= 1e-4, "param {t}[{i}]: {analytic:e} vs {numeric:e}");
    }
}

fn dead_parameters(mode: ConditioningMode) -> Vec<String> {
    let model: Model<f64> = Model::init_dense(config(mode), 23).unwrap();
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut alive = vec![false; model.params().len()];
    for seed in 0..3 {
        let b = batch(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let eps = vec![standard_normal(&[1, 1, 16, 16], &mut rng)];
        let (_, grads) = loss_with_noise(&model, &b, &[rng.random_range(1..=1000)], &eps, &sched).unwrap();
        for (a, g) in alive.iter_mut().zip(&grads) {
            *a |= g.data().iter().any(|&v| v != 0.0);
        }
    }
    model.params().iter().zip(alive).filter(|(_, a)| !a).map(|((n, _), _)| n.to_string()).collect()
}

#[test]
fn every_parameter_receives_gradient() {
    assert_eq!(dead_parameters(ConditioningMode::Hierarchical), Vec::<String>::new());
    assert_eq!(dead_parameters(ConditioningMode::Concatenated), Vec::<String>::new());
}

#[test]
fn conditioning_branch_is_trained_jointly() {
    // standard initialization: only the zero output head sees gradient at
    // first, so take one step before probing the conditioning branch
    let mut model: Model<f64> = Model::init(config(ConditioningMode::Hierarchical), 24).unwrap();
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let b = batch(9);
    let eps = vec![standard_normal(&[1, 1, 16, 16], &mut ChaCha8Rng::seed_from_u64(1))];
    let (_, grads) = loss_with_noise(&model, &b, &[200], &eps, &sched).unwrap();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let hife_norm = |g: &[Tensor<f64>]| -> f64 {
        names.iter().zip(g).filter(|(n, _)| n.starts_with("hife.")).map(|(_, t)| t.sq_norm()).sum()
    };
    assert_eq!(hife_norm(&grads), 0.0);
    for (p, g) in model.params_mut().tensors_mut().iter_mut().zip(&grads) {
        p.add_assign(&g.map(|v| -0.1 * v.signum()));
    }
    let (_, grads) = loss_with_noise(&model, &b, &[200], &eps, &sched).unwrap();
    assert!(hife_norm(&grads) > 0.0);
}
