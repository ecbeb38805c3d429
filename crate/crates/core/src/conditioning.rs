//! Conditional feature extraction: embeddings, group-normalized modulation and
//! the hourglass network that turns two adjacent slices plus an offset into a
//! multi-scale feature pyramid.

use interslice_tensor::{Graph, Scalar, Session, Tensor, Var};

use crate::network::{self, EmbedIds, ModelConfig, UNetIds};
use crate::{Error, Result};

/// Width of the offset and timestep embeddings.
pub const EMBED_DIM: usize = 128;

/// Which side of the conditioning hourglass feeds the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidTap {
    Decoder,
    Encoder,
}

/// Multi-scale conditional features; level `l` has shape `[N, C_l, H/2^l, W/2^l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

/// Group count actually used for `channels`: the configured count, reduced to
/// the channel count for narrow maps and to a common divisor otherwise.
pub fn effective_groups(channels: usize, groups: usize) -> usize {
    if channels < groups {
        channels
    } else {
        gcd(channels, groups)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `k_s ⊙ GroupNorm(h) + k_b` with `(k_s, k_b)` an affine image of `emb`.
pub fn channel_mod_vars<T: Scalar>(g: &mut Graph<T>, h: Var, emb: Var, w: Var, b: Var, groups: usize) -> Var {
    let c = g.shape(h)[1];
    let params = g.linear(emb, w, Some(b));
    assert_eq!(g.shape(params)[1], 2 * c, "modulation affine must produce 2C values");
    let scale = g.narrow(params, 0, c);
    let shift = g.narrow(params, c, c);
    let normed = g.group_norm(h, effective_groups(c, groups));
    let scaled = g.mul_channel(normed, scale);
    g.add_channel(scaled, shift)
}

/// `x_s ⊙ GroupNorm(h) + x_b` with per-pixel `(x_s, x_b)` projected from `cond`.
pub fn element_mod_vars<T: Scalar>(g: &mut Graph<T>, h: Var, cond: Var, w: Var, b: Var, groups: usize) -> Var {
    let c = g.shape(h)[1];
    let pad = g.shape(w)[2] / 2;
    let params = g.conv2d(cond, w, Some(b), 1, pad);
    let scale = g.narrow(params, 0, c);
    let shift = g.narrow(params, c, c);
    let normed = g.group_norm(h, effective_groups(c, groups));
    let scaled = g.mul(normed, scale);
    g.add(scaled, shift)
}

/// Group normalization without affine parameters.
pub fn group_norm<T: Scalar>(h: &Tensor<T>, groups: usize) -> Tensor<T> {
    let mut g = Graph::inference();
    let x = g.input(h.clone());
    let y = g.group_norm(x, effective_groups(h.dim(1), groups));
    g.value(y).clone()
}

/// Learnable affine map `weight · x + bias`.
#[derive(Debug, Clone)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Channel-wise modulation of `h[N,C,H,W]` by `emb[N,128]` through an affine map to `2C`.
pub fn channel_mod<T: Scalar>(h: &Tensor<T>, emb: &Tensor<T>, affine: &Affine<T>, groups: usize) -> Result<Tensor<T>> {
    let c = h.dim(1);
    if affine.weight.shape() != [2 * c, emb.dim(1)] || affine.bias.shape() != [2 * c] {
        return Err(Error::Dimension(format!(
            "affine {:?} cannot map a {}-d embedding to 2x{c} channels",
            affine.weight.shape(),
            emb.dim(1)
        )));
    }
    if emb.dim(0) != h.dim(0) {
        return Err(Error::Dimension("embedding batch differs from feature batch".into()));
    }
    let mut g = Graph::inference();
    let (hv, ev) = (g.input(h.clone()), g.input(emb.clone()));
    let (w, b) = (g.input(affine.weight.clone()), g.input(affine.bias.clone()));
    let out = channel_mod_vars(&mut g, hv, ev, w, b, groups);
    Ok(g.value(out).clone())
}

/// Element-wise modulation of `h` by pyramid features `cond` at the same level.
pub fn element_mod<T: Scalar>(
    h: &Tensor<T>,
    cond: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let (n, c, hh, ww) = h.dims4();
    let (cn, cc, ch, cw) = cond.dims4();
    if (cn, ch, cw) != (n, hh, ww) {
        return Err(Error::Dimension(format!(
            "condition {:?} does not match feature level {:?}",
            cond.shape(),
            h.shape()
        )));
    }
    if weight.ndim() != 4 || weight.dim(0) != 2 * c || weight.dim(1) != cc || bias.shape() != [2 * c] {
        return Err(Error::Dimension(format!("projection {:?} cannot map {cc} to 2x{c} channels", weight.shape())));
    }
    let mut g = Graph::inference();
    let (hv, cv) = (g.input(h.clone()), g.input(cond.clone()));
    let (w, b) = (g.input(weight.clone()), g.input(bias.clone()));
    let out = element_mod_vars(&mut g, hv, cv, w, b, groups);
    Ok(g.value(out).clone())
}

/// Two fully connected layers with a SiLU between them.
pub(crate) fn embed_vars<T: Scalar>(s: &mut Session<'_, T>, ids: &EmbedIds, input: Var) -> Var {
    let h = s.linear(input, ids.fc1.w, Some(ids.fc1.b));
    let h = s.graph.silu(h);
    s.linear(h, ids.fc2.w, Some(ids.fc2.b))
}

/// Sinusoidal features of integer timesteps, `[N, 128]`.
pub fn timestep_features<T: Scalar>(ts: &[usize]) -> Tensor<T> {
    let half = EMBED_DIM / 2;
    let mut data = Vec::with_capacity(ts.len() * EMBED_DIM);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| T::of(a.sin())));
        data.extend(args.iter().map(|a| T::of(a.cos())));
    }
    Tensor::from_vec(&[ts.len(), EMBED_DIM], data)
}

pub(crate) fn check_offsets(ks: &[f64]) -> Result<()> {
    if let Some(k) = ks.iter().find(|k| !(0.0..=1.0).contains(*k)) {
        return Err(Error::Domain(format!("offset {k} outside [0, 1]")));
    }
    Ok(())
}

/// Runs the conditioning hourglass on `concat(lower, upper)` with the offset
/// embedding driving every block, returning the tapped pyramid.
pub(crate) fn hife_vars<T: Scalar>(
    s: &mut Session<'_, T>,
    cfg: &ModelConfig,
    embed: &EmbedIds,
    unet: &UNetIds,
    lower: Var,
    upper: Var,
    k: Var,
) -> Vec<Var> {
    let x = s.graph.concat(&[lower, upper]);
    let emb = embed_vars(s, embed, k);
    let out = network::unet_forward(s, cfg, unet, x, emb, None);
    match cfg.tap {
        PyramidTap::Decoder => out.decoder,
        PyramidTap::Encoder => out.encoder,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn groups_reduce_for_narrow_maps() {
        assert_eq!(effective_groups(16, 8), 8);
        assert_eq!(effective_groups(4, 8), 4);
        assert_eq!(effective_groups(2, 8), 2);
        assert_eq!(effective_groups(12, 8), 4);
    }

    #[test]
    fn group_norm_of_constant_is_zero() {
        let h = Tensor::full(&[1, 8, 4, 4], 3.5);
        assert!(group_norm(&h, 8).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_statistics() {
        let h = random(&[2, 16, 5, 5], 1);
        let y = group_norm(&h, 8);
        for group in y.data().chunks(2 * 25) {
            let m = group.iter().sum::<f64>() / group.len() as f64;
            let v = group.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / group.len() as f64;
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn single_group_matches_two_pass_layer_norm() {
        let h = random(&[1, 6, 3, 4], 2);
        let y = group_norm(&h, 1);
        let x = h.data();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for (o, v) in y.data().iter().zip(x) {
            let expect = (v - mean) / (var + interslice_tensor::GROUP_NORM_EPS).sqrt();
            assert!((o - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn group_norm_is_invariant_to_positive_affine() {
        let h = random(&[1, 8, 6, 6], 3).map(|v| 10.0 * v);
        let shifted = h.map(|v| 2.5 * v + 0.75);
        let (a, b) = (group_norm(&h, 4), group_norm(&shifted, 4));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    fn forced_affine(c: usize, d: usize, scale: f64, shift: f64) -> Affine<f64> {
        let mut bias = vec![scale; c];
        bias.extend(vec![shift; c]);
        Affine { weight: Tensor::zeros(&[2 * c, d]), bias: Tensor::from_vec(&[2 * c], bias) }
    }

    #[test]
    fn channel_mod_identity_and_zero_scale() {
        let h = random(&[2, 8, 4, 4], 4);
        let emb = random(&[2, EMBED_DIM], 5);
        let out = channel_mod(&h, &emb, &forced_affine(8, EMBED_DIM, 1.0, 0.0), 8).unwrap();
        assert_eq!(out, group_norm(&h, 8));
        let out = channel_mod(&h, &emb, &forced_affine(8, EMBED_DIM, 0.0, 0.3), 8).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.3));
        let bad = forced_affine(4, EMBED_DIM, 1.0, 0.0);
        assert!(channel_mod(&h, &emb, &bad, 8).is_err());
    }

    #[test]
    fn channel_mod_matches_elementwise_oracle() {
        let (n, c, hh, ww, d) = (2, 4, 3, 3, 6);
        let h = random(&[n, c, hh, ww], 6);
        let emb = random(&[n, d], 7);
        let affine = Affine { weight: random(&[2 * c, d], 8), bias: random(&[2 * c], 9) };
        let out = channel_mod(&h, &emb, &affine, 2).unwrap();
        let gn = group_norm(&h, 2);
        for s in 0..n {
            for ch in 0..c {
                let proj = |row: usize| {
                    affine.bias.data()[row]
                        + (0..d).map(|j| affine.weight.data()[row * d + j] * emb.data()[s * d + j]).sum::<f64>()
                };
                let (ks, kb) = (proj(ch), proj(c + ch));
                for p in 0..hh * ww {
                    let i = (s * c + ch) * hh * ww + p;
                    assert!((out.data()[i] - (ks * gn.data()[i] + kb)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn element_mod_identity_and_oracle() {
        let (n, c, cc, hh, ww) = (1, 4, 3, 4, 5);
        let h = random(&[n, c, hh, ww], 10);
        let cond = random(&[n, cc, hh, ww], 11);
        let mut bias = vec![1.0; c];
        bias.extend(vec![0.0; c]);
        let out =
            element_mod(&h, &cond, &Tensor::zeros(&[2 * c, cc, 1, 1]), &Tensor::from_vec(&[2 * c], bias), 4).unwrap();
        assert_eq!(out, group_norm(&h, 4));

        let w = random(&[2 * c, cc, 1, 1], 12);
        let b = random(&[2 * c], 13);
        let out = element_mod(&h, &cond, &w, &b, 2).unwrap();
        assert_eq!(out.shape(), h.shape());
        let gn = group_norm(&h, 2);
        for ch in 0..c {
            for p in 0..hh * ww {
                let proj = |row: usize| {
                    b.data()[row] + (0..cc).map(|j| w.data()[row * cc + j] * cond.data()[j * hh * ww + p]).sum::<f64>()
                };
                let i = ch * hh * ww + p;
                let expect = proj(ch) * gn.data()[i] + proj(c + ch);
                assert!((out.data()[i] - expect).abs() < 1e-12);
            }
        }
        let wrong_level = random(&[n, cc, hh / 2, ww], 14);
        assert!(matches!(element_mod(&h, &wrong_level, &w, &b, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn modulation_is_affine_in_scale_and_shift() {
        // superposition: outputs for (s1, b1) and (s2, b2) combine linearly
        let h = random(&[1, 4, 3, 3], 15);
        let emb = Tensor::zeros(&[1, 2]);
        let a1 = Affine { weight: Tensor::zeros(&[8, 2]), bias: random(&[8], 16) };
        let a2 = Affine { weight: Tensor::zeros(&[8, 2]), bias: random(&[8], 17) };
        let (alpha, beta) = (0.3, -1.7);
        let mixed =
            Affine { weight: Tensor::zeros(&[8, 2]), bias: a1.bias.zip_map(&a2.bias, |x, y| alpha * x + beta * y) };
        let o1 = channel_mod(&h, &emb, &a1, 2).unwrap();
        let o2 = channel_mod(&h, &emb, &a2, 2).unwrap();
        let om = channel_mod(&h, &emb, &mixed, 2).unwrap();
        for ((m, x), y) in om.data().iter().zip(o1.data()).zip(o2.data()) {
            assert!((m - (alpha * x + beta * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_features_shape_and_range() {
        let f: Tensor<f64> = timestep_features(&[1, 1000]);
        assert_eq!(f.shape(), &[2, EMBED_DIM]);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(f.sample(0), f.sample(1));
    }

    #[test]
    fn offsets_outside_unit_interval_are_rejected() {
        assert!(check_offsets(&[0.0, 0.5, 1.0]).is_ok());
        assert!(matches!(check_offsets(&[1.5]), Err(Error::Domain(_))));
        assert!(check_offsets(&[-0.1]).is_err());
    }
}
