//! The noise predictor and the model object tying it to the conditioning path.

use interslice_tensor::{ParamId, ParamStore, Scalar, Session, Tensor, Var};

use crate::conditioning::{self, FeaturePyramid, EMBED_DIM};
use crate::network::{self, ConditioningMode, Layout, ModelConfig};
use crate::{Error, Result};

/// Everything the noise predictor needs besides `x_t` and `t`; computed once per
/// slice pair and offset and reused across all denoising steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning<T> {
    pub pyramid: FeaturePyramid<T>,
    /// Offset embedding for the concatenation ablation; `None` in hierarchical mode.
    pub offset_embedding: Option<Tensor<T>>,
}

/// Conditioning recorded on a graph.
#[derive(Debug, Clone)]
pub struct CondVars {
    pub levels: Vec<Var>,
    pub offset_embedding: Option<Var>,
}

/// Selects one residual block of the noise predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRef {
    Encoder(usize),
    Decoder(usize),
}

/// Architecture plus learnable parameters of the conditioning network and the
/// noise predictor.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Standard initialization; the output convolution starts at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, store) = network::build(&config, seed, false);
        Ok(Self { config, layout, params: store.cast() })
    }

    /// Every parameter random, including biases and the output head; used for
    /// gradient probes where a zero head would block all upstream gradients.
    pub fn init_dense(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, store) = network::build(&config, seed, true);
        Ok(Self { config, layout, params: store.cast() })
    }

    /// Wraps existing parameters after checking names and shapes against the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (layout, reference) = network::build(&config, 0, false);
        if reference.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.iter().zip(params.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    pub fn is_hierarchical(&self) -> bool {
        self.config.mode == ConditioningMode::Hierarchical
    }

    /// Parameter handles of a main-branch block's element-wise projection.
    pub fn lateral_params(&self, block: BlockRef) -> (ParamId, ParamId) {
        let ids = self.block_ids(block);
        let lat = ids.lateral.expect("main-branch blocks carry a lateral projection");
        (lat.w, lat.b)
    }

    fn block_ids(&self, block: BlockRef) -> &network::BlockIds {
        match block {
            BlockRef::Encoder(l) => &self.layout.main.encoder[l],
            BlockRef::Decoder(l) => &self.layout.main.decoder[l],
        }
    }

    /// Checks that `x` is a `[N, 1, H, W]` batch the network can process.
    pub fn check_slices(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 4 || x.dim(1) != 1 {
            return Err(Error::Dimension(format!("expected [N, 1, H, W] slices, got {:?}", x.shape())));
        }
        let (h, w) = (x.dim(2), x.dim(3));
        let stride = self.config.stride();
        if h < 8 || w < 8 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Dimension(format!(
                "slice {h}x{w} must be at least 8x8 and divisible by {stride}; pad first"
            )));
        }
        Ok(())
    }

    fn check_timesteps(&self, ts: &[usize]) -> Result<()> {
        if let Some(t) = ts.iter().find(|&&t| t == 0 || t > self.config.timesteps) {
            return Err(Error::Domain(format!("timestep {t} outside 1..={}", self.config.timesteps)));
        }
        Ok(())
    }

    fn check_pair(&self, lower: &Tensor<T>, upper: &Tensor<T>, ks: &[f64]) -> Result<()> {
        self.check_slices(lower)?;
        if lower.shape() != upper.shape() {
            return Err(Error::Dimension(format!(
                "slice pair shapes differ: {:?} vs {:?}",
                lower.shape(),
                upper.shape()
            )));
        }
        if ks.len() != lower.dim(0) {
            return Err(Error::Dimension(format!("{} offsets for a batch of {}", ks.len(), lower.dim(0))));
        }
        conditioning::check_offsets(ks)
    }

    pub fn offsets_tensor(ks: &[f64]) -> Tensor<T> {
        Tensor::from_vec(&[ks.len(), 1], ks.iter().map(|&k| T::of(k)).collect())
    }

    /// 128-d embeddings of offsets `ks`, `[N, 128]`.
    pub fn embed_offset(&self, ks: &[f64]) -> Result<Tensor<T>> {
        conditioning::check_offsets(ks)?;
        let mut s = Session::inference(&self.params);
        let k = s.graph.input(Self::offsets_tensor(ks));
        let e = conditioning::embed_vars(&mut s, &self.layout.offset_embed, k);
        Ok(s.graph.value(e).clone())
    }

    /// 128-d embeddings of timesteps, `[N, 128]`.
    pub fn embed_timestep(&self, ts: &[usize]) -> Result<Tensor<T>> {
        self.check_timesteps(ts)?;
        let mut s = Session::inference(&self.params);
        let f = s.graph.input(conditioning::timestep_features(ts));
        let e = conditioning::embed_vars(&mut s, &self.layout.time_embed, f);
        Ok(s.graph.value(e).clone())
    }

    /// Records the conditioning path for a batch of slice pairs.
    pub fn condition_vars(&self, s: &mut Session<'_, T>, lower: Var, upper: Var, k: Var) -> CondVars {
        match &self.layout.hife {
            Some(hife) => CondVars {
                levels: conditioning::hife_vars(s, &self.config, &self.layout.offset_embed, hife, lower, upper, k),
                offset_embedding: None,
            },
            None => {
                let mut levels = vec![s.graph.concat(&[lower, upper])];
                for l in 1..self.config.levels {
                    let pooled = s.graph.avgpool2x(levels[l - 1]);
                    levels.push(pooled);
                }
                let emb = conditioning::embed_vars(s, &self.layout.offset_embed, k);
                CondVars { levels, offset_embedding: Some(emb) }
            }
        }
    }

    /// Records the noise prediction for `x_t` given timestep features `[N, 128]`.
    pub fn eps_vars(&self, s: &mut Session<'_, T>, x_t: Var, t_features: Var, cond: &CondVars) -> Var {
        let temb = conditioning::embed_vars(s, &self.layout.time_embed, t_features);
        let emb = match cond.offset_embedding {
            Some(k) => s.graph.concat(&[temb, k]),
            None => temb,
        };
        let out = network::unet_forward(s, &self.config, &self.layout.main, x_t, emb, Some(&cond.levels));
        out.output.expect("noise predictor has an output head")
    }

    /// Conditioning for a batch of slice pairs `[N, 1, H, W]` at offsets `ks`.
    pub fn condition(&self, lower: &Tensor<T>, upper: &Tensor<T>, ks: &[f64]) -> Result<Conditioning<T>> {
        self.check_pair(lower, upper, ks)?;
        let mut s = Session::inference(&self.params);
        let (l, u) = (s.graph.input(lower.clone()), s.graph.input(upper.clone()));
        let k = s.graph.input(Self::offsets_tensor(ks));
        let cv = self.condition_vars(&mut s, l, u, k);
        Ok(Conditioning {
            pyramid: FeaturePyramid { levels: cv.levels.iter().map(|&v| s.graph.value(v).clone()).collect() },
            offset_embedding: cv.offset_embedding.map(|v| s.graph.value(v).clone()),
        })
    }

    /// Runs the conditioning hourglass; only available in hierarchical mode.
    pub fn hife_forward(&self, lower: &Tensor<T>, upper: &Tensor<T>, ks: &[f64]) -> Result<FeaturePyramid<T>> {
        if !self.is_hierarchical() {
            return Err(Error::Config("the concatenation ablation has no conditioning hourglass".into()));
        }
        Ok(self.condition(lower, upper, ks)?.pyramid)
    }

    fn check_conditioning(&self, x_t: &Tensor<T>, cond: &Conditioning<T>) -> Result<()> {
        let levels = &cond.pyramid.levels;
        if levels.len() != self.config.levels {
            return Err(Error::Dimension(format!(
                "pyramid has {} levels, model expects {}",
                levels.len(),
                self.config.levels
            )));
        }
        for (l, t) in levels.iter().enumerate() {
            let expect_c = if self.is_hierarchical() { self.config.channels(l) } else { 2 };
            let expect = [x_t.dim(0), expect_c, x_t.dim(2) >> l, x_t.dim(3) >> l];
            if t.shape() != expect {
                return Err(Error::Dimension(format!("pyramid level {l} is {:?}, expected {expect:?}", t.shape())));
            }
        }
        if self.is_hierarchical() != cond.offset_embedding.is_none() {
            return Err(Error::Config("conditioning does not match the model's conditioning mode".into()));
        }
        Ok(())
    }

    /// Noise prediction with exactly the shape of `x_t`.
    pub fn predict_noise(&self, x_t: &Tensor<T>, ts: &[usize], cond: &Conditioning<T>) -> Result<Tensor<T>> {
        self.check_slices(x_t)?;
        self.check_timesteps(ts)?;
        if ts.len() != x_t.dim(0) {
            return Err(Error::Dimension(format!("{} timesteps for a batch of {}", ts.len(), x_t.dim(0))));
        }
        self.check_conditioning(x_t, cond)?;
        let mut s = Session::inference(&self.params);
        let x = s.graph.input(x_t.clone());
        let f = s.graph.input(conditioning::timestep_features(ts));
        let cv = CondVars {
            levels: cond.pyramid.levels.iter().map(|t| s.graph.input(t.clone())).collect(),
            offset_embedding: cond.offset_embedding.as_ref().map(|t| s.graph.input(t.clone())),
        };
        let out = self.eps_vars(&mut s, x, f, &cv);
        Ok(s.graph.value(out).clone())
    }

    /// Noise prediction conditioned on a feature pyramid (hierarchical mode).
    pub fn eps_theta(&self, x_t: &Tensor<T>, ts: &[usize], pyramid: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        if !self.is_hierarchical() {
            return Err(Error::Config("eps_theta needs a hierarchical model; use eps_theta_ablated".into()));
        }
        let cond = Conditioning { pyramid: pyramid.clone(), offset_embedding: None };
        self.predict_noise(x_t, ts, &cond)
    }

    /// Noise prediction of the concatenation ablation, straight from the slice pair.
    pub fn eps_theta_ablated(
        &self,
        x_t: &Tensor<T>,
        ts: &[usize],
        lower: &Tensor<T>,
        upper: &Tensor<T>,
        ks: &[f64],
    ) -> Result<Tensor<T>> {
        if self.is_hierarchical() {
            return Err(Error::Config("eps_theta_ablated needs a model built in concatenation mode".into()));
        }
        let cond = self.condition(lower, upper, ks)?;
        self.predict_noise(x_t, ts, &cond)
    }

    /// Applies one main-branch residual block to `h` with embedding `emb` and
    /// conditional features `cond` from the matching pyramid level.
    pub fn cond_residual_block(
        &self,
        block: BlockRef,
        h: &Tensor<T>,
        emb: &Tensor<T>,
        cond: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let level = match block {
            BlockRef::Encoder(l) | BlockRef::Decoder(l) => l,
        };
        if level >= self.config.levels {
            return Err(Error::Dimension(format!("no level {level}")));
        }
        if h.ndim() != 4 || h.dim(1) != self.config.channels(level) {
            return Err(Error::Dimension(format!("block input {:?} has wrong channel count", h.shape())));
        }
        if cond.ndim() != 4 || cond.dim(2) != h.dim(2) || cond.dim(3) != h.dim(3) || cond.dim(0) != h.dim(0) {
            return Err(Error::Dimension(format!(
                "conditional features {:?} do not match level of {:?}",
                cond.shape(),
                h.shape()
            )));
        }
        let emb_dim = if self.is_hierarchical() { EMBED_DIM } else { 2 * EMBED_DIM };
        if emb.shape() != [h.dim(0), emb_dim] {
            return Err(Error::Dimension(format!("embedding {:?}, expected [{}, {emb_dim}]", emb.shape(), h.dim(0))));
        }
        let ids = *self.block_ids(block);
        let mut s = Session::inference(&self.params);
        let (hv, ev, cv) = (s.graph.input(h.clone()), s.graph.input(emb.clone()), s.graph.input(cond.clone()));
        let out = network::block_forward(&mut s, &ids, hv, ev, Some(cv), self.config.groups);
        Ok(s.graph.value(out).clone())
    }
}
