//! Architecture shared by the conditioning hourglass and the noise predictor:
//! configuration, parameter layout and the U-Net forward pass.

use interslice_tensor::{ParamId, ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::conditioning::{self, PyramidTap, EMBED_DIM};
use crate::{Error, Result};

/// How the noise predictor is conditioned on the slice pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Feature pyramid from the conditioning hourglass drives element-wise modulation.
    Hierarchical,
    /// Ablation: pooled raw slices drive element-wise modulation and the offset
    /// embedding is concatenated to the timestep embedding.
    Concatenated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub mode: ConditioningMode,
    pub tap: PyramidTap,
    /// Largest timestep the embedding accepts (the schedule's `T`).
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            channel_mults: vec![1, 2, 4, 8],
            groups: 8,
            mode: ConditioningMode::Hierarchical,
            tap: PyramidTap::Decoder,
            timesteps: 1000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("need at least 2 levels, got {}", self.levels)));
        }
        if self.channel_mults.len() != self.levels {
            return Err(Error::Config(format!(
                "{} channel multipliers for {} levels",
                self.channel_mults.len(),
                self.levels
            )));
        }
        if self.base_channels == 0 || self.channel_mults.contains(&0) || self.groups == 0 {
            return Err(Error::Config("channel counts and groups must be positive".into()));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Spatial sizes must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Canonical text form; the basis of the config hash.
    pub fn canonical(&self) -> String {
        let mults: Vec<String> = self.channel_mults.iter().map(usize::to_string).collect();
        format!(
            "levels={};base_channels={};channel_mults={};groups={};mode={};tap={};timesteps={}",
            self.levels,
            self.base_channels,
            mults.join(","),
            self.groups,
            match self.mode {
                ConditioningMode::Hierarchical => "hierarchical",
                ConditioningMode::Concatenated => "concatenated",
            },
            match self.tap {
                PyramidTap::Decoder => "decoder",
                PyramidTap::Encoder => "encoder",
            },
            self.timesteps
        )
    }

    /// Inverse of [`ModelConfig::canonical`].
    pub fn parse_canonical(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = 0;
        for field in text.split(';') {
            let (key, value) =
                field.split_once('=').ok_or_else(|| Error::Format(format!("malformed model field {field:?}")))?;
            let bad = || Error::Format(format!("bad value {value:?} for model field {key}"));
            let int = || value.parse::<usize>().map_err(|_| bad());
            match key {
                "levels" => cfg.levels = int()?,
                "base_channels" => cfg.base_channels = int()?,
                "channel_mults" => {
                    cfg.channel_mults = value.split(',').map(|m| m.parse().map_err(|_| bad())).collect::<Result<_>>()?
                }
                "groups" => cfg.groups = int()?,
                "mode" => {
                    cfg.mode = match value {
                        "hierarchical" => ConditioningMode::Hierarchical,
                        "concatenated" => ConditioningMode::Concatenated,
                        _ => return Err(bad()),
                    }
                }
                "tap" => {
                    cfg.tap = match value {
                        "decoder" => PyramidTap::Decoder,
                        "encoder" => PyramidTap::Encoder,
                        _ => return Err(bad()),
                    }
                }
                "timesteps" => cfg.timesteps = int()?,
                _ => return Err(Error::Format(format!("unknown model field {key}"))),
            }
            seen += 1;
        }
        if seen != 7 {
            return Err(Error::Format(format!("model description has {seen} of 7 fields")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical form; differs between the full model and the ablation.
    pub fn hash(&self) -> u64 {
        stable_hash(&self.canonical())
    }
}

/// First 8 bytes of SHA-256, little-endian.
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EmbedIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub conv1: ConvIds,
    pub affine: LinearIds,
    pub conv2: ConvIds,
    pub lateral: Option<ConvIds>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub conv: ConvIds,
}

#[derive(Debug, Clone)]
pub(crate) struct UNetIds {
    pub input: ConvIds,
    pub encoder: Vec<BlockIds>,
    pub down: Vec<ConvIds>,
    pub up: Vec<ConvIds>,
    pub decoder: Vec<BlockIds>,
    pub head: Option<HeadIds>,
}

/// Parameter handles of the full model.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    /// Conditioning hourglass; absent in the concatenation ablation.
    pub hife: Option<UNetIds>,
    pub offset_embed: EmbedIds,
    pub time_embed: EmbedIds,
    pub main: UNetIds,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    /// First `n` entries one, the rest zero: a `(scale, shift)` bias.
    ScaleShift(usize),
}

struct Builder {
    store: ParamStore<f64>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.inits.push(init);
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, zero: bool) -> ConvIds {
        let init = if zero { Init::Zeros } else { Init::Normal((1.0 / (c_in * k * k) as f64).sqrt()) };
        ConvIds {
            w: self.add(format!("{name}.weight"), &[c_out, c_in, k, k], init),
            b: self.add(format!("{name}.bias"), &[c_out], Init::Zeros),
        }
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: Init) -> LinearIds {
        LinearIds {
            w: self.add(format!("{name}.weight"), &[d_out, d_in], Init::Normal((1.0 / d_in as f64).sqrt())),
            b: self.add(format!("{name}.bias"), &[d_out], bias),
        }
    }

    fn embed(&mut self, name: &str, d_in: usize, first_bias: Init) -> EmbedIds {
        EmbedIds {
            fc1: self.linear(&format!("{name}.fc1"), d_in, EMBED_DIM, first_bias),
            fc2: self.linear(&format!("{name}.fc2"), EMBED_DIM, EMBED_DIM, Init::Zeros),
        }
    }

    fn block(&mut self, name: &str, c: usize, emb_dim: usize, lateral: Option<(usize, usize)>) -> BlockIds {
        BlockIds {
            norm_gamma: self.add(format!("{name}.norm1.gamma"), &[c], Init::Ones),
            norm_beta: self.add(format!("{name}.norm1.beta"), &[c], Init::Zeros),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, false),
            affine: self.linear(&format!("{name}.channel_mod"), emb_dim, 2 * c, Init::ScaleShift(c)),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, false),
            lateral: lateral.map(|(c_cond, k)| ConvIds {
                w: self.add(
                    format!("{name}.element_mod.weight"),
                    &[2 * c, c_cond, k, k],
                    Init::Normal((1.0 / (c_cond * k * k) as f64).sqrt()),
                ),
                b: self.add(format!("{name}.element_mod.bias"), &[2 * c], Init::ScaleShift(c)),
            }),
        }
    }

    /// `lateral(level)` gives the conditioning channels and kernel for that level.
    fn unet(
        &mut self,
        name: &str,
        cfg: &ModelConfig,
        in_channels: usize,
        emb_dim: usize,
        lateral: Option<&dyn Fn(usize) -> (usize, usize)>,
        head: bool,
    ) -> UNetIds {
        let lat = |l: usize| lateral.map(|f| f(l));
        let input = self.conv(&format!("{name}.input"), in_channels, cfg.channels(0), 3, false);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.levels {
            encoder.push(self.block(&format!("{name}.enc{l}"), cfg.channels(l), emb_dim, lat(l)));
            if l + 1 < cfg.levels {
                down.push(self.conv(&format!("{name}.down{l}"), cfg.channels(l), cfg.channels(l + 1), 3, false));
            }
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..cfg.levels).rev() {
            if l + 1 < cfg.levels {
                up.push(self.conv(&format!("{name}.up{l}"), cfg.channels(l + 1), cfg.channels(l), 3, false));
            }
            decoder.push(self.block(&format!("{name}.dec{l}"), cfg.channels(l), emb_dim, lat(l)));
        }
        // stored top-down during construction; index by level afterwards
        up.reverse();
        decoder.reverse();
        let head = head.then(|| HeadIds {
            gamma: self.add(format!("{name}.head.gamma"), &[cfg.channels(0)], Init::Ones),
            beta: self.add(format!("{name}.head.beta"), &[cfg.channels(0)], Init::Zeros),
            conv: self.conv(&format!("{name}.head.conv"), cfg.channels(0), 1, 3, true),
        });
        UNetIds { input, encoder, down, up, decoder, head }
    }

    fn finish(self, seed: u64, dense: bool) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = self.store;
        let ids: Vec<ParamId> = store.ids().collect();
        for (id, init) in ids.into_iter().zip(self.inits) {
            let t = store.get_mut(id);
            let n = t.len();
            match init {
                Init::Normal(std) => {
                    for v in t.data_mut() {
                        *v = std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                    }
                }
                Init::Zeros => t.data_mut().fill(0.0),
                Init::Ones => t.data_mut().fill(1.0),
                Init::ScaleShift(c) => {
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        *v = if i < c { 1.0 } else { 0.0 };
                    }
                    debug_assert_eq!(n, 2 * c);
                }
            }
            if dense {
                // probe initialization: every parameter gets a random perturbation
                let scale = match init {
                    Init::Normal(std) => std,
                    _ => 0.2,
                };
                for v in t.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += 0.5 * scale * z;
                }
            }
        }
        store
    }
}

/// Builds the parameter layout for `cfg` and draws initial values.
///
/// With `dense` set, zero-initialized tensors (biases, the output head) also
/// get random values so that every parameter influences the output.
pub(crate) fn build(cfg: &ModelConfig, seed: u64, dense: bool) -> (Layout, ParamStore<f64>) {
    let mut b = Builder { store: ParamStore::new(), inits: Vec::new() };
    let layout = match cfg.mode {
        ConditioningMode::Hierarchical => {
            let offset_embed = b.embed("hife.embed", 1, Init::Normal(1.0));
            let hife = b.unet("hife.unet", cfg, 2, EMBED_DIM, None, false);
            let time_embed = b.embed("main.embed", EMBED_DIM, Init::Zeros);
            let lateral = |l: usize| (cfg.channels(l), 1);
            let main = b.unet("main.unet", cfg, 1, EMBED_DIM, Some(&lateral), true);
            Layout { hife: Some(hife), offset_embed, time_embed, main }
        }
        ConditioningMode::Concatenated => {
            let offset_embed = b.embed("ablate.offset_embed", 1, Init::Normal(1.0));
            let time_embed = b.embed("main.embed", EMBED_DIM, Init::Zeros);
            let lateral = |_: usize| (2, 3);
            let main = b.unet("main.unet", cfg, 1, 2 * EMBED_DIM, Some(&lateral), true);
            Layout { hife: None, offset_embed, time_embed, main }
        }
    };
    (layout, b.finish(seed, dense))
}

pub(crate) struct UNetOut {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub output: Option<Var>,
}

fn affine_norm<T: interslice_tensor::Scalar>(
    s: &mut Session<'_, T>,
    h: Var,
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
) -> Var {
    let c = s.graph.shape(h)[1];
    let n = s.graph.group_norm(h, conditioning::effective_groups(c, groups));
    let g = s.p(gamma);
    let b = s.p(beta);
    let scaled = s.graph.mul_channel(n, g);
    s.graph.add_channel(scaled, b)
}

/// Residual block: `GroupNorm → SiLU → conv`, then channel-wise modulation by
/// `emb` (followed by element-wise modulation by `cond` when given) `→ SiLU → conv`,
/// plus the identity skip.
pub(crate) fn block_forward<T: interslice_tensor::Scalar>(
    s: &mut Session<'_, T>,
    ids: &BlockIds,
    h: Var,
    emb: Var,
    cond: Option<Var>,
    groups: usize,
) -> Var {
    let x = affine_norm(s, h, ids.norm_gamma, ids.norm_beta, groups);
    let x = s.graph.silu(x);
    let x = s.conv(x, ids.conv1.w, Some(ids.conv1.b), 1, 1);
    let (aw, ab) = (s.p(ids.affine.w), s.p(ids.affine.b));
    let mut x = conditioning::channel_mod_vars(&mut s.graph, x, emb, aw, ab, groups);
    if let (Some(cond), Some(lat)) = (cond, ids.lateral) {
        let (lw, lb) = (s.p(lat.w), s.p(lat.b));
        x = conditioning::element_mod_vars(&mut s.graph, x, cond, lw, lb, groups);
    }
    let x = s.graph.silu(x);
    let x = s.conv(x, ids.conv2.w, Some(ids.conv2.b), 1, 1);
    s.graph.add(h, x)
}

pub(crate) fn unet_forward<T: interslice_tensor::Scalar>(
    s: &mut Session<'_, T>,
    cfg: &ModelConfig,
    ids: &UNetIds,
    x: Var,
    emb: Var,
    laterals: Option<&[Var]>,
) -> UNetOut {
    let cond = |l: usize| laterals.map(|c| c[l]);
    let mut h = s.conv(x, ids.input.w, Some(ids.input.b), 1, 1);
    let mut encoder = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        h = block_forward(s, &ids.encoder[l], h, emb, cond(l), cfg.groups);
        encoder.push(h);
        if l + 1 < cfg.levels {
            h = s.conv(h, ids.down[l].w, Some(ids.down[l].b), 2, 1);
        }
    }
    let mut decoder = vec![h; cfg.levels];
    for l in (0..cfg.levels).rev() {
        if l + 1 < cfg.levels {
            let up = s.graph.upsample2x(h);
            let up = s.conv(up, ids.up[l].w, Some(ids.up[l].b), 1, 1);
            h = s.graph.add(up, encoder[l]);
        }
        h = block_forward(s, &ids.decoder[l], h, emb, cond(l), cfg.groups);
        decoder[l] = h;
    }
    let output = ids.head.map(|head| {
        let y = affine_norm(s, h, head.gamma, head.beta, cfg.groups);
        let y = s.graph.silu(y);
        s.conv(y, head.conv.w, Some(head.conv.b), 1, 1)
    });
    UNetOut { encoder, decoder, output }
}
