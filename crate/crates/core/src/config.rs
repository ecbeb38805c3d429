//! Flat `key = value` run configuration shared by all commands.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::conditioning::PyramidTap;
use crate::network::{ConditioningMode, ModelConfig};
use crate::sampler::{SamplerConfig, SamplerMode};
use crate::schedule::NoiseSchedule;
use crate::trainer::{Adam, TrainConfig};
use crate::{Error, Result};

/// Every tunable of a run. Parsed from text, overridden by command-line
/// flags, and logged in full when a command starts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub levels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub conditioning: ConditioningMode,
    pub pyramid_tap: PyramidTap,
    pub iterations: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub ratios: Vec<usize>,
    /// Zero disables clipping.
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub prefetch: usize,
    pub sampler: SamplerMode,
    pub sampler_steps: usize,
    pub jobs: usize,
    pub volume_count: usize,
    /// Phantom size `[D, H, W]`.
    pub volume_size: [usize; 3],
    /// Phantom voxel spacing in millimetres.
    pub voxel_spacing: f64,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            levels: model.levels,
            base_channels: model.base_channels,
            channel_mults: model.channel_mults,
            groups: model.groups,
            conditioning: model.mode,
            pyramid_tap: model.tap,
            iterations: train.iterations,
            lr: train.lr,
            batch_size: train.batch_size,
            ratios: train.ratios,
            clip_norm: 1.0,
            adam_beta1: train.adam.beta1,
            adam_beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            log_every: train.log_every,
            checkpoint_every: 1000,
            prefetch: 0,
            sampler: SamplerMode::Ddim,
            sampler_steps: 100,
            jobs: 1,
            volume_count: 20,
            volume_size: [33, 64, 64],
            voxel_spacing: 0.7,
            data_dir: None,
            checkpoint: None,
            train_log: None,
        }
    }
}

/// Keys accepted in configuration files, in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "timesteps",
    "beta_start",
    "beta_end",
    "levels",
    "base_channels",
    "channel_mults",
    "groups",
    "conditioning",
    "pyramid_tap",
    "iterations",
    "lr",
    "batch_size",
    "ratios",
    "clip_norm",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "log_every",
    "checkpoint_every",
    "prefetch",
    "sampler",
    "sampler_steps",
    "jobs",
    "volume_count",
    "volume_size",
    "voxel_spacing",
    "data_dir",
    "checkpoint",
    "train_log",
];

fn list(value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| v.trim().parse::<usize>().map_err(|_| bad(value))).collect()
}

fn bad(value: &str) -> Error {
    Error::Config(format!("cannot parse {value:?}"))
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(value))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(value)?,
            "timesteps" => self.timesteps = num(value)?,
            "beta_start" => self.beta_start = num(value)?,
            "beta_end" => self.beta_end = num(value)?,
            "levels" => self.levels = num(value)?,
            "base_channels" => self.base_channels = num(value)?,
            "channel_mults" => self.channel_mults = list(value)?,
            "groups" => self.groups = num(value)?,
            "conditioning" => {
                self.conditioning = match value {
                    "hierarchical" => ConditioningMode::Hierarchical,
                    "concatenated" => ConditioningMode::Concatenated,
                    _ => return Err(bad(value)),
                }
            }
            "pyramid_tap" => {
                self.pyramid_tap = match value {
                    "decoder" => PyramidTap::Decoder,
                    "encoder" => PyramidTap::Encoder,
                    _ => return Err(bad(value)),
                }
            }
            "iterations" => self.iterations = num(value)?,
            "lr" => self.lr = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "ratios" => self.ratios = list(value)?,
            "clip_norm" => self.clip_norm = num(value)?,
            "adam_beta1" => self.adam_beta1 = num(value)?,
            "adam_beta2" => self.adam_beta2 = num(value)?,
            "adam_eps" => self.adam_eps = num(value)?,
            "log_every" => self.log_every = num(value)?,
            "checkpoint_every" => self.checkpoint_every = num(value)?,
            "prefetch" => self.prefetch = num(value)?,
            "sampler" => {
                self.sampler = match value {
                    "ddim" => SamplerMode::Ddim,
                    "ddpm" => SamplerMode::Ddpm,
                    _ => return Err(bad(value)),
                }
            }
            "sampler_steps" => self.sampler_steps = num(value)?,
            "jobs" => self.jobs = num(value)?,
            "volume_count" => self.volume_count = num(value)?,
            "volume_size" => {
                self.volume_size = list(value)?.try_into().map_err(|_| bad(value))?;
            }
            "voxel_spacing" => self.voxel_spacing = num(value)?,
            "data_dir" => self.data_dir = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "train_log" => self.train_log = path(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The fully resolved configuration, one `key = value` line per key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }

    fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "timesteps" => self.timesteps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "levels" => self.levels.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "channel_mults" => join(&self.channel_mults),
            "groups" => self.groups.to_string(),
            "conditioning" => match self.conditioning {
                ConditioningMode::Hierarchical => "hierarchical".into(),
                ConditioningMode::Concatenated => "concatenated".into(),
            },
            "pyramid_tap" => match self.pyramid_tap {
                PyramidTap::Decoder => "decoder".into(),
                PyramidTap::Encoder => "encoder".into(),
            },
            "iterations" => self.iterations.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "ratios" => join(&self.ratios),
            "clip_norm" => self.clip_norm.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "prefetch" => self.prefetch.to_string(),
            "sampler" => match self.sampler {
                SamplerMode::Ddim => "ddim".into(),
                SamplerMode::Ddpm => "ddpm".into(),
            },
            "sampler_steps" => self.sampler_steps.to_string(),
            "jobs" => self.jobs.to_string(),
            "volume_count" => self.volume_count.to_string(),
            "volume_size" => join(&self.volume_size),
            "voxel_spacing" => self.voxel_spacing.to_string(),
            "data_dir" => show(&self.data_dir),
            "checkpoint" => show(&self.checkpoint),
            "train_log" => show(&self.train_log),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            groups: self.groups,
            mode: self.conditioning,
            tap: self.pyramid_tap,
            timesteps: self.timesteps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        if self.clip_norm < 0.0 || self.clip_norm.is_nan() {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(TrainConfig {
            iterations: self.iterations,
            lr: self.lr,
            batch_size: self.batch_size,
            ratios: self.ratios.clone(),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            adam: Adam { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps },
            seed: self.seed,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            prefetch: self.prefetch,
        })
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { mode: self.sampler, steps: self.sampler_steps, seed: self.seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_training_setup() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.batch_size, c.timesteps), (1e-4, 1, 1000));
        assert_eq!(c.ratios, vec![2, 3, 4]);
        assert_eq!((c.sampler, c.sampler_steps), (SamplerMode::Ddim, 100));
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let c =
            RunConfig::parse("# run\nlr = 3e-4   # faster\n\nratios = 2, 3\nconditioning = concatenated\n").unwrap();
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c.ratios, vec![2, 3]);
        assert_eq!(c.model().unwrap().mode, ConditioningMode::Concatenated);
        assert_eq!(c.iterations, RunConfig::default().iterations);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse("learning_rate = 1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("lr").is_err());
        assert!(RunConfig::parse("sampler = euler").is_err());
        assert!(RunConfig::parse("volume_size = 1,2").is_err());
        assert!(RunConfig::parse("levels = -1").is_err());
    }

    #[test]
    fn rendered_config_parses_back() {
        let mut c =
            RunConfig::parse("seed = 9\nvolume_size = 17,32,32\ntrain_log = out/log.csv\nclip_norm = 0").unwrap();
        c.channel_mults = vec![1, 2, 2, 4];
        let text = c.render();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(c.train().unwrap().clip_norm, None);
    }
}
