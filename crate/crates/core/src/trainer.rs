//! Training tuples, the noise-prediction objective, Adam and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use interslice_tensor::{ParamStore, Scalar, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::timestep_features;
use crate::data::{normalize_volume, IntensityRange, Volume};
use crate::denoiser::Model;
use crate::network::ModelConfig;
use crate::schedule::{q_sample, standard_normal, NoiseSchedule};
use crate::{Error, Result};

/// One training example: two slices `ratio` apart and the slice at offset `k` between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePairSample<T> {
    pub lower: Tensor<T>,
    pub upper: Tensor<T>,
    pub k: f64,
    pub target: Tensor<T>,
    pub ratio: usize,
    /// Index of the lower slice in the source volume.
    pub index: usize,
}

/// Draws a ratio uniformly from `ratios`, a lower slice `i` with `i + R` in range
/// and `j` uniform in `1..R`, in that order from `rng`.
pub fn sample_training_tuple<T: Scalar, R: Rng + ?Sized>(
    volume: &Volume,
    ratios: &[usize],
    rng: &mut R,
) -> Result<SlicePairSample<T>> {
    let max = check_ratios(ratios)?;
    if volume.depth() < max + 1 {
        return Err(Error::Data(format!(
            "volume has {} slices; ratio {max} needs at least {}",
            volume.depth(),
            max + 1
        )));
    }
    let ratio = ratios[rng.random_range(0..ratios.len())];
    let index = rng.random_range(0..volume.depth() - ratio);
    let j = rng.random_range(1..ratio);
    Ok(SlicePairSample {
        lower: volume.slice_tensor(index),
        upper: volume.slice_tensor(index + ratio),
        k: j as f64 / ratio as f64,
        target: volume.slice_tensor(index + j),
        ratio,
        index,
    })
}

fn check_ratios(ratios: &[usize]) -> Result<usize> {
    match ratios.iter().max() {
        None => Err(Error::Config("no training ratios given".into())),
        Some(_) if ratios.iter().any(|&r| r < 2) => Err(Error::Config("training ratios must be at least 2".into())),
        Some(&m) => Ok(m),
    }
}

fn stack<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = parts[0].shape();
    if parts.iter().any(|p| p.shape() != shape) {
        return Err(Error::Dimension("batch members have different slice shapes".into()));
    }
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut dims = shape.to_vec();
    dims[0] = parts.len();
    Ok(Tensor::from_vec(&dims, data))
}

/// Loss and parameter gradients (in parameter order) of one batch.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub timesteps: Vec<usize>,
}

/// Mean squared error between the predicted and the true noise for fixed
/// timesteps `ts` and noise `eps` (one per batch member), with gradients
/// with respect to every parameter of both branches.
pub fn loss_with_noise<T: Scalar>(
    model: &Model<T>,
    batch: &[SlicePairSample<T>],
    ts: &[usize],
    eps: &[Tensor<T>],
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if batch.is_empty() || ts.len() != batch.len() || eps.len() != batch.len() {
        return Err(Error::Dimension("batch, timesteps and noise must have equal nonzero length".into()));
    }
    let mut noisy = Vec::with_capacity(batch.len());
    for ((b, &t), e) in batch.iter().zip(ts).zip(eps) {
        noisy.push(q_sample(&b.target, t, e, sched)?);
    }
    let x_t = stack(&noisy.iter().collect::<Vec<_>>())?;
    let lower = stack(&batch.iter().map(|b| &b.lower).collect::<Vec<_>>())?;
    let upper = stack(&batch.iter().map(|b| &b.upper).collect::<Vec<_>>())?;
    let eps = stack(&eps.iter().collect::<Vec<_>>())?;
    model.check_slices(&x_t)?;
    if lower.shape() != x_t.shape() || upper.shape() != x_t.shape() {
        return Err(Error::Dimension("slice pair and target shapes differ".into()));
    }
    let ks: Vec<f64> = batch.iter().map(|b| b.k).collect();
    crate::conditioning::check_offsets(&ks)?;

    let mut s = Session::new(model.params());
    let (l, u) = (s.graph.input(lower), s.graph.input(upper));
    let k = s.graph.input(Model::offsets_tensor(&ks));
    let cond = model.condition_vars(&mut s, l, u, k);
    let x = s.graph.input(x_t);
    let f = s.graph.input(timestep_features(ts));
    let pred = model.eps_vars(&mut s, x, f, &cond);
    let target = s.graph.input(eps);
    let loss = s.graph.mse(pred, target);
    let value = s.graph.value(loss).data()[0].as_f64();
    Ok((value, s.param_grads(loss)))
}

/// Draws, per batch member, `t` uniform in `1..=T` and then `ε` from `rng`, and
/// evaluates [`loss_with_noise`]. A non-finite loss is reported as a numerical
/// fault at `step`.
pub fn loss_simple<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    batch: &[SlicePairSample<T>],
    sched: &NoiseSchedule,
    rng: &mut R,
    step: u64,
) -> Result<LossOutput<T>> {
    let mut ts = Vec::with_capacity(batch.len());
    let mut eps = Vec::with_capacity(batch.len());
    for b in batch {
        ts.push(rng.random_range(1..=sched.steps()));
        eps.push(standard_normal(b.target.shape(), rng));
    }
    let (loss, grads) = loss_with_noise(model, batch, &ts, &eps, sched)?;
    if !loss.is_finite() {
        return Err(Error::Numerical { step, message: format!("loss is {loss}") });
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::Numerical {
            step,
            message: format!("non-finite gradient for {}", model.params().name(model.params().ids().nth(i).unwrap())),
        });
    }
    Ok(LossOutput { loss, grads, timesteps: ts })
}

/// Standard Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_inplace(c);
        }
    }
    norm
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
    pub seed: u64,
    /// Positions of the tuple and noise random streams.
    pub data_word_pos: u128,
    pub noise_word_pos: u128,
    /// Resolved run configuration the state was produced with.
    pub config_text: String,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, seed: u64, config_text: impl Into<String>) -> Self {
        let m = model.params().zeros_like();
        let v = model.params().zeros_like();
        Self { model, m, v, step: 0, seed, data_word_pos: 0, noise_word_pos: 0, config_text: config_text.into() }
    }
}

/// One bias-corrected Adam update; increments the step counter.
pub fn adam_step<T: Scalar>(state: &mut TrainState<T>, grads: &[Tensor<T>], lr: f64, adam: &Adam) -> Result<()> {
    let params = state.model.params_mut();
    if grads.len() != params.len() {
        return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (g, p) in grads.iter().zip(params.tensors()) {
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.step += 1;
    let n = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(n);
    let c2 = 1.0 - adam.beta2.powi(n);
    let (b1, b2) = (T::of(adam.beta1), T::of(adam.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - adam.beta1), T::of(1.0 - adam.beta2));
    let step_size = T::of(lr / c1);
    let inv_c2 = T::of(1.0 / c2);
    let eps = T::of(adam.eps);
    let tensors = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, m), v), g) in tensors.iter_mut().zip(ms.iter_mut()).zip(vs.iter_mut()).zip(grads) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"ISDCKPT\n";
const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_store<T: Scalar>(out: &mut Vec<u8>, prefix: &str, store: &ParamStore<T>) {
    for (name, t) in store.iter() {
        put_str(out, &format!("{prefix}{name}"));
        put_u64(out, t.ndim() as u64);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

/// Serializes a state: magic, format version, model config hash, counters,
/// configuration text, then length-prefixed named arrays of little-endian `f64`.
pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = state.model.config();
    put_u64(&mut out, cfg.hash());
    put_str(&mut out, &cfg.canonical());
    put_u64(&mut out, state.step);
    put_u64(&mut out, state.seed);
    out.extend_from_slice(&state.data_word_pos.to_le_bytes());
    out.extend_from_slice(&state.noise_word_pos.to_le_bytes());
    put_str(&mut out, &state.config_text);
    put_u64(&mut out, 3 * state.model.params().len() as u64);
    put_store(&mut out, "", state.model.params());
    put_store(&mut out, "adam.m.", &state.m);
    put_store(&mut out, "adam.v.", &state.v);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("implausible length {n}")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

fn read_store<T: Scalar>(r: &mut Reader<'_>, prefix: &str, reference: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for (expect_name, expect) in reference.iter() {
        let name = r.string()?;
        if name.strip_prefix(prefix) != Some(expect_name) {
            return Err(Error::Incompatible(format!("found array {name}, expected {prefix}{expect_name}")));
        }
        let ndim = r.len()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len()?);
        }
        if shape != expect.shape() {
            return Err(Error::Incompatible(format!("{name} has shape {shape:?}, expected {:?}", expect.shape())));
        }
        let raw = r.take(expect.len() * 8)?;
        let data = raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        store.insert(expect_name, Tensor::from_vec(&shape, data));
    }
    Ok(store)
}

/// Parses a checkpoint. Nothing is returned unless the whole file is valid.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Incompatible(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let hash = r.u64()?;
    let config = ModelConfig::parse_canonical(&r.string()?)?;
    if config.hash() != hash {
        return Err(Error::Format("model description does not match its hash".into()));
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    let data_word_pos = r.u128()?;
    let noise_word_pos = r.u128()?;
    let config_text = r.string()?;
    let reference: Model<T> = Model::init(config.clone(), 0)?;
    let count = r.len()?;
    if count != 3 * reference.params().len() {
        return Err(Error::Incompatible(format!("{count} arrays, expected {}", 3 * reference.params().len())));
    }
    let params = read_store(&mut r, "", reference.params())?;
    let m = read_store(&mut r, "adam.m.", reference.params())?;
    let v = read_store(&mut r, "adam.v.", reference.params())?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = Model::from_params(config, params)?;
    Ok(TrainState { model, m, v, step, seed, data_word_pos, noise_word_pos, config_text })
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode_checkpoint(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and checks it was produced by a model configured as `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<TrainState<T>> {
    let state = load_checkpoint(path)?;
    let found = state.model.config();
    if found.hash() != expected.hash() {
        return Err(Error::Incompatible(format!(
            "checkpoint model [{}] (hash {:016x}) does not match [{}] (hash {:016x})",
            found.canonical(),
            found.hash(),
            expected.canonical(),
            expected.hash()
        )));
    }
    Ok(state)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub ratios: Vec<usize>,
    pub clip_norm: Option<f64>,
    pub adam: Adam,
    pub seed: u64,
    pub log_every: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Capacity of the tuple prefetch queue; zero samples inline.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 1e-4,
            batch_size: 1,
            ratios: vec![2, 3, 4],
            clip_norm: Some(1.0),
            adam: Adam::default(),
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
            prefetch: 0,
        }
    }
}

/// Tuple stream (1) and noise stream (2) of one root seed.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(1);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2);
    (data, noise)
}

fn draw_batch(dataset: &[Volume], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SlicePairSample<f32>>> {
    (0..cfg.batch_size)
        .map(|_| {
            let v = &dataset[rng.random_range(0..dataset.len())];
            sample_training_tuple(v, &cfg.ratios, rng)
        })
        .collect()
}

/// Drives optimization over a fixed dataset.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    sched: NoiseSchedule,
    dataset: Vec<Volume>,
    state: TrainState<f32>,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh training run; raw volumes are min-max normalized first.
    pub fn new(
        cfg: TrainConfig,
        sched: NoiseSchedule,
        model: ModelConfig,
        dataset: Vec<Volume>,
        config_text: &str,
    ) -> Result<Self> {
        let model = Model::init(model, cfg.seed)?;
        let state = TrainState::new(model, cfg.seed, config_text);
        Self::resume(cfg, sched, dataset, state)
    }

    /// Continues from `state`; the seed stored in the state wins over `cfg.seed`.
    pub fn resume(
        cfg: TrainConfig,
        sched: NoiseSchedule,
        dataset: Vec<Volume>,
        state: TrainState<f32>,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("training needs at least one volume".into()));
        }
        if cfg.batch_size == 0 || cfg.lr <= 0.0 || cfg.lr.is_nan() {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if cfg.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        let max = check_ratios(&cfg.ratios)?;
        if sched.steps() != state.model.config().timesteps {
            return Err(Error::Config(format!(
                "schedule has {} steps but the model embeds up to {}",
                sched.steps(),
                state.model.config().timesteps
            )));
        }
        let dataset: Vec<Volume> = dataset
            .into_iter()
            .map(|v| match v.range {
                IntensityRange::Raw => normalize_volume(&v),
                IntensityRange::Normalized { .. } => v,
            })
            .collect();
        for v in &dataset {
            if v.depth() < max + 1 {
                return Err(Error::Data(format!("volume with {} slices is too thin for ratio {max}", v.depth())));
            }
            let probe: Tensor<f32> = v.slice_tensor(0);
            state.model.check_slices(&probe)?;
        }
        let (mut data_rng, mut noise_rng) = streams(state.seed);
        data_rng.set_word_pos(state.data_word_pos);
        noise_rng.set_word_pos(state.noise_word_pos);
        Ok(Self { cfg, sched, dataset, state, data_rng, noise_rng })
    }

    pub fn state(&self) -> &TrainState<f32> {
        &self.state
    }

    pub fn into_state(self) -> TrainState<f32> {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn sync_positions(&mut self) {
        self.state.data_word_pos = self.data_rng.get_word_pos();
        self.state.noise_word_pos = self.noise_rng.get_word_pos();
    }

    fn step_with(&mut self, batch: &[SlicePairSample<f32>]) -> Result<f64> {
        let step = self.state.step + 1;
        let out = loss_simple(&self.state.model, batch, &self.sched, &mut self.noise_rng, step)?;
        let mut grads = out.grads;
        if let Some(c) = self.cfg.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        adam_step(&mut self.state, &grads, self.cfg.lr, &self.cfg.adam)?;
        if let Some(id) = self.state.model.params().ids().find(|&id| !self.state.model.params().get(id).all_finite()) {
            return Err(Error::Numerical {
                step,
                message: format!("parameter {} became non-finite", self.state.model.params().name(id)),
            });
        }
        self.sync_positions();
        Ok(out.loss)
    }

    /// One optimization step; returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = draw_batch(&self.dataset, &self.cfg, &mut self.data_rng)?;
        self.step_with(&batch)
    }

    /// Runs `n` steps, calling `on_step(trainer, loss)` after each.
    pub fn run<F>(&mut self, n: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, f64) -> Result<()>,
    {
        if self.cfg.prefetch == 0 {
            for _ in 0..n {
                let loss = self.step()?;
                on_step(self, loss)?;
            }
            return Ok(());
        }
        let (tx, rx) = mpsc::sync_channel(self.cfg.prefetch);
        let mut producer_rng = self.data_rng.clone();
        let dataset = self.dataset.clone();
        let cfg = self.cfg.clone();
        std::thread::scope(|scope| {
            scope.spawn(move || {
                for _ in 0..n {
                    let batch = draw_batch(&dataset, &cfg, &mut producer_rng);
                    let failed = batch.is_err();
                    if tx.send((batch, producer_rng.get_word_pos())).is_err() || failed {
                        break;
                    }
                }
            });
            for _ in 0..n {
                let (batch, pos) = rx.recv().map_err(|_| Error::Data("tuple producer stopped".into()))?;
                let batch = batch?;
                self.data_rng.set_word_pos(pos);
                let loss = self.step_with(&batch)?;
                on_step(self, loss)?;
            }
            Ok(())
        })
    }
}

/// Where [`train_loop`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct LoopOutputs {
    /// Final checkpoint; periodic checkpoints overwrite the same file.
    pub checkpoint: Option<PathBuf>,
    /// Loss log, lines `step,loss,lr,elapsed_ms`.
    pub log: Option<PathBuf>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState<f32>,
    /// Loss of every step run here.
    pub losses: Vec<f64>,
}

/// Runs `trainer` until its step counter reaches `cfg.iterations`, logging the
/// mean loss of each `log_every` window and checkpointing periodically.
pub fn train_loop(mut trainer: Trainer, outputs: &LoopOutputs) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut log = match &outputs.log {
        Some(path) => {
            let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
            let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "step,loss,lr,elapsed_ms")?;
            }
            Some(f)
        }
        None => None,
    };
    let remaining = trainer.cfg.iterations.saturating_sub(trainer.state.step);
    let mut losses = Vec::with_capacity(remaining as usize);
    let (log_every, ckpt_every, lr) = (trainer.cfg.log_every.max(1), trainer.cfg.checkpoint_every, trainer.cfg.lr);
    let mut window = Vec::new();
    trainer.run(remaining, |t, loss| {
        losses.push(loss);
        window.push(loss);
        let step = t.state.step;
        if step % log_every == 0 || step == t.cfg.iterations {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let ms = started.elapsed().as_millis();
            log::info!("step {step} loss {mean:.6}");
            if let Some(f) = log.as_mut() {
                writeln!(f, "{step},{mean:.8},{lr:e},{ms}")?;
            }
        }
        if let Some(path) = &outputs.checkpoint {
            if ckpt_every > 0 && step % ckpt_every == 0 {
                save_checkpoint(&t.state, path)?;
            }
        }
        Ok(())
    })?;
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(&trainer.state, path)?;
    }
    Ok(TrainOutcome { state: trainer.into_state(), losses })
}
