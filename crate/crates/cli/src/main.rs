use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use interslice_core::config::RunConfig;
use interslice_core::data::{
    center_reslices, downsample_volume, export_slice_pgm, make_phantom_volume, normalize_volume, read_volume,
    trilinear_interpolate, write_volume, IntensityRange, Volume,
};
use interslice_core::metrics::{self, MetricsReport};
use interslice_core::network::stable_hash;
use interslice_core::sampler::{super_resolve_volume, SamplerMode};
use interslice_core::trainer::{load_checkpoint, load_checkpoint_for, train_loop, LoopOutputs, Trainer};
use interslice_core::{Error, Result};

#[derive(Parser)]
#[command(name = "interslice", version, about = "Synthesize in-between slices of anisotropic volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom volumes and a manifest.
    GenData(GenDataArgs),
    /// Keep every R-th slice of a volume.
    Decimate(DecimateArgs),
    /// Train a model on every volume in a directory.
    Train(TrainArgs),
    /// Super-resolve a volume along its slice axis.
    Sample(SampleArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// Volume size as D,H,W.
    #[arg(long)]
    size: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DecimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ratio: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the concatenation-conditioned ablation model.
    #[arg(long)]
    ablate: bool,
    /// Loss log, lines `step,loss,lr,elapsed_ms`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from the checkpoint at `--out` if it exists.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddim,
    Ddpm,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ratio: usize,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// DDIM steps; DDPM always runs every timestep.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Write axial and coronal re-slices through the centre as PGM images here.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
    /// Worker threads for slice generation.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Super-resolved volume; repeat together with `--gt` to aggregate several volumes.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    #[arg(long)]
    label: String,
    #[arg(long)]
    ratio: usize,
    /// Also score linear interpolation of the decimated ground truth.
    #[arg(long)]
    baseline_interp: bool,
    /// Append CSV rows here (header written for a new file).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for item in &common.overrides {
        let (k, v) =
            item.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn log_config(command: &str, cfg: &RunConfig) {
    log::info!("{command}: root seed {}", cfg.seed);
    for line in cfg.render().lines() {
        log::info!("  {line}");
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(n) = args.count {
        cfg.volume_count = n;
    }
    if let Some(size) = &args.size {
        cfg.set("volume_size", size)?;
    }
    cfg.data_dir = Some(args.out.clone());
    log_config("gen-data", &cfg);
    let stride = cfg.model()?.stride();
    let [d, h, w] = cfg.volume_size;
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    fs::create_dir_all(&args.out)?;
    let mut manifest = String::from("# file,seed,depth,height,width,pad_height,pad_width\n");
    for i in 0..cfg.volume_count {
        let seed = cfg.seed ^ stable_hash(&format!("phantom:{i}"));
        let mut v = make_phantom_volume(seed, d, h, w)?;
        v.spacing = [cfg.voxel_spacing; 3];
        let v = v.pad_to(ph, pw)?;
        let name = format!("phantom_{i:04}.isdv");
        write_volume(&args.out.join(&name), &v)?;
        manifest.push_str(&format!("{name},{seed},{d},{h},{w},{},{}\n", ph - h, pw - w));
    }
    if (ph, pw) != (h, w) {
        log::info!("padded {h}x{w} slices to {ph}x{pw} (network stride {stride})");
    }
    fs::write(args.out.join("manifest.csv"), manifest)?;
    Ok(())
}

fn decimate(args: DecimateArgs) -> Result<()> {
    let v = read_volume(&args.input)?;
    write_volume(&args.out, &downsample_volume(&v, args.ratio)?)
}

fn read_dataset(dir: &Path) -> Result<Vec<Volume>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("data directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "isdv"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .isdv volumes in {}", dir.display())));
    }
    paths.iter().map(|p| read_volume(p)).collect()
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if args.ablate {
        cfg.set("conditioning", "concatenated")?;
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    cfg.data_dir = Some(args.data.clone());
    cfg.checkpoint = Some(args.out.clone());
    cfg.train_log = args.log.clone();
    log_config("train", &cfg);
    let dataset = read_dataset(&args.data)?;
    let (sched, model, train_cfg) = (cfg.schedule()?, cfg.model()?, cfg.train()?);
    let mut portable = cfg.clone();
    (portable.data_dir, portable.checkpoint, portable.train_log) = (None, None, None);
    let trainer = if args.resume && args.out.exists() {
        let state = load_checkpoint_for(&args.out, &model)?;
        log::info!("resuming from step {}", state.step);
        Trainer::resume(train_cfg, sched, dataset, state)?
    } else {
        Trainer::new(train_cfg, sched, model, dataset, &portable.render())?
    };
    let outputs = LoopOutputs { checkpoint: Some(args.out.clone()), log: args.log.clone() };
    let outcome = train_loop(trainer, &outputs)?;
    let n = outcome.losses.len().min(100);
    if n > 0 {
        let tail = outcome.losses[outcome.losses.len() - n..].iter().sum::<f64>() / n as f64;
        log::info!("finished at step {}; mean loss of last {n} steps {tail:.5}", outcome.state.step);
    }
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    let state = load_checkpoint::<f32>(&args.ckpt)?;
    let mut cfg = RunConfig::parse(&state.config_text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    match args.sampler {
        Some(SamplerArg::Ddim) => cfg.sampler = SamplerMode::Ddim,
        Some(SamplerArg::Ddpm) => cfg.sampler = SamplerMode::Ddpm,
        None => {}
    }
    if let Some(steps) = args.steps {
        if cfg.sampler == SamplerMode::Ddpm {
            log::warn!("--steps {steps} ignored: DDPM sampling always runs all {} timesteps", cfg.timesteps);
        } else {
            cfg.sampler_steps = steps;
        }
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    cfg.checkpoint = Some(args.ckpt.clone());
    log_config("sample", &cfg);
    let lr = read_volume(&args.input)?;
    let sched = cfg.schedule()?;
    let sr = super_resolve_volume(&state.model, &lr, args.ratio, &sched, &cfg.sampler(), cfg.jobs)?;
    write_volume(&args.out, &sr)?;
    log::info!("wrote {}x{}x{} volume to {}", sr.depth(), sr.height(), sr.width(), args.out.display());
    if let Some(dir) = &args.pgm_dir {
        fs::create_dir_all(dir)?;
        let shown = match sr.range {
            IntensityRange::Raw => normalize_volume(&sr),
            IntensityRange::Normalized { .. } => sr.clone(),
        };
        let (axial, coronal) = center_reslices(&shown);
        let stem = args.out.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
        export_slice_pgm(&axial, sr.depth(), sr.width(), &dir.join(format!("{stem}_axial.pgm")))?;
        export_slice_pgm(&coronal, sr.depth(), sr.height(), &dir.join(format!("{stem}_coronal.pgm")))?;
    }
    Ok(())
}

/// Both volumes mapped to `[-1, 1]` with the ground truth's raw range, so
/// that scores always use a data range of 2.
fn to_common_range(pred: &Volume, gt: &Volume) -> Result<(Volume, Volume)> {
    let (lo, hi) = match gt.range {
        IntensityRange::Normalized { .. } => return Ok((pred.clone(), gt.clone())),
        IntensityRange::Raw => gt.min_max(),
    };
    let map = |v: &Volume| {
        let voxels = v.voxels().iter().map(|&x| if hi > lo { 2.0 * (x - lo) / (hi - lo) - 1.0 } else { 0.0 }).collect();
        let range = IntensityRange::Normalized { min: lo as f64, max: hi as f64 };
        Volume::new(v.dims(), v.spacing, voxels, range)
    };
    Ok((map(pred)?, map(gt)?))
}

fn eval(args: EvalArgs) -> Result<()> {
    if args.pred.len() != args.gt.len() {
        return Err(Error::Config(format!("{} --pred but {} --gt volumes", args.pred.len(), args.gt.len())));
    }
    if args.ratio < 2 {
        return Err(Error::Config("ratio must be at least 2".into()));
    }
    let mut pairs = Vec::new();
    for (p, g) in args.pred.iter().zip(&args.gt) {
        let (pred, gt) = (read_volume(p)?, read_volume(g)?);
        if pred.height() != gt.height() || pred.width() != gt.width() || pred.depth() > gt.depth() {
            return Err(Error::Dimension(format!(
                "prediction {:?} does not fit ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let gt = gt.truncate_depth(pred.depth())?;
        pairs.push(to_common_range(&pred, &gt)?);
    }
    let refs: Vec<(&Volume, &Volume)> = pairs.iter().map(|(p, g)| (p, g)).collect();
    let mut reports = vec![metrics::evaluate_many(&refs, &args.label, args.ratio, 2.0)?];
    if args.baseline_interp {
        let interp = pairs
            .iter()
            .map(|(_, gt)| trilinear_interpolate(&downsample_volume(gt, args.ratio)?, args.ratio))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(&Volume, &Volume)> = interp.iter().zip(&pairs).map(|(i, (_, g))| (i, g)).collect();
        reports.push(metrics::evaluate_many(&refs, "trilinear", args.ratio, 2.0)?);
    }
    emit(&reports, args.out.as_deref())
}

fn emit(reports: &[MetricsReport], out: Option<&Path>) -> Result<()> {
    eprint!("{}", metrics::render_table(reports));
    print!("{}", metrics::render_csv(reports));
    if let Some(path) = out {
        let fresh = !path.exists();
        let mut text = if fresh { metrics::render_csv(&[]) } else { String::new() };
        for r in reports {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        use std::io::Write;
        fs::OpenOptions::new().create(true).append(true).open(path)?.write_all(text.as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Decimate(a) => decimate(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 1 } else { 2 })
        }
    }
}
