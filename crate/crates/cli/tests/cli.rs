//! End-to-end checks of the `interslice` subcommands on tiny models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use interslice_core::data::read_volume;
use interslice_core::trainer::load_checkpoint;

const TINY: &str = "\
levels = 2
base_channels = 8
channel_mults = 1,2
groups = 4
timesteps = 20
iterations = 10
log_every = 5
sampler_steps = 4
";

fn interslice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interslice")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = interslice(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.cfg");
        fs::write(&config, TINY).unwrap();
        let data = dir.path().join("data");
        ok(&[
            "gen-data",
            "--config",
            p(&config),
            "--out",
            p(&data),
            "--count",
            "2",
            "--size",
            "17,16,16",
            "--seed",
            "4",
        ]);
        Self { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let ckpt = self.path(out);
        let mut args = vec!["train", "--config", p(&self.config), "--data", p(&self.data), "--out", p(&ckpt)];
        args.extend_from_slice(extra);
        ok(&args);
        ckpt
    }

    fn volume(&self, i: usize) -> PathBuf {
        self.data.join(format!("phantom_{i:04}.isdv"))
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_writes_volumes_and_manifest_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen-data", "--out", p(out), "--count", "3", "--size", "9,16,16", "--seed", "7"]);
    }
    let listed = files(&a);
    let names: Vec<&str> = listed.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["manifest.csv", "phantom_0000.isdv", "phantom_0001.isdv", "phantom_0002.isdv"]);
    assert_eq!(listed, files(&b));
}

#[test]
fn gen_data_pads_to_network_stride() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["gen-data", "--out", p(&out), "--count", "1", "--size", "9,20,12", "--seed", "1"]);
    let v = read_volume(&out.join("phantom_0000.isdv")).unwrap();
    assert_eq!(v.dims(), [9, 24, 16]);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    let row = manifest.lines().nth(1).unwrap();
    assert!(row.ends_with(",9,20,12,4,4"), "{row}");
}

#[test]
fn train_on_missing_directory_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = interslice(&["train", "--data", p(&dir.path().join("nope")), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn train_logs_one_line_per_interval_and_ablation_hash_differs() {
    let f = Fixture::new();
    let log = f.path("full.log");
    let full = f.train("full.ckpt", &["--log", p(&log)]);
    let lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines[0], "step,loss,lr,elapsed_ms");
    let steps: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["5", "10"]);

    let ablated = f.train("ablated.ckpt", &["--ablate"]);
    let (a, b) = (load_checkpoint::<f32>(&full).unwrap(), load_checkpoint::<f32>(&ablated).unwrap());
    assert_ne!(a.model.config().hash(), b.model.config().hash());

    let resumed =
        interslice(&["train", "--config", p(&f.config), "--data", p(&f.data), "--out", p(&ablated), "--resume"]);
    assert_eq!(resumed.status.code(), Some(2), "ablation checkpoint resumed as a full model");
}

#[test]
fn sample_geometry_determinism_and_ddpm_warning() {
    let f = Fixture::new();
    let ckpt = f.train("m.ckpt", &[]);
    let lr = f.path("lr.isdv");
    ok(&["decimate", "--in", p(&f.volume(0)), "--ratio", "4", "--out", p(&lr)]);
    assert_eq!(read_volume(&lr).unwrap().depth(), 5);

    let outs: Vec<Vec<u8>> = ["a.isdv", "b.isdv"]
        .iter()
        .map(|name| {
            let out = f.path(name);
            ok(&["sample", "--ckpt", p(&ckpt), "--in", p(&lr), "--ratio", "4", "--seed", "2", "--out", p(&out)]);
            fs::read(&out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let sr = read_volume(&f.path("a.isdv")).unwrap();
    assert_eq!(sr.dims(), [17, 16, 16]);

    let previews = f.path("pgm");
    let out = ok(&[
        "sample",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&lr),
        "--ratio",
        "4",
        "--sampler",
        "ddpm",
        "--steps",
        "3",
        "--out",
        p(&f.path("c.isdv")),
        "--pgm-dir",
        p(&previews),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--steps 3 ignored"));
    assert!(previews.join("c_axial.pgm").exists() && previews.join("c_coronal.pgm").exists());
}

#[test]
fn eval_rows_identity_and_shape_mismatch() {
    let f = Fixture::new();
    let gt = f.volume(1);
    let out = ok(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--label", "same", "--ratio", "4"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| l.starts_with("same,") || l.starts_with("trilinear,")).collect();
    assert_eq!(rows, ["same,4,100.0000,0.0000,1.000000,0.000000"]);

    let out = ok(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--label", "same", "--ratio", "4", "--baseline-interp"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("same,") || l.starts_with("trilinear,")).count(), 2);

    let dir = f.path("wide");
    ok(&["gen-data", "--out", p(&dir), "--count", "1", "--size", "17,16,24", "--seed", "4"]);
    let bad = interslice(&[
        "eval",
        "--pred",
        p(&dir.join("phantom_0000.isdv")),
        "--gt",
        p(&gt),
        "--label",
        "x",
        "--ratio",
        "4",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}
