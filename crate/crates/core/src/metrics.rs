//! PSNR and SSIM on super-resolved volumes, and report formatting.

use std::fmt::Write as _;

use crate::data::Volume;
use crate::{Error, Result};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Stated in every report.
pub const CONVENTION: &str =
    "metrics over generated slices only (positions z with z mod R != 0); PSNR capped at 100 dB; \
SSIM 11x11 Gaussian window (sigma 1.5, valid region), K1=0.01, K2=0.03";

/// Which slices along the first axis are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceSelection {
    All,
    /// Skip every `R`-th slice (the ones copied from the low-resolution input).
    Generated(usize),
}

impl SliceSelection {
    pub fn slices(self, depth: usize) -> Vec<usize> {
        match self {
            SliceSelection::All => (0..depth).collect(),
            SliceSelection::Generated(r) => (0..depth).filter(|z| r == 0 || z % r != 0).collect(),
        }
    }
}

fn check_pair(a: &Volume, b: &Volume, data_range: f64, sel: SliceSelection) -> Result<Vec<usize>> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("volume shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    if let SliceSelection::Generated(r) = sel {
        if r < 2 {
            return Err(Error::Config(format!("ratio must be at least 2, got {r}")));
        }
    }
    let zs = sel.slices(a.depth());
    if zs.is_empty() {
        return Err(Error::Data("no slices selected for scoring".into()));
    }
    Ok(zs)
}

/// `10·log10(range² / MSE)` over the selected slices, or [`PSNR_CAP_DB`] when MSE is zero.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64, sel: SliceSelection) -> Result<f64> {
    let zs = check_pair(a, b, data_range, sel)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for &z in &zs {
        for (x, y) in a.slice(z).iter().zip(b.slice(z)) {
            let d = *x as f64 - *y as f64;
            sum += d * d;
        }
        n += a.height() * a.width();
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = win.iter().zip(&x[y * w + xo..]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = win.iter().enumerate().map(|(i, k)| k * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM map of one 2D image pair over the valid window positions.
pub fn ssim_slice(a: &[f32], b: &[f32], height: usize, width: usize, data_range: f64) -> Result<f64> {
    if a.len() != height * width || b.len() != a.len() {
        return Err(Error::Dimension("slice buffers do not match the given size".into()));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Dimension(format!("SSIM needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let win = gaussian_window();
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&af, height, width, &win);
    let mu_b = filter_valid(&bf, height, width, &win);
    let aa = filter_valid(&prod(&af, &af), height, width, &win);
    let bb = filter_valid(&prod(&bf, &bf), height, width, &win);
    let ab = filter_valid(&prod(&af, &bf), height, width, &win);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean of per-slice SSIM over the selected slices.
pub fn ssim(a: &Volume, b: &Volume, data_range: f64, sel: SliceSelection) -> Result<f64> {
    let zs = check_pair(a, b, data_range, sel)?;
    let mut total = 0.0;
    for &z in &zs {
        total += ssim_slice(a.slice(z), b.slice(z), a.height(), a.width(), data_range)?;
    }
    Ok(total / zs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeScore {
    pub psnr: f64,
    pub ssim: f64,
}

/// One method at one ratio, aggregated over volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub ratio: usize,
    pub scores: Vec<VolumeScore>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

pub const CSV_HEADER: &str = "method,R,psnr_mean,psnr_std,ssim_mean,ssim_std";

/// Mean and population standard deviation.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_scores(method: &str, ratio: usize, scores: Vec<VolumeScore>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("no volumes to aggregate".into()));
        }
        let (psnr_mean, psnr_std) = mean_std(scores.iter().map(|s| s.psnr));
        let (ssim_mean, ssim_std) = mean_std(scores.iter().map(|s| s.ssim));
        Ok(Self { method: method.to_string(), ratio, scores, psnr_mean, psnr_std, ssim_mean, ssim_std })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.6},{:.6}",
            self.method, self.ratio, self.psnr_mean, self.psnr_std, self.ssim_mean, self.ssim_std
        )
    }
}

/// Scores `sr` against `gt` on the generated slices of ratio `ratio`.
pub fn score(sr: &Volume, gt: &Volume, ratio: usize, data_range: f64) -> Result<VolumeScore> {
    let sel = SliceSelection::Generated(ratio);
    Ok(VolumeScore { psnr: psnr(sr, gt, data_range, sel)?, ssim: ssim(sr, gt, data_range, sel)? })
}

/// Report for a single volume pair.
pub fn evaluate(sr: &Volume, gt: &Volume, label: &str, ratio: usize, data_range: f64) -> Result<MetricsReport> {
    evaluate_many(&[(sr, gt)], label, ratio, data_range)
}

/// Report aggregated over several `(sr, gt)` pairs.
pub fn evaluate_many(
    pairs: &[(&Volume, &Volume)],
    label: &str,
    ratio: usize,
    data_range: f64,
) -> Result<MetricsReport> {
    let scores = pairs.iter().map(|(sr, gt)| score(sr, gt, ratio, data_range)).collect::<Result<Vec<_>>>()?;
    MetricsReport::from_scores(label, ratio, scores)
}

/// Convention comment, CSV header and one row per report.
pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("# {CONVENTION}\n{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Aligned human-readable table.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{CONVENTION}\n");
    let _ = writeln!(out, "{:<width$}  {:>3}  {:>17}  {:>17}", "method", "R", "PSNR (dB)", "SSIM");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>3}  {:>8.3} ± {:<6.3}  {:>7.4} ± {:<7.4}",
            r.method, r.ratio, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IntensityRange;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(d: usize, h: usize, w: usize, f: impl FnMut(usize) -> f32) -> Volume {
        let voxels = (0..d * h * w).map(f).collect();
        Volume::new([d, h, w], [1.0; 3], voxels, IntensityRange::Normalized { min: 0.0, max: 1.0 }).unwrap()
    }

    fn random_volume(d: usize, h: usize, w: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        volume(d, h, w, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn psnr_closed_form_and_cap() {
        let a = volume(3, 4, 4, |_| 0.25);
        let b = volume(3, 4, 4, |_| 0.75);
        let p = psnr(&a, &b, 1.0, SliceSelection::All).unwrap();
        assert!((p - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!((p - 6.0206).abs() < 1e-4);
        assert_eq!(psnr(&a, &a, 1.0, SliceSelection::All).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &b, 0.0, SliceSelection::All).is_err());
        assert!(psnr(&a, &random_volume(3, 4, 5, 0), 1.0, SliceSelection::All).is_err());
    }

    #[test]
    fn psnr_matches_two_pass_oracle_on_generated_slices() {
        let (a, b) = (random_volume(9, 5, 6, 1), random_volume(9, 5, 6, 2));
        let mut sq = Vec::new();
        for z in [1, 2, 3, 5, 6, 7] {
            for (x, y) in a.slice(z).iter().zip(b.slice(z)) {
                sq.push((*x as f64 - *y as f64).powi(2));
            }
        }
        let mse = sq.iter().sum::<f64>() / sq.len() as f64;
        let expect = 10.0 * (4.0 / mse).log10();
        let got = psnr(&a, &b, 2.0, SliceSelection::Generated(4)).unwrap();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn kept_slices_do_not_count() {
        let a = random_volume(9, 12, 12, 3);
        let mut b = a.clone();
        for z in [0, 4, 8] {
            b.slice_mut(z).fill(0.9);
        }
        assert_eq!(psnr(&a, &b, 2.0, SliceSelection::Generated(4)).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&a, &b, 2.0, SliceSelection::Generated(4)).unwrap(), 1.0);
        assert!(psnr(&a, &b, 2.0, SliceSelection::All).unwrap() < PSNR_CAP_DB);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = random_volume(4, 8, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f32> = (0..a.voxels().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let mut i = 0;
            let b = volume(4, 8, 8, |j| {
                i += 1;
                a.voxels()[j] + amp * noise[i - 1]
            });
            let p = psnr(&a, &b, 2.0, SliceSelection::All).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    /// Direct evaluation of the windowed formula at every valid position.
    fn ssim_oracle(a: &[f32], b: &[f32], h: usize, w: usize, range: f64) -> f64 {
        let c = 5.0;
        let mut g = vec![vec![0.0; 11]; 11];
        let mut total = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = g[i][j] / total;
                        ma += k * a[(y + i) * w + x + j] as f64;
                        mb += k * b[(y + i) * w + x + j] as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = g[i][j] / total;
                        let da = a[(y + i) * w + x + j] as f64 - ma;
                        let db = b[(y + i) * w + x + j] as f64 - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        for seed in 0..3 {
            let (a, b) = (random_volume(1, 32, 32, seed), random_volume(1, 32, 32, seed + 10));
            let got = ssim(&a, &b, 2.0, SliceSelection::All).unwrap();
            let expect = ssim_oracle(a.slice(0), b.slice(0), 32, 32, 2.0);
            assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        }
    }

    #[test]
    fn ssim_of_negated_zero_mean_slice() {
        let a = random_volume(1, 16, 20, 7);
        let mean = a.voxels().iter().map(|&v| v as f64).sum::<f64>() / a.voxels().len() as f64;
        let centered = volume(1, 16, 20, |i| (a.voxels()[i] as f64 - mean) as f32);
        let neg = volume(1, 16, 20, |i| -centered.voxels()[i]);
        let got = ssim(&centered, &neg, 2.0, SliceSelection::All).unwrap();
        assert!(got < 1.0);
        assert!((got - ssim_oracle(centered.slice(0), neg.slice(0), 16, 20, 2.0)).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_symmetry_and_bounds() {
        let (a, b) = (random_volume(3, 12, 14, 8), random_volume(3, 12, 14, 9));
        assert_eq!(ssim(&a, &a, 2.0, SliceSelection::All).unwrap(), 1.0);
        let (ab, ba) =
            (ssim(&a, &b, 2.0, SliceSelection::All).unwrap(), ssim(&b, &a, 2.0, SliceSelection::All).unwrap());
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..1.0).contains(&ab));
        assert!(ssim(&random_volume(1, 10, 10, 0), &random_volume(1, 10, 10, 1), 2.0, SliceSelection::All).is_err());
    }

    #[test]
    fn slice_order_does_not_matter() {
        let (a, b) = (random_volume(4, 12, 12, 10), random_volume(4, 12, 12, 11));
        let rev = |v: &Volume| {
            let d = v.depth();
            let n = v.height() * v.width();
            volume(d, v.height(), v.width(), |i| v.slice(d - 1 - i / n)[i % n])
        };
        let (p1, p2) = (
            psnr(&a, &b, 2.0, SliceSelection::All).unwrap(),
            psnr(&rev(&a), &rev(&b), 2.0, SliceSelection::All).unwrap(),
        );
        assert!((p1 - p2).abs() < 1e-9);
        let (s1, s2) = (
            ssim(&a, &b, 2.0, SliceSelection::All).unwrap(),
            ssim(&rev(&a), &rev(&b), 2.0, SliceSelection::All).unwrap(),
        );
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn report_aggregation_and_format() {
        let scores = vec![VolumeScore { psnr: 30.0, ssim: 0.9 }, VolumeScore { psnr: 34.0, ssim: 0.8 }];
        let r = MetricsReport::from_scores("model", 4, scores).unwrap();
        assert_eq!((r.psnr_mean, r.psnr_std), (32.0, 2.0));
        assert!((r.ssim_std - 0.05).abs() < 1e-12);
        assert_eq!(r.csv_row(), "model,4,32.0000,2.0000,0.850000,0.050000");
        let single = MetricsReport::from_scores("x", 5, vec![VolumeScore { psnr: 1.0, ssim: 0.5 }]).unwrap();
        assert_eq!((single.psnr_std, single.ssim_std), (0.0, 0.0));
        let csv = render_csv(&[r.clone(), single]);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# metrics over generated slices only"));
        assert_eq!(lines[1], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(render_table(&[r]).contains("model"));
    }

    #[test]
    fn ground_truth_dominates_interpolation() {
        use crate::data::{downsample_volume, make_phantom_volume, normalize_volume, trilinear_interpolate};
        let gt = normalize_volume(&make_phantom_volume(3, 17, 24, 24).unwrap());
        let interp = trilinear_interpolate(&downsample_volume(&gt, 4).unwrap(), 4).unwrap();
        let perfect = evaluate(&gt, &gt, "gt", 4, 2.0).unwrap();
        let lin = evaluate(&interp, &gt, "trilinear", 4, 2.0).unwrap();
        assert!(perfect.psnr_mean > lin.psnr_mean);
        assert!(perfect.ssim_mean > lin.ssim_mean);
    }
}
