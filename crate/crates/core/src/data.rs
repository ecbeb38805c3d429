//! Volumes, synthetic phantoms, slice decimation, the linear baseline and file I/O.
//!
//! The slice axis is always the first axis: a volume holds `depth` slices of
//! `height × width` voxels, stored slice-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use interslice_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Whether voxels hold raw intensities or the `[-1, 1]` network range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntensityRange {
    Raw,
    /// Normalized from the recorded raw `(min, max)`.
    Normalized {
        min: f64,
        max: f64,
    },
}

impl IntensityRange {
    fn tag(&self) -> String {
        match self {
            IntensityRange::Raw => "raw".to_string(),
            IntensityRange::Normalized { min, max } => format!("normalized:{min:?}:{max:?}"),
        }
    }

    fn parse(tag: &str) -> Result<Self> {
        if tag == "raw" {
            return Ok(IntensityRange::Raw);
        }
        let mut parts = tag.split(':');
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("normalized"), Some(lo), Some(hi), None) => {
                let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad range bound {s:?}")));
                Ok(IntensityRange::Normalized { min: parse(lo)?, max: parse(hi)? })
            }
            _ => Err(Error::Format(format!("unknown range tag {tag:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    depth: usize,
    height: usize,
    width: usize,
    /// Millimetres per voxel along (slice, row, column).
    pub spacing: [f64; 3],
    voxels: Vec<f32>,
    pub range: IntensityRange,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>, range: IntensityRange) -> Result<Self> {
        let [d, h, w] = dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("empty volume {d}x{h}x{w}")));
        }
        if voxels.len() != d * h * w {
            return Err(Error::Dimension(format!("{} voxels for a {d}x{h}x{w} volume", voxels.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("non-positive spacing {spacing:?}")));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite voxel".into()));
        }
        Ok(Self { depth: d, height: h, width: w, spacing, voxels, range })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.voxels[z * n..(z + 1) * n]
    }

    /// Slice `z` as a `[1, 1, H, W]` network input.
    pub fn slice_tensor<T: Scalar>(&self, z: usize) -> Tensor<T> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.slice(z).iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Keeps only the first `depth` slices.
    pub fn truncate_depth(&self, depth: usize) -> Result<Volume> {
        if depth == 0 || depth > self.depth {
            return Err(Error::Dimension(format!("cannot keep {depth} of {} slices", self.depth)));
        }
        let n = self.height * self.width;
        Volume::new([depth, self.height, self.width], self.spacing, self.voxels[..depth * n].to_vec(), self.range)
    }

    /// Pads rows and columns at the far edge by edge replication.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Volume> {
        if height < self.height || width < self.width {
            return Err(Error::Dimension("padding cannot shrink a volume".into()));
        }
        let mut voxels = Vec::with_capacity(self.depth * height * width);
        for z in 0..self.depth {
            let s = self.slice(z);
            for y in 0..height {
                let row = &s[y.min(self.height - 1) * self.width..][..self.width];
                voxels.extend((0..width).map(|x| row[x.min(self.width - 1)]));
            }
        }
        Volume::new([self.depth, height, width], self.spacing, voxels, self.range)
    }

    /// Crops rows and columns to the leading `height × width` block.
    pub fn crop_to(&self, height: usize, width: usize) -> Result<Volume> {
        if height > self.height || width > self.width {
            return Err(Error::Dimension("crop larger than volume".into()));
        }
        let mut voxels = Vec::with_capacity(self.depth * height * width);
        for z in 0..self.depth {
            let s = self.slice(z);
            for y in 0..height {
                voxels.extend_from_slice(&s[y * self.width..y * self.width + width]);
            }
        }
        Volume::new([self.depth, height, width], self.spacing, voxels, self.range)
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    intensity: f64,
}

/// Synthetic volume of 3–8 nested ellipsoids with distinct intensities and a
/// faint smooth texture, a pure function of `(seed, D, H, W)` with values in `[0, 1]`.
pub fn make_phantom_volume(seed: u64, depth: usize, height: usize, width: usize) -> Result<Volume> {
    if depth < 8 || height < 8 || width < 8 {
        return Err(Error::Dimension(format!("phantom needs every axis >= 8, got {depth}x{height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [depth as f64, height as f64, width as f64];
    let count = rng.random_range(3..=8usize);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();

    let mut shells: Vec<Ellipsoid> = Vec::with_capacity(count);
    for i in 0..count {
        let (center, axes) = match shells.last() {
            None => {
                let center = [0, 1, 2].map(|a| dims[a] * (0.5 + rng.random_range(-0.04..0.04)));
                let axes = [0, 1, 2].map(|a| dims[a] * rng.random_range(0.33..0.45));
                (center, axes)
            }
            Some(parent) => {
                let axes = [0, 1, 2].map(|a| parent.axes[a] * rng.random_range(0.5..0.85));
                let center =
                    [0, 1, 2].map(|a| parent.center[a] + (parent.axes[a] - axes[a]) * rng.random_range(-0.7..0.7));
                (center, axes)
            }
        };
        let intensity = match shells.last() {
            None => rng.random_range(0.2..0.45),
            Some(parent) => {
                let step = rng.random_range(0.15..0.35);
                let up = parent.intensity + step;
                let down = parent.intensity - step;
                let prefer_up = rng.random_bool(0.5);
                if (prefer_up && up <= 0.95) || down < 0.05 {
                    up.min(0.95)
                } else {
                    down
                }
            }
        };
        debug_assert!(i == 0 || (intensity - shells[i - 1].intensity).abs() > 0.1);
        shells.push(Ellipsoid { center, axes, intensity });
    }

    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let freq = [0, 1, 2].map(|_| rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            (freq, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let texture_amp = 0.012;

    let mut voxels = Vec::with_capacity(depth * height * width);
    for z in 0..depth {
        for y in 0..height {
            for x in 0..width {
                let p = [z as f64, y as f64, x as f64];
                let mut value = 0.0;
                let mut outer_mask = 0.0;
                for (i, e) in shells.iter().enumerate() {
                    let d = [p[0] - e.center[0], p[1] - e.center[1], p[2] - e.center[2]];
                    // one in-plane rotation for all shells
                    let dy = cos * d[1] + sin * d[2];
                    let dx = -sin * d[1] + cos * d[2];
                    let r = ((d[0] / e.axes[0]).powi(2) + (dy / e.axes[1]).powi(2) + (dx / e.axes[2]).powi(2)).sqrt();
                    let min_axis = e.axes.iter().copied().fold(f64::INFINITY, f64::min);
                    let inside = 0.5 * (1.0 - ((r - 1.0) * min_axis / 0.6).tanh());
                    value += (e.intensity - value) * inside;
                    if i == 0 {
                        outer_mask = inside;
                    }
                }
                let texture: f64 = waves
                    .iter()
                    .map(|(f, phase)| {
                        let arg = (0..3).map(|a| f[a] * p[a] / dims[a]).sum::<f64>() * std::f64::consts::TAU;
                        (arg + phase).cos()
                    })
                    .sum::<f64>()
                    / 3.0;
                voxels.push((value + texture_amp * texture * outer_mask).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new([depth, height, width], [0.7; 3], voxels, IntensityRange::Raw)
}

/// Affine min-max map to `[-1, 1]`; constant volumes map to zeros.
pub fn normalize_volume(v: &Volume) -> Volume {
    let (lo, hi) = match v.range {
        IntensityRange::Normalized { .. } => return v.clone(),
        IntensityRange::Raw => v.min_max(),
    };
    let (lo, hi) = (lo as f64, hi as f64);
    let voxels = if hi > lo {
        v.voxels.iter().map(|&x| ((2.0 * (x as f64 - lo) / (hi - lo)) - 1.0).clamp(-1.0, 1.0) as f32).collect()
    } else {
        vec![0.0; v.voxels.len()]
    };
    Volume { voxels, range: IntensityRange::Normalized { min: lo, max: hi }, ..v.clone() }
}

/// Inverse of [`normalize_volume`]; raw volumes pass through.
pub fn denormalize_volume(v: &Volume) -> Volume {
    let IntensityRange::Normalized { min, max } = v.range else {
        return v.clone();
    };
    let voxels = v.voxels.iter().map(|&x| ((x as f64 + 1.0) * 0.5 * (max - min) + min) as f32).collect();
    Volume { voxels, range: IntensityRange::Raw, ..v.clone() }
}

/// Number of slices kept when decimating `depth` slices by `ratio`.
pub fn decimated_depth(depth: usize, ratio: usize) -> usize {
    (depth - 1) / ratio + 1
}

/// Number of slices after filling `ratio − 1` slices into every gap.
pub fn upsampled_depth(depth: usize, ratio: usize) -> usize {
    (depth - 1) * ratio + 1
}

/// Simulates thick-slice acquisition by keeping slices `0, R, 2R, …`.
pub fn downsample_volume(hr: &Volume, ratio: usize) -> Result<Volume> {
    if ratio < 2 {
        return Err(Error::Config(format!("downsampling ratio must be >= 2, got {ratio}")));
    }
    let d_lr = decimated_depth(hr.depth, ratio);
    let mut voxels = Vec::with_capacity(d_lr * hr.height * hr.width);
    for m in 0..d_lr {
        voxels.extend_from_slice(hr.slice(m * ratio));
    }
    let mut spacing = hr.spacing;
    spacing[0] *= ratio as f64;
    Volume::new([d_lr, hr.height, hr.width], spacing, voxels, hr.range)
}

/// Linear interpolation along the slice axis onto the grid an `R`× super-resolution
/// produces. Kept slices are copied bit for bit.
pub fn trilinear_interpolate(lr: &Volume, ratio: usize) -> Result<Volume> {
    if ratio < 2 {
        return Err(Error::Config(format!("ratio must be >= 2, got {ratio}")));
    }
    if lr.depth < 2 {
        return Err(Error::Dimension("need at least two slices to interpolate".into()));
    }
    let d_hr = upsampled_depth(lr.depth, ratio);
    let mut voxels = Vec::with_capacity(d_hr * lr.height * lr.width);
    for z in 0..d_hr {
        let (m, j) = (z / ratio, z % ratio);
        if j == 0 {
            voxels.extend_from_slice(lr.slice(m));
            continue;
        }
        let k = j as f64 / ratio as f64;
        voxels.extend(
            lr.slice(m).iter().zip(lr.slice(m + 1)).map(|(&a, &b)| ((1.0 - k) * a as f64 + k * b as f64) as f32),
        );
    }
    let mut spacing = lr.spacing;
    spacing[0] /= ratio as f64;
    Volume::new([d_hr, lr.height, lr.width], spacing, voxels, lr.range)
}

const VOLUME_MAGIC: &[u8] = b"ISDV1\n";

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let header = format!(
        "{} {} {} {:?} {:?} {:?} {}\n",
        v.depth,
        v.height,
        v.width,
        v.spacing[0],
        v.spacing[1],
        v.spacing[2],
        v.range.tag()
    );
    let mut out = Vec::with_capacity(VOLUME_MAGIC.len() + header.len() + 4 * v.voxels.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(header.as_bytes());
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let rest = bytes.strip_prefix(VOLUME_MAGIC).ok_or_else(|| Error::Format("missing ISDV1 magic".into()))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("unterminated header line".into()))?;
    let header = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 7 {
        return Err(Error::Format(format!("header has {} fields, expected 7", fields.len())));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad dimension {s:?}")));
    let sp = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad spacing {s:?}")));
    let dims = [dim(fields[0])?, dim(fields[1])?, dim(fields[2])?];
    let spacing = [sp(fields[3])?, sp(fields[4])?, sp(fields[5])?];
    let range = IntensityRange::parse(fields[6])?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let payload = &rest[nl + 1..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "length mismatch: header declares {count} voxels ({} bytes), payload has {} bytes",
            count * 4,
            payload.len()
        )));
    }
    let voxels = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume::new(dims, spacing, voxels, range)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

/// Maps `[-1, 1]` to `0..=255`, rounding half up (0.0 → 128).
pub fn to_gray_byte(v: f64) -> u8 {
    ((v + 1.0) * 0.5 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a binary (P5) 8-bit PGM of a row-major `height × width` image in `[-1, 1]`.
pub fn export_slice_pgm(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Dimension(format!("{} values for a {height}x{width} image", values.len())));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|&v| to_gray_byte(v as f64)).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Re-slices a normalized volume through its centre: `(axial, coronal)` images of
/// shape `depth × width` and `depth × height`.
pub fn center_reslices(v: &Volume) -> (Vec<f32>, Vec<f32>) {
    let (yc, xc) = (v.height / 2, v.width / 2);
    let mut axial = Vec::with_capacity(v.depth * v.width);
    let mut coronal = Vec::with_capacity(v.depth * v.height);
    for z in 0..v.depth {
        let s = v.slice(z);
        axial.extend_from_slice(&s[yc * v.width..(yc + 1) * v.width]);
        coronal.extend((0..v.height).map(|y| s[y * v.width + xc]));
    }
    (axial, coronal)
}
