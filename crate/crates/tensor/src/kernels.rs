//! Raw per-sample kernels used by the graph ops.

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// 1×1 stride-1 convolutions read the input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `C×H×W` sample into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let shift = kj as isize - pad;
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *out = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    } else {
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            *out = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back, accumulating into `x`.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[Cout, HoWo] = w[Cout, K] · col[K, HoWo] (+ bias)`.
pub fn conv_forward_sample<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    c_out: usize,
    col: &mut Vec<T>,
    out: &mut [T],
) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let k = g.col_rows();
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        col.resize(k * n, T::zero());
        im2col(x, g, col);
        col
    };
    match bias {
        Some(b) => {
            for (co, row) in out.chunks_mut(n).enumerate() {
                row.fill(b[co]);
            }
        }
        None => out.fill(T::zero()),
    }
    unsafe {
        T::gemm(
            c_out,
            k,
            n,
            T::one(),
            w.as_ptr(),
            k as isize,
            1,
            cols.as_ptr(),
            n as isize,
            1,
            T::one(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Accumulates weight, bias and input gradients for one sample.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_sample<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    c_out: usize,
    col: &mut Vec<T>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let k = g.col_rows();
    if let Some(db) = db {
        for (co, row) in dy.chunks(n).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            col.resize(k * n, T::zero());
            im2col(x, g, col);
            col
        };
        // dw[Cout, K] += dy[Cout, N] · cols[K, N]^T
        unsafe {
            T::gemm(
                c_out,
                n,
                k,
                T::one(),
                dy.as_ptr(),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                T::one(),
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            // dx[K, N] += w[Cout, K]^T · dy[Cout, N]
            unsafe {
                T::gemm(
                    k,
                    c_out,
                    n,
                    T::one(),
                    w.as_ptr(),
                    1,
                    k as isize,
                    dy.as_ptr(),
                    n as isize,
                    1,
                    T::one(),
                    dx.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        } else {
            col.resize(k * n, T::zero());
            unsafe {
                T::gemm(
                    k,
                    c_out,
                    n,
                    T::one(),
                    w.as_ptr(),
                    1,
                    k as isize,
                    dy.as_ptr(),
                    n as isize,
                    1,
                    T::zero(),
                    col.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            col2im(col, g, dx);
        }
    }
}

/// Normalizes each contiguous group in place-free fashion; returns per-group
/// `(mean, rstd)` accumulated in double precision.
pub fn group_norm_forward<T: Scalar>(x: &[T], groups_len: usize, eps: f64, out: &mut [T]) -> Vec<(T, T)> {
    let mut stats = Vec::with_capacity(x.len() / groups_len);
    for (src, dst) in x.chunks(groups_len).zip(out.chunks_mut(groups_len)) {
        let m = src.len() as f64;
        let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / m;
        let var = src
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / m;
        let rstd = 1.0 / (var + eps).sqrt();
        let (mean_t, rstd_t) = (T::of(mean), T::of(rstd));
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - mean_t) * rstd_t;
        }
        stats.push((mean_t, rstd_t));
    }
    stats
}

/// `dx = rstd · (dy − mean(dy) − x̂ · mean(dy ⊙ x̂))` per group.
pub fn group_norm_backward<T: Scalar>(y: &[T], dy: &[T], groups_len: usize, stats: &[(T, T)], dx: &mut [T]) {
    for (((yg, dyg), dxg), &(_, rstd)) in
        y.chunks(groups_len).zip(dy.chunks(groups_len)).zip(dx.chunks_mut(groups_len)).zip(stats)
    {
        let m = yg.len() as f64;
        let mean_dy = dyg.iter().map(|v| v.as_f64()).sum::<f64>() / m;
        let mean_dy_y = yg.iter().zip(dyg).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / m;
        let (mdy, mdyy) = (T::of(mean_dy), T::of(mean_dy_y));
        for ((d, &yv), &g) in dxg.iter_mut().zip(yg).zip(dyg) {
            *d += rstd * (g - mdy - yv * mdyy);
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Nearest-neighbour 2× upsampling of `planes` contiguous `h×w` planes.
pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * w2..(y + 1) * w2];
            for (x2, o) in drow.iter_mut().enumerate() {
                *o = srow[x2 / 2];
            }
        }
    }
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            let srow = &src[y * w2..(y + 1) * w2];
            let drow = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
            for (x2, &g) in srow.iter().enumerate() {
                drow[x2 / 2] += g;
            }
        }
    }
}

/// 2×2 average pooling of `planes` contiguous `h×w` planes (h, w even).
pub fn avgpool2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                let i = 2 * y * w + 2 * xo;
                dst[y * wo + xo] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
}

pub fn avgpool2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let g = src[y * wo + xo] * quarter;
                let i = 2 * y * w + 2 * xo;
                dst[i] += g;
                dst[i + 1] += g;
                dst[i + w] += g;
                dst[i + w + 1] += g;
            }
        }
    }
}
