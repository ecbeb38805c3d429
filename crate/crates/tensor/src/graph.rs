use crate::kernels::{self, ConvGeom};
use crate::{Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, group_len: usize, stats: Vec<(T, T)> },
    Silu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    MulChannel { x: Var, s: Var },
    AddChannel { x: Var, b: Var },
    Narrow { x: Var, start: usize, len: usize },
    Concat { parts: Vec<Var> },
    Upsample2x { x: Var },
    AvgPool2x { x: Var },
    Sum { x: Var },
    Mse { a: Var, b: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations supporting one reverse sweep.
///
/// Every op appends a node; [`Graph::backward`] walks the tape in reverse.
/// With tracking disabled the tape still stores values but no node needs a
/// gradient, so backward is a no-op.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    track: bool,
    scratch: Vec<T>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn channel_shared(s: &[usize], n: usize, c: usize) -> bool {
    if s == [c] {
        true
    } else {
        assert_eq!(s, &[n, c], "channel factors must be [N, C] or [C]");
        false
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track: true, scratch: Vec::new() }
    }

    /// A graph that never requires gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), track: false, scratch: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or a probed input).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.track;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2D convolution of `x[N,Cin,H,W]` with `w[Cout,Cin,k,k]` and optional bias `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4D");
        assert_eq!(ws[1], c_in, "conv weight expects {} input channels, got {c_in}", ws[1]);
        assert_eq!(ws[2], ws[3]);
        let (c_out, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[c_out]);
        }
        let g = ConvGeom { c_in, h, w: wd, k, stride, pad };
        let (ho, wo) = g.out_hw();
        let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
        let per_out = c_out * ho * wo;
        let mut col = std::mem::take(&mut self.scratch);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for (i, dst) in out.data_mut().chunks_mut(per_out).enumerate() {
                kernels::conv_forward_sample(xv.sample(i), wv, bv, &g, c_out, &mut col, dst);
            }
        }
        self.scratch = col;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// `y = x · wᵀ + b` for `x[N,Din]`, `w[Dout,Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, d_in) = self.value(x).dims2();
        let (d_out, wd_in) = self.value(w).dims2();
        assert_eq!(d_in, wd_in, "linear weight expects {wd_in} inputs, got {d_in}");
        let mut out = Tensor::zeros(&[n, d_out]);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), d_out);
            for row in out.data_mut().chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        unsafe {
            T::gemm(
                n,
                d_in,
                d_out,
                T::one(),
                self.value(x).data().as_ptr(),
                d_in as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                d_in as isize,
                T::one(),
                out.data_mut().as_mut_ptr(),
                d_out as isize,
                1,
            );
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    /// Group normalization without affine parameters over `x[N,C,H,W]`.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let group_len = (c / groups) * h * w;
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        let stats = kernels::group_norm_forward(xv.data(), group_len, GROUP_NORM_EPS, out.data_mut());
        self.push(out, Op::GroupNorm { x, group_len, stats }, &[x])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(out, Op::Silu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Multiplies `x[N,C,H,W]` by channel factors `s`, either per sample `[N,C]`
    /// or shared across the batch `[C]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let out = self.channel_broadcast(x, s, |v, f| v * f);
        self.push(out, Op::MulChannel { x, s }, &[x, s])
    }

    /// Adds channel offsets `b` (`[N,C]` or `[C]`) to `x[N,C,H,W]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let out = self.channel_broadcast(x, b, |v, f| v + f);
        self.push(out, Op::AddChannel { x, b }, &[x, b])
    }

    fn channel_broadcast(&self, x: Var, s: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (n, c, h, w) = self.value(x).dims4();
        let shared = channel_shared(self.shape(s), n, c);
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let factor = sv[if shared { i % c } else { i }];
            for v in plane {
                *v = f(*v, factor);
            }
        }
        out
    }

    /// Slice `len` entries starting at `start` along axis 1 (channels or features).
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(shape[0] * len * inner);
        for n in 0..shape[0] {
            let base = n * shape[1] * inner;
            data.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        self.push(Tensor::from_vec(&out_shape, data), Op::Narrow { x, start, len }, &[x])
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len());
            assert_eq!(s[0], first[0]);
            assert_eq!(&s[2..], &first[2..], "concat requires equal trailing dims");
            total += s[1];
        }
        let mut out_shape = first.clone();
        out_shape[1] = total;
        let mut data = Vec::with_capacity(first[0] * total * inner);
        for n in 0..first[0] {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[n * c * inner..(n + 1) * c * inner]);
            }
        }
        self.push(Tensor::from_vec(&out_shape, data), Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        kernels::upsample2x(self.value(x).data(), n * c, h, w, out.data_mut());
        self.push(out, Op::Upsample2x { x }, &[x])
    }

    pub fn avgpool2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2x needs even spatial dims");
        let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
        kernels::avgpool2x(self.value(x).data(), n * c, h, w, out.data_mut());
        self.push(out, Op::AvgPool2x { x }, &[x])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::of(total)), Op::Sum { x }, &[x])
    }

    /// Mean squared difference as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let acc: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| {
                let d = (p - q).as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::of(acc / av.len() as f64));
        self.push(out, Op::Mse { a, b }, &[a, b])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Grads { grads };
        }
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        let mut col = Vec::new();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut col);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t);
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], col: &mut Vec<T>) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, c_in, h, wd) = xv.dims4();
                let c_out = wv.dim(0);
                let geom = ConvGeom { c_in, h, w: wd, k: wv.dim(2), stride, pad };
                let mut dw = self.wants(w).then(|| Tensor::zeros(wv.shape()));
                let mut db = b.filter(|&b| self.wants(b)).map(|_| Tensor::zeros(&[c_out]));
                let mut dx = self.wants(x).then(|| Tensor::zeros(xv.shape()));
                let per_in = c_in * h * wd;
                for i in 0..n {
                    kernels::conv_backward_sample(
                        xv.sample(i),
                        wv.data(),
                        g.sample(i),
                        &geom,
                        c_out,
                        col,
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| &mut t.data_mut()[i * per_in..(i + 1) * per_in]),
                    );
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, |t| t.add_assign(&dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, b, |t| t.add_assign(&db));
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, x, |t| t.add_assign(&dx));
                }
            }
            &Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, d_in) = xv.dims2();
                let d_out = wv.dim(0);
                self.accumulate(grads, x, |t| unsafe {
                    // dx[N, Din] += g[N, Dout] · w[Dout, Din]
                    T::gemm(
                        n,
                        d_out,
                        d_in,
                        T::one(),
                        g.data().as_ptr(),
                        d_out as isize,
                        1,
                        wv.data().as_ptr(),
                        d_in as isize,
                        1,
                        T::one(),
                        t.data_mut().as_mut_ptr(),
                        d_in as isize,
                        1,
                    )
                });
                self.accumulate(grads, w, |t| unsafe {
                    // dw[Dout, Din] += g^T · x
                    T::gemm(
                        d_out,
                        n,
                        d_in,
                        T::one(),
                        g.data().as_ptr(),
                        1,
                        d_out as isize,
                        xv.data().as_ptr(),
                        d_in as isize,
                        1,
                        T::one(),
                        t.data_mut().as_mut_ptr(),
                        d_in as isize,
                        1,
                    )
                });
                if let Some(b) = b {
                    self.accumulate(grads, b, |t| {
                        for row in g.data().chunks(d_out) {
                            for (acc, &v) in t.data_mut().iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    });
                }
            }
            Op::GroupNorm { x, group_len, stats } => {
                self.accumulate(grads, *x, |t| {
                    kernels::group_norm_backward(node.value.data(), g.data(), *group_len, stats, t.data_mut())
                });
            }
            &Op::Silu { x } => {
                let xv = self.value(x);
                self.accumulate(grads, x, |t| {
                    for ((acc, &v), &gv) in t.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        let s = kernels::sigmoid(v);
                        *acc += gv * s * (T::one() + v * (T::one() - s));
                    }
                });
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, |t| t.add_assign(g));
                self.accumulate(grads, b, |t| t.add_assign(g));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                self.accumulate(grads, a, |t| {
                    for ((acc, &o), &gv) in t.data_mut().iter_mut().zip(bv.data()).zip(g.data()) {
                        *acc += gv * o;
                    }
                });
                self.accumulate(grads, b, |t| {
                    for ((acc, &o), &gv) in t.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        *acc += gv * o;
                    }
                });
            }
            &Op::Scale { x, c } => {
                self.accumulate(grads, x, |t| {
                    for (acc, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *acc += gv * c;
                    }
                });
            }
            &Op::MulChannel { x, s } => {
                let (xv, sv) = (self.value(x), self.value(s));
                let (_, c, h, w) = xv.dims4();
                let hw = h * w;
                let slot = |i: usize| if sv.len() == c { i % c } else { i };
                self.accumulate(grads, x, |t| {
                    for (i, (acc, gp)) in t.data_mut().chunks_mut(hw).zip(g.data().chunks(hw)).enumerate() {
                        let f = sv.data()[slot(i)];
                        for (a, &gv) in acc.iter_mut().zip(gp) {
                            *a += gv * f;
                        }
                    }
                });
                self.accumulate(grads, s, |t| {
                    for (i, (xp, gp)) in xv.data().chunks(hw).zip(g.data().chunks(hw)).enumerate() {
                        t.data_mut()[slot(i)] += xp.iter().zip(gp).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            &Op::AddChannel { x, b } => {
                let (_, c, h, w) = self.value(x).dims4();
                let hw = h * w;
                let shared = self.value(b).len() == c;
                self.accumulate(grads, x, |t| t.add_assign(g));
                self.accumulate(grads, b, |t| {
                    for (i, gp) in g.data().chunks(hw).enumerate() {
                        t.data_mut()[if shared { i % c } else { i }] += gp.iter().copied().sum::<T>();
                    }
                });
            }
            &Op::Narrow { x, start, len } => {
                let shape = self.shape(x);
                let inner: usize = shape[2..].iter().product();
                let c = shape[1];
                self.accumulate(grads, x, |t| {
                    for (n, gp) in g.data().chunks(len * inner).enumerate() {
                        let base = n * c * inner + start * inner;
                        for (a, &gv) in t.data_mut()[base..base + len * inner].iter_mut().zip(gp) {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let out_shape = node.value.shape();
                let inner: usize = out_shape[2..].iter().product();
                let total = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    self.accumulate(grads, p, |t| {
                        for n in 0..out_shape[0] {
                            let src = &g.data()[(n * total + offset) * inner..(n * total + offset + c) * inner];
                            for (a, &gv) in t.data_mut()[n * c * inner..(n + 1) * c * inner].iter_mut().zip(src) {
                                *a += gv;
                            }
                        }
                    });
                    offset += c;
                }
            }
            &Op::Upsample2x { x } => {
                let (n, c, h, w) = self.value(x).dims4();
                self.accumulate(grads, x, |t| kernels::upsample2x_backward(g.data(), n * c, h, w, t.data_mut()));
            }
            &Op::AvgPool2x { x } => {
                let (n, c, h, w) = self.value(x).dims4();
                self.accumulate(grads, x, |t| kernels::avgpool2x_backward(g.data(), n * c, h, w, t.data_mut()));
            }
            &Op::Sum { x } => {
                let gv = g.data()[0];
                self.accumulate(grads, x, |t| {
                    for a in t.data_mut() {
                        *a += gv;
                    }
                });
            }
            &Op::Mse { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let coef = g.data()[0] * T::of(2.0 / av.len() as f64);
                self.accumulate(grads, a, |t| {
                    for ((acc, &p), &q) in t.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *acc += coef * (p - q);
                    }
                });
                self.accumulate(grads, b, |t| {
                    for ((acc, &p), &q) in t.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *acc -= coef * (p - q);
                    }
                });
            }
        }
    }
}
