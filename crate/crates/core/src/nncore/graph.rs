//! Reverse-mode autodiff over a flat tape.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. A node carries gradient iff it is
//! a trainable leaf or depends on one; constants (inputs, frozen parameters,
//! detached features) cost nothing in the backward pass.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    AvgPool {
        x: Var,
        k: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelScale {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Bce {
        p: Var,
        target: Tensor<T>,
    },
    BceLogits {
        z: Var,
        target: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Probability clamp used by every cross-entropy in the crate.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (_, cin, h, wd) = xv.dims4()?;
        let (cout, wcin, kh, kw) = wv.dims4()?;
        if cin != wcin {
            return Err(Error::shape("conv2d input channels", &[wcin], &[cin]));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d spatial extent", &[kh, kw], &[h, wd]));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv2d bias", &[cout], self.value(b).shape()));
            }
        }
        let out = conv2d_forward(xv, wv, b.map(|b| self.value(b)), stride, pad);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// `x` is read as `[N, In]` (trailing dims flattened), `w` is `[Out, In]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, fan_in) = xv.rows_cols();
        let (out_dim, w_in) = wv.rows_cols();
        if fan_in != w_in {
            return Err(Error::shape("linear input features", &[w_in], &[fan_in]));
        }
        let mut out = Tensor::zeros(&[n, out_dim]);
        T::gemm(
            n,
            fan_in,
            out_dim,
            T::one(),
            xv.data(),
            fan_in as isize,
            1,
            wv.data(),
            1,
            fan_in as isize,
            T::zero(),
            out.data_mut(),
            out_dim as isize,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != out_dim {
                return Err(Error::shape("linear bias", &[out_dim], bv.shape()));
            }
            let bias = bv.data().to_vec();
            for row in out.data_mut().chunks_mut(out_dim) {
                for (o, &bb) in row.iter_mut().zip(&bias) {
                    *o += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data = xv
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Non-overlapping `k x k` average pooling; `k` must divide H and W.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avg_pool window must divide H, W", &[k, k], &[h, w]));
        }
        if k == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h / k, w / k);
        let inv = T::one() / T::of((k * k) as f64);
        let src = xv.data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        let row = (oy * k + dy) * w + ox * k;
                        acc += plane[row..row + k].iter().copied().sum::<T>();
                    }
                    dst[oy * wo + ox] = acc * inv;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::AvgPool { x, k }, rg))
    }

    /// Non-overlapping `k x k` max pooling; ties resolve to the first element.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("max_pool window must divide H, W", &[k, k], &[h, w]));
        }
        let (ho, wo) = (h / k, w / k);
        let src = xv.data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out.data_mut()[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Multiplies every `(n, c)` plane of `x` by `gate[n, c]`.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gate);
        let (n, c, h, w) = xv.dims4()?;
        if gv.numel() != n * c {
            return Err(Error::shape("channel_scale gate", &[n, c], gv.shape()));
        }
        let hw = h * w;
        let mut out = xv.clone();
        for (plane, &g) in out.data_mut().chunks_mut(hw).zip(gv.data()) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        let rg = self.any_grad(&[x, gate]);
        Ok(self.push(out, Op::ChannelScale { x, gate }, rg))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Spec("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat_channels", &[n, pc, h, w], self.value(p).shape()));
            }
            total_c += pc;
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                data.extend_from_slice(&pv.data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean binary cross-entropy `-(t ln p + (1-t) ln(1-p))` between
    /// probabilities `p` and constant soft targets `t`, with `p` clamped to
    /// `[1e-7, 1 - 1e-7]`. Produces a one-element tensor.
    pub fn bce(&mut self, p: Var, target: Tensor<T>) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(Error::shape("bce target", pv.shape(), target.shape()));
        }
        let loss = bce_mean(pv.data(), target.data());
        let rg = self.requires_grad(p);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, target }, rg))
    }

    /// `bce(sigmoid(z), target)` fused. The value is the clamped loss; the
    /// gradient is `(sigmoid(z) - t) / n` everywhere, so saturated logits
    /// still receive a signal.
    pub fn bce_logits(&mut self, z: Var, target: Tensor<T>) -> Result<Var> {
        let zv = self.value(z);
        if zv.shape() != target.shape() {
            return Err(Error::shape("bce target", zv.shape(), target.shape()));
        }
        let p: Vec<T> = zv.data().iter().map(|&v| sigmoid(v)).collect();
        let loss = bce_mean(&p, target.data());
        let rg = self.requires_grad(z);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { z, target }, rg))
    }

    /// Runs the backward sweep from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *stride,
                    *pad,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fan_in) = xv.rows_cols();
                let out_dim = wv.shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    T::gemm(
                        n,
                        out_dim,
                        fan_in,
                        T::one(),
                        gy.data(),
                        out_dim as isize,
                        1,
                        wv.data(),
                        fan_in as isize,
                        1,
                        T::zero(),
                        dx.data_mut(),
                        fan_in as isize,
                        1,
                    );
                    self.accumulate(grads, *x, Some(dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(
                        out_dim,
                        n,
                        fan_in,
                        T::one(),
                        gy.data(),
                        1,
                        out_dim as isize,
                        xv.data(),
                        fan_in as isize,
                        1,
                        T::zero(),
                        dw.data_mut(),
                        fan_in as isize,
                        1,
                    );
                    self.accumulate(grads, *w, Some(dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = Tensor::zeros(self.value(*b).shape());
                        for row in gy.data().chunks(out_dim) {
                            for (d, &g) in db.data_mut().iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, Some(db));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = gy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, Some(dx));
            }
            Op::Sigmoid(x) => {
                let mut dx = gy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (T::one() - y);
                }
                self.accumulate(grads, *x, Some(dx));
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4().expect("validated at construction");
                let inv = T::one() / T::of((h * w) as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for (plane, &g) in dx.data_mut().chunks_mut(h * w).zip(gy.data()) {
                    plane.iter_mut().for_each(|v| *v = g * inv);
                }
                self.accumulate(grads, *x, Some(dx));
            }
            Op::AvgPool { x, k } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4().expect("validated at construction");
                let (ho, wo) = (h / k, w / k);
                let inv = T::one() / T::of((k * k) as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for (p, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let g = &gy.data()[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..h {
                        for xx in 0..w {
                            plane[y * w + xx] = g[(y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Some(dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    dx.data_mut()[src] += g;
                }
                self.accumulate(grads, *x, Some(dx));
            }
            Op::ChannelScale { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let hw = xv.shape()[2] * xv.shape()[3];
                if self.requires_grad(*x) {
                    let mut dx = gy.clone();
                    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(gv.data()) {
                        plane.iter_mut().for_each(|v| *v *= g);
                    }
                    self.accumulate(grads, *x, Some(dx));
                }
                if self.requires_grad(*gate) {
                    let data = gy
                        .data()
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(g, xp)| g.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    let dg = Tensor::new(gv.shape(), data).expect("gate shape");
                    self.accumulate(grads, *gate, Some(dg));
                }
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = gy.dims4().expect("validated at construction");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            data.extend_from_slice(&gy.data()[start..start + pc * hw]);
                        }
                        let dp = Tensor::new(self.value(p).shape(), data).expect("part shape");
                        self.accumulate(grads, p, Some(dp));
                    }
                    offset += pc;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, Some(gy.clone()));
                self.accumulate(grads, *b, Some(gy.clone()));
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(grads, *x, Some(gy.map(|v| v * f)));
            }
            Op::Reshape(x) => {
                let dx = gy.clone().reshape(self.value(*x).shape()).expect("same numel");
                self.accumulate(grads, *x, Some(dx));
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p);
                let g = gy.data()[0];
                let lo = T::of(PROB_EPS);
                let hi = T::one() - lo;
                let inv_n = T::one() / T::of(pv.numel() as f64);
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&pp, &t)| {
                        if pp > lo && pp < hi {
                            g * inv_n * ((T::one() - t) / (T::one() - pp) - t / pp)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let dp = Tensor::new(pv.shape(), data).expect("same shape");
                self.accumulate(grads, *p, Some(dp));
            }
            Op::BceLogits { z, target } => {
                let zv = self.value(*z);
                let g = gy.data()[0] / T::of(zv.numel() as f64);
                let data = zv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&v, &t)| g * (sigmoid(v) - t))
                    .collect();
                let dz = Tensor::new(zv.shape(), data).expect("same shape");
                self.accumulate(grads, *z, Some(dz));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let Some(g) = g else { return };
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Clamped binary cross-entropy averaged over all elements.
pub fn bce_mean<T: Real>(p: &[T], t: &[T]) -> T {
    let lo = T::of(PROB_EPS);
    let hi = T::one() - lo;
    let total: T = p
        .iter()
        .zip(t)
        .map(|(&pp, &tt)| {
            let c = pp.max(lo).min(hi);
            -(tt * c.ln() + (T::one() - tt) * (T::one() - c).ln())
        })
        .sum();
    total / T::of(p.len().max(1) as f64)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4().expect("checked by caller");
    let (cout, _, kh, kw) = w.dims4().expect("checked by caller");
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(wd, kw, stride, pad);
    let kdim = cin * kh * kw;
    let hw = ho * wo;
    let mut col = vec![T::zero(); kdim * hw];
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let in_stride = cin * h * wd;
    for s in 0..n {
        im2col(
            &x.data()[s * in_stride..(s + 1) * in_stride],
            cin,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            &mut col,
        );
        let dst = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        T::gemm(
            cout,
            kdim,
            hw,
            T::one(),
            w.data(),
            kdim as isize,
            1,
            &col,
            hw as isize,
            1,
            T::zero(),
            dst,
            hw as isize,
            1,
        );
        if let Some(b) = b {
            for (plane, &bb) in dst.chunks_mut(hw).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
    }
    out
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (n, cin, h, wd) = x.dims4().expect("validated");
    let (cout, _, kh, kw) = w.dims4().expect("validated");
    let (_, _, ho, wo) = gy.dims4().expect("validated");
    let kdim = cin * kh * kw;
    let hw = ho * wo;
    let in_stride = cin * h * wd;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[cout]));
    let mut col = vec![T::zero(); kdim * hw];
    let mut dcol = vec![T::zero(); kdim * hw];
    for s in 0..n {
        let g = &gy.data()[s * cout * hw..(s + 1) * cout * hw];
        if let Some(db) = db.as_mut() {
            for (d, plane) in db.data_mut().iter_mut().zip(g.chunks(hw)) {
                *d += plane.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(
                &x.data()[s * in_stride..(s + 1) * in_stride],
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut col,
            );
            // dW += dY (cout x hw) * col^T (hw x kdim)
            T::gemm(
                cout,
                hw,
                kdim,
                T::one(),
                g,
                hw as isize,
                1,
                &col,
                1,
                hw as isize,
                T::one(),
                dw.data_mut(),
                kdim as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T (kdim x cout) * dY (cout x hw)
            T::gemm(
                kdim,
                cout,
                hw,
                T::one(),
                w.data(),
                1,
                kdim as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                &mut dcol,
                hw as isize,
                1,
            );
            col2im_add(
                &dcol,
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut dx.data_mut()[s * in_stride..(s + 1) * in_stride],
            );
        }
    }
    (dx, dw, db)
}
