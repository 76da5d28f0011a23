//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order. Because inputs
//! always precede their consumers, walking the tape backwards from a
//! scalar root is a valid topological order. Nodes that do not depend on
//! any gradient-requiring leaf are never visited by the backward pass.

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, CellRegion, ConvGeom, PadMode, PoolMode};
use crate::tensor::{Parameter, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        n: usize,
        cols: Vec<T>,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Sum(Var),
    SmoothL1(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    SelectBatch(Var, Vec<usize>),
    ConcatBatch(Vec<Var>),
    GatherCols {
        x: Var,
        cols: Vec<Vec<usize>>,
    },
    RoiPool {
        x: Var,
        regions: Vec<CellRegion>,
        out: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when no path from the root reaches it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.lens[v.0]])
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Adds a leaf; it participates in differentiation iff
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t.detached(), rg, Op::Leaf)
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.detached(), false, Op::Leaf)
    }

    /// Binds a parameter as a differentiable leaf (or as a constant when
    /// `trainable` is false, e.g. for inference).
    pub fn param(&mut self, p: &Parameter<T>, trainable: bool) -> Var {
        self.push(p.tensor.detached(), trainable, Op::Leaf)
    }

    /// Zero-padded convolution; `N×C×H×W` input, `K×C×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, pad, PadMode::Zero)
    }

    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (k, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("kernel input channels == {c}"),
                format!("{wc}"),
            ));
        }
        if self.value(b).len() != k {
            return Err(shape_err(
                "conv2d",
                format!("bias of length {k}"),
                self.value(b).len(),
            ));
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(invalid("conv2d", "kernel size and stride must be >= 1"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("padded input of at least {kh}x{kw}"),
                format!("{h}x{wd} with pad {pad}"),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad,
            pad_mode,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            self.value(b).data(),
            &geom,
            self.rg(w),
        );
        let value = Tensor::new(vec![n, k, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                n,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
        )
        .unwrap();
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(invalid("global_avg_pool", "empty spatial plane"));
        }
        let denom = T::from_usize(h * w).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, 1, 1], out)?, rg, Op::GlobalAvgPool(x)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect()).unwrap();
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale(x, c))
    }

    /// Multiplication by a (possibly trainable) single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", "1 element", self.value(s).len()));
        }
        let c = self.value(s).item();
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect())?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, rg, Op::MulScalar(x, s)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Value-identical copy that blocks all gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).detached();
        self.push(value, false, Op::Leaf)
    }

    /// Element-wise `0.5·x²` for `|x| < 1`, `|x| − 0.5` otherwise.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| smooth_l1_value(a)).collect(),
        )
        .unwrap();
        let rg = self.rg(x);
        self.push(value, rg, Op::SmoothL1(x))
    }

    /// Mean over rows of `−log softmax(logits)[label]`. `logits` is
    /// `N × M` (any shape whose leading dimension is `N`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let n = labels.len();
        if n == 0 || v.shape()[0] != n || !v.len().is_multiple_of(n) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{n} rows"),
                format!("{:?}", v.shape()),
            ));
        }
        let m = v.len() / n;
        if let Some(&bad) = labels.iter().find(|&&u| u >= m) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: m,
            });
        }
        let mut loss = T::zero();
        for (row, &u) in v.data().chunks(m).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln() + mx;
            loss = loss + (lse - row[u]);
        }
        loss = loss / T::from_usize(n).unwrap();
        let probs = kernels::softmax_rows(v.data(), m);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Gathers entries of the leading (batch) dimension; indices may repeat.
    pub fn select_batch(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape()[0];
        let per = if n == 0 { 0 } else { v.len() / n };
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            if i >= n {
                return Err(invalid("select_batch", format!("index {i} >= batch {n}")));
            }
            data.extend_from_slice(&v.data()[i * per..(i + 1) * per]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, rg, Op::SelectBatch(x, idx.to_vec())))
    }

    /// Concatenates along the leading (batch) dimension.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_batch", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(shape_err(
                    "concat_batch",
                    format!("[_, {tail:?}]"),
                    format!("{:?}", v.shape()),
                ));
            }
            n += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![n];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, rg, Op::ConcatBatch(parts.to_vec())))
    }

    /// For an `N × M` input, picks columns `cols[i]` from row `i`; every
    /// row must select the same number of columns.
    pub fn gather_cols(&mut self, x: Var, cols: &[Vec<usize>]) -> Result<Var> {
        let v = self.value(x);
        let n = cols.len();
        if v.shape()[0] != n || n == 0 {
            return Err(shape_err("gather_cols", format!("{n} rows"), format!("{:?}", v.shape())));
        }
        let m = v.len() / n;
        let width = cols[0].len();
        let mut data = Vec::with_capacity(n * width);
        for (i, row) in cols.iter().enumerate() {
            if row.len() != width || row.iter().any(|&j| j >= m) {
                return Err(invalid("gather_cols", format!("bad column set for row {i}")));
            }
            data.extend(row.iter().map(|&j| v.data()[i * m + j]));
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, width], data)?;
        Ok(self.push(
            value,
            rg,
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Pools each region of a `1×C×h×w` map into `out×out` bins, giving an
    /// `R×C×out×out` batch.
    pub fn roi_pool(
        &mut self,
        x: Var,
        regions: &[CellRegion],
        out: usize,
        mode: PoolMode,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if n != 1 {
            return Err(shape_err("roi_pool", "batch of 1", n));
        }
        if out == 0 {
            return Err(invalid("roi_pool", "output size must be >= 1"));
        }
        for r in regions {
            if r.x1 <= r.x0 || r.y1 <= r.y0 || r.x1 > w || r.y1 > h {
                return Err(invalid("roi_pool", format!("region {r:?} outside {h}x{w}")));
            }
        }
        let (y, argmax) =
            kernels::roi_pool_forward(self.value(x).data(), c, h, w, regions, out, mode);
        let rg = self.rg(x);
        let value = Tensor::new(vec![regions.len(), c, out, out], y)?;
        Ok(self.push(
            value,
            rg,
            Op::RoiPool {
                x,
                regions: regions.to_vec(),
                out,
                mode,
                argmax,
            },
        ))
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        if lens[root.0] != 1 {
            return Err(shape_err("backward", "scalar root", lens[root.0]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.rg(root) {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                n,
                cols,
            } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.rg(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = self.rg(*b).then(|| vec![T::zero(); geom.k]);
                kernels::conv2d_backward(
                    xv,
                    *n,
                    wv,
                    cols,
                    geom,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        acc(v, &mut |s| add_into(s, &d));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *s = *s + gi;
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4().unwrap();
                let denom = T::from_usize(h * w).unwrap();
                acc(*x, &mut |s| {
                    for (plane, &gi) in s.chunks_mut(h * w).zip(g) {
                        let share = gi / denom;
                        plane.iter_mut().for_each(|v| *v = *v + share);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &gi)| *s = *s - gi));
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &gi)| *s = *s + gi * *c));
            }
            Op::MulScalar(x, sv) => {
                let c = self.value(*sv).item();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &gi)| *s = *s + gi * c));
                let xv = self.value(*x).data();
                let dot: T = xv.iter().zip(g).map(|(&a, &b)| a * b).sum();
                acc(*sv, &mut |s| s[0] = s[0] + dot);
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v = *v + g[0]));
            }
            Op::SmoothL1(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for ((s, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *s = *s + gi * smooth_l1_grad(xi);
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let m = probs.len() / n;
                let scale = g[0] / T::from_usize(n).unwrap();
                acc(*logits, &mut |s| {
                    for (i, &u) in labels.iter().enumerate() {
                        for j in 0..m {
                            let mut d = probs[i * m + j];
                            if j == u {
                                d = d - T::one();
                            }
                            s[i * m + j] = s[i * m + j] + d * scale;
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::SelectBatch(x, idx) => {
                let per = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                acc(*x, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * per..(i + 1) * per], &g[k * per..(k + 1) * per]);
                    }
                });
            }
            Op::ConcatBatch(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::GatherCols { x, cols } => {
                let m = self.value(*x).len() / cols.len();
                let width = cols[0].len();
                acc(*x, &mut |s| {
                    for (i, row) in cols.iter().enumerate() {
                        for (k, &j) in row.iter().enumerate() {
                            s[i * m + j] = s[i * m + j] + g[i * width + k];
                        }
                    }
                });
            }
            Op::RoiPool {
                x,
                regions,
                out,
                mode,
                argmax,
            } => {
                let (_, c, h, w) = self.value(*x).dims4().unwrap();
                acc(*x, &mut |s| {
                    kernels::roi_pool_backward(g, c, h, w, regions, *out, *mode, argmax, s)
                });
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

pub fn smooth_l1_value<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

/// `clamp(x, −1, 1)`; at `|x| == 1` this is `sign(x)`.
pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    x.max(-T::one()).min(T::one())
}
