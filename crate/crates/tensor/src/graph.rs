//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node that requires them. Graphs are cheap and meant
//! to be rebuilt for each training step.

use crate::broadcast;
use crate::conv::{self, Conv2dGeom};
use crate::error::{Result, TensorError};
use crate::tensor::numel;
use crate::{Float, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Abs,
    Sqrt,
    Relu,
    Sigmoid,
}

enum Op<T> {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var },
    Unary { kind: UnKind, x: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    Powf { x: Var, p: T },
    Sum { x: Var },
    SumAxis { x: Var, axis: usize },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    LogSoftmax { x: Var },
    Softmax { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    SelectBlock { x: Var, idx: Vec<usize>, block: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, norm: BatchNormSaved<T> },
}

/// Saved tensors of a batch-norm node.
struct BatchNormSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    mean: Vec<T>,
    var: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    track: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Per-channel batch statistics captured by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn shape_err(msg: String) -> TensorError {
    TensorError::Shape(msg)
}

impl<T: Float> Graph<T> {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track: true }
    }

    /// A graph that only evaluates; no node requires gradients.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), track: false }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.track;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copies the value of `x` into a new constant leaf.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics recorded by a training-mode [`Graph::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { norm, x, .. } if norm.batch_stats => {
                let shape = self.shape(*x);
                let count = numel(shape) / shape[1];
                Some(BatchStats { mean: norm.mean.clone(), var: norm.var.clone(), count })
            }
            _ => None,
        }
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let plan = broadcast::plan(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&plan.out)];
        plan.for_each(|o, i, j| {
            let (x, y) = (va[i], vb[j]);
            out[o] = match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
        });
        let value = Tensor::new(&plan.out, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnKind::Neg => -v,
            UnKind::Exp => v.exp(),
            UnKind::Log => v.ln(),
            UnKind::Abs => v.abs(),
            UnKind::Sqrt => v.sqrt(),
            UnKind::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            UnKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
        });
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnKind::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnKind::Abs, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sqrt, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    pub fn powf(&mut self, x: Var, p: T) -> Var {
        let value = self.value(x).map(|v| v.powf(p));
        self.push(value, Op::Powf { x, p }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- reductions ----

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum along `axis`, keeping the axis with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("sum_axis {axis} on shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let value = Tensor::new(&oshape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::lit(len as f64)))
    }

    // ---- linear algebra / layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    fn rows_cols(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err(format!("{what} needs rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.rows_cols(x, "log_softmax")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..k {
                out[i * k + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(&[n, k], out)?;
        Ok(self.push(value, Op::LogSoftmax { x }, &[x]))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.rows_cols(x, "softmax")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..k {
                let e = (row[j] - m).exp();
                out[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                out[i * k + j] /= z;
            }
        }
        let value = Tensor::new(&[n, k], out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// `out[i] = x[i, idx[i]]`, shape `(n, 1)`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, k) = self.rows_cols(x, "gather")?;
        if idx.len() != n {
            return Err(shape_err(format!("gather: {} indices for {} rows", idx.len(), n)));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= k) {
            return Err(TensorError::Index(format!("gather index {bad} >= {k}")));
        }
        let src = self.value(x).data();
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * k + j]).collect();
        let value = Tensor::new(&[n, 1], out)?;
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    /// Picks block `idx[i]` of width `block` from each row of an `(n, h*block)` tensor.
    pub fn select_block(&mut self, x: Var, idx: &[usize], block: usize) -> Result<Var> {
        let (n, w) = self.rows_cols(x, "select_block")?;
        if block == 0 || w % block != 0 || idx.len() != n {
            return Err(shape_err(format!("select_block: width {w}, block {block}, {} indices", idx.len())));
        }
        let heads = w / block;
        if let Some(&bad) = idx.iter().find(|&&h| h >= heads) {
            return Err(TensorError::Index(format!("block index {bad} >= {heads}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * block);
        for (i, &h) in idx.iter().enumerate() {
            out.extend_from_slice(&src[i * w + h * block..i * w + (h + 1) * block]);
        }
        let value = Tensor::new(&[n, block], out)?;
        Ok(self.push(value, Op::SelectBlock { x, idx: idx.to_vec(), block }, &[x]))
    }

    /// `x·wᵀ + b` with `x: (n, d)`, `w: (k, d)`, `b: (k)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = self.rows_cols(x, "linear input")?;
        let (k, dw) = self.rows_cols(w, "linear weight")?;
        if d != dw {
            return Err(shape_err(format!("linear: input dim {d} vs weight {:?}", [k, dw])));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(shape_err(format!("linear bias {:?} vs {k}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * k];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(k.max(1)) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            d,
            k,
            T::one(),
            self.value(x).data(),
            d as isize,
            1,
            self.value(w).data(),
            1,
            d as isize,
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            k as isize,
            1,
        );
        let value = Tensor::new(&[n, k], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    // ---- convolutional ----

    /// 2-D convolution, `x: (n, c, h, w)`, `w: (o, c, kh, kw)`, `b: (o)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err(format!("conv2d input {xs:?} with kernel {ws:?}")));
        }
        let geom = Conv2dGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(shape_err(format!("conv2d window {ws:?} does not fit input {xs:?}")));
        }
        let (batch, oc) = (xs[0], ws[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let patch = geom.patch();
        let mut out = vec![T::zero(); batch * oc * plane];
        let chunk = conv::chunk_len(&geom, batch);
        let mut cols = vec![T::zero(); patch * chunk * plane];
        let mut tmp = vec![T::zero(); oc * chunk * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut first = 0;
        while first < batch {
            let count = chunk.min(batch - first);
            let cols = &mut cols[..patch * count * plane];
            conv::im2col(xv, &geom, first, count, cols);
            let tmp = &mut tmp[..oc * count * plane];
            T::gemm(
                oc,
                patch,
                count * plane,
                T::one(),
                wv,
                patch as isize,
                1,
                cols,
                (count * plane) as isize,
                1,
                T::zero(),
                tmp,
                (count * plane) as isize,
                1,
            );
            for j in 0..count {
                for o in 0..oc {
                    let dst = ((first + j) * oc + o) * plane;
                    let src = o * count * plane + j * plane;
                    out[dst..dst + plane].copy_from_slice(&tmp[src..src + plane]);
                }
            }
            first += count;
        }
        if let Some(b) = b {
            if self.shape(b) != [oc] {
                return Err(shape_err(format!("conv2d bias {:?} vs {oc} channels", self.shape(b))));
            }
            let bv = self.value(b).data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += bv[(i / plane) % oc];
            }
        }
        let value = Tensor::new(&[batch, oc, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err(format!("max_pool2d needs rank 4, got {xs:?}")));
        }
        let geom = Conv2dGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: kernel,
            kw: kernel,
            stride,
            pad,
        };
        if !geom.valid() || pad >= kernel {
            return Err(shape_err(format!("max_pool2d window {kernel} does not fit {xs:?}")));
        }
        let (out, argmax) = conv::max_pool(self.value(x).data(), &geom, xs[0]);
        let value = Tensor::new(&[xs[0], xs[1], geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean over spatial axes: `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err(format!("global_avg_pool needs rank 4, got {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let inv = T::one() / T::lit(plane.max(1) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(plane.max(1))
            .take(xs[0] * xs[1])
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[xs[0], xs[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Batch normalization over axis 1 of a rank-2 or rank-4 input.
    ///
    /// With `running = None` the batch statistics are used (training mode);
    /// otherwise the given `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(shape_err(format!("batch_norm needs rank 2 or 4, got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("batch_norm affine params vs {c} channels")));
        }
        let n = xs[0];
        let plane: usize = xs[2..].iter().product();
        let count = n * plane;
        let src = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err("batch_norm running stats length".into()));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if count == 0 {
                    return Err(shape_err("batch_norm on empty batch in training mode".into()));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        mean[ch] += src[base..base + plane].iter().copied().sum::<T>();
                    }
                }
                let inv_count = T::one() / T::lit(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv_count);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let m = mean[ch];
                        var[ch] += src[base..base + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_count);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let h = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let norm = BatchNormSaved { xhat, inv_std, batch_stats, mean, var };
        // Statistics stay readable even when the node does not require grad.
        let requires_grad = self.track && [x, gamma, beta].iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: Op::BatchNorm { x, gamma, beta, norm }, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- backward ----

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.value(v).len()]
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let plan = broadcast::plan(self.shape(*a), self.shape(*b))?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = self.zeros_like(*a);
                let mut gb = self.zeros_like(*b);
                plan.for_each(|o, i, j| {
                    let go = gd[o];
                    match kind {
                        BinKind::Add => {
                            ga[i] += go;
                            gb[j] += go;
                        }
                        BinKind::Sub => {
                            ga[i] += go;
                            gb[j] -= go;
                        }
                        BinKind::Mul => {
                            ga[i] += go * vb[j];
                            gb[j] += go * va[i];
                        }
                        BinKind::Div => {
                            ga[i] += go / vb[j];
                            gb[j] -= go * va[i] / (vb[j] * vb[j]);
                        }
                    }
                });
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), ga)?);
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb)?);
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let gx = (0..gd.len())
                    .map(|i| {
                        let (v, y, go) = (xv[i], out[i], gd[i]);
                        match kind {
                            UnKind::Neg => -go,
                            UnKind::Exp => go * y,
                            UnKind::Log => go / v,
                            UnKind::Abs => {
                                if v > T::zero() {
                                    go
                                } else if v < T::zero() {
                                    -go
                                } else {
                                    T::zero()
                                }
                            }
                            UnKind::Sqrt => go / (T::lit(2.0) * y),
                            UnKind::Relu => {
                                if v > T::zero() {
                                    go
                                } else {
                                    T::zero()
                                }
                            }
                            UnKind::Sigmoid => go * y * (T::one() - y),
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.map(|v| v * *s));
            }
            Op::AddScalar { x } => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::Powf { x, p } => {
                let xv = self.value(*x).data();
                let gx = (0..gd.len()).map(|i| gd[i] * *p * xv[i].powf(*p - T::one())).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut gx = self.zeros_like(*x);
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, n as isize, 1, self.value(*b).data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(*a).data(), 1, k as isize, gd, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[r, c], gx)?);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.clone().reshape(self.shape(*x))?);
            }
            Op::LogSoftmax { x } => {
                let (n, k) = (node.value.dim(0), node.value.dim(1));
                let mut gx = vec![T::zero(); n * k];
                for i in 0..n {
                    let gs: T = gd[i * k..(i + 1) * k].iter().copied().sum();
                    for j in 0..k {
                        gx[i * k + j] = gd[i * k + j] - out[i * k + j].exp() * gs;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, k], gx)?);
            }
            Op::Softmax { x } => {
                let (n, k) = (node.value.dim(0), node.value.dim(1));
                let mut gx = vec![T::zero(); n * k];
                for i in 0..n {
                    let dot: T = (0..k).map(|j| gd[i * k + j] * out[i * k + j]).sum();
                    for j in 0..k {
                        gx[i * k + j] = out[i * k + j] * (gd[i * k + j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[n, k], gx)?);
            }
            Op::Gather { x, idx } => {
                let k = self.shape(*x)[1];
                let mut gx = self.zeros_like(*x);
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * k + j] += gd[i];
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::SelectBlock { x, idx, block } => {
                let w = self.shape(*x)[1];
                let mut gx = self.zeros_like(*x);
                for (i, &h) in idx.iter().enumerate() {
                    let dst = i * w + h * block;
                    for t in 0..*block {
                        gx[dst + t] += gd[i * block + t];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[0];
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![T::zero(); n * d];
                    T::gemm(n, k, d, T::one(), gd, k as isize, 1, self.value(*w).data(), d as isize, 1, T::zero(), &mut gx, d as isize, 1);
                    self.accumulate(grads, *x, Tensor::new(&[n, d], gx)?);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![T::zero(); k * d];
                    T::gemm(k, n, d, T::one(), gd, 1, k as isize, self.value(*x).data(), d as isize, 1, T::zero(), &mut gw, d as isize, 1);
                    self.accumulate(grads, *w, Tensor::new(&[k, d], gw)?);
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); k];
                    for row in gd.chunks(k.max(1)) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[k], gb)?);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(*x)[0];
                let oc = self.shape(*w)[0];
                let plane = geom.out_h() * geom.out_w();
                let patch = geom.patch();
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); oc];
                    for (i, &v) in gd.iter().enumerate() {
                        gb[(i / plane) % oc] += v;
                    }
                    self.accumulate(grads, *b, Tensor::new(&[oc], gb)?);
                }
                if need_x || need_w {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let mut gw = vec![T::zero(); oc * patch];
                    let mut gx = if need_x { self.zeros_like(*x) } else { Vec::new() };
                    let chunk = conv::chunk_len(geom, batch);
                    let mut cols = vec![T::zero(); patch * chunk * plane];
                    let mut gy = vec![T::zero(); oc * chunk * plane];
                    let mut first = 0;
                    while first < batch {
                        let count = chunk.min(batch - first);
                        let width = count * plane;
                        let gy = &mut gy[..oc * width];
                        for j in 0..count {
                            for o in 0..oc {
                                let src = ((first + j) * oc + o) * plane;
                                let dst = o * width + j * plane;
                                gy[dst..dst + plane].copy_from_slice(&gd[src..src + plane]);
                            }
                        }
                        let cols = &mut cols[..patch * width];
                        if need_w {
                            conv::im2col(xv, geom, first, count, cols);
                            T::gemm(oc, width, patch, T::one(), gy, width as isize, 1, cols, 1, width as isize, T::one(), &mut gw, patch as isize, 1);
                        }
                        if need_x {
                            T::gemm(patch, oc, width, T::one(), wv, 1, patch as isize, gy, width as isize, 1, T::zero(), cols, width as isize, 1);
                            conv::col2im(cols, geom, first, count, &mut gx);
                        }
                        first += count;
                    }
                    if need_w {
                        self.accumulate(grads, *w, Tensor::new(self.shape(*w), gw)?);
                    }
                    if need_x {
                        self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = self.zeros_like(*x);
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += gd[o];
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let inv = T::one() / T::lit(plane.max(1) as f64);
                let mut gx = self.zeros_like(*x);
                for (i, v) in gx.iter_mut().enumerate() {
                    *v = gd[i / plane] * inv;
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx)?);
            }
            Op::BatchNorm { x, gamma, beta, norm } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let plane: usize = xs[2..].iter().product();
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * norm.xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_gx.clone())?);
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_g.clone())?);
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.zeros_like(*x);
                    let m = T::lit((n * plane) as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let scale = gv[ch] * norm.inv_std[ch];
                            for i in base..base + plane {
                                gx[i] = if norm.batch_stats {
                                    scale * (gd[i] - sum_g[ch] / m - norm.xhat[i] * sum_gx[ch] / m)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs, gx)?);
                }
            }
        }
        Ok(())
    }
}
