//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass in execution order, so
//! node inputs always precede the node. [`Graph::backward`] sweeps the tape once in
//! reverse and returns the gradient of a scalar loss with respect to every node that
//! depends on a parameter or a gradient-tracking input.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::params::{NormId, NormUpdate, ParamId, ParamStore, BN_EPS};
use crate::tensor::{strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, p: usize, q: usize, r: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Unary { kind: UnaryKind, x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Affine { x: Var, scale: f64 },
    Binary { kind: BinaryKind, x: Var, y: Var, broadcast: bool },
    Softmax { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, k: Var, b: Var, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanRows { x: Var, rows: usize },
    Sum { x: Var },
    Gather { param: ParamId, indices: Vec<usize>, width: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, Var>,
    norm_updates: Vec<NormUpdate>,
}

/// Result of one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if the node is on a gradient path.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            norm_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Running-statistic updates produced by train-mode batch norms in this pass.
    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.norm_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input-gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = self.store.param(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_nodes.insert(id, v);
        v
    }

    /// Rows of a `[rows × width]` parameter table selected by index (embedding lookup).
    pub fn gather_rows(&mut self, id: ParamId, indices: &[usize]) -> Result<Var> {
        let table = self.store.value(id);
        if table.rank() != 2 {
            return Err(Error::ShapeContract(format!(
                "gather_rows needs a matrix parameter, got {:?}",
                table.shape()
            )));
        }
        if indices.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        let (rows, width) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::Contract(format!("row index {i} out of range {rows}")));
            }
            data.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
        }
        let value = Tensor::from_parts(vec![indices.len(), width], data);
        Ok(self.push(
            value,
            Op::Gather {
                param: id,
                indices: indices.to_vec(),
                width,
            },
            self.store.param(id).trainable,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (p, q, a_vec) = match sa.as_slice() {
            [q] => (1, *q, true),
            [p, q] => (*p, *q, false),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let (q2, r, b_vec) = match sb.as_slice() {
            [q2] => (*q2, 1, true),
            [q2, r] => (*q2, *r, false),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if q != q2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; p * r];
        kernels::mm_acc(self.value(a).data(), self.value(b).data(), p, q, r, &mut out);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![r],
            (false, true) => vec![p],
            (false, false) => vec![p, r],
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, p, q, r }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [rows, cols] = s[..] else {
            return Err(Error::ShapeContract(format!("transpose needs a matrix, got {s:?}")));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), Op::Transpose { x, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeContract(format!("invalid permutation {axes:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let out = permute_data(self.value(x).data(), &s, axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let src = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = src.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive entry {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
        };
        let t = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        Ok(self.push(t, Op::Unary { kind, x }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let src = self.value(x);
        let t = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|v| v.clamp(lo, hi)).collect());
        let rg = self.rg(x);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let src = self.value(x);
        let t = Tensor::from_parts(
            src.shape().to_vec(),
            src.data().iter().map(|v| scale * v + shift).collect(),
        );
        let rg = self.rg(x);
        self.push(t, Op::Affine { x, scale }, rg)
    }

    /// Elementwise binary op. `y` may also be a vector matching the last axis of `x`,
    /// in which case it is broadcast across the rows of `x`.
    pub fn binary(&mut self, kind: BinaryKind, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        let broadcast = if sx == sy {
            false
        } else if sy.len() == 1 && sx.len() >= 2 && sx.last() == sy.last() {
            true
        } else {
            return Err(Error::shape(kind_name(kind), &sx, &sy));
        };
        let (xd, yd) = (self.value(x).data(), self.value(y).data());
        let n = yd.len();
        let f = |a: f64, b: f64| match kind {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        };
        let out: Vec<f64> = xd.iter().enumerate().map(|(i, &a)| f(a, yd[i % n])).collect();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::Binary {
                kind,
                x,
                y,
                broadcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, x, y)
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, x, y)
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, x, y)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over a vector with max subtraction. Masked-out entries get exactly zero
    /// weight and the remaining entries renormalize.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(Error::ShapeContract(format!("softmax needs a vector, got {s:?}")));
        }
        if let Some(m) = mask {
            if m.len() != s[0] {
                return Err(Error::shape("masked_softmax", &s, &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::EmptyInput("masked_softmax"));
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let xd = self.value(x).data();
        let max = xd
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep(i) { (v - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= z);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax { x }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptyInput("concat"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::ShapeContract(format!("concat axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::ShapeContract(format!(
                "slice [{start}, {}) on axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&1);
        let r = self.slice(x, 0, i, 1)?;
        self.reshape(r, &[width])
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            let s = self.shape(r).to_vec();
            if s.len() != 1 {
                return Err(Error::ShapeContract(format!("stack_rows needs vectors, got {s:?}")));
            }
            reshaped.push(self.reshape(r, &[1, s[0]])?);
        }
        self.concat(&reshaped, 0)
    }

    /// Same-padded stride-1 cross-correlation of `x[c_in×h×w]` with `k[c_out×c_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x).to_vec(), self.shape(k).to_vec(), self.shape(b).to_vec());
        let ([c_in, h, w], [c_out, kc, kh, kw]) = (&sx[..], &sk[..]) else {
            return Err(Error::shape("conv2d", &sx, &sk));
        };
        let (c_in, h, w, c_out, kc, kh, kw) = (*c_in, *h, *w, *c_out, *kc, *kh, *kw);
        if kc != c_in {
            return Err(Error::shape("conv2d", &sx, &sk));
        }
        if sb != [c_out] {
            return Err(Error::shape("conv2d bias", &sk, &sb));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeContract(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        let dims = ConvDims { c_in, c_out, h, w, kh, kw };
        let mut out = vec![0.0; c_out * h * w];
        kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), self.value(b).data(), dims, &mut out);
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![c_out, h, w], out), Op::Conv2d { x, k, b, dims }, rg))
    }

    /// Per-channel normalization of `x[c×h×w]` followed by the affine `gamma, beta`.
    /// Train mode uses the statistics of `x` and records a running-statistic update;
    /// eval mode uses the stored running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, norm: NormId) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [c, h, w] = sx[..] else {
            return Err(Error::ShapeContract(format!("batch_norm needs c×h×w, got {sx:?}")));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &sx, self.shape(gamma)));
        }
        let n = h * w;
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let plane = &xd[ch * n..(ch + 1) * n];
                    let m = plane.iter().sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                }
                (mean, var, true)
            }
            Mode::Eval => {
                let stats = self.store.norm(norm);
                match (&stats.mean, &stats.var) {
                    (Some(m), Some(v)) => (m.clone(), v.clone(), false),
                    _ => return Err(Error::UninitializedStats(stats.name.clone())),
                }
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for i in ch * n..(ch + 1) * n {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + bt[ch];
            }
        }
        if batch_stats {
            self.norm_updates.push(NormUpdate { norm, mean, var });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Non-overlapping ceil-mode max pooling over the two trailing axes of `x[c×h×w]`.
    pub fn max_pool2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [c, h, w] = sx[..] else {
            return Err(Error::ShapeContract(format!("max_pool2d needs c×h×w, got {sx:?}")));
        };
        if ph == 0 || pw == 0 {
            return Err(Error::ShapeContract("max_pool2d window must be at least 1".into()));
        }
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), c, h, w, ph, pw);
        let shape = vec![c, kernels::pooled_len(h, ph), kernels::pooled_len(w, pw)];
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, argmax }, rg))
    }

    /// Arithmetic mean over the rows of `x[n×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [rows, d] = s[..] else {
            return Err(Error::ShapeContract(format!("mean_rows needs a matrix, got {s:?}")));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![d], out), Op::MeanRows { x, rows }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn dot(&mut self, x: Var, y: Var) -> Result<Var> {
        let p = self.mul(x, y)?;
        Ok(self.sum(p))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }

        for (&id, &v) in &self.param_nodes {
            if let Some(g) = &grads[v.0] {
                let shape = self.nodes[v.0].value.shape().to_vec();
                match params.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => {
                        params.insert(id, Tensor::from_parts(shape, g.clone()));
                    }
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            nodes: grads,
            shapes,
            params,
        })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut BTreeMap<ParamId, Tensor>,
    ) {
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Gather { param, indices, width } => {
                let shape = self.store.value(*param).shape().to_vec();
                let acc = params.entry(*param).or_insert_with(|| Tensor::zeros(&shape));
                let d = acc.data_mut();
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..*width {
                        d[idx * width + j] += g[row * width + j];
                    }
                }
            }
            Op::MatMul { a, b, p, q, r } => {
                if self.rg(*a) {
                    let da = slot(grads, a.0, numel(*a));
                    kernels::mm_bt_acc(g, val(*b), *p, *q, *r, da);
                }
                if self.rg(*b) {
                    let db = slot(grads, b.0, numel(*b));
                    kernels::mm_at_acc(val(*a), g, *p, *q, *r, db);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let dx = slot(grads, x.0, numel(*x));
                for i in 0..*rows {
                    for j in 0..*cols {
                        dx[i * cols + j] += g[j * rows + i];
                    }
                }
            }
            Op::Reshape { x } => add_into(slot(grads, x.0, numel(*x)), g),
            Op::Permute { x, axes } => {
                let in_shape = self.nodes[x.0].value.shape();
                let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, &out_shape, &inverse);
                add_into(slot(grads, x.0, numel(*x)), &back);
            }
            Op::Unary { kind, x } => {
                let xd = val(*x);
                let yd = node.value.data();
                let dx = slot(grads, x.0, numel(*x));
                for i in 0..g.len() {
                    let local = match kind {
                        UnaryKind::Tanh => 1.0 - yd[i] * yd[i],
                        UnaryKind::Sigmoid => yd[i] * (1.0 - yd[i]),
                        UnaryKind::Relu => {
                            if xd[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Exp => yd[i],
                        UnaryKind::Log => 1.0 / xd[i],
                    };
                    dx[i] += g[i] * local;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x);
                let dx = slot(grads, x.0, numel(*x));
                for i in 0..g.len() {
                    if xd[i] >= *lo && xd[i] <= *hi {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Affine { x, scale } => {
                let dx = slot(grads, x.0, numel(*x));
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += scale * gv;
                }
            }
            Op::Binary { kind, x, y, broadcast } => {
                let n_y = numel(*y);
                if self.rg(*x) {
                    let yd = val(*y);
                    let dx = slot(grads, x.0, numel(*x));
                    for i in 0..g.len() {
                        dx[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * yd[i % n_y],
                        };
                    }
                }
                if self.rg(*y) {
                    let xd = val(*x);
                    let dy = slot(grads, y.0, n_y);
                    for i in 0..g.len() {
                        let j = if *broadcast { i % n_y } else { i };
                        dy[j] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * xd[i],
                        };
                    }
                }
            }
            Op::Softmax { x } => {
                let yd = node.value.data();
                let s: f64 = yd.iter().zip(g).map(|(y, gv)| y * gv).sum();
                let dx = slot(grads, x.0, numel(*x));
                for i in 0..g.len() {
                    dx[i] += yd[i] * (g[i] - s);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    if self.rg(v) {
                        let dv = slot(grads, v.0, numel(v));
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            add_into(&mut dv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.nodes[x.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dx = slot(grads, x.0, numel(*x));
                for o in 0..outer {
                    let base = (o * in_shape[*axis] + start) * inner;
                    add_into(&mut dx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Conv2d { x, k, b, dims } => {
                if self.rg(*x) {
                    let dx = slot(grads, x.0, numel(*x));
                    kernels::conv2d_backward_input(g, val(*k), *dims, dx);
                }
                if self.rg(*k) || self.rg(*b) {
                    let mut dk = vec![0.0; numel(*k)];
                    let mut db = vec![0.0; numel(*b)];
                    kernels::conv2d_backward_kernel(g, val(*x), *dims, &mut dk, &mut db);
                    if self.rg(*k) {
                        add_into(slot(grads, k.0, dk.len()), &dk);
                    }
                    if self.rg(*b) {
                        add_into(slot(grads, b.0, db.len()), &db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let n = g.len() / c;
                let gd = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ch in 0..c {
                    for i in ch * n..(ch + 1) * n {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
                if self.rg(*gamma) {
                    add_into(slot(grads, gamma.0, c), &sum_gx);
                }
                if self.rg(*beta) {
                    add_into(slot(grads, beta.0, c), &sum_g);
                }
                if self.rg(*x) {
                    let dx = slot(grads, x.0, numel(*x));
                    for ch in 0..c {
                        let scale = gd[ch] * inv_std[ch];
                        for i in ch * n..(ch + 1) * n {
                            dx[i] += if *batch_stats {
                                scale * (g[i] - sum_g[ch] / n as f64 - xhat[i] * sum_gx[ch] / n as f64)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = slot(grads, x.0, numel(*x));
                for (gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
            }
            Op::MeanRows { x, rows } => {
                let d = g.len();
                let dx = slot(grads, x.0, numel(*x));
                for r in 0..*rows {
                    for j in 0..d {
                        dx[r * d + j] += g[j] / *rows as f64;
                    }
                }
            }
            Op::Sum { x } => {
                let dx = slot(grads, x.0, numel(*x));
                dx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum();
        out.push(src[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn kind_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
    }
}
