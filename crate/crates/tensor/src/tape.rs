//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. Nodes only ever
//! reference earlier nodes, so walking the tape backwards visits each node
//! once in a valid reverse topological order.

use crate::error::{Result, TensorError};
use crate::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive op kinds supported by the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    AddBias,
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Add,
    Sub,
    MulScalar(ScalarBits),
    AddScalar(ScalarBits),
    ElementwiseMul,
    Log,
    Exp,
    Sum,
    SumRows,
    Mean,
    SoftmaxRows,
    LogSoftmaxRows,
    Flatten,
}

/// `f64` stored by bit pattern so that [`OpKind`] stays `Eq + Hash`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScalarBits(u64);

impl ScalarBits {
    pub fn new(v: f64) -> Self {
        ScalarBits(v.to_bits())
    }

    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

impl OpKind {
    /// Names of every op kind, in declaration order.
    pub const ALL_NAMES: [&'static str; 19] = [
        "matmul",
        "conv2d",
        "add_bias",
        "relu",
        "maxpool2d",
        "global_avg_pool",
        "add",
        "sub",
        "mul_scalar",
        "add_scalar",
        "elementwise_mul",
        "log",
        "exp",
        "sum",
        "sum_rows",
        "mean",
        "softmax_rows",
        "log_softmax_rows",
        "flatten",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::AddBias => "add_bias",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d { .. } => "maxpool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::MulScalar(_) => "mul_scalar",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::SumRows => "sum_rows",
            OpKind::Mean => "mean",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Flatten => "flatten",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Conv2d { .. } | OpKind::AddBias | OpKind::Add | OpKind::Sub => 2,
            OpKind::ElementwiseMul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Saved {
    None,
    Argmax(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    kind: Option<OpKind>,
    inputs: [usize; 2],
    requires_grad: bool,
    saved: Saved,
}

/// Recorded computation. Confined to one thread for a forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for the leaf `v`, present iff it requires grad and is reachable from the root.
    /// Gradients of intermediate nodes are released during the sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        self.nodes.push(Node { value, kind: None, inputs: [0, 0], requires_grad, saved: Saved::None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn parameter(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push(&mut self, kind: OpKind, inputs: &[Var], value: Tensor, saved: Saved) -> Result<Var> {
        check_finite(kind.name(), &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let mut ids = [0usize; 2];
        for (slot, v) in ids.iter_mut().zip(inputs) {
            *slot = v.0;
        }
        self.nodes.push(Node { value, kind: Some(kind), inputs: ids, requires_grad, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Generic entry point dispatching on `kind`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(TensorError::Contract(format!(
                "{} takes {} inputs, got {}",
                kind.name(),
                kind.arity(),
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Conv2d { stride, pad } => self.conv2d(inputs[0], inputs[1], stride, pad),
            OpKind::AddBias => self.add_bias(inputs[0], inputs[1]),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::MaxPool2d { kernel, stride } => self.maxpool2d(inputs[0], kernel, stride),
            OpKind::GlobalAvgPool => self.global_avg_pool(inputs[0]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::MulScalar(c) => self.mul_scalar(inputs[0], c.get()),
            OpKind::AddScalar(c) => self.add_scalar(inputs[0], c.get()),
            OpKind::ElementwiseMul => self.mul(inputs[0], inputs[1]),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Exp => self.exp(inputs[0]),
            OpKind::Sum => self.sum(inputs[0]),
            OpKind::SumRows => self.sum_rows(inputs[0]),
            OpKind::Mean => self.mean(inputs[0]),
            OpKind::SoftmaxRows => self.softmax_rows(inputs[0]),
            OpKind::LogSoftmaxRows => self.log_softmax_rows(inputs[0]),
            OpKind::Flatten => self.flatten(inputs[0]),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shapes("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm::nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(OpKind::MatMul, &[a, b], value, Saved::None)
    }

    /// Cross-correlation of `(batch, c_in, h, w)` with `(c_out, c_in, k, k)`,
    /// symmetric zero padding, stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(TensorError::shapes("conv2d", &[sx, sw]));
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::dim("conv2d", format!("unsupported stride {stride}")));
        }
        let geom = ConvGeom::new(sx, sw, stride, pad)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; geom.batch * geom.out_len()];
        let g = geom.chunk();
        let mut col = vec![0.0; geom.col_rows() * g * geom.out_hw()];
        let mut cat = vec![0.0; geom.c_out * g * geom.out_hw()];
        for b0 in (0..geom.batch).step_by(g) {
            let n = g.min(geom.batch - b0);
            let cols = n * geom.out_hw();
            if n == 1 {
                // One image: read and write the NCHW planes in place.
                let xb = &xv[b0 * geom.in_len()..(b0 + 1) * geom.in_len()];
                let ob = &mut out[b0 * geom.out_len()..(b0 + 1) * geom.out_len()];
                let src = if geom.is_pointwise() {
                    xb
                } else {
                    geom.im2col(xb, 1, 0, &mut col[..geom.col_rows() * cols]);
                    &col[..geom.col_rows() * cols]
                };
                gemm::nn(geom.c_out, geom.col_rows(), cols, wv, src, ob, false);
                continue;
            }
            let col = &mut col[..geom.col_rows() * cols];
            let cat = &mut cat[..geom.c_out * cols];
            geom.columns(xv, b0, n, col);
            gemm::nn(geom.c_out, geom.col_rows(), cols, wv, col, cat, false);
            geom.scatter_channels(cat, geom.c_out, geom.out_hw(), b0, n, &mut out);
        }
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h, geom.out_w], out)?;
        self.push(OpKind::Conv2d { stride, pad }, &[x, w], value, Saved::None)
    }

    /// Adds a bias over the last axis of a rank-2 input or the channel axis of a rank-4 input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let channels = match sx.len() {
            2 => sx[1],
            4 => sx[1],
            _ => return Err(TensorError::shapes("add_bias", &[&sx, &sb])),
        };
        if sb.len() != 1 || sb[0] != channels {
            return Err(TensorError::shapes("add_bias", &[&sx, &sb]));
        }
        let inner = if sx.len() == 4 { sx[2] * sx[3] } else { 1 };
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let c = bv[i % channels];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let value = Tensor::new(sx, out)?;
        self.push(OpKind::AddBias, &[x, bias], value, Saved::None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(OpKind::Relu, &[x], value, Saved::None)
    }

    /// Max pooling on `(batch, c, h, w)`; windows that would run past the edge are dropped.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(TensorError::dim("maxpool2d", format!("kernel {kernel} stride {stride} on shape {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push(OpKind::MaxPool2d { kernel, stride }, &[x], value, Saved::Argmax(argmax))
    }

    /// `(batch, c, h, w) -> (batch, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shapes("global_avg_pool", &[&s]));
        }
        let hw = s[2] * s[3];
        let out = self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push(OpKind::GlobalAvgPool, &[x], value, Saved::None)
    }

    fn zip_same(&mut self, kind: OpKind, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shapes(kind.name(), &[ta.shape(), tb.shape()]));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(kind, &[a, b], value, Saved::None)
    }

    fn map_unary(&mut self, kind: OpKind, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(kind, &[x], value, Saved::None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(OpKind::ElementwiseMul, a, b, |x, y| x * y)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(OpKind::MulScalar(ScalarBits::new(c)), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(OpKind::AddScalar(ScalarBits::new(c)), x, |v| v + c)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map_unary(OpKind::Log, x, f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(OpKind::Exp, x, f64::exp)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(OpKind::Sum, &[x], Tensor::scalar(s), Saved::None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(OpKind::Mean, &[x], Tensor::scalar(m), Saved::None)
    }

    /// `(rows, cols) -> (rows)`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shapes("sum_rows", &[&s]));
        }
        let out = self.value(x).data().chunks(s[1]).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![s[0]], out)?;
        self.push(OpKind::SumRows, &[x], value, Saved::None)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shapes("softmax_rows", &[&s]));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(s[1]) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(s, out)?;
        self.push(OpKind::SoftmaxRows, &[x], value, Saved::None)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shapes("log_softmax_rows", &[&s]));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(s[1]) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(s, out)?;
        self.push(OpKind::LogSoftmaxRows, &[x], value, Saved::None)
    }

    /// `(batch, ...) -> (batch, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let batch = s[0];
        let inner: usize = s[1..].iter().product();
        let value = Tensor::new(vec![batch, inner.max(1)], t.data().to_vec())?;
        self.push(OpKind::Flatten, &[x], value, Saved::None)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(kind) = self.nodes[id].kind else { continue };
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, kind, g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(g) if self.nodes[i].requires_grad => Some(
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape mirrors value"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, kind: OpKind, mut g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let [ia, ib] = node.inputs;
        let needs = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| self.nodes[i].value.data();
        match kind {
            OpKind::MatMul => {
                let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(ia) {
                    let acc = grad_slot(grads, ia, m * k);
                    gemm::nt(m, n, k, &g, val(ib), acc);
                }
                if needs(ib) {
                    let acc = grad_slot(grads, ib, k * n);
                    gemm::tn(k, m, n, val(ia), &g, acc);
                }
            }
            OpKind::Conv2d { stride, pad } => {
                let geom = ConvGeom::new(self.nodes[ia].value.shape(), self.nodes[ib].value.shape(), stride, pad)?;
                let xv = val(ia);
                let wv = val(ib);
                let need_x = needs(ia);
                let need_w = needs(ib);
                let chunk = geom.chunk();
                let ohw = geom.out_hw();
                let mut gcat = vec![0.0; geom.c_out * chunk * ohw];
                let mut col = vec![0.0; geom.col_rows() * chunk * ohw];
                let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                for b0 in (0..geom.batch).step_by(chunk) {
                    let n = chunk.min(geom.batch - b0);
                    let cols = n * ohw;
                    let col = &mut col[..geom.col_rows() * cols];
                    if n == 1 {
                        let gb = &g[b0 * geom.out_len()..(b0 + 1) * geom.out_len()];
                        let xb = &xv[b0 * geom.in_len()..(b0 + 1) * geom.in_len()];
                        if need_w {
                            let src = if geom.is_pointwise() {
                                xb
                            } else {
                                geom.im2col(xb, 1, 0, col);
                                &col[..]
                            };
                            gemm::nt_acc(geom.c_out, cols, geom.col_rows(), gb, src, &mut dw);
                        }
                        if need_x {
                            let dxb = &mut dx[b0 * geom.in_len()..(b0 + 1) * geom.in_len()];
                            if geom.is_pointwise() {
                                gemm::tn(geom.col_rows(), geom.c_out, cols, wv, gb, dxb);
                            } else {
                                gemm::tn_into(geom.col_rows(), geom.c_out, cols, wv, gb, col);
                                geom.col2im_acc(col, 1, 0, dxb);
                            }
                        }
                        continue;
                    }
                    let gcat = &mut gcat[..geom.c_out * cols];
                    geom.gather_channels(&g, geom.c_out, ohw, b0, n, gcat);
                    if need_w {
                        geom.columns(xv, b0, n, col);
                        gemm::nt_acc(geom.c_out, cols, geom.col_rows(), gcat, col, &mut dw);
                    }
                    if need_x {
                        gemm::tn_into(geom.col_rows(), geom.c_out, cols, wv, gcat, col);
                        if geom.is_pointwise() {
                            geom.scatter_channels(col, geom.c_in, geom.h * geom.w, b0, n, &mut dx);
                        } else {
                            for b in b0..b0 + n {
                                let dxb = &mut dx[b * geom.in_len()..(b + 1) * geom.in_len()];
                                geom.col2im_acc(col, n, b - b0, dxb);
                            }
                        }
                    }
                }
                if need_w {
                    give(grads, ib, dw);
                }
                if need_x {
                    give(grads, ia, dx);
                }
            }
            OpKind::AddBias => {
                if needs(ib) {
                    let s = node.value.shape();
                    let channels = s[1];
                    let inner = if s.len() == 4 { s[2] * s[3] } else { 1 };
                    let acc = grad_slot(grads, ib, channels);
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        acc[i % channels] += chunk.iter().sum::<f64>();
                    }
                }
                if needs(ia) {
                    give(grads, ia, g);
                }
            }
            OpKind::Relu => {
                if needs(ia) {
                    for (gi, &xi) in g.iter_mut().zip(val(ia)) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    give(grads, ia, g);
                }
            }
            OpKind::MaxPool2d { .. } => {
                if needs(ia) {
                    let Saved::Argmax(ref argmax) = node.saved else {
                        return Err(TensorError::Contract("maxpool node lost its argmax".into()));
                    };
                    let acc = grad_slot(grads, ia, self.nodes[ia].value.len());
                    for (&src, &gi) in argmax.iter().zip(&g) {
                        acc[src] += gi;
                    }
                }
            }
            OpKind::GlobalAvgPool => {
                if needs(ia) {
                    let s = self.nodes[ia].value.shape();
                    let hw = s[2] * s[3];
                    let scale = 1.0 / hw as f64;
                    let acc = grad_slot(grads, ia, self.nodes[ia].value.len());
                    for (chunk, &gi) in acc.chunks_mut(hw).zip(&g) {
                        chunk.iter_mut().for_each(|a| *a += gi * scale);
                    }
                }
            }
            OpKind::Add | OpKind::Sub => {
                if needs(ib) {
                    let acc = grad_slot(grads, ib, g.len());
                    if kind == OpKind::Add {
                        acc.iter_mut().zip(&g).for_each(|(a, &gi)| *a += gi);
                    } else {
                        acc.iter_mut().zip(&g).for_each(|(a, &gi)| *a -= gi);
                    }
                }
                if needs(ia) {
                    give(grads, ia, g);
                }
            }
            OpKind::ElementwiseMul => {
                if needs(ia) {
                    let acc = grad_slot(grads, ia, g.len());
                    acc.iter_mut().zip(&g).zip(val(ib)).for_each(|((a, &gi), &o)| *a += gi * o);
                }
                if needs(ib) {
                    let acc = grad_slot(grads, ib, g.len());
                    acc.iter_mut().zip(&g).zip(val(ia)).for_each(|((a, &gi), &o)| *a += gi * o);
                }
            }
            OpKind::MulScalar(c) => {
                if needs(ia) {
                    let c = c.get();
                    g.iter_mut().for_each(|gi| *gi *= c);
                    give(grads, ia, g);
                }
            }
            OpKind::AddScalar(_) => {
                if needs(ia) {
                    give(grads, ia, g);
                }
            }
            OpKind::Log => {
                if needs(ia) {
                    let x = val(ia);
                    let acc = grad_slot(grads, ia, g.len());
                    acc.iter_mut().zip(&g).zip(x).for_each(|((a, &gi), &xi)| *a += gi / xi);
                }
            }
            OpKind::Exp => {
                if needs(ia) {
                    let y = node.value.data();
                    let acc = grad_slot(grads, ia, g.len());
                    acc.iter_mut().zip(&g).zip(y).for_each(|((a, &gi), &yi)| *a += gi * yi);
                }
            }
            OpKind::Sum | OpKind::Mean => {
                if needs(ia) {
                    let n = self.nodes[ia].value.len();
                    let scale = if kind == OpKind::Mean { g[0] / n as f64 } else { g[0] };
                    let acc = grad_slot(grads, ia, n);
                    acc.iter_mut().for_each(|a| *a += scale);
                }
            }
            OpKind::SumRows => {
                if needs(ia) {
                    let cols = self.nodes[ia].value.shape()[1];
                    let acc = grad_slot(grads, ia, self.nodes[ia].value.len());
                    for (row, &gi) in acc.chunks_mut(cols).zip(&g) {
                        row.iter_mut().for_each(|a| *a += gi);
                    }
                }
            }
            OpKind::SoftmaxRows => {
                if needs(ia) {
                    let cols = node.value.shape()[1];
                    let y = node.value.data();
                    let acc = grad_slot(grads, ia, y.len());
                    for ((arow, grow), yrow) in acc.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((a, &gi), &yi) in arow.iter_mut().zip(grow).zip(yrow) {
                            *a += yi * (gi - dot);
                        }
                    }
                }
            }
            OpKind::LogSoftmaxRows => {
                if needs(ia) {
                    let cols = node.value.shape()[1];
                    let y = node.value.data();
                    let acc = grad_slot(grads, ia, y.len());
                    for ((arow, grow), yrow) in acc.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = grow.iter().sum();
                        for ((a, &gi), &yi) in arow.iter_mut().zip(grow).zip(yrow) {
                            *a += gi - yi.exp() * total;
                        }
                    }
                }
            }
            OpKind::Flatten => {
                if needs(ia) {
                    give(grads, ia, g);
                }
            }
        }
        Ok(())
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `g` into the slot for `id`, moving the buffer in when the slot is empty.
fn give(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &gi)| *a += gi),
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let k = sw[2];
        let (out_h, out_w) = match (conv_out_dim(sx[2], k, stride, pad), conv_out_dim(sx[3], k, stride, pad)) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(TensorError::shapes("conv2d", &[sx, sw])),
        };
        Ok(ConvGeom { batch: sx[0], c_in: sx[1], h: sx[2], w: sx[3], c_out: sw[0], k, stride, pad, out_h, out_w })
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.out_hw()
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Images per GEMM chunk, sized so one chunk of columns stays cache resident.
    fn chunk(&self) -> usize {
        const TARGET: usize = 1 << 15;
        (TARGET / (self.col_rows() * self.out_hw()).max(1)).clamp(1, self.batch.max(1))
    }

    /// Columns of images `b0..b0+n` side by side: `(col_rows, n * out_hw)`.
    fn columns(&self, x: &[f64], b0: usize, n: usize, col: &mut [f64]) {
        if self.is_pointwise() {
            self.gather_channels(x, self.c_in, self.h * self.w, b0, n, col);
        } else {
            for b in b0..b0 + n {
                self.im2col(&x[b * self.in_len()..(b + 1) * self.in_len()], n, b - b0, col);
            }
        }
    }

    /// `(batch, channels, plane)` rows `b0..b0+n` -> `(channels, n * plane)`.
    fn gather_channels(&self, src: &[f64], channels: usize, plane: usize, b0: usize, n: usize, dst: &mut [f64]) {
        let ld = n * plane;
        for j in 0..n {
            for c in 0..channels {
                let from = &src[((b0 + j) * channels + c) * plane..][..plane];
                dst[c * ld + j * plane..][..plane].copy_from_slice(from);
            }
        }
    }

    /// `(channels, n * plane)` -> rows `b0..b0+n` of `(batch, channels, plane)`, accumulating.
    fn scatter_channels(&self, src: &[f64], channels: usize, plane: usize, b0: usize, n: usize, dst: &mut [f64]) {
        let ld = n * plane;
        for j in 0..n {
            for c in 0..channels {
                let from = &src[c * ld + j * plane..][..plane];
                let to = &mut dst[((b0 + j) * channels + c) * plane..][..plane];
                for (t, f) in to.iter_mut().zip(from) {
                    *t += f;
                }
            }
        }
    }

    /// Output columns `lo..hi` whose input column `ox * stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.out_w) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], n: usize, b: usize, col: &mut [f64]) {
        let ohw = self.out_hw();
        let ld = n * ohw;
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * ld + b * ohw..][..ohw];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let first = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_acc(&self, col: &[f64], n: usize, b: usize, dx: &mut [f64]) {
        let ohw = self.out_hw();
        let ld = n * ohw;
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * ld + b * ohw..][..ohw];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * self.stride + kx - self.pad;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        let line = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(self.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn op_census_is_complete() {
        // Exhaustive match: adding a variant fails to compile until it is listed here.
        let every = |k: OpKind| match k {
            OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::AddBias
            | OpKind::Relu
            | OpKind::MaxPool2d { .. }
            | OpKind::GlobalAvgPool
            | OpKind::Add
            | OpKind::Sub
            | OpKind::MulScalar(_)
            | OpKind::AddScalar(_)
            | OpKind::ElementwiseMul
            | OpKind::Log
            | OpKind::Exp
            | OpKind::Sum
            | OpKind::SumRows
            | OpKind::Mean
            | OpKind::SoftmaxRows
            | OpKind::LogSoftmaxRows
            | OpKind::Flatten => k.name(),
        };
        let c = ScalarBits::new(1.0);
        let kinds = [
            OpKind::MatMul,
            OpKind::Conv2d { stride: 1, pad: 0 },
            OpKind::AddBias,
            OpKind::Relu,
            OpKind::MaxPool2d { kernel: 2, stride: 2 },
            OpKind::GlobalAvgPool,
            OpKind::Add,
            OpKind::Sub,
            OpKind::MulScalar(c),
            OpKind::AddScalar(c),
            OpKind::ElementwiseMul,
            OpKind::Log,
            OpKind::Exp,
            OpKind::Sum,
            OpKind::SumRows,
            OpKind::Mean,
            OpKind::SoftmaxRows,
            OpKind::LogSoftmaxRows,
            OpKind::Flatten,
        ];
        let names: Vec<&str> = kinds.into_iter().map(every).collect();
        assert_eq!(names, OpKind::ALL_NAMES);
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = tape.constant(t(&[2, 2], &[0.3, -1.5, 2.25, 7.0])).unwrap();
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn conv_all_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn relu_subgradient() {
        let mut tape = Tape::new();
        let x = tape.parameter(t(&[2], &[-1.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let mut tape = Tape::new();
        let x = tape.parameter(t(&[1], &[0.0])).unwrap();
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let a = tape.parameter(Tensor::scalar(3.0)).unwrap();
        let b = tape.constant(Tensor::scalar(5.0)).unwrap();
        let p = tape.mul(a, b).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(a).unwrap().item().unwrap(), 5.0);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn squared_input_accumulates_both_paths() {
        let mut tape = Tape::new();
        let a = tape.parameter(Tensor::scalar(3.0)).unwrap();
        let p = tape.mul(a, a).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(a).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.parameter(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn empty_tape_backward_rejected() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(TensorError::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TensorError::Dimension { op, detail } => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.constant(t(&[2], &[1.0, f64::NAN])),
            Err(TensorError::NonFinite { .. })
        ));
        let z = tape.constant(t(&[1], &[0.0])).unwrap();
        assert!(matches!(tape.log(z), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn conv_stride_three_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 6, 6])).unwrap();
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(tape.conv2d(x, w, 3, 0).is_err());
    }

    #[test]
    fn bias_over_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        let b = tape.parameter(t(&[2], &[1.0, -1.0])).unwrap();
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(b).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let p = tape.parameter(t(&[2], &[3.0, 4.0])).unwrap();
        let y = tape.mul(c, p).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }
}
