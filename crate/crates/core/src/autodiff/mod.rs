//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation records its inputs
//! by [`Var`] handle and stores its output value, so node indices are a
//! topological order by construction. [`Graph::backward`] walks the tape
//! once, in reverse, accumulating gradients into every node that depends on
//! a parameter leaf.
//!
//! One graph is built per forward pass and dropped after its gradients are
//! read back.

mod gradcheck;
pub(crate) mod kernels;

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

pub use gradcheck::{central_difference, finite_diff_check, relative_error};
pub use kernels::SQUASH_EPS;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

/// Backward rules that can be deliberately broken, so that gradient checks
/// can be shown to catch a wrong derivative.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultyRule {
    Squash,
    Softmax,
    Conv2d,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Reshape(Var),
    SumAll(Var),
    Softmax {
        input: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Squash(Var),
    Norm(Var),
    Predict {
        u: Var,
        w: Var,
    },
    WeightedSum {
        c: Var,
        uhat: Var,
    },
    Agreement {
        uhat: Var,
        v: Var,
    },
    Interleave(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only differentiation tape.
#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<FaultyRule>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    /// Scales the gradient produced by `rule` by 1.5 for the rest of this
    /// graph's life. Test hook only.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, rule: FaultyRule) {
        self.fault = Some(rule);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf: receives a gradient in [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Gradient of the last backward pass's loss w.r.t. `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.check(v);
        let g = self.grads.get(v.index as usize)?.as_ref()?;
        Some(Tensor::new(self.node(v).value.shape(), g.clone()).expect("grad shape"))
    }

    fn check(&self, v: Var) {
        assert_eq!(v.graph, self.id, "Var used with a graph it does not belong to");
    }

    fn node(&self, v: Var) -> &Node {
        self.check(v);
        &self.nodes[v.index as usize]
    }

    fn data(&self, v: Var) -> &[f64] {
        self.node(v).value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("graph too large");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn derived(&mut self, shape: &[usize], data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.needs(p));
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op, requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(&shape, data, op, &[a, b])
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.derived(&shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map_unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.map_unary(a, Op::AddScalar(a), |x| x + offset)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| if x < 0.0 { 0.0 } else { x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Square(a), |x| x * x)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.node(a).value.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.data(a).to_vec();
        Ok(self.derived(shape, data, Op::Reshape(a), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.derived(&[], vec![total], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.node(a).value.len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let data = kernels::softmax_forward(self.data(a), outer, shape[axis], inner);
        let op = Op::Softmax {
            input: a,
            outer,
            axis: shape[axis],
            inner,
        };
        Ok(self.derived(&shape, data, op, &[a]))
    }

    /// Cross-correlation of `input (b, c, h, w)` with `kernel (o, c, k, k)`
    /// plus a per-channel `bias (o)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if is.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d expects input rank 4, kernel rank 4, bias rank 1; got {is:?}, {ks:?}, {bs:?}"
            )));
        }
        let (batch, channels, height, width) = (is[0], is[1], is[2], is[3]);
        let (out_channels, k) = (ks[0], ks[2]);
        if ks[1] != channels {
            return Err(Error::shape(format!(
                "conv2d kernel expects {} input channels, input has {channels}",
                ks[1]
            )));
        }
        if ks[3] != k {
            return Err(Error::shape(format!("conv2d kernel must be square, got {ks:?}")));
        }
        if bs[0] != out_channels {
            return Err(Error::shape(format!(
                "conv2d bias has {} entries for {out_channels} output channels",
                bs[0]
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        if k > height + 2 * padding || k > width + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {k} exceeds padded input {height}x{width} (padding {padding})"
            )));
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kernel: k,
            padding,
            stride,
            out_h: (height + 2 * padding - k) / stride + 1,
            out_w: (width + 2 * padding - k) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            self.data(input),
            self.data(kernel),
            self.data(bias),
            batch,
            out_channels,
            &geom,
        );
        let shape = [batch, out_channels, geom.out_h, geom.out_w];
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        };
        Ok(self.derived(&shape, data, op, &[input, kernel, bias]))
    }

    /// Max pooling over `k×k` windows of `input (b, c, h, w)`, no padding.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("maxpool2d expects rank 4, got {s:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(Error::shape("maxpool2d kernel and stride must be positive"));
        }
        if k > s[2] || k > s[3] {
            return Err(Error::shape(format!(
                "maxpool2d window {k} larger than input {}x{}",
                s[2], s[3]
            )));
        }
        let out_h = (s[2] - k) / stride + 1;
        let out_w = (s[3] - k) / stride + 1;
        let (data, argmax) =
            kernels::maxpool_forward(self.data(input), s[0] * s[1], s[2], s[3], k, stride, out_h, out_w);
        Ok(self.derived(
            &[s[0], s[1], out_h, out_w],
            data,
            Op::MaxPool { input, argmax },
            &[input],
        ))
    }

    /// Affine map `input (b, n) · weightᵀ (n, m) + bias (m)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != is[1] || bs[0] != ws[0] {
            return Err(Error::shape(format!(
                "dense: input {is:?}, weight {ws:?}, bias {bs:?} are incompatible"
            )));
        }
        let (batch, n, m) = (is[0], is[1], ws[0]);
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend_from_slice(self.data(bias));
        }
        kernels::gemm(batch, n, m, self.data(input), n, 1, self.data(weight), 1, n, 1.0, &mut out);
        Ok(self.derived(&[batch, m], out, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    /// Capsule squash along the last axis.
    pub fn squash(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let dim = *shape
            .last()
            .ok_or_else(|| Error::shape("squash needs at least one axis"))?;
        let data = kernels::squash_forward(self.data(a), dim.max(1));
        Ok(self.derived(&shape, data, Op::Squash(a), &[a]))
    }

    /// Euclidean norm along the last axis; the axis is removed.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (&dim, lead) = shape
            .split_last()
            .ok_or_else(|| Error::shape("norm needs at least one axis"))?;
        let data = self
            .data(a)
            .chunks(dim.max(1))
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(self.derived(lead, data, Op::Norm(a), &[a]))
    }

    /// Prediction vectors: `u (b, n, i)` and `w (n, d, o, i)` give
    /// `(b, n, d, o)` with `out[b,n,d] = w[n,d] · u[b,n]`.
    pub fn predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (us, ws) = (self.shape(u), self.shape(w));
        if us.len() != 3 || ws.len() != 4 || ws[0] != us[1] || ws[3] != us[2] {
            return Err(Error::shape(format!(
                "predict: capsules {us:?} incompatible with transforms {ws:?}"
            )));
        }
        let (batch, n, i_dim) = (us[0], us[1], us[2]);
        let (d, o_dim) = (ws[1], ws[2]);
        let (ud, wd) = (self.data(u), self.data(w));
        let mut out = vec![0.0; batch * n * d * o_dim];
        for b in 0..batch {
            for p in 0..n {
                let uv = &ud[(b * n + p) * i_dim..(b * n + p + 1) * i_dim];
                let wm = &wd[p * d * o_dim * i_dim..(p + 1) * d * o_dim * i_dim];
                let dst = &mut out[(b * n + p) * d * o_dim..(b * n + p + 1) * d * o_dim];
                for (row, o) in wm.chunks(i_dim).zip(dst.iter_mut()) {
                    *o = row.iter().zip(uv).map(|(a, b)| a * b).sum();
                }
            }
        }
        Ok(self.derived(&[batch, n, d, o_dim], out, Op::Predict { u, w }, &[u, w]))
    }

    /// `s[b,d] = Σ_n c[b,n,d] · uhat[b,n,d]` for `c (b, n, d)`,
    /// `uhat (b, n, d, o)`.
    pub fn weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let (cs, us) = (self.shape(c), self.shape(uhat));
        if cs.len() != 3 || us.len() != 4 || cs != &us[..3] {
            return Err(Error::shape(format!(
                "weighted_sum: couplings {cs:?} incompatible with predictions {us:?}"
            )));
        }
        let (batch, n, d, o_dim) = (us[0], us[1], us[2], us[3]);
        let (cd, ud) = (self.data(c), self.data(uhat));
        let mut out = vec![0.0; batch * d * o_dim];
        for b in 0..batch {
            for p in 0..n {
                for j in 0..d {
                    let coef = cd[(b * n + p) * d + j];
                    let src = &ud[((b * n + p) * d + j) * o_dim..((b * n + p) * d + j + 1) * o_dim];
                    let dst = &mut out[(b * d + j) * o_dim..(b * d + j + 1) * o_dim];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += coef * s;
                    }
                }
            }
        }
        Ok(self.derived(&[batch, d, o_dim], out, Op::WeightedSum { c, uhat }, &[c, uhat]))
    }

    /// Dot-product agreement `a[b,n,d] = uhat[b,n,d] · v[b,d]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let (us, vs) = (self.shape(uhat), self.shape(v));
        if us.len() != 4 || vs.len() != 3 || vs[0] != us[0] || vs[1] != us[2] || vs[2] != us[3] {
            return Err(Error::shape(format!(
                "agreement: predictions {us:?} incompatible with outputs {vs:?}"
            )));
        }
        let (batch, n, d, o_dim) = (us[0], us[1], us[2], us[3]);
        let (ud, vd) = (self.data(uhat), self.data(v));
        let mut out = Vec::with_capacity(batch * n * d);
        for b in 0..batch {
            for p in 0..n {
                for j in 0..d {
                    let x = &ud[((b * n + p) * d + j) * o_dim..((b * n + p) * d + j + 1) * o_dim];
                    let y = &vd[(b * d + j) * o_dim..(b * d + j + 1) * o_dim];
                    out.push(x.iter().zip(y).map(|(a, b)| a * b).sum());
                }
            }
        }
        Ok(self.derived(&[batch, n, d], out, Op::Agreement { uhat, v }, &[uhat, v]))
    }

    /// Turns equally shaped feature maps `(b, c, h, w)` into capsule
    /// vectors `(b, maps·h·w, c)`: the channel vector at each spatial cell
    /// becomes one capsule, ordered map-major then row-major.
    pub fn interleave_maps(&mut self, maps: &[Var]) -> Result<Var> {
        let first = *maps
            .first()
            .ok_or_else(|| Error::shape("interleave_maps needs at least one map"))?;
        let s = self.shape(first).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("feature maps must be rank 4, got {s:?}")));
        }
        if let Some(bad) = maps.iter().find(|&&m| self.shape(m) != s.as_slice()) {
            return Err(Error::shape(format!(
                "feature map shapes differ: {s:?} vs {:?}",
                self.shape(*bad)
            )));
        }
        let (batch, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let units = maps.len() * hw;
        let mut out = vec![0.0; batch * units * ch];
        for (p, &m) in maps.iter().enumerate() {
            let src = self.data(m);
            for b in 0..batch {
                for c in 0..ch {
                    for pos in 0..hw {
                        out[(b * units + p * hw + pos) * ch + c] = src[(b * ch + c) * hw + pos];
                    }
                }
            }
        }
        Ok(self.derived(&[batch, units, ch], out, Op::Interleave(maps.to_vec()), maps))
    }

    /// Populates gradients of the scalar `loss` w.r.t. every node that
    /// depends on a [`param`](Self::param) leaf. A graph supports one
    /// backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this graph"));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.index as usize] = Some(vec![1.0]);
        let fault_gain = |rule: FaultyRule, fault: Option<FaultyRule>| {
            if fault == Some(rule) {
                1.5
            } else {
                1.0
            }
        };

        for idx in (0..=loss.index as usize).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(up) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contributions: Vec<(Var, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    contributions.push((*a, up.clone()));
                    contributions.push((*b, up.clone()));
                }
                Op::Sub(a, b) => {
                    contributions.push((*a, up.clone()));
                    contributions.push((*b, up.iter().map(|g| -g).collect()));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.data(*a), self.data(*b));
                    if self.needs(*a) {
                        contributions.push((*a, up.iter().zip(y).map(|(g, y)| g * y).collect()));
                    }
                    if self.needs(*b) {
                        contributions.push((*b, up.iter().zip(x).map(|(g, x)| g * x).collect()));
                    }
                }
                Op::Scale(a, f) => contributions.push((*a, up.iter().map(|g| g * f).collect())),
                Op::AddScalar(a) | Op::Reshape(a) => contributions.push((*a, up.clone())),
                Op::Relu(a) => {
                    let x = self.data(*a);
                    let dx = up
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    contributions.push((*a, dx));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    contributions.push((*a, up.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
                }
                Op::Square(a) => {
                    let x = self.data(*a);
                    contributions.push((*a, up.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect()));
                }
                Op::SumAll(a) => {
                    let n = self.node(*a).value.len();
                    contributions.push((*a, vec![up[0]; n]));
                }
                Op::Softmax {
                    input,
                    outer,
                    axis,
                    inner,
                } => {
                    let mut dx = kernels::softmax_backward(node.value.data(), &up, *outer, *axis, *inner);
                    let gain = fault_gain(FaultyRule::Softmax, self.fault);
                    dx.iter_mut().for_each(|g| *g *= gain);
                    contributions.push((*input, dx));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let out_channels = self.shape(*kernel)[0];
                    let batch = self.shape(*input)[0];
                    let (dx, dk, db) = kernels::conv2d_backward(
                        self.data(*input),
                        self.data(*kernel),
                        &up,
                        batch,
                        out_channels,
                        geom,
                        [self.needs(*input), self.needs(*kernel), self.needs(*bias)],
                    );
                    let gain = fault_gain(FaultyRule::Conv2d, self.fault);
                    if let Some(mut dk) = dk {
                        dk.iter_mut().for_each(|g| *g *= gain);
                        contributions.push((*kernel, dk));
                    }
                    contributions.extend(dx.map(|g| (*input, g)));
                    contributions.extend(db.map(|g| (*bias, g)));
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![0.0; self.node(*input).value.len()];
                    for (g, &src) in up.iter().zip(argmax) {
                        dx[src] += g;
                    }
                    contributions.push((*input, dx));
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (batch, n) = (self.shape(*input)[0], self.shape(*input)[1]);
                    let m = self.shape(*weight)[0];
                    if self.needs(*input) {
                        let mut dx = vec![0.0; batch * n];
                        kernels::gemm(batch, m, n, &up, m, 1, self.data(*weight), n, 1, 0.0, &mut dx);
                        contributions.push((*input, dx));
                    }
                    if self.needs(*weight) {
                        let mut dw = vec![0.0; m * n];
                        kernels::gemm(m, batch, n, &up, 1, m, self.data(*input), n, 1, 0.0, &mut dw);
                        contributions.push((*weight, dw));
                    }
                    if self.needs(*bias) {
                        let mut db = vec![0.0; m];
                        for row in up.chunks(m) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        contributions.push((*bias, db));
                    }
                }
                Op::Squash(a) => {
                    let dim = node.value.shape().last().copied().unwrap_or(1).max(1);
                    let mut dx = kernels::squash_backward(self.data(*a), &up, dim);
                    let gain = fault_gain(FaultyRule::Squash, self.fault);
                    dx.iter_mut().for_each(|g| *g *= gain);
                    contributions.push((*a, dx));
                }
                Op::Norm(a) => {
                    let x = self.data(*a);
                    let dim = self.shape(*a).last().copied().unwrap_or(1).max(1);
                    let mut dx = vec![0.0; x.len()];
                    for ((src, dst), (&g, &len)) in x
                        .chunks(dim)
                        .zip(dx.chunks_mut(dim))
                        .zip(up.iter().zip(node.value.data()))
                    {
                        if len > 0.0 {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = g * s / len;
                            }
                        }
                    }
                    contributions.push((*a, dx));
                }
                Op::Predict { u, w } => {
                    let (us, ws) = (self.shape(*u), self.shape(*w));
                    let (batch, n, i_dim) = (us[0], us[1], us[2]);
                    let (d, o_dim) = (ws[1], ws[2]);
                    let (ud, wd) = (self.data(*u), self.data(*w));
                    let block = d * o_dim;
                    if self.needs(*u) {
                        let mut du = vec![0.0; ud.len()];
                        for b in 0..batch {
                            for p in 0..n {
                                let g = &up[(b * n + p) * block..(b * n + p + 1) * block];
                                let wm = &wd[p * block * i_dim..(p + 1) * block * i_dim];
                                let dst = &mut du[(b * n + p) * i_dim..(b * n + p + 1) * i_dim];
                                for (row, gv) in wm.chunks(i_dim).zip(g) {
                                    dst.iter_mut().zip(row).for_each(|(d, w)| *d += gv * w);
                                }
                            }
                        }
                        contributions.push((*u, du));
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; wd.len()];
                        for b in 0..batch {
                            for p in 0..n {
                                let g = &up[(b * n + p) * block..(b * n + p + 1) * block];
                                let uv = &ud[(b * n + p) * i_dim..(b * n + p + 1) * i_dim];
                                let dst = &mut dw[p * block * i_dim..(p + 1) * block * i_dim];
                                for (row, gv) in dst.chunks_mut(i_dim).zip(g) {
                                    row.iter_mut().zip(uv).for_each(|(d, u)| *d += gv * u);
                                }
                            }
                        }
                        contributions.push((*w, dw));
                    }
                }
                Op::WeightedSum { c, uhat } => {
                    let us = self.shape(*uhat);
                    let (batch, n, d, o_dim) = (us[0], us[1], us[2], us[3]);
                    let (cd, ud) = (self.data(*c), self.data(*uhat));
                    let mut dc = self.needs(*c).then(|| vec![0.0; cd.len()]);
                    let mut du = self.needs(*uhat).then(|| vec![0.0; ud.len()]);
                    for b in 0..batch {
                        for p in 0..n {
                            for j in 0..d {
                                let ci = (b * n + p) * d + j;
                                let g = &up[(b * d + j) * o_dim..(b * d + j + 1) * o_dim];
                                let range = ci * o_dim..(ci + 1) * o_dim;
                                if let Some(dc) = dc.as_mut() {
                                    dc[ci] = g.iter().zip(&ud[range.clone()]).map(|(g, u)| g * u).sum();
                                }
                                if let Some(du) = du.as_mut() {
                                    du[range].iter_mut().zip(g).for_each(|(d, g)| *d = cd[ci] * g);
                                }
                            }
                        }
                    }
                    contributions.extend(dc.map(|g| (*c, g)));
                    contributions.extend(du.map(|g| (*uhat, g)));
                }
                Op::Agreement { uhat, v } => {
                    let us = self.shape(*uhat);
                    let (batch, n, d, o_dim) = (us[0], us[1], us[2], us[3]);
                    let (ud, vd) = (self.data(*uhat), self.data(*v));
                    let mut du = self.needs(*uhat).then(|| vec![0.0; ud.len()]);
                    let mut dv = self.needs(*v).then(|| vec![0.0; vd.len()]);
                    for b in 0..batch {
                        for p in 0..n {
                            for j in 0..d {
                                let g = up[(b * n + p) * d + j];
                                let ur = ((b * n + p) * d + j) * o_dim..((b * n + p) * d + j + 1) * o_dim;
                                let vr = (b * d + j) * o_dim..(b * d + j + 1) * o_dim;
                                if let Some(du) = du.as_mut() {
                                    du[ur.clone()].iter_mut().zip(&vd[vr.clone()]).for_each(|(d, v)| *d = g * v);
                                }
                                if let Some(dv) = dv.as_mut() {
                                    dv[vr].iter_mut().zip(&ud[ur]).for_each(|(d, u)| *d += g * u);
                                }
                            }
                        }
                    }
                    contributions.extend(du.map(|g| (*uhat, g)));
                    contributions.extend(dv.map(|g| (*v, g)));
                }
                Op::Interleave(maps) => {
                    let s = self.shape(maps[0]);
                    let (batch, ch, hw) = (s[0], s[1], s[2] * s[3]);
                    let units = maps.len() * hw;
                    for (p, &m) in maps.iter().enumerate() {
                        if !self.needs(m) {
                            continue;
                        }
                        let mut dm = vec![0.0; batch * ch * hw];
                        for b in 0..batch {
                            for c in 0..ch {
                                for pos in 0..hw {
                                    dm[(b * ch + c) * hw + pos] = up[(b * units + p * hw + pos) * ch + c];
                                }
                            }
                        }
                        contributions.push((m, dm));
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                self.grads[idx] = Some(up);
            }
            for (parent, g) in contributions {
                if !self.nodes[parent.index as usize].requires_grad {
                    continue;
                }
                match &mut self.grads[parent.index as usize] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
