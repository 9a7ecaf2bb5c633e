use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;

use super::kernels::{self, ConvDims, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    AddBias { x: Var, b: Var },
    /// `[N, C, ...] -> [C]`
    SumAxis1(Var),
    /// `[C] -> [N, C, ...]`
    BroadcastAxis1(Var),
    SumAll(Var),
    Expand(Var),
    /// `[..., L] -> [..., 1]`
    SumLast(Var),
    /// `[..., 1] -> [..., L]`
    ExpandLast(Var),
    LogSoftmax(Var),
    Gather { x: Var, idx: Arc<Vec<usize>> },
    ScatterAdd { x: Var, idx: Arc<Vec<usize>> },
    Conv { x: Var, w: Var, geom: ConvGeom },
    /// Gradient of `Conv` w.r.t. its input; also serves as transposed conv.
    ConvBackInput { g: Var, w: Var, geom: ConvGeom },
    /// Gradient of `Conv` w.r.t. its weights.
    ConvBackWeight { x: Var, g: Var, geom: ConvGeom },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Scale(a, _) | Exp(a) | Relu(a) | Reshape(a) | SumAxis1(a) | BroadcastAxis1(a)
            | SumAll(a) | Expand(a) | SumLast(a) | ExpandLast(a) | LogSoftmax(a) => vec![*a],
            AddBias { x, b } => vec![*x, *b],
            Gather { x, .. } | ScatterAdd { x, .. } => vec![*x],
            Conv { x, w, .. } => vec![*x, *w],
            ConvBackInput { g, w, .. } => vec![*g, *w],
            ConvBackWeight { x, g, .. } => vec![*x, *g],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations. Inputs always precede outputs, so
/// insertion order is a topological order.
///
/// A graph is single-writer; build one per step and drop it afterwards.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by node id.
#[derive(Clone, Debug, Default)]
pub struct GradMap(BTreeMap<usize, Tensor>);

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }
}

/// Gradients of the scalar `loss` for every leaf that requires grad.
pub fn backward(graph: &mut Graph, loss: Var) -> Result<GradMap> {
    let leaves: Vec<Var> = (0..=loss.0)
        .filter(|&i| matches!(graph.nodes[i].op, Op::Leaf) && graph.nodes[i].requires_grad)
        .map(Var)
        .collect();
    let grads = graph.grad(loss, &leaves, false)?;
    let mut map = BTreeMap::new();
    for (leaf, g) in leaves.iter().zip(grads) {
        let t = match g {
            Some(g) => graph.value(g).clone(),
            None => Tensor::zeros(graph.value(*leaf).shape()),
        };
        map.insert(leaf.0, t);
    }
    Ok(GradMap(map))
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad =
            self.recording && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so divergence stays visible downstream.
        let v = self.value(a).map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `ta`/`tb` transpose the stored operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, k, n) = kernels::matmul_dims(self.shape(a), self.shape(b), ta, tb)?;
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, ta, tb);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul { a, b, ta, tb }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Adds a per-channel bias `b[C]` along axis 1 of `x[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Dimension(format!(
                "bias of shape {bs:?} does not match axis 1 of {xs:?}"
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv[(i / inner) % c];
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::AddBias { x, b }))
    }

    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Dimension(format!("sum_axis1 on {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let c = s[1];
        let mut out = vec![0.0; c];
        for (i, v) in self.value(a).data().iter().enumerate() {
            out[(i / inner) % c] += v;
        }
        Ok(self.push(Tensor::vector(out), Op::SumAxis1(a)))
    }

    pub fn broadcast_axis1(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if shape.len() < 2 || s.len() != 1 || s[0] != shape[1] {
            return Err(Error::Dimension(format!(
                "cannot broadcast {s:?} along axis 1 of {shape:?}"
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let c = shape[1];
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        let out = (0..n).map(|i| src[(i / inner) % c]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastAxis1(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).item()?;
        Ok(self.push(Tensor::full(shape, v), Op::Expand(a)))
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let Some(&l) = s.last() else {
            return Err(Error::Dimension("sum_last on a scalar".into()));
        };
        let out: Vec<f64> = self.value(a).data().chunks(l).map(|r| r.iter().sum()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumLast(a)))
    }

    pub fn expand_last(&mut self, a: Var, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.last() != Some(&1) || len == 0 {
            return Err(Error::Dimension(format!("expand_last on {s:?}")));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, len))
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::ExpandLast(a)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    // ---- indexing ----------------------------------------------------------

    /// `out[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape(format!(
                "gather of {} indices into shape {shape:?}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Index(format!("gather index {bad} >= {}", src.len())));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather { x, idx }))
    }

    /// Adjoint of [`Graph::gather`]: `out.flat[idx[i]] += x[i]`.
    pub fn scatter_add(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if self.value(x).numel() != idx.len() {
            return Err(Error::Shape(format!(
                "scatter of {} values with {} indices",
                self.value(x).numel(),
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("scatter index {bad} >= {n}")));
        }
        let mut out = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(self.value(x).data()) {
            out[i] += v;
        }
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::ScatterAdd { x, idx }))
    }

    // ---- convolution and pooling -------------------------------------------

    fn conv_dims(
        &self,
        x_shape: &[usize],
        w_shape: &[usize],
        geom: ConvGeom,
    ) -> Result<ConvDims> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects [N,C,H,W] and [F,C,kh,kw], got {x_shape:?} and {w_shape:?}"
            )));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {x_shape:?}, kernel {w_shape:?}"
            )));
        }
        Ok(ConvDims {
            n: x_shape[0],
            c: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            f: w_shape[0],
            kh: w_shape[2],
            kw: w_shape[3],
            oh: kernels::conv_out_extent(x_shape[2], w_shape[2], geom)?,
            ow: kernels::conv_out_extent(x_shape[3], w_shape[3], geom)?,
            geom,
        })
    }

    /// 2-D cross-correlation of `x[N,C,H,W]` with `w[F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom { stride, padding };
        let d = self.conv_dims(self.shape(x), self.shape(w), geom)?;
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &d);
        Ok(self.push(
            Tensor::from_parts(vec![d.n, d.f, d.oh, d.ow], out),
            Op::Conv { x, w, geom },
        ))
    }

    /// Transposed convolution: maps `g[N,F,oh,ow]` back to `[N,C,H,W]` where
    /// `(H, W) = out_hw` is the input extent of the matching forward conv.
    pub fn conv2d_transpose(
        &mut self,
        g: Var,
        w: Var,
        stride: usize,
        padding: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeom { stride, padding };
        let gs = self.shape(g).to_vec();
        let ws = self.shape(w).to_vec();
        if gs.len() != 4 || ws.len() != 4 || gs[1] != ws[0] {
            return Err(Error::Dimension(format!(
                "conv2d_transpose of {gs:?} with kernel {ws:?}"
            )));
        }
        let d = self.conv_dims(&[gs[0], ws[1], out_hw.0, out_hw.1], &ws, geom)?;
        if d.oh != gs[2] || d.ow != gs[3] {
            return Err(Error::Shape(format!(
                "conv2d_transpose: {gs:?} cannot come from a {out_hw:?} input"
            )));
        }
        let out = kernels::conv2d_back_input(self.value(g).data(), self.value(w).data(), &d);
        Ok(self.push(
            Tensor::from_parts(vec![d.n, d.c, d.h, d.w], out),
            Op::ConvBackInput { g, w, geom },
        ))
    }

    /// Weight gradient of a conv: correlates `x[N,C,H,W]` with
    /// `g[N,F,oh,ow]` into `[F,C,kh,kw]`.
    pub fn conv2d_weight_grad(
        &mut self,
        x: Var,
        g: Var,
        stride: usize,
        padding: usize,
        kernel: (usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeom { stride, padding };
        let xs = self.shape(x).to_vec();
        let gs = self.shape(g).to_vec();
        if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] {
            return Err(Error::Dimension(format!(
                "conv2d_weight_grad of {xs:?} with {gs:?}"
            )));
        }
        let d = self.conv_dims(&xs, &[gs[1], xs[1], kernel.0, kernel.1], geom)?;
        if d.oh != gs[2] || d.ow != gs[3] {
            return Err(Error::Shape(format!(
                "conv2d_weight_grad: output grad {gs:?} does not match input {xs:?}"
            )));
        }
        let out = kernels::conv2d_back_weight(self.value(x).data(), self.value(g).data(), &d);
        Ok(self.push(
            Tensor::from_parts(vec![d.f, d.c, d.kh, d.kw], out),
            Op::ConvBackWeight { x, g, geom },
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (shape, _, idx) = kernels::maxpool2d(self.value(x).data(), self.shape(x), window, stride)?;
        self.gather(x, Arc::new(idx), &shape)
    }

    // ---- layers and losses -------------------------------------------------

    /// Inverted dropout. Identity when not training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = crate::rng::rng(seed);
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n = self.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    /// `x[N, in] · w[in, out] + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let Some(&l) = s.last() else {
            return Err(Error::Dimension("log_softmax on a scalar".into()));
        };
        let out = kernels::log_softmax_rows(self.value(a).data(), l);
        Ok(self.push(Tensor::from_parts(s, out), Op::LogSoftmax(a)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross entropy of logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let l = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
            return Err(Error::Index(format!("label {bad} not in [0, {l})")));
        }
        let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * l + y).collect();
        let lp = self.log_softmax(logits)?;
        let picked = self.gather(lp, Arc::new(idx), &[labels.len()])?;
        let total = self.sum_all(picked);
        Ok(self.scale(total, -1.0 / labels.len() as f64))
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ---- differentiation ---------------------------------------------------

    /// Gradients of the scalar `loss` with respect to `wrt`.
    ///
    /// Entries are `None` when `loss` does not depend on that variable or the
    /// variable does not require grad. With `create_graph` the backward pass
    /// is itself recorded, so the returned gradients can be differentiated
    /// again; otherwise the new nodes are constants.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut relevant = vec![false; n];
        for v in wrt {
            if v.0 < n && self.nodes[v.0].requires_grad {
                relevant[v.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.inputs().iter().any(|v| relevant[v.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if relevant[loss.0] {
            let prev = self.recording;
            self.recording = create_graph;
            let res = self.backprop(loss, &relevant, &mut grads);
            self.recording = prev;
            res?;
        }
        Ok(wrt
            .iter()
            .map(|v| if v.0 < n && relevant[v.0] { grads[v.0] } else { None })
            .collect())
    }

    fn backprop(&mut self, loss: Var, relevant: &[bool], grads: &mut [Option<Var>]) -> Result<()> {
        let seed = self.constant(Tensor::ones(self.shape(loss)));
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(Var(i), &op, g, relevant)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of one node, expressed as graph operations.
    fn vjp(&mut self, out: Var, op: &Op, g: Var, relevant: &[bool]) -> Result<Vec<(Var, Var)>> {
        let want = |v: &Var| relevant[v.0];
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    res.push((*a, g));
                }
                if want(b) {
                    res.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    res.push((*a, g));
                }
                if want(b) {
                    res.push((*b, self.scale(g, -1.0)));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    res.push((*a, self.mul(g, *b)?));
                }
                if want(b) {
                    res.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Scale(a, c) => res.push((*a, self.scale(g, *c))),
            Op::Exp(a) => res.push((*a, self.mul(g, out)?)),
            Op::Relu(a) => {
                let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                res.push((*a, self.mul(g, m)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b) = (*a, *b);
                if want(&a) {
                    let da = match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true)?,
                        (true, false) => self.matmul_t(b, g, false, true)?,
                        (false, true) => self.matmul_t(g, b, false, false)?,
                        (true, true) => self.matmul_t(b, g, true, true)?,
                    };
                    res.push((a, da));
                }
                if want(&b) {
                    let db = match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false)?,
                        (true, false) => self.matmul_t(a, g, false, false)?,
                        (false, true) => self.matmul_t(g, a, true, false)?,
                        (true, true) => self.matmul_t(g, a, true, true)?,
                    };
                    res.push((b, db));
                }
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                res.push((*a, self.reshape(g, &s)?));
            }
            Op::AddBias { x, b } => {
                if want(x) {
                    res.push((*x, g));
                }
                if want(b) {
                    res.push((*b, self.sum_axis1(g)?));
                }
            }
            Op::SumAxis1(a) => {
                let s = self.shape(*a).to_vec();
                res.push((*a, self.broadcast_axis1(g, &s)?));
            }
            Op::BroadcastAxis1(a) => res.push((*a, self.sum_axis1(g)?)),
            Op::SumAll(a) => {
                let s = self.shape(*a).to_vec();
                res.push((*a, self.expand(g, &s)?));
            }
            Op::Expand(a) => {
                let s = self.sum_all(g);
                let shape = self.shape(*a).to_vec();
                let s = if shape.is_empty() { s } else { self.reshape(s, &shape)? };
                res.push((*a, s));
            }
            Op::SumLast(a) => {
                let l = *self.shape(*a).last().unwrap();
                res.push((*a, self.expand_last(g, l)?));
            }
            Op::ExpandLast(a) => res.push((*a, self.sum_last(g)?)),
            Op::LogSoftmax(a) => {
                let l = *self.shape(*a).last().unwrap();
                let probs = self.exp(out);
                let row = self.sum_last(g)?;
                let row = self.expand_last(row, l)?;
                let t = self.mul(probs, row)?;
                res.push((*a, self.sub(g, t)?));
            }
            Op::Gather { x, idx } => {
                let s = self.shape(*x).to_vec();
                res.push((*x, self.scatter_add(g, idx.clone(), &s)?));
            }
            Op::ScatterAdd { x, idx } => {
                let s = self.shape(*x).to_vec();
                res.push((*x, self.gather(g, idx.clone(), &s)?));
            }
            Op::Conv { x, w, geom } => {
                let (x, w) = (*x, *w);
                if want(&x) {
                    let s = self.shape(x).to_vec();
                    res.push((x, self.conv2d_transpose(g, w, geom.stride, geom.padding, (s[2], s[3]))?));
                }
                if want(&w) {
                    let k = self.shape(w).to_vec();
                    res.push((w, self.conv2d_weight_grad(x, g, geom.stride, geom.padding, (k[2], k[3]))?));
                }
            }
            Op::ConvBackInput { g: gi, w, geom } => {
                let (gi, w) = (*gi, *w);
                if want(&gi) {
                    res.push((gi, self.conv2d(g, w, geom.stride, geom.padding)?));
                }
                if want(&w) {
                    let k = self.shape(w).to_vec();
                    res.push((w, self.conv2d_weight_grad(g, gi, geom.stride, geom.padding, (k[2], k[3]))?));
                }
            }
            Op::ConvBackWeight { x, g: gi, geom } => {
                let (x, gi) = (*x, *gi);
                if want(&x) {
                    let s = self.shape(x).to_vec();
                    res.push((x, self.conv2d_transpose(gi, g, geom.stride, geom.padding, (s[2], s[3]))?));
                }
                if want(&gi) {
                    res.push((gi, self.conv2d(x, g, geom.stride, geom.padding)?));
                }
            }
        }
        Ok(res)
    }
}
