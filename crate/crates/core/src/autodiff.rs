//! Arena-backed computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node whose parents have strictly smaller ids, so
//! creation order is a topological order and `backward` is one reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Result, StcrError};
use crate::tensor::{check_same_shape, strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Relu,
    Add,
    Sub,
    Mul,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Max,
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec {
            stride: [1; 3],
            padding: [0; 3],
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        spec: Conv3dSpec,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Reduce {
        kind: ReduceOp,
        input: NodeId,
        // output flat index for each input element
        route: Vec<usize>,
        // for max: input flat index selected for each output element
        argmax: Vec<usize>,
        count: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SoftmaxKl {
        p: NodeId,
        q: NodeId,
    },
    Gather {
        input: NodeId,
        map: Vec<usize>,
    },
    Reshape(NodeId),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reduce { kind, .. } => match kind {
                ReduceOp::Max => "reduce_max",
                ReduceOp::Mean => "reduce_mean",
                ReduceOp::Sum => "reduce_sum",
            },
            Op::Linear { .. } => "linear",
            Op::SoftmaxKl { .. } => "softmax_kl",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Relu(a) | Op::Scale(a, _) | Op::Reshape(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Reduce { input, .. } | Op::Gather { input, .. } => vec![*input],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::SoftmaxKl { p, q } => vec![*p, *q],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of every requires-grad leaf, keyed by node id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> NodeId {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        spec: Conv3dSpec,
    ) -> Result<NodeId> {
        let out = conv3d_forward(self.value(input), self.value(kernel), self.value(bias), spec)?;
        Ok(self.push_op(
            out,
            Op::Conv3d {
                input,
                kernel,
                bias,
                spec,
            },
        ))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, args: &[NodeId]) -> Result<NodeId> {
        let arity = match op {
            ElementwiseOp::Relu | ElementwiseOp::Scale(_) => 1,
            _ => 2,
        };
        if args.len() != arity {
            return Err(StcrError::Argument(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match op {
            ElementwiseOp::Relu => Ok(self.relu(args[0])),
            ElementwiseOp::Scale(s) => Ok(self.scale(args[0], s)),
            ElementwiseOp::Add => self.add(args[0], args[1]),
            ElementwiseOp::Sub => self.sub(args[0], args[1]),
            ElementwiseOp::Mul => self.mul(args[0], args[1]),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_op(out, Op::Relu(x))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.value(x).map(|v| v * s);
        self.push_op(out, Op::Scale(x, s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    fn zip(&self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Reduces over `axes`; the reduced axes are removed (a full reduction yields shape `[1]`).
    pub fn reduce(&mut self, kind: ReduceOp, input: NodeId, axes: &[usize]) -> Result<NodeId> {
        if axes.is_empty() {
            return Err(StcrError::Argument("reduce needs at least one axis".into()));
        }
        let shape = self.shape(input).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(StcrError::Argument(format!(
                "axis {bad} out of range for rank {}",
                shape.len()
            )));
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let mut out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_strides = strides_of(&out_shape);
        let in_strides = strides_of(&shape);
        let count: usize = axes.iter().map(|&a| shape[a]).product();

        let x = self.value(input).data();
        let mut route = Vec::with_capacity(x.len());
        for flat in 0..x.len() {
            let mut o = 0;
            if !kept.is_empty() {
                for (k, &axis) in kept.iter().enumerate() {
                    let coord = (flat / in_strides[axis]) % shape[axis];
                    o += coord * out_strides[k];
                }
            }
            route.push(o);
        }

        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        let mut argmax = Vec::new();
        match kind {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (flat, &o) in route.iter().enumerate() {
                    out[o] += x[flat];
                }
                if kind == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v /= count as f64);
                }
            }
            ReduceOp::Max => {
                argmax = vec![usize::MAX; n_out];
                for (flat, &o) in route.iter().enumerate() {
                    // strict comparison keeps the first maximum in scan order
                    if argmax[o] == usize::MAX || x[flat] > out[o] {
                        out[o] = x[flat];
                        argmax[o] = flat;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(
            value,
            Op::Reduce {
                kind,
                input,
                route,
                argmax,
                count,
            },
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceOp::Sum, x, &axes)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceOp::Mean, x, &axes)
    }

    /// Affine map `x W^T + b` along the last axis.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if w.rank() != 2 {
            return Err(StcrError::dim("weight rank", format!("expected 2, got {}", w.rank())));
        }
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        let last = *x.shape().last().expect("rank >= 1");
        if last != d_in {
            return Err(StcrError::dim(
                "D_in",
                format!("input last axis {last} does not match weight input width {d_in}"),
            ));
        }
        if b.shape() != [d_out] {
            return Err(StcrError::dim(
                "D_out",
                format!("bias shape {:?} does not match weight output width {d_out}", b.shape()),
            ));
        }
        let rows = x.numel() / d_in;
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            let xr = &xd[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                let wr = &wd[o * d_in..(o + 1) * d_in];
                out[r * d_out + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// `KL(softmax(p) || softmax(q))` as a one-element node.
    pub fn softmax_kl(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (vp, vq) = (self.value(p), self.value(q));
        check_same_shape(vp, vq, "softmax_kl")?;
        if !vp.is_finite() || !vq.is_finite() {
            return Err(StcrError::Numeric("softmax_kl received non-finite logits".into()));
        }
        let kl = SoftmaxKl::new(vp.data(), vq.data()).kl;
        Ok(self.push_op(Tensor::scalar(kl), Op::SoftmaxKl { p, q }))
    }

    /// `out[i] = input[map[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, input: NodeId, map: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        if let Some(&bad) = map.iter().find(|&&i| i >= x.numel()) {
            return Err(StcrError::Argument(format!(
                "gather index {bad} out of range for {} elements",
                x.numel()
            )));
        }
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push_op(value, Op::Gather { input, map }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(input)))
    }

    /// Reverse sweep from a one-element `loss`. Every requires-grad leaf gets an
    /// entry, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(StcrError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(NodeId(idx), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for i in 0..acc.len() {
                        if xv[i] > 0.0 {
                            acc[i] += gd[i];
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |acc| {
                    acc.iter_mut().zip(gd).for_each(|(a, g)| *a += s * g);
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| acc.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
                self.accumulate(grads, *b, |acc| acc.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| acc.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
                self.accumulate(grads, *b, |acc| acc.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gd[i] * va[i];
                    }
                });
            }
            Op::Reduce {
                kind,
                input,
                route,
                argmax,
                count,
            } => match kind {
                ReduceOp::Sum => self.accumulate(grads, *input, |acc| {
                    for (i, &o) in route.iter().enumerate() {
                        acc[i] += gd[o];
                    }
                }),
                ReduceOp::Mean => {
                    let inv = 1.0 / *count as f64;
                    self.accumulate(grads, *input, |acc| {
                        for (i, &o) in route.iter().enumerate() {
                            acc[i] += gd[o] * inv;
                        }
                    })
                }
                ReduceOp::Max => self.accumulate(grads, *input, |acc| {
                    for (o, &i) in argmax.iter().enumerate() {
                        acc[i] += gd[o];
                    }
                }),
            },
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                let rows = x.numel() / d_in;
                let (xd, wd) = (x.data(), w.data());
                self.accumulate(grads, *input, |acc| {
                    for r in 0..rows {
                        for o in 0..d_out {
                            let go = gd[r * d_out + o];
                            for i in 0..d_in {
                                acc[r * d_in + i] += go * wd[o * d_in + i];
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |acc| {
                    for r in 0..rows {
                        for o in 0..d_out {
                            let go = gd[r * d_out + o];
                            for i in 0..d_in {
                                acc[o * d_in + i] += go * xd[r * d_in + i];
                            }
                        }
                    }
                });
                self.accumulate(grads, *bias, |acc| {
                    for r in 0..rows {
                        for o in 0..d_out {
                            acc[o] += gd[r * d_out + o];
                        }
                    }
                });
            }
            Op::SoftmaxKl { p, q } => {
                let kl = SoftmaxKl::new(self.value(*p).data(), self.value(*q).data());
                let go = gd[0];
                // d/dp_j = P_j (lp_j - lq_j - KL), which equals P_j u_j
                self.accumulate(grads, *p, |acc| {
                    for j in 0..acc.len() {
                        acc[j] += go * kl.p[j] * kl.u[j];
                    }
                });
                self.accumulate(grads, *q, |acc| {
                    for j in 0..acc.len() {
                        acc[j] += go * (kl.q[j] - kl.p[j]);
                    }
                });
            }
            Op::Gather { input, map } => self.accumulate(grads, *input, |acc| {
                for (o, &i) in map.iter().enumerate() {
                    acc[i] += gd[o];
                }
            }),
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |acc| acc.iter_mut().zip(gd).for_each(|(a, g)| *a += g));
            }
            Op::Conv3d {
                input,
                kernel,
                bias,
                spec,
            } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                let geo = ConvGeometry::new(x.shape(), k.shape(), *spec);
                if self.requires_grad(*input) {
                    let kd = k.data();
                    self.accumulate(grads, *input, |acc| geo.scatter_input(gd, kd, acc));
                }
                if self.requires_grad(*kernel) {
                    let xd = x.data();
                    self.accumulate(grads, *kernel, |acc| geo.scatter_kernel(gd, xd, acc));
                }
                self.accumulate(grads, *bias, |acc| {
                    let per = geo.out_spatial();
                    for (o, a) in acc.iter_mut().enumerate() {
                        *a += gd[o * per..(o + 1) * per].iter().sum::<f64>();
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        let acc = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
        f(acc.data_mut());
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `KL(softmax(x) || softmax(y))` evaluated from the logit differences
/// `d = x - y`, so its rounding error scales with the spread of `d` rather
/// than with the log-probabilities.
///
/// With `c = sum_j P_j d_j` and `u_j = d_j - c`:
/// `KL = -ln(sum_j Q_j exp(u_j))`, and `lp_j - lq_j - KL = u_j`.
struct SoftmaxKl {
    p: Vec<f64>,
    q: Vec<f64>,
    u: Vec<f64>,
    kl: f64,
}

impl SoftmaxKl {
    fn new(x: &[f64], y: &[f64]) -> Self {
        let p = softmax(x);
        let q = softmax(y);
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        // measured from d[0] so a constant shift gives u == 0 exactly
        let c = d[0] + p.iter().zip(&d).map(|(pj, dj)| pj * (dj - d[0])).sum::<f64>();
        let u: Vec<f64> = d.iter().map(|dj| dj - c).collect();
        let s: f64 = q.iter().zip(&u).map(|(qj, uj)| qj * uj.exp_m1()).sum();
        // sum_j P_j u_j is zero in exact arithmetic and cancels the rounding of c
        let r: f64 = p.iter().zip(&u).map(|(pj, uj)| pj * uj).sum();
        let kl = (r - s.ln_1p()).max(0.0);
        SoftmaxKl { p, q, u, kl }
    }
}

/// Index arithmetic shared by the conv3d forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    spec: Conv3dSpec,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], spec: Conv3dSpec) -> Self {
        let input = [x[1], x[2], x[3]];
        let kernel = [k[2], k[3], k[4]];
        let output = std::array::from_fn(|a| {
            (input[a] + 2 * spec.padding[a] - kernel[a]) / spec.stride[a] + 1
        });
        ConvGeometry {
            c_in: x[0],
            c_out: k[0],
            input,
            kernel,
            output,
            spec,
        }
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    /// Input offset of every (output position, patch element) pair, row-major
    /// over `[out_spatial, c_in * kT * kH * kW]`; `PAD` marks padding.
    fn patch_index(&self) -> Vec<usize> {
        let [it, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.spec.padding;
        let in_sp = self.in_spatial();
        let mut idx = Vec::with_capacity(self.out_spatial() * self.patch_len());
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    for i in 0..self.c_in {
                        for a in 0..kt {
                            let ti = (t * st + a).checked_sub(pt).filter(|&v| v < it);
                            for b in 0..kh {
                                let hi = (h * sh + b).checked_sub(ph).filter(|&v| v < ih);
                                for c in 0..kw {
                                    let wi = (w * sw + c).checked_sub(pw).filter(|&v| v < iw);
                                    idx.push(match (ti, hi, wi) {
                                        (Some(ti), Some(hi), Some(wi)) => i * in_sp + (ti * ih + hi) * iw + wi,
                                        _ => PAD,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    /// Gathers input patches into a `[out_spatial, patch_len]` matrix.
    fn im2col(&self, x: &[f64], idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&j| if j == PAD { 0.0 } else { x[j] }).collect()
    }

    fn scatter_input(&self, g: &[f64], k: &[f64], acc: &mut [f64]) {
        let (np, len) = (self.out_spatial(), self.patch_len());
        let idx = self.patch_index();
        let mut dcol = vec![0.0; len];
        for p in 0..np {
            dcol.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..self.c_out {
                let gv = g[o * np + p];
                if gv != 0.0 {
                    dcol.iter_mut().zip(&k[o * len..(o + 1) * len]).for_each(|(d, kv)| *d += gv * kv);
                }
            }
            for (&j, d) in idx[p * len..(p + 1) * len].iter().zip(&dcol) {
                if j != PAD {
                    acc[j] += d;
                }
            }
        }
    }

    fn scatter_kernel(&self, g: &[f64], x: &[f64], acc: &mut [f64]) {
        let (np, len) = (self.out_spatial(), self.patch_len());
        let col = self.im2col(x, &self.patch_index());
        for o in 0..self.c_out {
            let row = &mut acc[o * len..(o + 1) * len];
            for p in 0..np {
                let gv = g[o * np + p];
                if gv != 0.0 {
                    row.iter_mut().zip(&col[p * len..(p + 1) * len]).for_each(|(a, xv)| *a += gv * xv);
                }
            }
        }
    }
}

const PAD: usize = usize::MAX;

/// Output extent along one axis, or `None` when the kernel does not fit.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride >= 1 && kernel >= 1 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

fn conv3d_forward(x: &Tensor, k: &Tensor, b: &Tensor, spec: Conv3dSpec) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(StcrError::dim("input rank", format!("expected C×T×H×W, got {:?}", x.shape())));
    }
    if k.rank() != 5 {
        return Err(StcrError::dim(
            "kernel rank",
            format!("expected C_out×C_in×kT×kH×kW, got {:?}", k.shape()),
        ));
    }
    if k.shape()[1] != x.shape()[0] {
        return Err(StcrError::dim(
            "C_in",
            format!("kernel expects {} input channels, input has {}", k.shape()[1], x.shape()[0]),
        ));
    }
    if b.shape() != [k.shape()[0]] {
        return Err(StcrError::dim(
            "C_out",
            format!("bias shape {:?} does not match {} output channels", b.shape(), k.shape()[0]),
        ));
    }
    for (a, name) in ["T", "H", "W"].iter().enumerate() {
        if spec.stride[a] == 0 {
            return Err(StcrError::dim(*name, "stride must be at least 1"));
        }
        if conv_output_len(x.shape()[a + 1], k.shape()[a + 2], spec.stride[a], spec.padding[a]).is_none() {
            return Err(StcrError::dim(
                *name,
                format!(
                    "kernel extent {} exceeds padded input extent {}",
                    k.shape()[a + 2],
                    x.shape()[a + 1] + 2 * spec.padding[a]
                ),
            ));
        }
    }
    let geo = ConvGeometry::new(x.shape(), k.shape(), spec);
    let per = geo.out_spatial();
    let mut out = vec![0.0; geo.c_out * per];
    for (o, &bo) in b.data().iter().enumerate() {
        out[o * per..(o + 1) * per].iter_mut().for_each(|v| *v = bo);
    }
    let (xd, kd) = (x.data(), k.data());
    let len = geo.patch_len();
    let col = geo.im2col(xd, &geo.patch_index());
    for o in 0..geo.c_out {
        let krow = &kd[o * len..(o + 1) * len];
        for (p, y) in out[o * per..(o + 1) * per].iter_mut().enumerate() {
            *y += krow.iter().zip(&col[p * len..(p + 1) * len]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let [t, h, w] = geo.output;
    Tensor::new(vec![geo.c_out, t, h, w], out)
}
