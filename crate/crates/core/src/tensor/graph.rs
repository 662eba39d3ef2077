use super::kernels::{self, ConvGeometry};
use super::{numel, Tensor};
use crate::error::{bail_shape, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Powf(Var, f64),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Variance { input: Var, axes: Vec<usize> },
    Softmax(Var, usize),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    Resize(Var),
    AvgPool(Var, usize),
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Which side of zero every ReLU input lies on, in recording order.
    /// Two graphs of the same computation with equal patterns are on the same
    /// smooth piece of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                bits.extend(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0));
            }
        }
        bits
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary_forward(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary_forward(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary_forward(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary_forward(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Powf(a, p), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    // ── linear algebra and layout ────────────────────────────────────

    /// `[..., m, k] x [..., k, n]`; a rank-2 right operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_forward(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (shape, offs) = kernels::permute_offsets(src.shape(), perm)?;
        let data = offs.iter().map(|&o| src.data()[o]).collect();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            bail_shape!("transpose needs rank >= 2, got {:?}", self.shape(a));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail_shape!("concat of zero tensors");
        };
        let ref_shape = self.shape(first).to_vec();
        if axis >= ref_shape.len() {
            bail_shape!("concat axis {axis} out of range for {ref_shape:?}");
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == ref_shape.len()
                && s.iter().zip(&ref_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                bail_shape!("concat along axis {axis}: {s:?} incompatible with {ref_shape:?}");
            }
            total += s[axis];
        }
        let mut shape = ref_shape.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let shape = src.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            bail_shape!("slice [{start}, {}) on axis {axis} of {shape:?}", start + len);
        }
        let (outer, full, inner) = kernels::split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Slice { input: a, axis, start }, &[a]))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over `axes`, keeping reduced axes with size 1.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduce_mean(self.value(a), axes)?;
        Ok(self.push(out, Op::Mean(a), &[a]))
    }

    /// Population variance over `axes`, keeping reduced axes with size 1.
    pub fn variance(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let mean = self.reduce_mean(src, axes)?;
        let offs = kernels::broadcast_offsets(mean.shape(), src.shape());
        let count = (src.numel() / mean.numel()) as f64;
        let mut acc = vec![0.0; mean.numel()];
        for (x, &o) in src.data().iter().zip(&offs) {
            let d = x - mean.data()[o];
            acc[o] += d * d;
        }
        acc.iter_mut().for_each(|v| *v /= count);
        let out = Tensor::from_parts(mean.shape().to_vec(), acc);
        Ok(self.push(out, Op::Variance { input: a, axes: axes.to_vec() }, &[a]))
    }

    fn reduce_mean(&self, src: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let shape = kernels::reduced_shape(src.shape(), axes)?;
        let offs = kernels::broadcast_offsets(&shape, src.shape());
        let mut acc = vec![0.0; numel(&shape)];
        for (x, &o) in src.data().iter().zip(&offs) {
            acc[o] += x;
        }
        let count = (src.numel() / acc.len()) as f64;
        acc.iter_mut().for_each(|v| *v /= count);
        Ok(Tensor::from_parts(shape, acc))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.shape(a).len() {
            bail_shape!("softmax axis {axis} out of range for {:?}", self.shape(a));
        }
        let out = kernels::softmax_forward(self.value(a), axis);
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    // ── image ops ────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, &inputs))
    }

    /// Bilinear resize of `[B,C,H,W]` with half-pixel centres (align_corners = false).
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::resize_forward(self.value(a), out_h, out_w)?;
        Ok(self.push(out, Op::Resize(a), &[a]))
    }

    /// Non-overlapping average pooling with a square `k x k` window.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let out = kernels::avg_pool_forward(self.value(a), k)?;
        Ok(self.push(out, Op::AvgPool(a, k), &[a]))
    }

    /// Mean pixel cross-entropy. `logits` is `[B, K, ...]`, `labels` holds one
    /// class per `(b, ...)` position in row-major order.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() < 2 {
            bail_shape!("cross entropy needs [B, K, ...] logits, got {:?}", x.shape());
        }
        let (b, k) = (x.shape()[0], x.shape()[1]);
        let inner = x.numel() / (b * k);
        if labels.len() != b * inner {
            bail_shape!("{} labels for logits {:?}", labels.len(), x.shape());
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!(
                "label {bad} at position {i} is outside 0..{k}"
            )));
        }
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..inner {
                let base = bi * k * inner + p;
                let mut max = f64::NEG_INFINITY;
                for c in 0..k {
                    max = max.max(x.data()[base + c * inner]);
                }
                let lse = max
                    + (0..k)
                        .map(|c| (x.data()[base + c * inner] - max).exp())
                        .sum::<f64>()
                        .ln();
                total += lse - x.data()[base + labels[bi * inner + p] * inner];
            }
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            &[logits],
        ))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Accumulates d(loss)/d(leaf) into every reachable leaf that requires
    /// gradients. Calling twice without [`Graph::zero_grad`] adds the
    /// gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::usage("backward on a variable from another graph"))?;
        if node.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if matches!(node.op, Op::Leaf) {
            return Err(Error::usage("backward on a leaf with no recorded operations"));
        }
        if !node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                let mut slot = self.leaf_grads[i].take().map(Tensor::into_data);
                accumulate(&mut slot, g);
                self.leaf_grads[i] = slot.map(|d| Tensor::from_parts(shape, d));
                continue;
            }
            for (input, gi) in self.input_grads(i, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` with respect to each of its inputs.
    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let unary = |a: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(a, (0..g.len()).map(|k| g[k] * f(k)).collect())]
        };
        let binary = |a: Var, b: Var, da: &dyn Fn(f64, f64) -> f64, db: &dyn Fn(f64, f64) -> f64| {
            let (ta, tb) = (val(a), val(b));
            let shape = out.shape();
            let oa = kernels::broadcast_offsets(ta.shape(), shape);
            let ob = kernels::broadcast_offsets(tb.shape(), shape);
            let mut res = Vec::new();
            for (v, t, f) in [(a, ta, da), (b, tb, db)] {
                if !self.needs(v) {
                    continue;
                }
                let full: Vec<f64> = (0..g.len())
                    .map(|k| g[k] * f(ta.data()[oa[k]], tb.data()[ob[k]]))
                    .collect();
                res.push((v, kernels::reduce_to(&full, shape, t.shape()).into_data()));
            }
            res
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => binary(*a, *b, &|_, _| 1.0, &|_, _| 1.0),
            Op::Sub(a, b) => binary(*a, *b, &|_, _| 1.0, &|_, _| -1.0),
            Op::Mul(a, b) => binary(*a, *b, &|_, y| y, &|x, _| x),
            Op::Div(a, b) => binary(*a, *b, &|_, y| 1.0 / y, &|x, y| -x / (y * y)),
            Op::Scale(a, f) => unary(*a, &|_| *f),
            Op::Offset(a) => vec![(*a, g.to_vec())],
            Op::Powf(a, p) => {
                let x = val(*a).data();
                unary(*a, &|k| p * x[k].powf(p - 1.0))
            }
            Op::Exp(a) => unary(*a, &|k| out.data()[k]),
            Op::Ln(a) => {
                let x = val(*a).data();
                unary(*a, &|k| 1.0 / x[k])
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                unary(*a, &|k| if x[k] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                unary(*a, &|k| kernels::gelu_grad(x[k]))
            }
            Op::Sigmoid(a) => unary(*a, &|k| out.data()[k] * (1.0 - out.data()[k])),
            Op::MatMul(a, b) => {
                let (ga, gb) =
                    kernels::matmul_backward(val(*a), val(*b), g, self.needs(*a), self.needs(*b));
                let mut res = Vec::new();
                if let Some(t) = ga {
                    res.push((*a, t.into_data()));
                }
                if let Some(t) = gb {
                    res.push((*b, t.into_data()));
                }
                res
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute(a, perm) => {
                let (_, offs) = kernels::permute_offsets(val(*a).shape(), perm)
                    .expect("validated in forward");
                let mut gi = vec![0.0; g.len()];
                for (k, &o) in offs.iter().enumerate() {
                    gi[o] = g[k];
                }
                vec![(*a, gi)]
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = kernels::split_axis(out.shape(), *axis);
                let mut res: Vec<(Var, Vec<f64>)> = parts
                    .iter()
                    .map(|&p| (p, Vec::with_capacity(val(p).numel())))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (p, buf) in res.iter_mut() {
                        let chunk = val(*p).shape()[*axis] * inner;
                        buf.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                res.into_iter().filter(|(p, _)| self.needs(*p)).collect()
            }
            Op::Slice { input, axis, start } => {
                let src_shape = val(*input).shape();
                let (outer, full, inner) = kernels::split_axis(src_shape, *axis);
                let len = out.shape()[*axis];
                let mut gi = vec![0.0; numel(src_shape)];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*input, gi)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Mean(input) => {
                let src = val(*input);
                let offs = kernels::broadcast_offsets(out.shape(), src.shape());
                let count = (src.numel() / out.numel()) as f64;
                vec![(*input, offs.iter().map(|&o| g[o] / count).collect())]
            }
            Op::Variance { input, axes } => {
                let src = val(*input);
                let mean = self.reduce_mean(src, axes).expect("validated in forward");
                let offs = kernels::broadcast_offsets(out.shape(), src.shape());
                let count = (src.numel() / out.numel()) as f64;
                let gi = src
                    .data()
                    .iter()
                    .zip(&offs)
                    .map(|(x, &o)| g[o] * 2.0 * (x - mean.data()[o]) / count)
                    .collect();
                vec![(*input, gi)]
            }
            Op::Softmax(a, axis) => {
                vec![(*a, kernels::softmax_backward(out, g, *axis).into_data())]
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let need = [
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                ];
                let grads = kernels::conv2d_backward(val(*input), val(*weight), g, *geom, need);
                let mut res = Vec::new();
                if let Some(t) = grads.input {
                    res.push((*input, t.into_data()));
                }
                if let Some(t) = grads.weight {
                    res.push((*weight, t.into_data()));
                }
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    res.push((*b, t.into_data()));
                }
                res
            }
            Op::Resize(a) => {
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                vec![(*a, kernels::resize_backward(val(*a).shape(), g, oh, ow).into_data())]
            }
            Op::AvgPool(a, k) => {
                vec![(*a, kernels::avg_pool_backward(val(*a).shape(), g, *k).into_data())]
            }
            Op::CrossEntropy { logits, labels } => {
                let x = val(*logits);
                let (b, k) = (x.shape()[0], x.shape()[1]);
                let inner = x.numel() / (b * k);
                let scale = g[0] / labels.len() as f64;
                let mut gi = vec![0.0; x.numel()];
                for bi in 0..b {
                    for p in 0..inner {
                        let base = bi * k * inner + p;
                        let max = (0..k)
                            .map(|c| x.data()[base + c * inner])
                            .fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..k).map(|c| (x.data()[base + c * inner] - max).exp()).sum();
                        for c in 0..k {
                            let prob = (x.data()[base + c * inner] - max).exp() / z;
                            let target = if labels[bi * inner + p] == c { 1.0 } else { 0.0 };
                            gi[base + c * inner] = scale * (prob - target);
                        }
                    }
                }
                vec![(*logits, gi)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);

        let eye = g.constant(Tensor::eye(2));
        let x = g.constant(t(&[2, 2], &[0.3, -1.5, 2.0, 7.0]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let z = g.constant(Tensor::zeros(&[3, 4]));
        let w = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64 - 3.5));
        let zw = g.matmul(z, w).unwrap();
        assert_eq!(g.value(zw), &Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);

        let base = [0.3, -1.2, 4.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 1000.0).collect();
        let a = g.constant(t(&[3], &base));
        let b = g.constant(t(&[3], &shifted));
        let (sa, sb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
        assert!(g.value(sa).max_abs_diff(g.value(sb)).unwrap() < 1e-12);
    }

    #[test]
    fn backward_basic_rules() {
        let mut g = Graph::new();
        let xv = t(&[3], &[1.0, -2.0, 0.5]);
        let x = g.variable(xv.clone());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[3]));

        let mut g = Graph::new();
        let x = g.variable(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &xv.map(|v| 2.0 * v));

        let mut g = Graph::new();
        let x = g.variable(xv);
        let sm = g.softmax(x, 0).unwrap();
        let s = g.sum(sm);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_twice_accumulates_exactly() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2], &[0.1, 0.2, -0.7, 1.1]));
        let w = g.variable(t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]));
        let y = g.matmul(x, w).unwrap();
        let y = g.gelu(y);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let once = g.grad(w).unwrap().clone();
        g.backward(s).unwrap();
        let twice = g.grad(w).unwrap();
        assert_eq!(twice, &once.map(|v| 2.0 * v));
        g.zero_grad();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn backward_usage_errors() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.0));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let v = g.variable(Tensor::ones(&[2]));
        let y = g.scale(v, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_gradients_add() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 4.0);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0, 7.0]);
    }

    #[test]
    fn concat_slice_inverse() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 1, 3], |i| -(i as f64)));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        let a2 = g.slice(c, 1, 0, 2).unwrap();
        let b2 = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 1, 2]));
        assert!(matches!(g.cross_entropy(x, &[0, 3]), Err(Error::Data(_))));
        let ce = g.cross_entropy(x, &[0, 2]).unwrap();
        assert!((g.value(ce).item().unwrap() - 3f64.ln()).abs() < 1e-15);
    }
}
