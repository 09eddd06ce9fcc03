use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        a: usize,
        b: usize,
    },
    Sum(Var),
    Mean(Var),
    Broadcast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every node's parents precede it
/// and a single reverse sweep is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it participates in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last [`Graph::backward`]; `None` when the node
    /// did not participate.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Copy of the node value carrying its gradient.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.set_grad(self.grads[v.0].clone())
            .expect("gradient buffers match node shape");
        t
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = if sa == sb || sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.ends_with(sa) {
            sb.to_vec()
        } else {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        Ok((out, self.value(a).numel(), self.value(b).numel()))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (shape, na, nb) = self.binary(name, a, b)?;
        let numel: usize = shape.iter().product();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data = (0..numel).map(|i| f(da[i % na], db[i % nb])).collect();
        Ok((Tensor::new(shape, data)?, self.rg(&[a, b])))
    }

    /// Elementwise sum. The smaller operand may match a trailing suffix of the
    /// larger operand's shape and is repeated along the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x * c`, composed from [`Graph::mul`] with a scalar constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(c));
        self.mul(x, s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. Supports `[m,k]x[k,n]`, batched `[b,m,k]x[b,k,n]`, and
    /// `[b,m,k]x[k,n]` with the right operand shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, shared) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, true),
            ([bt, m, k], [bt2, k2, n]) if k == k2 && bt == bt2 => (*bt, *m, *k, *n, false),
            ([bt, m, k], [k2, n]) if k == k2 => (*bt, *m, *k, *n, true),
            _ => return Err(err()),
        };
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if shared { 0 } else { bi * k * n };
            mm(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both
    /// shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::config(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let bs = self.value(bias).data();
        let rows = src.len() / d.max(1);
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bs[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Swaps axes `a` and `b`.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if a >= shape.len() || b >= shape.len() {
            return Err(Error::contract(format!(
                "transpose axes ({a},{b}) out of range for shape {shape:?}"
            )));
        }
        let (data, new_shape) = swap_axes(t.data(), &shape, a, b);
        let out = Tensor::new(new_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose { x, a, b }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{end} on axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&t.data()[base..base + width * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        let out = Tensor::new(new_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    /// Repeats `x` along new leading axes.
    pub fn broadcast(&mut self, x: Var, leading: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let reps: usize = leading.iter().product();
        let mut shape = leading.to_vec();
        shape.extend_from_slice(t.shape());
        let mut out = Vec::with_capacity(reps * t.numel());
        for _ in 0..reps {
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Broadcast(x), rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a one-element `loss`. Gradients from any earlier
    /// sweep are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) {
        // Split borrows: node data is read-only during the sweep.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (na, nb) = (nodes[a.0].value.numel(), nodes[b.0].value.numel());
                self.nodes_accumulate(&nodes, *a, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % na] += d;
                    }
                });
                self.nodes_accumulate(&nodes, *b, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % nb] += sign * d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let (na, nb) = (da.len(), db.len());
                self.nodes_accumulate(&nodes, *a, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % na] += d * db[j % nb];
                    }
                });
                self.nodes_accumulate(&nodes, *b, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % nb] += d * da[j % na];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = if sa.len() == 3 { sa[0] } else { 1 };
                let shared = sb.len() == 2;
                let (da, db) = (val(*a), val(*b));
                self.nodes_accumulate(&nodes, *a, |g| {
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        mm_nt(
                            &gout[bi * m * n..(bi + 1) * m * n],
                            &db[boff..boff + k * n],
                            &mut g[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.nodes_accumulate(&nodes, *b, |g| {
                    for bi in 0..batch {
                        let boff = if shared { 0 } else { bi * k * n };
                        mm_tn(
                            &da[bi * m * k..(bi + 1) * m * k],
                            &gout[bi * m * n..(bi + 1) * m * n],
                            &mut g[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                self.nodes_accumulate(&nodes, *x, |g| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + ii;
                            let dot: f64 = (0..len).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                g[idx(j)] += y[idx(j)] * (gout[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.numel();
                let rows = rstd.len();
                let gv = val(*gain);
                self.nodes_accumulate(&nodes, *x, |g| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let v = gout[r * d + j] * gv[j];
                            dxhat[j] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            g[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                });
                self.nodes_accumulate(&nodes, *gain, |g| {
                    for (j, d_) in gout.iter().enumerate() {
                        g[j % d] += d_ * xhat[j];
                    }
                });
                self.nodes_accumulate(&nodes, *bias, |g| {
                    for (j, d_) in gout.iter().enumerate() {
                        g[j % d] += d_;
                    }
                });
            }
            Op::Relu(x) => {
                let xs = val(*x);
                self.nodes_accumulate(&nodes, *x, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        if xs[j] > 0.0 {
                            g[j] += d;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xs = val(*x);
                self.nodes_accumulate(&nodes, *x, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        let v = xs[j];
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        let deriv = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                        g[j] += d * deriv;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    self.nodes_accumulate(&nodes, v, |g| {
                        let chunk = len * inner;
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (gj, d) in g[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&gout[src..src + chunk])
                            {
                                *gj += d;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let width = end - start;
                self.nodes_accumulate(&nodes, *x, |g| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        for (gj, d) in g[dst..dst + width * inner]
                            .iter_mut()
                            .zip(&gout[src..src + width * inner])
                        {
                            *gj += d;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.nodes_accumulate(&nodes, *x, |g| {
                    for (gj, d) in g.iter_mut().zip(gout) {
                        *gj += d;
                    }
                });
            }
            Op::Transpose { x, a, b } => {
                let (back, _) = swap_axes(gout, node.value.shape(), *a, *b);
                self.nodes_accumulate(&nodes, *x, |g| {
                    for (gj, d) in g.iter_mut().zip(&back) {
                        *gj += d;
                    }
                });
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                let d = if matches!(node.op, Op::Mean(_)) {
                    gout[0] / n.max(1) as f64
                } else {
                    gout[0]
                };
                self.nodes_accumulate(&nodes, *x, |g| {
                    for gj in g.iter_mut() {
                        *gj += d;
                    }
                });
            }
            Op::Broadcast(x) => {
                let n = nodes[x.0].value.numel();
                self.nodes_accumulate(&nodes, *x, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % n] += d;
                    }
                });
            }
        }
        self.nodes = nodes;
    }

    fn nodes_accumulate(&mut self, nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let n = nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }
}

/// `(outer, len, inner)` element counts around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn swap_axes(data: &[f64], shape: &[usize], a: usize, b: usize) -> (Vec<f64>, Vec<usize>) {
    let mut new_shape = shape.to_vec();
    new_shape.swap(a, b);
    if a == b {
        return (data.to_vec(), new_shape);
    }
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    // Stride of each output axis in the source layout.
    let mut src_strides = strides.clone();
    src_strides.swap(a, b);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < new_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, new_shape)
}

/// `c[m,n] = a[m,k] * b[k,n]`
fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1]);
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 3]));
        let a = g.constant(Tensor::matrix(3, 3, (0..9).map(|v| v as f64 - 4.0).collect()).unwrap());
        let y = g.matmul(z, a).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 2.0, 0.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0]);
        let w = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let y = g.matmul(a, w).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15));

        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data(), &[0.25, 0.75], 1e-15));
    }

    #[test]
    fn softmax_rejects_bad_axis_and_empty() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.softmax(x, 2).is_err());
        let e = g.constant(Tensor::zeros(&[2, 0]));
        assert!(g.softmax(e, 1).is_err());
    }

    #[test]
    fn softmax_inner_axis_sums_to_one() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|v| (v as f64 * 0.37).sin() * 5.0).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 4], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let yd = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| yd[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-12));

        let c = g.constant(Tensor::matrix(1, 2, vec![4.0, 4.0]).unwrap());
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let zero_gain = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::vector(vec![0.5, -0.5]));
        let y = g.layer_norm(x, zero_gain, b, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -0.5]);

        assert!(matches!(
            g.layer_norm(x, gain, bias, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[5]));
        let bias = g.constant(Tensor::zeros(&[5]));
        let data: Vec<f64> = (0..15)
            .map(|v| (v as f64 * 1.3).cos() * 3.0 + 2.0)
            .collect();
        let x = g.constant(Tensor::matrix(3, 5, data).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-300).unwrap();
        for row in g.value(y).data().chunks(5) {
            let m = row.iter().sum::<f64>() / 5.0;
            let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn detached_leaf_has_no_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.param(Tensor::vector(vec![5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(y).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![2.0, 2.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        assert_eq!(g.tensor_with_grad(x).grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_sums_gradient_over_leading_axes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3, 2]));
        let b = g.param(Tensor::vector(vec![1.0, -1.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn transpose_concat_slice_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let t = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = g.concat(&[x, x], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 6]);
        assert_eq!(&g.value(c).data()[..6], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        let s = g.slice(c, 1, 2, 4).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 0.0, 5.0, 3.0]);
        let b = g.broadcast(x, &[2]).unwrap();
        assert_eq!(g.shape(b), &[2, 2, 3]);
    }

    #[test]
    fn transpose_rank4_round_trip() {
        let data: Vec<f64> = (0..120).map(f64::from).collect();
        let (t, s) = swap_axes(&data, &[2, 3, 4, 5], 1, 2);
        assert_eq!(s, vec![2, 4, 3, 5]);
        // element [1, 2, 3, 4] of the source is at [1, 3, 2, 4] in the result
        assert_eq!(
            t[((4 + 3) * 3 + 2) * 5 + 4],
            data[((3 + 2) * 4 + 3) * 5 + 4]
        );
        let (back, s2) = swap_axes(&t, &s, 1, 2);
        assert_eq!(s2, vec![2, 3, 4, 5]);
        assert_eq!(back, data);
    }
}
