//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, which is already a topological
//! order, so [`ComputeGraph::backward`] is a single reverse sweep. Each
//! backward call computes a fresh adjoint pass and *adds* it into the node
//! gradients: two backward calls accumulate exactly twice the gradient, and
//! nothing is cleared implicitly — call [`ComputeGraph::zero_grad`].
//!
//! The op inventory is fixed: matmul (optionally batched over leading dims),
//! elementwise add/mul, suffix-broadcast add, scalar mul, softmax,
//! layer_norm, GELU (tanh approximation), embedding gather, reshape,
//! transpose, full reductions, clamped log, and masked fill.

use crate::error::{Error, Result};
use crate::numerics::tensor::{numel, Tensor};

/// Handle to a node in a [`ComputeGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Mul,
    /// rhs shape is a suffix of lhs shape; rhs tiles over the leading dims.
    AddBroadcast,
    MulScalar(f64),
    Matmul,
    Softmax {
        axis: usize,
    },
    /// inputs: x, gamma, beta; normalizes the last dimension.
    LayerNorm {
        eps: f64,
    },
    Gelu,
    /// input: table [rows, width]; output [ids.len(), width].
    Gather {
        ids: Vec<usize>,
    },
    Reshape,
    Transpose {
        ax0: usize,
        ax1: usize,
    },
    SumAll,
    MeanAll,
    /// ln(clamp(x, lo, hi)); gradient saturates to 0 outside (lo, hi).
    Log {
        lo: f64,
        hi: f64,
    },
    /// Positions with keep=false took a fill constant and pass no gradient.
    MaskedFill {
        keep: Vec<bool>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Topologically ordered record of operations plus per-node gradients.
#[derive(Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
}

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

// out[m,n] += a[m,k] · b[k,n]
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// out[m,k] += a[m,n] · bᵀ where b is [k,n]
fn mm_abt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

// out[k,n] += aᵀ · b where a is [m,k], b is [m,n]
fn mm_atb_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_copy(src: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    // Source stride seen from each output axis.
    let mut src_stride = vec![0usize; rank];
    for (d, s) in src_stride.iter_mut().enumerate() {
        let src_axis = if d == ax0 {
            ax1
        } else if d == ax1 {
            ax0
        } else {
            d
        };
        *s = strides[src_axis];
    }
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut flat = 0;
        for d in 0..rank {
            flat += idx[d] * src_stride[d];
        }
        *o = src[flat];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl ComputeGraph {
    pub fn new() -> Self {
        ComputeGraph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf holding a copy of `t`'s data.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t.shape().to_vec(), t.data().to_vec())
    }

    /// Insert a constant leaf from raw parts.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<NodeId> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "constant shape {:?} wants {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, vec![], shape, data))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("node shape consistent")
    }

    /// Accumulated gradient of a node (zeros until a backward pass reaches it).
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add, vec![a, b], shape, value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul, vec![a, b], shape, value))
    }

    /// Add `b` to `a` where `b`'s shape is a suffix of `a`'s (bias rows,
    /// position tables, and similar).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb.as_slice() {
            return Err(Error::shape(format!(
                "broadcast add wants a suffix shape: {sa:?} vs {sb:?}"
            )));
        }
        let nb = self.nodes[b.0].value.len().max(1);
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.nodes[b.0].value[i % nb])
            .collect();
        let shape = sa.clone();
        Ok(self.push(Op::AddBroadcast, vec![a, b], shape, value))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::MulScalar(c), vec![a], shape, value)
    }

    /// Matrix product; inputs of rank > 2 are treated as stacks of matrices
    /// over identical leading dimensions.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (
            self.nodes[a.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        let mismatch = || {
            Error::shape(format!(
                "matmul shape mismatch: {sa:?} x {sb:?}"
            ))
        };
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut value = vec![0.0; batch * m * n];
        for s in 0..batch {
            mm_acc(
                &self.nodes[a.0].value[s * m * k..(s + 1) * m * k],
                &self.nodes[b.0].value[s * k * n..(s + 1) * k * n],
                m,
                k,
                n,
                &mut value[s * m * n..(s + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Op::Matmul, vec![a, b], shape, value))
    }

    /// Exp-normalization along `axis` with max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let x = &self.nodes[a.0].value;
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let n_a = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let outer = x.len() / (n_a * stride);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n_a * stride + s;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n_a {
                    mx = mx.max(x[base + j * stride]);
                }
                let mut sum = 0.0;
                for j in 0..n_a {
                    let e = (x[base + j * stride] - mx).exp();
                    y[base + j * stride] = e;
                    sum += e;
                }
                for j in 0..n_a {
                    y[base + j * stride] /= sum;
                }
            }
        }
        Ok(self.push(Op::Softmax { axis }, vec![a], shape, y))
    }

    /// Per-row normalization over the last dimension, scaled by gamma and
    /// shifted by beta. Variance is the population variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id.0].shape != [d] {
                return Err(Error::shape(format!(
                    "layer_norm {name} shape {:?} does not match last dim {d}",
                    self.nodes[id.0].shape
                )));
            }
        }
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let rows = xs.len() / d;
        let mut y = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                y[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], shape, y))
    }

    /// GELU with the tanh approximation (the gradient differentiates the
    /// same formula, keeping finite-difference checks exact).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Gelu, vec![a], shape, value)
    }

    /// Row lookup into a [rows, width] table; the backward pass scatter-adds.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "gather table must be 2-D, got {shape:?}"
            )));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!(
                "gather id {bad} out of range for table with {rows} rows"
            )));
        }
        let src = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            value.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            Op::Gather { ids: ids.to_vec() },
            vec![table],
            vec![ids.len(), width],
            value,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        if numel(&shape) != self.nodes[a.0].value.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[a.0].shape, shape
            )));
        }
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(Op::Reshape, vec![a], shape, value))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: NodeId, ax0: usize, ax1: usize) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(Error::shape(format!(
                "transpose axes ({ax0}, {ax1}) out of range for shape {shape:?}"
            )));
        }
        let value = transpose_copy(&self.nodes[a.0].value, &shape, ax0, ax1);
        let mut out_shape = shape;
        out_shape.swap(ax0, ax1);
        Ok(self.push(Op::Transpose { ax0, ax1 }, vec![a], out_shape, value))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::SumAll, vec![a], vec![], vec![s])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.nodes[a.0].value.iter().sum::<f64>() / n as f64;
        self.push(Op::MeanAll, vec![a], vec![], vec![s])
    }

    /// Natural log of the input clamped into [lo, hi].
    pub fn log_clamped(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::config(format!(
                "log clamp bounds must satisfy 0 < lo < hi, got ({lo}, {hi})"
            )));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x.clamp(lo, hi).ln())
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Log { lo, hi }, vec![a], shape, value))
    }

    /// Replace positions where `keep` is false by `fill`; those positions
    /// pass no gradient.
    pub fn masked_fill(&mut self, a: NodeId, keep: &[bool], fill: f64) -> Result<NodeId> {
        if keep.len() != self.nodes[a.0].value.len() {
            return Err(Error::shape(format!(
                "mask length {} does not match tensor of {} elements",
                keep.len(),
                self.nodes[a.0].value.len()
            )));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { fill })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(
            Op::MaskedFill { keep: keep.to_vec() },
            vec![a],
            shape,
            value,
        ))
    }

    /// Reverse sweep from a scalar root. Adds this pass's adjoints into the
    /// per-node gradients; call [`ComputeGraph::zero_grad`] to reset.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Numeric(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[root.0][0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if adj[i].iter().all(|&v| v == 0.0) {
                continue;
            }
            let dy = std::mem::take(&mut adj[i]);
            self.propagate(i, &dy, &mut adj);
            adj[i] = dy;
        }
        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            for (g, d) in node.grad.iter_mut().zip(a) {
                *g += d;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for &input in &node.inputs {
                    for (g, d) in adj[input.0].iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                for j in 0..dy.len() {
                    adj[a.0][j] += dy[j] * self.nodes[b.0].value[j];
                }
                for j in 0..dy.len() {
                    adj[b.0][j] += dy[j] * self.nodes[a.0].value[j];
                }
            }
            Op::AddBroadcast => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                for (g, d) in adj[a.0].iter_mut().zip(dy) {
                    *g += d;
                }
                let nb = self.nodes[b.0].value.len().max(1);
                for (j, d) in dy.iter().enumerate() {
                    adj[b.0][j % nb] += d;
                }
            }
            Op::MulScalar(c) => {
                let a = node.inputs[0];
                for (g, d) in adj[a.0].iter_mut().zip(dy) {
                    *g += c * d;
                }
            }
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let sa = &self.nodes[a.0].shape;
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = *self.nodes[b.0].shape.last().unwrap();
                let batch: usize = sa[..sa.len() - 2].iter().product();
                for s in 0..batch {
                    let dy_s = &dy[s * m * n..(s + 1) * m * n];
                    mm_abt_acc(
                        dy_s,
                        &self.nodes[b.0].value[s * k * n..(s + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut adj[a.0][s * m * k..(s + 1) * m * k],
                    );
                    mm_atb_acc(
                        &self.nodes[a.0].value[s * m * k..(s + 1) * m * k],
                        dy_s,
                        m,
                        k,
                        n,
                        &mut adj[b.0][s * k * n..(s + 1) * k * n],
                    );
                }
            }
            Op::Softmax { axis } => {
                let a = node.inputs[0];
                let shape = &node.shape;
                let n_a = shape[*axis];
                let stride: usize = shape[axis + 1..].iter().product();
                let outer = dy.len() / (n_a * stride);
                let y = &node.value;
                for o in 0..outer {
                    for s in 0..stride {
                        let base = o * n_a * stride + s;
                        let mut dot = 0.0;
                        for j in 0..n_a {
                            let p = base + j * stride;
                            dot += dy[p] * y[p];
                        }
                        for j in 0..n_a {
                            let p = base + j * stride;
                            adj[a.0][p] += y[p] * (dy[p] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { eps } => {
                let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let d = *node.shape.last().unwrap();
                let rows = dy.len() / d;
                let xs = &self.nodes[x.0].value;
                let g = &self.nodes[gamma.0].value;
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let dy_row = &dy[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dxhat plus the two row means needed for dx.
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = dy_row[j] * g[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        adj[gamma.0][j] += dy_row[j] * xhat;
                        adj[beta.0][j] += dy_row[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = dy_row[j] * g[j];
                        adj[x.0][r * d + j] +=
                            inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
            Op::Gelu => {
                let a = node.inputs[0];
                for (j, d) in dy.iter().enumerate() {
                    adj[a.0][j] += d * gelu_grad_scalar(self.nodes[a.0].value[j]);
                }
            }
            Op::Gather { ids } => {
                let table = node.inputs[0];
                let width = node.shape[1];
                for (r, &id) in ids.iter().enumerate() {
                    let dy_row = &dy[r * width..(r + 1) * width];
                    let dst = &mut adj[table.0][id * width..(id + 1) * width];
                    for (g, d) in dst.iter_mut().zip(dy_row) {
                        *g += d;
                    }
                }
            }
            Op::Reshape => {
                let a = node.inputs[0];
                for (g, d) in adj[a.0].iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::Transpose { ax0, ax1 } => {
                let a = node.inputs[0];
                // Transposing the adjoint with the same axes maps it back.
                let back = transpose_copy(dy, &node.shape, *ax0, *ax1);
                for (g, d) in adj[a.0].iter_mut().zip(&back) {
                    *g += d;
                }
            }
            Op::SumAll => {
                let a = node.inputs[0];
                for g in adj[a.0].iter_mut() {
                    *g += dy[0];
                }
            }
            Op::MeanAll => {
                let a = node.inputs[0];
                let n = self.nodes[a.0].value.len().max(1) as f64;
                for g in adj[a.0].iter_mut() {
                    *g += dy[0] / n;
                }
            }
            Op::Log { lo, hi } => {
                let a = node.inputs[0];
                for (j, d) in dy.iter().enumerate() {
                    let x = self.nodes[a.0].value[j];
                    if x > *lo && x < *hi {
                        adj[a.0][j] += d / x;
                    }
                }
            }
            Op::MaskedFill { keep } => {
                let a = node.inputs[0];
                for (j, d) in dy.iter().enumerate() {
                    if keep[j] {
                        adj[a.0][j] += d;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Central finite differences over every input coordinate.
    fn fd_check<F>(build: F, inputs: &[Tensor], tol: f64)
    where
        F: Fn(&mut ComputeGraph, &[NodeId]) -> NodeId,
    {
        let h = 1e-5;
        let mut g = ComputeGraph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
        let root = build(&mut g, &ids);
        g.backward(root).unwrap();
        let grads: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut g = ComputeGraph::new();
            let ids: Vec<NodeId> = perturbed.iter().map(|t| g.leaf(t)).collect();
            let root = build(&mut g, &ids);
            g.value(root)[0]
        };
        for (ti, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ad = grads[ti][j];
                let denom = ad.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (ad - fd).abs() / denom < tol,
                    "input {ti} coord {j}: ad={ad} fd={fd}"
                );
            }
        }
    }

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = ComputeGraph::new();
        let eye = g.leaf(&t2([2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.leaf(&t2([2, 2], &[3.0, -1.0, 2.0, 5.0]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), &[3.0, -1.0, 2.0, 5.0]);
    }

    // Hand multiplication: [[1,2],[3,4]] x [[5],[6]] = [[17],[39]].
    #[test]
    fn matmul_hand_example() {
        let mut g = ComputeGraph::new();
        let a = g.leaf(&t2([2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&t2([2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[17.0, 39.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = ComputeGraph::new();
        let a = g.leaf(&Tensor::zeros(vec![2, 3]));
        let b = g.leaf(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_fd() {
        fd_check(
            |g, ids| {
                let c = g.matmul(ids[0], ids[1]).unwrap();
                g.sum_all(c)
            },
            &[
                t2([2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]),
                t2([3, 2], &[1.0, 2.0, -0.5, 0.8, 0.3, -1.2]),
            ],
            1e-4,
        );
    }

    #[test]
    fn softmax_values() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&Tensor::from_vec(vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);

        // Direct evaluation of exp-normalization for (1, 2, 3).
        let x = g.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        assert_close(v[0], 0.09003, 1e-5);
        assert_close(v[1], 0.24473, 1e-5);
        assert_close(v[2], 0.66524, 1e-5);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&Tensor::from_vec(vec![0.3, -1.2, 4.0]));
        let y = g.softmax(x, 0).unwrap();
        let shifted = g.leaf(&Tensor::from_vec(vec![100.3, 98.8, 104.0]));
        let ys = g.softmax(shifted, 0).unwrap();
        for (a, b) in g.value(y).iter().zip(g.value(ys)) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&Tensor::from_vec(vec![0.0, f64::NAN]));
        assert!(g.softmax(x, 0).is_err());
    }

    #[test]
    fn softmax_gradients_match_fd() {
        fd_check(
            |g, ids| {
                let y = g.softmax(ids[0], 1).unwrap();
                let w = g
                    .constant(vec![2, 3], vec![1.0, -2.0, 0.5, 0.25, 1.5, -1.0])
                    .unwrap();
                let p = g.mul(y, w).unwrap();
                g.sum_all(p)
            },
            &[t2([2, 3], &[0.1, -0.4, 1.2, 2.0, 0.0, -1.5])],
            1e-4,
        );
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = ComputeGraph::new();
        let gamma = g.leaf(&Tensor::from_vec(vec![1.0, 1.0]));
        let beta = g.leaf(&Tensor::from_vec(vec![0.0, 0.0]));

        // Constant row: zero variance absorbed by eps.
        let x = g.leaf(&t2([1, 2], &[3.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);

        // Row (1, 3): mean 2, std 1.
        let x = g.leaf(&t2([1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_close(g.value(y)[0], -1.0, 1e-6);
        assert_close(g.value(y)[1], 1.0, 1e-6);

        // gamma = 0 leaves only beta.
        let zero_gamma = g.leaf(&Tensor::from_vec(vec![0.0, 0.0]));
        let shift = g.leaf(&Tensor::from_vec(vec![0.5, -0.5]));
        let x = g.leaf(&t2([2, 2], &[1.0, 4.0, -2.0, 0.0]));
        let y = g.layer_norm(x, zero_gamma, shift, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn layer_norm_gradients_match_fd() {
        fd_check(
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let w = g
                    .constant(vec![2, 3], vec![0.7, -1.0, 0.3, 1.1, 0.9, -0.2])
                    .unwrap();
                let p = g.mul(y, w).unwrap();
                g.sum_all(p)
            },
            &[
                t2([2, 3], &[0.2, -1.5, 0.7, 2.2, 0.1, -0.6]),
                Tensor::from_vec(vec![1.2, 0.8, -0.5]),
                Tensor::from_vec(vec![0.1, -0.3, 0.0]),
            ],
            1e-4,
        );
    }

    #[test]
    fn gelu_gradients_match_fd() {
        fd_check(
            |g, ids| {
                let y = g.gelu(ids[0]);
                g.sum_all(y)
            },
            &[Tensor::from_vec(vec![-2.0, -0.5, 0.01, 0.5, 2.0])],
            1e-4,
        );
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut g = ComputeGraph::new();
        let table = g.leaf(&t2([3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = g.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(picked);
        g.backward(s).unwrap();
        // Row 2 was used twice, row 1 never.
        assert_eq!(g.grad(table), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = ComputeGraph::new();
        let table = g.leaf(&t2([3, 2], &[0.0; 6]));
        assert!(g.gather(table, &[3]).is_err());
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.masked_fill(x, &[true, false, true], -9.0).unwrap();
        assert_eq!(g.value(y), &[1.0, -9.0, 3.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn transpose_and_reshape_gradients() {
        fd_check(
            |g, ids| {
                let t = g.transpose(ids[0], 0, 2).unwrap();
                let r = g.reshape(t, vec![4, 2]).unwrap();
                let w = g
                    .constant(vec![4, 2], vec![0.5, -1.0, 2.0, 0.1, -0.7, 1.3, 0.9, -0.4])
                    .unwrap();
                let p = g.mul(r, w).unwrap();
                g.sum_all(p)
            },
            &[Tensor::new(vec![2, 2, 2], (1..=8).map(|v| v as f64 / 4.0).collect()).unwrap()],
            1e-4,
        );
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&t2([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let t = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn add_broadcast_sums_leading_dims() {
        let mut g = ComputeGraph::new();
        let a = g.leaf(&t2([2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&Tensor::from_vec(vec![10.0, 20.0]));
        let y = g.add_broadcast(a, b).unwrap();
        assert_eq!(g.value(y), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b), &[2.0, 2.0]);
    }

    #[test]
    fn broadcast_and_log_gradients_match_fd() {
        fd_check(
            |g, ids| {
                let y = g.add_broadcast(ids[0], ids[1]).unwrap();
                let sm = g.softmax(y, 1).unwrap();
                let lg = g.log_clamped(sm, 1e-12, 1.0 - 1e-12).unwrap();
                g.mean_all(lg)
            },
            &[
                t2([3, 2], &[0.4, -0.2, 1.1, 0.3, -0.9, 0.5]),
                Tensor::from_vec(vec![0.25, -0.75]),
            ],
            1e-4,
        );
    }

    #[test]
    fn log_clamp_saturates_gradient() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&Tensor::from_vec(vec![1e-15, 0.5]));
        let y = g.log_clamped(x, 1e-12, 1.0 - 1e-12).unwrap();
        assert_close(g.value(y)[0], (1e-12f64).ln(), 1e-9);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x)[0], 0.0);
        assert_close(g.grad(x)[1], 2.0, 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&Tensor::from_vec(vec![2.0, -3.0, 7.0]));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_exactly_twice() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        let once: Vec<f64> = g.grad(x).to_vec();
        g.backward(s).unwrap();
        let twice: Vec<f64> = g.grad(x).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * a);
        }
        g.zero_grad();
        assert_eq!(g.grad(x), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    // Weighted loss of a 1-layer softmax classifier on one example, checked
    // against central finite differences.
    #[test]
    fn one_layer_classifier_loss_matches_fd() {
        let x = t2([1, 4], &[0.3, -1.2, 0.8, 0.1]);
        let w = t2([4, 2], &[0.2, -0.1, 0.4, 0.3, -0.5, 0.7, 0.05, -0.25]);
        let b = Tensor::from_vec(vec![0.1, -0.2]);
        // Gold label 1 with alpha 4: per-class weights (0, -4).
        fd_check(
            |g, ids| {
                let logits = g.matmul(ids[0], ids[1]).unwrap();
                let logits = g.add_broadcast(logits, ids[2]).unwrap();
                let probs = g.softmax(logits, 1).unwrap();
                let logp = g.log_clamped(probs, 1e-12, 1.0 - 1e-12).unwrap();
                let wt = g.constant(vec![1, 2], vec![0.0, -4.0]).unwrap();
                let weighted = g.mul(logp, wt).unwrap();
                g.sum_all(weighted)
            },
            &[x, w, b],
            1e-4,
        );
    }

    proptest! {
        #[test]
        fn softmax_rows_are_probability_vectors(
            data in proptest::collection::vec(-50.0f64..50.0, 6),
        ) {
            let mut g = ComputeGraph::new();
            let x = g.leaf(&t2([2, 3], &data));
            let y = g.softmax(x, 1).unwrap();
            let v = g.value(y);
            for r in 0..2 {
                let row = &v[r * 3..(r + 1) * 3];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                // Extreme logit gaps saturate to exactly 0 or 1 in f64.
                for &p in row {
                    prop_assert!((0.0..=1.0).contains(&p));
                }
            }
        }

        #[test]
        fn matmul_is_associative(
            a in proptest::collection::vec(-2.0f64..2.0, 4),
            b in proptest::collection::vec(-2.0f64..2.0, 4),
            c in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let mut g = ComputeGraph::new();
            let ta = g.leaf(&t2([2, 2], &a));
            let tb = g.leaf(&t2([2, 2], &b));
            let tc = g.leaf(&t2([2, 2], &c));
            let ab = g.matmul(ta, tb).unwrap();
            let ab_c = g.matmul(ab, tc).unwrap();
            let bc = g.matmul(tb, tc).unwrap();
            let a_bc = g.matmul(ta, bc).unwrap();
            for (x, y) in g.value(ab_c).iter().zip(g.value(a_bc)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
