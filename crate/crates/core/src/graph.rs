//! Reverse-mode automatic differentiation over a per-pass operation tape.
//!
//! A [`Graph`] records every operation executed during a forward pass in
//! topological order (parents always precede children). One call to
//! [`Graph::backward`] sweeps the tape in reverse and accumulates the
//! gradient of a scalar loss into every leaf that asked for it. Graphs are
//! built per forward pass and thrown away after backward; there is no
//! persistent tape.
//!
//! The op set is exactly what the two encoder towers and the training /
//! attack losses need — no broadcasting beyond row-vector bias addition.

use crate::linalg;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// out = a[m×k] · b[k×n]
    Matmul { a: usize, b: usize },
    /// out = a[m×k] · b[n×k]ᵀ
    MatmulTransposeB { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    /// out[i][j] = a[i][j] + bias[j]
    AddRowVector { a: usize, bias: usize },
    Scale { a: usize, factor: f32 },
    Relu { a: usize },
    SoftmaxRows { a: usize },
    /// Per-row normalization over the trailing dimension.
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f32 },
    /// out[i] = a[index[i]]; backward scatter-adds.
    Gather { a: usize, index: Vec<usize> },
    /// out row i = table row ids[i].
    LookupRows { table: usize, ids: Vec<usize> },
    /// out[0][j] = Σ_i weights[i] · a[i][j]
    WeightedRowSum { a: usize, weights: Vec<f32> },
    Sum { a: usize },
    Dot { a: usize, b: usize },
    /// Whole-tensor L2 normalization.
    Normalize { a: usize },
    ConcatRows { parts: Vec<usize> },
    Transpose { a: usize },
    /// Mean over rows of −log softmax(row)[target]; fused for stability.
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Operation tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input node. Gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Register an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward sweep, if one reached this node.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node value.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = linalg::matmul(self.value(a).data(), self.value(b).data(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out),
            Op::Matmul { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// a[m×k] · b[n×k]ᵀ → [m×n]
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.value(a).dims2("matmul_transpose_b")?;
        let (n, kb) = self.value(b).dims2("matmul_transpose_b")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_transpose_b",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = linalg::matmul_a_bt(self.value(a).data(), self.value(b).data(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out),
            Op::MatmulTransposeB { a: a.0, b: b.0 },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(self.value(a).shape(), out),
            Op::Add { a: a.0, b: b.0 },
            needs,
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(self.value(a).shape(), out),
            Op::Sub { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// Row-vector bias addition, the one permitted broadcast.
    pub fn add_row_vector(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("add_row_vector")?;
        if self.value(bias).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bias_data = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(a).data().chunks_exact(n) {
            out.extend(row.iter().zip(bias_data).map(|(x, b)| x + b));
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out),
            Op::AddRowVector { a: a.0, bias: bias.0 },
            needs,
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out: Vec<f32> = self.value(a).data().iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(self.value(a).shape(), out),
            Op::Scale { a: a.0, factor },
            needs,
        )
    }

    /// Elementwise max(0, x); subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(self.value(a).shape(), out),
            Op::Relu { a: a.0 },
            needs,
        )
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("softmax_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(a).data().chunks_exact(n) {
            let max = row.iter().fold(f32::NEG_INFINITY, |acc, &v| acc.max(v));
            let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| (e / total) as f32));
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out),
            Op::SoftmaxRows { a: a.0 },
            needs,
        ))
    }

    /// Per-vector layer normalization over the trailing dimension, scaled by
    /// `gamma` and shifted by `beta` (both of length d). Accepts rank-1 or
    /// rank-2 input.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var, TensorError> {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or(TensorError::RankMismatch {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [d] {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks_exact(d) {
            let (mean, inv_std) = row_stats(row, eps);
            out.extend(
                row.iter()
                    .zip(g.iter().zip(b.iter()))
                    .map(|(&v, (&gi, &bi))| ((v as f64 - mean) * inv_std) as f32 * gi + bi),
            );
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            needs,
        ))
    }

    /// out[i] = a[index[i]], reshaped to `out_shape`. Realizes patch
    /// extraction and other data movement as a differentiable permutation.
    pub fn gather(&mut self, a: Var, index: &[usize], out_shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = out_shape.iter().product();
        if numel != index.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: out_shape.to_vec(),
                rhs: vec![index.len()],
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            if i >= src.len() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather",
                    index: i,
                    extent: src.len(),
                });
            }
            out.push(src[i]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(out_shape, out),
            Op::Gather { a: a.0, index: index.to_vec() },
            needs,
        ))
    }

    /// Embedding lookup: out row i = table row ids[i].
    pub fn lookup_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.value(table).dims2("lookup_rows")?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "lookup_rows",
                    index: id,
                    extent: v,
                });
            }
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), d], out),
            Op::LookupRows { table: table.0, ids: ids.to_vec() },
            needs,
        ))
    }

    /// out[0][j] = Σ_i weights[i]·a[i][j]; uniform weights give mean pooling,
    /// zeroed entries mask rows out entirely.
    pub fn weighted_row_sum(&mut self, a: Var, weights: &[f32]) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("weighted_row_sum")?;
        if weights.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_row_sum",
                lhs: vec![m, n],
                rhs: vec![weights.len()],
            });
        }
        let mut acc = vec![0.0f64; n];
        for (row, &w) in self.value(a).data().chunks_exact(n).zip(weights) {
            for (s, &v) in acc.iter_mut().zip(row) {
                *s += w as f64 * v as f64;
            }
        }
        let out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(&[1, n], out),
            Op::WeightedRowSum { a: a.0, weights: weights.to_vec() },
            needs,
        ))
    }

    /// Mean over rows of a rank-2 tensor → [1×d].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, _) = self.value(a).dims2("mean_rows")?;
        let w = 1.0 / m as f32;
        self.weighted_row_sum(a, &vec![w; m])
    }

    /// Sum of all entries → scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total as f32), Op::Sum { a: a.0 }, needs)
    }

    /// Dot product of two equally sized tensors (flattened) → scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let total = linalg::dot_f64(self.value(a).data(), self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::Dot { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// Whole-tensor L2 normalization; errors on a zero-norm input.
    pub fn normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let norm = linalg::l2_norm_f64(self.value(a).data());
        if norm < 1e-30 {
            return Err(TensorError::ZeroNorm);
        }
        let inv = 1.0 / norm;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .map(|&v| (v as f64 * inv) as f32)
            .collect();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(self.value(a).shape(), out),
            Op::Normalize { a: a.0 },
            needs,
        ))
    }

    /// Stack rank-2 tensors of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let (_, width) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (m, n) = self.value(p).dims2("concat_rows")?;
            if n != width {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, width],
                    rhs: vec![m, n],
                });
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
            needs |= self.needs(p);
        }
        Ok(self.push(
            Tensor::from_vec(&[rows, width], out),
            Op::ConcatRows { parts: parts.iter().map(|v| v.0).collect() },
            needs,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let out = linalg::transpose(self.value(a).data(), m, n);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(&[n, m], out),
            Op::Transpose { a: a.0 },
            needs,
        ))
    }

    /// Mean over rows of −log softmax(row)[target]; the softmax is fused and
    /// max-subtracted so large logits cannot overflow.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.value(logits).dims2("cross_entropy_rows")?;
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0f64;
        for (row, &t) in self.value(logits).data().chunks_exact(n).zip(targets) {
            if t >= n {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy_rows",
                    index: t,
                    extent: n,
                });
            }
            let max = row.iter().fold(f32::NEG_INFINITY, |acc, &v| acc.max(v));
            let log_sum: f64 = row
                .iter()
                .map(|&v| ((v - max) as f64).exp())
                .sum::<f64>()
                .ln();
            total += log_sum - (row[t] - max) as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar((total / m as f64) as f32),
            Op::CrossEntropyRows { logits: logits.0, targets: targets.to_vec() },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every leaf with `requires_grad`
    /// reachable from `loss` ends up with ∂loss/∂leaf in its grad slot.
    ///
    /// Propagation runs through a scratch buffer so each node is visited
    /// exactly once per sweep; the sweep's result is then added into the
    /// persistent grad slots, so repeated calls without
    /// [`Graph::zero_grads`] accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut scratch: Vec<Option<Vec<f32>>> = Vec::new();
        scratch.resize_with(loss.0 + 1, || None);
        scratch[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(upstream) = scratch[id].take() else {
                continue;
            };
            self.backward_node(id, &upstream, &mut scratch);
            scratch[id] = Some(upstream);
        }
        for (node, slot) in self.nodes.iter_mut().zip(scratch) {
            if !node.needs_grad {
                continue;
            }
            if let Some(s) = slot {
                match &mut node.grad {
                    Some(g) => {
                        for (gi, c) in g.iter_mut().zip(s) {
                            *gi += c;
                        }
                    }
                    None => node.grad = Some(s),
                }
            }
        }
        Ok(())
    }

    fn value_of(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn needs_of(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn backward_node(&self, id: usize, up: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value_of(a).shape()[0], self.value_of(a).shape()[1]);
                let n = self.value_of(b).shape()[1];
                if self.needs_of(a) {
                    let da = linalg::matmul_a_bt(up, self.value_of(b).data(), m, n, k);
                    add_to(&mut scratch[a], da);
                }
                if self.needs_of(b) {
                    let mut db = vec![0.0; k * n];
                    linalg::matmul_at_b_acc(self.value_of(a).data(), up, &mut db, m, k, n);
                    add_to(&mut scratch[b], db);
                }
            }

            Op::MatmulTransposeB { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value_of(a).shape()[0], self.value_of(a).shape()[1]);
                let n = self.value_of(b).shape()[0];
                if self.needs_of(a) {
                    let da = linalg::matmul(up, self.value_of(b).data(), m, n, k);
                    add_to(&mut scratch[a], da);
                }
                if self.needs_of(b) {
                    let mut db = vec![0.0; n * k];
                    linalg::matmul_at_b_acc(up, self.value_of(a).data(), &mut db, m, n, k);
                    add_to(&mut scratch[b], db);
                }
            }

            Op::Add { a, b } => {
                for &p in &[*a, *b] {
                    if self.needs_of(p) {
                        add_to(&mut scratch[p], up.to_vec());
                    }
                }
            }

            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs_of(a) {
                    add_to(&mut scratch[a], up.to_vec());
                }
                if self.needs_of(b) {
                    add_to(&mut scratch[b], up.iter().map(|v| -v).collect());
                }
            }

            Op::AddRowVector { a, bias } => {
                let (a, bias) = (*a, *bias);
                if self.needs_of(a) {
                    add_to(&mut scratch[a], up.to_vec());
                }
                if self.needs_of(bias) {
                    let n = self.value_of(bias).numel();
                    let mut db = vec![0.0f32; n];
                    for row in up.chunks_exact(n) {
                        for (d, &u) in db.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                    add_to(&mut scratch[bias], db);
                }
            }

            Op::Scale { a, factor } => {
                if self.needs_of(*a) {
                    add_to(&mut scratch[*a], up.iter().map(|v| v * factor).collect());
                }
            }

            Op::Relu { a } => {
                let a = *a;
                if self.needs_of(a) {
                    let da = self
                        .value_of(a)
                        .data()
                        .iter()
                        .zip(up)
                        .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
                        .collect();
                    add_to(&mut scratch[a], da);
                }
            }

            Op::SoftmaxRows { a } => {
                let a = *a;
                if self.needs_of(a) {
                    let n = self.nodes[id].value.shape()[1];
                    let s = self.nodes[id].value.data();
                    let mut da = vec![0.0f32; s.len()];
                    for ((s_row, u_row), d_row) in s
                        .chunks_exact(n)
                        .zip(up.chunks_exact(n))
                        .zip(da.chunks_exact_mut(n))
                    {
                        let dot: f64 = s_row
                            .iter()
                            .zip(u_row)
                            .map(|(&si, &ui)| si as f64 * ui as f64)
                            .sum();
                        for ((d, &si), &ui) in d_row.iter_mut().zip(s_row).zip(u_row) {
                            *d = (si as f64 * (ui as f64 - dot)) as f32;
                        }
                    }
                    add_to(&mut scratch[a], da);
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = self.value_of(gamma).numel();
                let xs = self.value_of(x).data();
                let g = self.value_of(gamma).data();
                let x_needs = self.needs_of(x);
                let gamma_needs = self.needs_of(gamma);
                let beta_needs = self.needs_of(beta);

                let mut dx = vec![0.0f32; xs.len()];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for ((row, u_row), dx_row) in xs
                    .chunks_exact(d)
                    .zip(up.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let (mean, inv_std) = row_stats(row, eps);
                    let xhat: Vec<f64> =
                        row.iter().map(|&v| (v as f64 - mean) * inv_std).collect();
                    if gamma_needs || beta_needs {
                        for i in 0..d {
                            dgamma[i] += (u_row[i] as f64 * xhat[i]) as f32;
                            dbeta[i] += u_row[i];
                        }
                    }
                    if x_needs {
                        let gu: Vec<f64> = u_row
                            .iter()
                            .zip(g)
                            .map(|(&u, &gi)| u as f64 * gi as f64)
                            .collect();
                        let mean_gu: f64 = gu.iter().sum::<f64>() / d as f64;
                        let mean_gu_xhat: f64 =
                            gu.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            dx_row[i] =
                                (inv_std * (gu[i] - mean_gu - xhat[i] * mean_gu_xhat)) as f32;
                        }
                    }
                }
                if x_needs {
                    add_to(&mut scratch[x], dx);
                }
                if gamma_needs {
                    add_to(&mut scratch[gamma], dgamma);
                }
                if beta_needs {
                    add_to(&mut scratch[beta], dbeta);
                }
            }

            Op::Gather { a, index } => {
                let a = *a;
                if self.needs_of(a) {
                    let mut da = vec![0.0f32; self.value_of(a).numel()];
                    for (&src, &u) in index.iter().zip(up) {
                        da[src] += u;
                    }
                    add_to(&mut scratch[a], da);
                }
            }

            Op::LookupRows { table, ids } => {
                let table = *table;
                if self.needs_of(table) {
                    let d = self.value_of(table).shape()[1];
                    let mut dt = vec![0.0f32; self.value_of(table).numel()];
                    for (&id_row, u_row) in ids.iter().zip(up.chunks_exact(d)) {
                        for (dst, &u) in dt[id_row * d..(id_row + 1) * d].iter_mut().zip(u_row) {
                            *dst += u;
                        }
                    }
                    add_to(&mut scratch[table], dt);
                }
            }

            Op::WeightedRowSum { a, weights } => {
                let a = *a;
                if self.needs_of(a) {
                    let n = self.value_of(a).shape()[1];
                    let mut da = vec![0.0f32; self.value_of(a).numel()];
                    for (row, &w) in da.chunks_exact_mut(n).zip(weights) {
                        for (d, &u) in row.iter_mut().zip(up) {
                            *d = w * u;
                        }
                    }
                    add_to(&mut scratch[a], da);
                }
            }

            Op::Sum { a } => {
                let a = *a;
                if self.needs_of(a) {
                    add_to(&mut scratch[a], vec![up[0]; self.value_of(a).numel()]);
                }
            }

            Op::Dot { a, b } => {
                let (a, b) = (*a, *b);
                let u = up[0];
                if self.needs_of(a) {
                    let da = self.value_of(b).data().iter().map(|&v| u * v).collect();
                    add_to(&mut scratch[a], da);
                }
                if self.needs_of(b) {
                    let db = self.value_of(a).data().iter().map(|&v| u * v).collect();
                    add_to(&mut scratch[b], db);
                }
            }

            Op::Normalize { a } => {
                let a = *a;
                if self.needs_of(a) {
                    let y = self.nodes[id].value.data();
                    let norm = linalg::l2_norm_f64(self.value_of(a).data());
                    let dot: f64 = y
                        .iter()
                        .zip(up)
                        .map(|(&yi, &ui)| yi as f64 * ui as f64)
                        .sum();
                    let da = y
                        .iter()
                        .zip(up)
                        .map(|(&yi, &ui)| ((ui as f64 - yi as f64 * dot) / norm) as f32)
                        .collect();
                    add_to(&mut scratch[a], da);
                }
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value_of(p).numel();
                    if self.needs_of(p) {
                        add_to(&mut scratch[p], up[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }

            Op::Transpose { a } => {
                let a = *a;
                if self.needs_of(a) {
                    let (m, n) = (self.nodes[id].value.shape()[0], self.nodes[id].value.shape()[1]);
                    let da = linalg::transpose(up, m, n);
                    add_to(&mut scratch[a], da);
                }
            }

            Op::CrossEntropyRows { logits, targets } => {
                let logits = *logits;
                if self.needs_of(logits) {
                    let n = self.value_of(logits).shape()[1];
                    let m = targets.len();
                    let scale = up[0] as f64 / m as f64;
                    let src = self.value_of(logits).data();
                    let mut da = vec![0.0f32; src.len()];
                    for ((row, &t), d_row) in src
                        .chunks_exact(n)
                        .zip(targets)
                        .zip(da.chunks_exact_mut(n))
                    {
                        let max = row.iter().fold(f32::NEG_INFINITY, |acc, &v| acc.max(v));
                        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        for (i, d) in d_row.iter_mut().enumerate() {
                            let p = exps[i] / total;
                            let delta = if i == t { 1.0 } else { 0.0 };
                            *d = ((p - delta) * scale) as f32;
                        }
                    }
                    add_to(&mut scratch[logits], da);
                }
            }
        }
    }
}

fn add_to(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.len(), contribution.len());
            for (gi, c) in g.iter_mut().zip(contribution) {
                *gi += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Mean and 1/√(σ²+eps) of one vector, accumulated in f64.
fn row_stats(row: &[f32], eps: f32) -> (f64, f64) {
    let d = row.len() as f64;
    let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var: f64 = row
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

/// Central-difference gradient of a scalar-valued function: the independent
/// oracle every backward rule is checked against.
///
/// The quotient divides by the realized span `x₊ − x₋` rather than `2h`:
/// perturbed coordinates are rounded to f32, and the nominal step would
/// otherwise misstate the denominator by up to an ulp of `x`.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, h: f32) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0f32; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let plus_x = orig + h;
        let minus_x = orig - h;
        probe.data_mut()[i] = plus_x;
        let plus = f(&probe);
        probe.data_mut()[i] = minus_x;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out[i] = ((plus - minus) / (plus_x as f64 - minus_x as f64)) as f32;
    }
    Tensor::from_vec(x.shape(), out)
}

/// Largest guarded relative error max_i |a−b| / max(|a|,|b|,floor).
///
/// The floor keeps the comparison meaningful where both gradients sit below
/// the f32 finite-difference noise level.
pub fn max_relative_error(analytic: &[f32], numeric: &[f32], floor: f32) -> f32 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0f32, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_slice_close(actual: &[f32], expected: &[f32], tol: f32) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: got {a}, expected {e} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(Tensor::from_vec(&[2, 1], vec![3.0, 4.0]));
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::from_vec(&[2, 1], vec![5.0, 6.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "unexpected message: {msg}");
    }

    #[test]
    fn matmul_grad_wrt_a_is_ones_times_bt() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = g.constant(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let prod = g.matmul(a, b).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        // d sum(A·B)/dA = ones·Bᵀ: each row is the column sums of Bᵀ rows.
        assert_slice_close(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0], 1e-6);
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 4], vec![2.7; 4]));
        let s = g.softmax_rows(x).unwrap();
        assert_slice_close(g.value(s).data(), &[0.25; 4], 1e-6);
    }

    #[test]
    fn softmax_two_logits_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]));
        let s = g.softmax_rows(x).unwrap();
        assert_slice_close(g.value(s).data(), &[0.26894, 0.73106], 1e-5);
    }

    #[test]
    fn softmax_huge_logit_does_not_overflow() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]));
        let s = g.softmax_rows(x).unwrap();
        let out = g.value(s).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert!(out[1] < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_lie_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = Tensor::randn(&[5, 7], 3.0, &mut rng);
            let mut g = Graph::new();
            let x = g.constant(t);
            let s = g.softmax_rows(x).unwrap();
            for row in g.value(s).data().chunks_exact(7) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn layer_norm_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]));
        let gamma = g.constant(Tensor::filled(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_slice_close(g.value(y).data(), &[-1.22474, 0.0, 1.22474], 1e-4);
    }

    #[test]
    fn layer_norm_constant_vector_collapses_to_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 5], 3.3));
        let gamma = g.constant(Tensor::filled(&[5], 1.0));
        let beta = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_slice_close(g.value(y).data(), &[0.0; 5], 1e-6);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::randn(&[6, 16], 2.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t);
        let gamma = g.constant(Tensor::filled(&[16], 1.0));
        let beta = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gamma, beta, 1e-10).unwrap();
        for row in g.value(y).data().chunks_exact(16) {
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5, "row mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-4, "row std {}", var.sqrt());
        }
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 3], vec![-1.0, 0.0, 2.0]).with_grad());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        // Subgradient at exactly 0 is 0.
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 3], vec![-5.0, -0.1, -2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_of_squared_norm() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).with_grad());
        let loss = g.dot(x, x).unwrap();
        g.backward(loss).unwrap();
        assert_slice_close(g.grad(x).unwrap(), &[2.0, 4.0, 6.0], 1e-6);
    }

    #[test]
    fn backward_of_half_squared_distance_is_residual() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, -1.0, 0.5]).with_grad());
        let t = g.constant(Tensor::from_vec(&[3], vec![0.0, 1.0, 0.5]));
        let d = g.sub(x, t).unwrap();
        let sq = g.dot(d, d).unwrap();
        let loss = g.scale(sq, 0.5);
        g.backward(loss).unwrap();
        assert_slice_close(g.grad(x).unwrap(), &[1.0, -2.0, 0.0], 1e-6);
    }

    #[test]
    fn backward_on_non_scalar_is_a_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]).with_grad());
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(x) must give grad 2 everywhere.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![0.3, -0.7, 2.0]).with_grad());
        let s1 = g.sum(x);
        let s2 = g.sum(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_slice_close(g.grad(x).unwrap(), &[2.0, 2.0, 2.0], 1e-6);
    }

    #[test]
    fn repeated_backward_accumulates_without_reset() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).with_grad());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_slice_close(g.grad(x).unwrap(), &[2.0, 2.0], 1e-6);
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_slice_close(g.grad(x).unwrap(), &[1.0, 1.0], 1e-6);
    }

    #[test]
    fn finite_diff_on_square_function() {
        let x = Tensor::scalar(3.0);
        let grad = finite_diff_gradient(|t| t.item() as f64 * t.item() as f64, &x, 1e-4);
        assert!((grad.item() - 6.0).abs() < 1e-5);
    }

    #[test]
    fn finite_diff_of_sum_sin_is_cos() {
        let x = Tensor::from_vec(&[4], vec![0.0, 0.5, 1.0, -1.2]);
        let grad = finite_diff_gradient(
            |t| t.data().iter().map(|&v| (v as f64).sin()).sum::<f64>(),
            &x,
            1e-3,
        );
        for (g, v) in grad.data().iter().zip(x.data()) {
            assert!((g - v.cos()).abs() < 1e-4);
        }
    }

    // ── Finite-difference checks for every composite the encoders use ──

    /// Runs `build` twice: once as the analytic path, once per FD probe.
    fn check_gradient<F>(build: F, x0: &Tensor, tol: f32)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let mut seed = x0.clone();
        seed.requires_grad = true;
        let x = g.leaf(seed);
        let loss = build(&mut g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        // h near the f32 central-difference optimum (eps^(1/3) ≈ 5e-3): the
        // forward pass quantizes to f32, so a smaller step amplifies rounding
        // noise past the tolerance this check enforces.
        let numeric = finite_diff_gradient(
            |probe| {
                let mut g = Graph::new();
                let x = g.constant(probe.clone());
                let loss = build(&mut g, x);
                g.value(loss).item() as f64
            },
            x0,
            1e-2,
        );
        let err = max_relative_error(&analytic, numeric.data(), 1e-2);
        assert!(err < tol, "gradient mismatch: max relative error {err}");
    }

    #[test]
    fn gradient_check_all_encoder_composites() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for round in 0..20 {
            let x0 = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[6, 5], 0.7, &mut rng);
            let bias = Tensor::randn(&[5], 0.5, &mut rng);
            let gamma = Tensor::randn(&[6], 0.3, &mut rng);
            let beta = Tensor::randn(&[6], 0.3, &mut rng);
            let peer = Tensor::randn(&[4, 6], 1.0, &mut rng);

            // matmul → bias → softmax → weighted sum, plus layer norm, add,
            // scale, mean and a gather (the patch-embedding permutation).
            let w2 = w.clone();
            let b2 = bias.clone();
            check_gradient(
                move |g, x| {
                    let w = g.constant(w2.clone());
                    let b = g.constant(b2.clone());
                    let h = g.matmul(x, w).unwrap();
                    let h = g.add_row_vector(h, b).unwrap();
                    let s = g.softmax_rows(h).unwrap();
                    let pooled = g.weighted_row_sum(s, &[0.4, 0.1, 0.3, 0.2]).unwrap();
                    g.sum(pooled)
                },
                &x0,
                1e-3,
            );

            let ga = gamma.clone();
            let be = beta.clone();
            let pe = peer.clone();
            check_gradient(
                move |g, x| {
                    let gamma = g.constant(ga.clone());
                    let beta = g.constant(be.clone());
                    let peer = g.constant(pe.clone());
                    let summed = g.add(x, peer).unwrap();
                    let normed = g.layer_norm(summed, gamma, beta, 1e-5).unwrap();
                    let scaled = g.scale(normed, 1.7);
                    let pooled = g.mean_rows(scaled).unwrap();
                    let unit = g.normalize(pooled).unwrap();
                    let probe = g.constant(Tensor::filled(&[1, 6], 0.37));
                    g.dot(unit, probe).unwrap()
                },
                &x0,
                1e-3,
            );

            // Gather as used by patch extraction: a fixed permutation.
            let index: Vec<usize> = (0..24).rev().collect();
            check_gradient(
                move |g, x| {
                    let perm = g.gather(x, &index, &[6, 4]).unwrap();
                    let s = g.softmax_rows(perm).unwrap();
                    let t = g.transpose(s).unwrap();
                    g.sum(t)
                },
                &x0,
                1e-3,
            );

            let _ = round;
        }
    }

    #[test]
    fn gradient_check_relu_away_from_kink() {
        // FD probes crossing the kink at 0 say nothing about the backward
        // rule, so sample inputs with |x| well above the probe step.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let raw = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let data: Vec<f32> = raw
                .data()
                .iter()
                .map(|&v| v.signum() * (v.abs() + 0.1))
                .collect();
            let x0 = Tensor::from_vec(&[4, 6], data);
            let probe = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let p2 = probe.clone();
            check_gradient(
                move |g, x| {
                    let r = g.relu(x);
                    let probe = g.constant(p2.clone());
                    g.dot(r, probe).unwrap()
                },
                &x0,
                1e-3,
            );
        }
    }

    #[test]
    fn gradient_check_cross_entropy_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10 {
            let x0 = Tensor::randn(&[3, 4], 0.6, &mut rng);
            let other = Tensor::randn(&[2, 4], 0.6, &mut rng);
            let o2 = other.clone();
            check_gradient(
                move |g, x| {
                    let other = g.constant(o2.clone());
                    let stacked = g.concat_rows(&[x, other]).unwrap();
                    let logits = g.matmul_transpose_b(stacked, stacked).unwrap();
                    let scaled = g.scale(logits, 0.5);
                    g.cross_entropy_rows(scaled, &[0, 1, 2, 3, 4]).unwrap()
                },
                &x0,
                1e-3,
            );
        }
    }

    #[test]
    fn gradient_check_lookup_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table0 = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let table = g.leaf(table0.clone().with_grad());
        let rows = g.lookup_rows(table, &[1, 3, 1]).unwrap();
        let loss = g.sum(rows);
        g.backward(loss).unwrap();
        let analytic = g.grad(table).unwrap().to_vec();

        let numeric = finite_diff_gradient(
            |probe| {
                let mut g = Graph::new();
                let t = g.constant(probe.clone());
                let rows = g.lookup_rows(t, &[1, 3, 1]).unwrap();
                let s = g.sum(rows);
                g.value(s).item() as f64
            },
            &table0,
            1e-3,
        );
        let err = max_relative_error(&analytic, numeric.data(), 1e-2);
        assert!(err < 1e-3, "lookup grad mismatch {err}");
    }

    #[test]
    fn normalize_zero_vector_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.normalize(x), Err(TensorError::ZeroNorm)));
    }

    #[test]
    fn lookup_out_of_vocabulary_errors() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.lookup_rows(table, &[0, 4]),
            Err(TensorError::IndexOutOfBounds { .. })
        ));
    }
}
