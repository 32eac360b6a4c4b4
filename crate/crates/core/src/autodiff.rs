//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! it needs for the backward pass. Node ids are assigned in creation order,
//! so walking the tape from the loss down to id 0 is a reverse topological
//! traversal that visits each node once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{as_matrix, dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTiled(Var, Var),
    Sum(Var),
    Mse(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MeanPool {
        x: Var,
        groups: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    StraightThrough {
        x: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Rounding decisions captured from straight-through nodes.
///
/// Replaying a memo turns every straight-through node into the affine
/// surrogate `x ↦ x + (q(x₀) − x₀)` inside the recorded pass-through mask
/// and the recorded constant outside it, which is the function whose exact
/// derivative the straight-through estimator reports.
#[derive(Clone, Debug, Default)]
pub struct RoundingMemo {
    entries: Vec<MemoEntry>,
}

#[derive(Clone, Debug)]
struct MemoEntry {
    input: Vec<f64>,
    output: Vec<f64>,
    mask: Vec<bool>,
}

impl RoundingMemo {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Default)]
enum Rounding {
    #[default]
    Live,
    Record(RoundingMemo),
    Replay {
        memo: RoundingMemo,
        cursor: usize,
    },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    rounding: Rounding,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` if `var` is not one.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records every straight-through rounding decision.
    pub fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            rounding: Rounding::Record(RoundingMemo::default()),
        }
    }

    /// A tape whose straight-through nodes replay `memo` in order.
    pub fn replaying(memo: RoundingMemo) -> Self {
        Self {
            nodes: Vec::new(),
            rounding: Rounding::Replay { memo, cursor: 0 },
        }
    }

    /// Hands back the recorded memo (empty unless built with [`Tape::recording`]).
    pub fn take_memo(&mut self) -> RoundingMemo {
        match std::mem::take(&mut self.rounding) {
            Rounding::Record(memo) | Rounding::Replay { memo, .. } => memo,
            Rounding::Live => RoundingMemo::default(),
        }
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

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[t, m, k]` with `[t, k, n]`, or with `[t, n, k]`
    /// transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (t, m, k, n) = match (&sa[..], &sb[..]) {
            ([t, m, k], [t2, r, c]) if t == t2 => {
                let (kb, n) = if transpose_b { (*c, *r) } else { (*r, *c) };
                if kb != *k {
                    return Err(Error::shape("batch_matmul", &sa, &sb));
                }
                (*t, *m, *k, n)
            }
            _ => return Err(Error::shape("batch_matmul", &sa, &sb)),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; t * m * n];
        for i in 0..t {
            let a_i = &av[i * m * k..(i + 1) * m * k];
            let b_i = &bv[i * k * n..(i + 1) * k * n];
            let o_i = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(a_i, b_i, o_i, m, k, n);
            } else {
                gemm_nn(a_i, b_i, o_i, m, k, n);
            }
        }
        let value = Tensor::new(vec![t, m, n], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch: t,
                transpose_b,
            },
            rg,
        ))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// `a + tile(t)`: `t` is repeated over `a` in row-major order, so a
    /// `[D]` bias broadcasts over `[rows, D]` and an `[N, D]` table over
    /// `[B·N, D]`.
    pub fn add_tiled(&mut self, a: Var, t: Var) -> Result<Var> {
        let (av, tv) = (self.value(a), self.value(t));
        let period = tv.numel();
        if av.numel() % period != 0 || av.last_dim() != tv.last_dim() {
            return Err(Error::shape("add_tiled", av.shape(), tv.shape()));
        }
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tv.data()[i % period])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a, t]);
        Ok(self.push(out, Op::AddTiled(a, t), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(total / av.len() as f64);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let rg = self.needs(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Mean over consecutive row groups: `[groups·n, d] → [groups, d]`.
    pub fn mean_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (rows, d) = as_matrix(self.value(x), "mean_pool")?;
        if groups == 0 || rows % groups != 0 {
            return Err(Error::contract(format!(
                "mean_pool: {rows} rows do not split into {groups} groups"
            )));
        }
        let per = rows / groups;
        let xv = self.value(x).data();
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let acc = &mut out[g * d..(g + 1) * d];
            for r in 0..per {
                let row = &xv[(g * per + r) * d..(g * per + r + 1) * d];
                for (o, v) in acc.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in acc.iter_mut() {
                *o /= per as f64;
            }
        }
        let value = Tensor::new(vec![groups, d], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::MeanPool { x, groups }, rg))
    }

    /// `[B·N, H·Dh] → [B·H, N, Dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (rows, width) = as_matrix(self.value(x), "split_heads")?;
        if rows != batch * tokens || heads == 0 || width % heads != 0 {
            return Err(Error::contract(format!(
                "split_heads: [{rows}, {width}] vs batch {batch}, tokens {tokens}, heads {heads}"
            )));
        }
        let dh = width / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for n in 0..tokens {
                let row = &src[(b * tokens + n) * width..(b * tokens + n + 1) * width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * tokens + n) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, tokens, dh], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`Tape::split_heads`]: `[B·H, N, Dh] → [B·N, H·Dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [bh, tokens, dh] = shape[..] else {
            return Err(Error::contract(format!("merge_heads expects rank 3, got {shape:?}")));
        };
        if bh != batch * heads {
            return Err(Error::contract(format!(
                "merge_heads: leading extent {bh} != {batch}·{heads}"
            )));
        }
        let width = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for n in 0..tokens {
                    let s = ((b * heads + h) * tokens + n) * dh;
                    let d = (b * tokens + n) * width + h * dh;
                    out[d..d + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * tokens, width], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            },
            rg,
        ))
    }

    /// Records a non-differentiable elementwise map whose gradient is passed
    /// through unchanged where `mask` is set and blocked elsewhere.
    ///
    /// `forward` returns the output values and the pass-through mask. On a
    /// replaying tape the recorded decisions are used instead of `forward`.
    pub fn straight_through(
        &mut self,
        x: Var,
        forward: impl FnOnce(&[f64]) -> (Vec<f64>, Vec<bool>),
    ) -> Result<Var> {
        let input = self.nodes[x.0].value.data();
        let (output, mask) = match &mut self.rounding {
            Rounding::Live => forward(input),
            Rounding::Record(memo) => {
                let (output, mask) = forward(input);
                memo.entries.push(MemoEntry {
                    input: input.to_vec(),
                    output: output.clone(),
                    mask: mask.clone(),
                });
                (output, mask)
            }
            Rounding::Replay { memo, cursor } => {
                let entry = memo.entries.get(*cursor).ok_or_else(|| {
                    Error::contract("rounding memo exhausted during replay")
                })?;
                *cursor += 1;
                if entry.input.len() != input.len() {
                    return Err(Error::contract("rounding memo entry size mismatch"));
                }
                let output = input
                    .iter()
                    .zip(&entry.input)
                    .zip(entry.output.iter().zip(&entry.mask))
                    .map(|((&x, &x0), (&q0, &pass))| if pass { q0 + (x - x0) } else { q0 })
                    .collect();
                (output, entry.mask.clone())
            }
        };
        if output.len() != input.len() || mask.len() != input.len() {
            return Err(Error::contract("straight_through forward changed the element count"));
        }
        let value = Tensor::new(self.shape(x).to_vec(), output)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::StraightThrough { x, mask }, rg))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = as_matrix(self.value(logits), "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::contract(format!(
                "cross_entropy: {} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            // `max` would swallow a NaN probability; let it propagate.
            let p = row[label];
            total -= if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE).ln() };
        }
        let out = Tensor::scalar(total / b as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::contract("weighted_sum of no terms"));
        }
        let mut total = 0.0;
        for (i, &(v, w)) in terms.iter().enumerate() {
            let x = self.scalar(v)?;
            total = if i == 0 { w * x } else { total + w * x };
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.needs(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    // ---- backward -----------------------------------------------------------

    /// Backpropagates from a scalar `loss`. Every trainable leaf gets an
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut by_leaf = HashMap::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                by_leaf.insert(Var(id), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                by_leaf
                    .entry(Var(id))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if let Some(da) = self.slot(grads, a) {
                    gemm_nt(g, self.value(b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, b) {
                    gemm_tn(self.value(a).data(), g, db, m, k, n);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                transpose_b,
            } => {
                let (m, k) = (self.shape(a)[1], self.shape(a)[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.slot(grads, a) {
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let b_t = &bv[t * k * n..(t + 1) * k * n];
                        let da_t = &mut da[t * m * k..(t + 1) * m * k];
                        if transpose_b {
                            gemm_nn(g_t, b_t, da_t, m, n, k);
                        } else {
                            gemm_nt(g_t, b_t, da_t, m, n, k);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let a_t = &av[t * m * k..(t + 1) * m * k];
                        let db_t = &mut db[t * k * n..(t + 1) * k * n];
                        if transpose_b {
                            gemm_tn(g_t, a_t, db_t, m, n, k);
                        } else {
                            gemm_tn(a_t, g_t, db_t, m, k, n);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, a) {
                    axpy(d, g, 1.0);
                }
                if let Some(d) = self.slot(grads, b) {
                    axpy(d, g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(d) = self.slot(grads, a) {
                    for ((o, gi), y) in d.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if let Some(d) = self.slot(grads, b) {
                    for ((o, gi), x) in d.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            &Op::Scale(a, factor) => {
                if let Some(d) = self.slot(grads, a) {
                    axpy(d, g, factor);
                }
            }
            &Op::AddTiled(a, t) => {
                if let Some(d) = self.slot(grads, a) {
                    axpy(d, g, 1.0);
                }
                if let Some(d) = self.slot(grads, t) {
                    let period = d.len();
                    for chunk in g.chunks(period) {
                        axpy(d, chunk, 1.0);
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(d) = self.slot(grads, a) {
                    for o in d.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let c = 2.0 * g[0] / av.len() as f64;
                if let Some(d) = self.slot(grads, a) {
                    for ((o, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *o += c * (x - y);
                    }
                }
                if let Some(d) = self.slot(grads, b) {
                    for ((o, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *o -= c * (x - y);
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let dim = node.value.last_dim();
                if let Some(d) = self.slot(grads, x) {
                    for ((dr, yr), gr) in d.chunks_mut(dim).zip(y.chunks(dim)).zip(g.chunks(dim)) {
                        let inner = dot(yr, gr);
                        for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let dim = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((o, gi), h) in dg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * h;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for gr in g.chunks(dim) {
                        axpy(db, gr, 1.0);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; dim];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(dim)
                        .zip(g.chunks(dim))
                        .zip(xhat.chunks(dim))
                        .enumerate()
                    {
                        for j in 0..dim {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
                        let mean_dh = dot(&dxhat, hr) / dim as f64;
                        for j in 0..dim {
                            dr[j] += inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                if let Some(d) = self.slot(grads, x) {
                    for ((o, gi), &v) in d.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_derivative(v);
                    }
                }
            }
            &Op::MeanPool { x, groups } => {
                let d_model = node.value.shape()[1];
                let per = self.shape(x)[0] / groups;
                if let Some(d) = self.slot(grads, x) {
                    let inv = 1.0 / per as f64;
                    for (r, dr) in d.chunks_mut(d_model).enumerate() {
                        let gr = &g[(r / per) * d_model..(r / per + 1) * d_model];
                        axpy(dr, gr, inv);
                    }
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                if let Some(d) = self.slot(grads, x) {
                    let width = self.shape(x)[1];
                    let dh = width / heads;
                    for b in 0..batch {
                        for n in 0..tokens {
                            for h in 0..heads {
                                let s = ((b * heads + h) * tokens + n) * dh;
                                let t = (b * tokens + n) * width + h * dh;
                                axpy(&mut d[t..t + dh], &g[s..s + dh], 1.0);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                if let Some(d) = self.slot(grads, x) {
                    let dh = self.shape(x)[2];
                    let width = heads * dh;
                    for b in 0..batch {
                        for h in 0..heads {
                            for n in 0..tokens {
                                let s = ((b * heads + h) * tokens + n) * dh;
                                let t = (b * tokens + n) * width + h * dh;
                                axpy(&mut d[s..s + dh], &g[t..t + dh], 1.0);
                            }
                        }
                    }
                }
            }
            Op::StraightThrough { x, mask } => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((o, gi), &pass) in d.iter_mut().zip(g).zip(mask) {
                        if pass {
                            *o += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(d) = self.slot(grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { 1.0 } else { 0.0 };
                            d[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(d) = self.slot(grads, v) {
                        d[0] += w * g[0];
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
