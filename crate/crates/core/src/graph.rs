//! Reverse-mode autodiff over tensor-valued nodes.
//!
//! A [`Graph`] is a single-use tape: leaves are created from tensors, ops
//! append nodes, [`Graph::backward`] walks the tape in reverse and sums
//! gradients into each node. One graph is mutated by exactly one thread;
//! values are plain `f64` buffers so identical inputs replay bit-identically.

use crate::error::{Error, Result};
use crate::tensor::{matmul_data, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Forward copy, backward identity. Used to probe gradient flow on a
    /// single path.
    Identity {
        src: usize,
    },
    /// Forward copy, backward dropped.
    StopGrad,
    /// Forward value replaced by detached data, backward identity into `src`.
    StraightThrough {
        src: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    /// `a[n,d] + b[d]` per row.
    AddRowBroadcast {
        a: usize,
        b: usize,
    },
    /// Elementwise add of a constant buffer (attention masks). The buffer
    /// only shapes the forward value; backward is pass-through.
    AddConst {
        a: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    /// Elementwise multiply by a constant buffer (dropout / row masks).
    MulConst {
        a: usize,
        c: Vec<f64>,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Gelu {
        a: usize,
    },
    SoftmaxRows {
        a: usize,
        d: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        d: usize,
        eps: f64,
    },
    L2NormRows {
        a: usize,
        d: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
        d: usize,
    },
    ScatterRows {
        src: usize,
        ids: Vec<usize>,
        d: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
        d: usize,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>, // (node, width)
        rows: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        len: usize,
        full: usize,
    },
    /// Σ_i cross-entropy(logits_i, target_i), log-sum-exp stabilized.
    CrossEntropySum {
        logits: usize,
        targets: Vec<usize>,
        d: usize,
    },
    /// Σ a ∘ c for a constant buffer c.
    DotConstSum {
        a: usize,
        c: Vec<f64>,
    },
    /// Σ (a − c)² for a constant buffer c.
    SqDistConstSum {
        a: usize,
        c: Vec<f64>,
    },
    Sum {
        a: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GeLU, x·Φ(x) with Φ the standard normal CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        let d = *n.shape.last().expect("node has no axes");
        (n.value.len() / d, d)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn leaf_data(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape, data)
    }

    /// Accumulate this graph's gradient at `v` into a parameter tensor.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) {
        param.accumulate_grad(&self.nodes[v.0].grad);
    }

    // ── ops ─────────────────────────────────────────────────────────────

    pub fn identity(&mut self, src: Var) -> Var {
        let value = self.nodes[src.0].value.clone();
        let shape = self.nodes[src.0].shape.clone();
        self.push(Op::Identity { src: src.0 }, shape, value)
    }

    pub fn stop_grad(&mut self, src: Var) -> Var {
        let value = self.nodes[src.0].value.clone();
        let shape = self.nodes[src.0].shape.clone();
        self.push(Op::StopGrad, shape, value)
    }

    /// Forward the detached `replacement` buffer, backward identity to `src`.
    pub fn straight_through(&mut self, src: Var, replacement: Vec<f64>) -> Var {
        debug_assert_eq!(replacement.len(), self.nodes[src.0].value.len());
        let shape = self.nodes[src.0].shape.clone();
        self.push(Op::StraightThrough { src: src.0 }, shape, replacement)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_data(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        Ok(self.push(
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            vec![m, n],
            value,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (rows, cols) = self.rows_cols(a);
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; src.len()];
        for i in 0..rows {
            for j in 0..cols {
                value[j * rows + i] = src[i * cols + j];
            }
        }
        self.push(
            Op::Transpose {
                a: a.0,
                rows,
                cols,
            },
            vec![cols, rows],
            value,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add { a: a.0, b: b.0 }, shape, value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Sub { a: a.0, b: b.0 }, shape, value)
    }

    /// `a[n,d] + b[d]` per row (bias add).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (rows, d) = self.rows_cols(a);
        debug_assert_eq!(self.nodes[b.0].value.len(), d);
        let mut value = self.nodes[a.0].value.clone();
        for r in 0..rows {
            for c in 0..d {
                value[r * d + c] += self.nodes[b.0].value[c];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::AddRowBroadcast { a: a.0, b: b.0 }, shape, value)
    }

    pub fn add_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.len(), c.len());
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&c)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::AddConst { a: a.0 }, shape, value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Mul { a: a.0, b: b.0 }, shape, value)
    }

    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.len(), c.len());
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&c)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::MulConst { a: a.0, c }, shape, value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Scale { a: a.0, c }, shape, value)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Gelu { a: a.0 }, shape, value)
    }

    /// Softmax along `axis` of a 1-D or 2-D node, max-subtraction stabilized.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.nodes[a.0].shape.len();
        if axis >= rank.max(1) {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for rank {rank}"
            )));
        }
        if rank == 2 && axis == 0 {
            let t = self.transpose(a);
            let s = self.softmax_rows(t);
            return Ok(self.transpose(s));
        }
        Ok(self.softmax_rows(a))
    }

    fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, d) = self.rows_cols(a);
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                value[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                value[r * d + j] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::SoftmaxRows { a: a.0, d }, shape, value)
    }

    /// Per-row layer norm over the last axis, variance floored by `eps`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if self.nodes[gamma.0].value.len() != d || self.nodes[beta.0].value.len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let mut value = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &self.nodes[x.0].value[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) / denom;
                value[r * d + j] =
                    self.nodes[gamma.0].value[j] * xhat + self.nodes[beta.0].value[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                d,
                eps,
            },
            shape,
            value,
        ))
    }

    /// ℓ2-normalize each row; rows with norm < 1e-12 map to zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (rows, d) = self.rows_cols(a);
        let mut value = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &self.nodes[a.0].value[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= 1e-12 {
                for j in 0..d {
                    value[r * d + j] = row[j] / norm;
                }
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::L2NormRows { a: a.0, d }, shape, value)
    }

    /// `out[i] = table[ids[i]]` (embedding lookup; ids may repeat).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.rows_cols(table);
        for &id in ids {
            if id >= rows {
                return Err(Error::Range {
                    what: "gather_rows table",
                    index: id,
                    size: rows,
                });
            }
        }
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            value.extend_from_slice(&self.nodes[table.0].value[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
                d,
            },
            vec![ids.len(), d],
            value,
        ))
    }

    /// Place `src` rows into a zero matrix of `out_rows` rows; ids distinct.
    pub fn scatter_rows(&mut self, src: Var, ids: &[usize], out_rows: usize) -> Result<Var> {
        let (rows, d) = self.rows_cols(src);
        if rows != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: vec![rows, d],
                rhs: vec![ids.len()],
            });
        }
        let mut value = vec![0.0; out_rows * d];
        for (j, &id) in ids.iter().enumerate() {
            if id >= out_rows {
                return Err(Error::Range {
                    what: "scatter_rows output",
                    index: id,
                    size: out_rows,
                });
            }
            value[id * d..(id + 1) * d]
                .copy_from_slice(&self.nodes[src.0].value[j * d..(j + 1) * d]);
        }
        Ok(self.push(
            Op::ScatterRows {
                src: src.0,
                ids: ids.to_vec(),
                d,
            },
            vec![out_rows, d],
            value,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.rows_cols(parts[0]).1;
        let mut value = Vec::new();
        for &p in parts {
            debug_assert_eq!(self.rows_cols(p).1, d);
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let rows = value.len() / d;
        self.push(
            Op::ConcatRows {
                parts: parts.iter().map(|v| v.0).collect(),
                d,
            },
            vec![rows, d],
            value,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.rows_cols(parts[0]).0;
        let widths: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| {
                debug_assert_eq!(self.rows_cols(p).0, rows);
                (p.0, self.rows_cols(p).1)
            })
            .collect();
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut value = vec![0.0; rows * total];
        let mut off = 0;
        for &(node, w) in &widths {
            for r in 0..rows {
                value[r * total + off..r * total + off + w]
                    .copy_from_slice(&self.nodes[node].value[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(Op::ConcatCols { parts: widths, rows }, vec![rows, total], value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, full) = self.rows_cols(a);
        debug_assert!(start + len <= full);
        let mut value = vec![0.0; rows * len];
        for r in 0..rows {
            value[r * len..(r + 1) * len].copy_from_slice(
                &self.nodes[a.0].value[r * full + start..r * full + start + len],
            );
        }
        self.push(
            Op::SliceCols {
                a: a.0,
                start,
                len,
                full,
            },
            vec![rows, len],
            value,
        )
    }

    /// Σ_i CE(logits_i, targets_i); pair with [`Graph::scale`] for a mean.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, d) = self.rows_cols(logits);
        if rows != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_sum",
                lhs: vec![rows, d],
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= d {
                return Err(Error::Range {
                    what: "cross_entropy target",
                    index: t,
                    size: d,
                });
            }
            let row = &self.nodes[logits.0].value[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        Ok(self.push(
            Op::CrossEntropySum {
                logits: logits.0,
                targets: targets.to_vec(),
                d,
            },
            vec![1],
            vec![total],
        ))
    }

    /// Σ a ∘ c (weighted sum against a constant buffer).
    pub fn dot_const_sum(&mut self, a: Var, c: Vec<f64>) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.len(), c.len());
        let total: f64 = self.nodes[a.0].value.iter().zip(&c).map(|(x, y)| x * y).sum();
        self.push(Op::DotConstSum { a: a.0, c }, vec![1], vec![total])
    }

    /// Σ (a − c)² against a constant buffer.
    pub fn sq_dist_const_sum(&mut self, a: Var, c: Vec<f64>) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.len(), c.len());
        let total: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&c)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Op::SqDistConstSum { a: a.0, c }, vec![1], vec![total])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum { a: a.0 }, vec![1], vec![total])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Seed d(loss)=1 at a scalar node and sweep the tape in reverse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            // Split off the current node so parents can be mutated.
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Identity { src } | Op::StraightThrough { src } => {
                    for (g, d) in before[*src].grad.iter_mut().zip(&node.grad) {
                        *g += d;
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    // dA += dC·Bᵀ ; dB += Aᵀ·dC
                    let (m, k, n) = (*m, *k, *n);
                    let dc = &node.grad;
                    let (pa, pb) = (*a, *b);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dc[i * n + j] * before[pb].value[p * n + j];
                            }
                            before[pa].grad[i * k + p] += s;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += before[pa].value[i * k + p] * dc[i * n + j];
                            }
                            before[pb].grad[p * n + j] += s;
                        }
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            before[*a].grad[i * cols + j] += node.grad[j * rows + i];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (i, d) in node.grad.iter().enumerate() {
                        before[*a].grad[i] += d;
                    }
                    for (i, d) in node.grad.iter().enumerate() {
                        before[*b].grad[i] += d;
                    }
                }
                Op::Sub { a, b } => {
                    for (i, d) in node.grad.iter().enumerate() {
                        before[*a].grad[i] += d;
                        before[*b].grad[i] -= d;
                    }
                }
                Op::AddRowBroadcast { a, b } => {
                    let d = before[*b].value.len();
                    for (i, g) in node.grad.iter().enumerate() {
                        before[*a].grad[i] += g;
                        before[*b].grad[i % d] += g;
                    }
                }
                Op::AddConst { a } => {
                    for (i, d) in node.grad.iter().enumerate() {
                        before[*a].grad[i] += d;
                    }
                }
                Op::Mul { a, b } => {
                    for (i, d) in node.grad.iter().enumerate() {
                        before[*a].grad[i] += d * before[*b].value[i];
                    }
                    for (i, d) in node.grad.iter().enumerate() {
                        before[*b].grad[i] += d * before[*a].value[i];
                    }
                }
                Op::MulConst { a, c } => {
                    for (i, d) in node.grad.iter().enumerate() {
                        before[*a].grad[i] += d * c[i];
                    }
                }
                Op::Scale { a, c } => {
                    for (i, d) in node.grad.iter().enumerate() {
                        before[*a].grad[i] += d * c;
                    }
                }
                Op::Gelu { a } => {
                    for (i, d) in node.grad.iter().enumerate() {
                        let x = before[*a].value[i];
                        before[*a].grad[i] += d * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                }
                Op::SoftmaxRows { a, d } => {
                    let d = *d;
                    let rows = node.value.len() / d;
                    for r in 0..rows {
                        let y = &node.value[r * d..(r + 1) * d];
                        let dy = &node.grad[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(dy).map(|(yi, di)| yi * di).sum();
                        for j in 0..d {
                            before[*a].grad[r * d + j] += y[j] * (dy[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    d,
                    eps,
                } => {
                    let d = *d;
                    let rows = node.value.len() / d;
                    for r in 0..rows {
                        let xr = &before[*x].value[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let denom = (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) / denom).collect();
                        let dy = &node.grad[r * d..(r + 1) * d];
                        let g: Vec<f64> = (0..d)
                            .map(|j| dy[j] * before[*gamma].value[j])
                            .collect();
                        let m1 = g.iter().sum::<f64>() / d as f64;
                        let m2 = g
                            .iter()
                            .zip(&xhat)
                            .map(|(gi, xi)| gi * xi)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            before[*x].grad[r * d + j] += (g[j] - m1 - xhat[j] * m2) / denom;
                            before[*gamma].grad[j] += dy[j] * xhat[j];
                            before[*beta].grad[j] += dy[j];
                        }
                    }
                }
                Op::L2NormRows { a, d } => {
                    let d = *d;
                    let rows = node.value.len() / d;
                    for r in 0..rows {
                        let v = &before[*a].value[r * d..(r + 1) * d];
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm < 1e-12 {
                            continue; // zero-row convention: zero gradient
                        }
                        let dy = &node.grad[r * d..(r + 1) * d];
                        let vdot: f64 = v.iter().zip(dy).map(|(vi, di)| vi * di).sum();
                        let n3 = norm * norm * norm;
                        for j in 0..d {
                            before[*a].grad[r * d + j] += dy[j] / norm - v[j] * vdot / n3;
                        }
                    }
                }
                Op::GatherRows { table, ids, d } => {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..*d {
                            before[*table].grad[id * d + j] += node.grad[i * d + j];
                        }
                    }
                }
                Op::ScatterRows { src, ids, d } => {
                    for (j, &id) in ids.iter().enumerate() {
                        for c in 0..*d {
                            before[*src].grad[j * d + c] += node.grad[id * d + c];
                        }
                    }
                }
                Op::ConcatRows { parts, d } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = before[p].value.len();
                        for i in 0..len {
                            before[p].grad[i] += node.grad[off + i];
                        }
                        off += len;
                        debug_assert_eq!(len % d, 0);
                    }
                }
                Op::ConcatCols { parts, rows } => {
                    let total: usize = parts.iter().map(|(_, w)| w).sum();
                    let mut off = 0;
                    for &(p, w) in parts {
                        for r in 0..*rows {
                            for c in 0..w {
                                before[p].grad[r * w + c] += node.grad[r * total + off + c];
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols {
                    a,
                    start,
                    len,
                    full,
                } => {
                    let rows = node.value.len() / len;
                    for r in 0..rows {
                        for c in 0..*len {
                            before[*a].grad[r * full + start + c] += node.grad[r * len + c];
                        }
                    }
                }
                Op::CrossEntropySum { logits, targets, d } => {
                    let dout = node.grad[0];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &before[*logits].value[r * d..(r + 1) * d];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..*d {
                            let p = exps[j] / sum;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            before[*logits].grad[r * d + j] += dout * (p - onehot);
                        }
                    }
                }
                Op::DotConstSum { a, c } => {
                    let dout = node.grad[0];
                    for (i, ci) in c.iter().enumerate() {
                        before[*a].grad[i] += dout * ci;
                    }
                }
                Op::SqDistConstSum { a, c } => {
                    let dout = node.grad[0];
                    for (i, ci) in c.iter().enumerate() {
                        before[*a].grad[i] += dout * 2.0 * (before[*a].value[i] - ci);
                    }
                }
                Op::Sum { a } => {
                    let dout = node.grad[0];
                    for g in before[*a].grad.iter_mut() {
                        *g += dout;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.leaf_data(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[0.0, 0.0]);
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);

        let y = leaf(&mut g, &[2], &[1000.0, 0.0]);
        let sy = g.softmax(y, 0).unwrap();
        assert!(g.value(sy)[0] > 1.0 - 1e-12);
        assert!(g.value(sy)[1] < 1e-12);
        assert!(g.value(sy).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_hand_logs() {
        let mut g = Graph::new();
        let x = leaf(
            &mut g,
            &[3],
            &[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()],
        );
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        assert!((v[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((v[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((v[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[0.3, -1.2, 4.0, 2.0, 2.0, 2.0]);
        let s = g.softmax(x, 1).unwrap();
        for r in 0..2 {
            let sum: f64 = g.value(s)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(g.value(s)[r * 3..(r + 1) * 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_constant_rows_zero_before_affine() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], &[5.0, 5.0, 5.0, -2.0, -2.0, -2.0]);
        let gamma = leaf(&mut g, &[3], &[1.0, 1.0, 1.0]);
        let beta = leaf(&mut g, &[3], &[0.0, 0.0, 0.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2], &[1.0, -1.0]);
        let gamma = leaf(&mut g, &[2], &[1.0, 1.0]);
        let beta = leaf(&mut g, &[2], &[0.0, 0.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-6);
        assert!((g.value(y)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_beta_shifts_mean() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2], &[3.0, 7.0]);
        let gamma = leaf(&mut g, &[2], &[1.0, 1.0]);
        let beta = leaf(&mut g, &[2], &[5.0, 5.0]);
        let y = g.layer_norm(x, gamma, beta, 1e-9).unwrap();
        let mean: f64 = g.value(y).iter().sum::<f64>() / 2.0;
        assert!((mean - 5.0).abs() < 1e-9);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn square_gradient_at_three() {
        // f(x) = x², f'(3) = 6
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1], &[3.0]);
        let y = g.mul(x, x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!((g.grad(x)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1], &[3.0]);
        let frozen = g.stop_grad(x);
        let y = g.mul(frozen, frozen);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x)[0], 0.0);
        assert_eq!(g.value(frozen), &[3.0]);
    }

    #[test]
    fn straight_through_copies_gradient_bitwise() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[0.3, -0.7]);
        let probe = g.identity(x);
        let st = g.straight_through(probe, vec![9.0, 9.0]);
        let w = leaf(&mut g, &[2], &[1.5, -2.5]);
        let y = g.mul(st, w);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.value(st), &[9.0, 9.0]);
        for (a, b) in g.grad(probe).iter().zip(g.grad(st)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn matmul_chain_associativity() {
        let mut rng = crate::rng::stream(3, "assoc");
        for _ in 0..10 {
            let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
            let b = Tensor::randn(&[4, 4], 1.0, &mut rng);
            let c = Tensor::randn(&[4, 4], 1.0, &mut rng);
            let mut g = Graph::new();
            let (va, vb, vc) = (g.leaf(&a), g.leaf(&b), g.leaf(&c));
            let ab = g.matmul(va, vb).unwrap();
            let ab_c = g.matmul(ab, vc).unwrap();
            let bc = g.matmul(vb, vc).unwrap();
            let a_bc = g.matmul(va, bc).unwrap();
            for (x, y) in g.value(ab_c).iter().zip(g.value(a_bc)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_seed_bit_identical_graph() {
        let run = || {
            let mut rng = crate::rng::stream(11, "det");
            let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let mut g = Graph::new();
            let (va, vb) = (g.leaf(&a), g.leaf(&b));
            let m = g.matmul(va, vb).unwrap();
            let s = g.softmax(m, 1).unwrap();
            let l = g.sum(s);
            g.backward(l).unwrap();
            (
                g.value(s).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                g.grad(va).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let logits = leaf(&mut g, &[2, 5], &[0.0; 10]);
        let ce = g.cross_entropy_sum(logits, &[1, 3]).unwrap();
        let mean = g.scalar(ce) / 2.0;
        assert!((mean - 5.0f64.ln()).abs() < 1e-12);
    }
}
