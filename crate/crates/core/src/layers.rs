//! Transformer building blocks shared by the visual tokenizer and the
//! multiway encoder: multi-head attention, GeLU feed-forward, layer norm,
//! and the plain pre-norm block.
//!
//! Parameter structs follow one convention: `tensors()` lists fields in a
//! fixed order, `bind_from` consumes graph vars in the same order, and
//! `bind` creates the leaves. Training and gradient checking both lean on
//! that ordering.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Additive pre-softmax penalty for padded keys; exp(-1e30) underflows to
/// exactly 0, so padded positions get weight 0 and contribute nothing.
const PAD_PENALTY: f64 = -1e30;

pub const INIT_STD: f64 = 0.02;

// ── layer norm ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[d]).with_grad(),
            beta: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: vars.next().unwrap(),
            beta: vars.next().unwrap(),
        }
    }

    pub fn names(prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.gamma"), format!("{prefix}.beta")]
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, p: &BoundLayerNorm) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta, LN_EPS)
}

// ── attention ───────────────────────────────────────────────────────────

/// Projection-only attention parameters. A key bias would shift every
/// score in a row uniformly, which softmax cancels, so biases stay out.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

pub struct BoundAttention {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttentionParams {
    pub fn init(d: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            wq: Tensor::randn(&[d, d], std, rng).with_grad(),
            wk: Tensor::randn(&[d, d], std, rng).with_grad(),
            wv: Tensor::randn(&[d, d], std, rng).with_grad(),
            wo: Tensor::randn(&[d, d], std, rng).with_grad(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    pub fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundAttention {
        BoundAttention {
            wq: vars.next().unwrap(),
            wk: vars.next().unwrap(),
            wv: vars.next().unwrap(),
            wo: vars.next().unwrap(),
        }
    }

    pub fn names(prefix: &str) -> Vec<String> {
        ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|f| format!("{prefix}.{f}"))
            .collect()
    }
}

/// Bidirectional scaled dot-product multi-head attention over one sequence.
/// `pad_mask[j] == true` removes position j from every key set.
pub fn attention(
    g: &mut Graph,
    x: Var,
    p: &BoundAttention,
    n_heads: usize,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (t, d) = (shape[0], shape[1]);
    if d % n_heads != 0 {
        return Err(crate::error::Error::Config(format!(
            "d_model {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;

    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;

    let pad_bias: Option<Vec<f64>> = pad_mask.map(|mask| {
        debug_assert_eq!(mask.len(), t);
        let mut bias = vec![0.0; t * t];
        for (j, &is_pad) in mask.iter().enumerate() {
            if is_pad {
                for row in 0..t {
                    bias[row * t + j] = PAD_PENALTY;
                }
            }
        }
        bias
    });

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt)?;
        let mut scores = g.scale(raw, 1.0 / (dh as f64).sqrt());
        if let Some(bias) = &pad_bias {
            scores = g.add_const(scores, bias.clone());
        }
        let weights = g.softmax(scores, 1)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let ctx = g.concat_cols(&heads);
    g.matmul(ctx, p.wo)
}

// ── feed-forward ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct BoundFfn {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnParams {
    pub fn init(d: usize, d_ff: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        FfnParams {
            w1: Tensor::randn(&[d, d_ff], std, rng).with_grad(),
            b1: Tensor::zeros(&[d_ff]).with_grad(),
            w2: Tensor::randn(&[d_ff, d], std, rng).with_grad(),
            b2: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundFfn {
        BoundFfn {
            w1: vars.next().unwrap(),
            b1: vars.next().unwrap(),
            w2: vars.next().unwrap(),
            b2: vars.next().unwrap(),
        }
    }

    pub fn names(prefix: &str) -> Vec<String> {
        ["w1", "b1", "w2", "b2"]
            .iter()
            .map(|f| format!("{prefix}.{f}"))
            .collect()
    }
}

pub fn ffn(g: &mut Graph, x: Var, p: &BoundFfn) -> Result<Var> {
    let h0 = g.matmul(x, p.w1)?;
    let h1 = g.add_row_broadcast(h0, p.b1);
    let h2 = g.gelu(h1);
    let out = g.matmul(h2, p.w2)?;
    Ok(g.add_row_broadcast(out, p.b2))
}

// ── plain pre-norm block (visual tokenizer encoder/decoder) ─────────────

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

pub struct BoundBlock {
    pub ln1: BoundLayerNorm,
    pub attn: BoundAttention,
    pub ln2: BoundLayerNorm,
    pub ffn: BoundFfn,
}

impl BlockParams {
    pub fn init(d: usize, d_ff: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            ln1: LayerNormParams::init(d),
            attn: AttentionParams::init(d, std, rng),
            ln2: LayerNormParams::init(d),
            ffn: FfnParams::init(d, d_ff, std, rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.ln1.tensors();
        t.extend(self.attn.tensors());
        t.extend(self.ln2.tensors());
        t.extend(self.ffn.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.ln1.tensors_mut();
        t.extend(self.attn.tensors_mut());
        t.extend(self.ln2.tensors_mut());
        t.extend(self.ffn.tensors_mut());
        t
    }

    pub fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundBlock {
        BoundBlock {
            ln1: self.ln1.bind_from(vars),
            attn: self.attn.bind_from(vars),
            ln2: self.ln2.bind_from(vars),
            ffn: self.ffn.bind_from(vars),
        }
    }

    pub fn names(prefix: &str) -> Vec<String> {
        let mut n = LayerNormParams::names(&format!("{prefix}.ln1"));
        n.extend(AttentionParams::names(&format!("{prefix}.attn")));
        n.extend(LayerNormParams::names(&format!("{prefix}.ln2")));
        n.extend(FfnParams::names(&format!("{prefix}.ffn")));
        n
    }
}

/// Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x)).
pub fn plain_block(
    g: &mut Graph,
    x: Var,
    b: &BoundBlock,
    n_heads: usize,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let normed = layer_norm(g, x, &b.ln1)?;
    let a = attention(g, normed, &b.attn, n_heads, pad_mask)?;
    let x1 = g.add(x, a);
    let normed2 = layer_norm(g, x1, &b.ln2)?;
    let f = ffn(g, normed2, &b.ffn)?;
    Ok(g.add(x1, f))
}

/// Bind a flat list of tensors as graph leaves, in order.
pub fn bind_all(g: &mut Graph, tensors: &[&Tensor]) -> Vec<Var> {
    tensors.iter().map(|t| g.leaf(t)).collect()
}
