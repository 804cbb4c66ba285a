//! Attention and transformer-block building blocks.

use super::BoundParams;
use crate::error::Result;
use crate::tensor::{Graph, Var};

pub(crate) fn linear(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.matmul_t(x, w)?;
    g.add_bias(y, b)
}

pub(crate) fn norm(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{name}.g"))?;
    let bias = p.var(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias)
}

pub(crate) struct Attention {
    /// `(B, nq, d)` after the output projection.
    pub out: Var,
    /// `(B, H, nq, dh)` attention-weighted values, before the output projection.
    pub context: Var,
    /// `(B, H, nq, nk)` scaled dot products before masking and softmax.
    pub scores: Var,
    /// `(B, H, nq, nk)` attention weights.
    pub weights: Var,
}

/// `(B, n, d)` → `(B·H, n, dh)`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let x = g.reshape(x, &[b, n, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, dh])
}

/// Multi-head scaled dot-product attention of `query` over `kv`.
///
/// `key_mask` has one flag per `(batch, key)`; `false` keys are excluded.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    p: &BoundParams,
    name: &str,
    query: Var,
    kv: Var,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<Attention> {
    let qs = g.shape(query).to_vec();
    let (b, nq, d) = (qs[0], qs[1], qs[2]);
    let nk = g.shape(kv)[1];
    let dh = d / heads;

    let q = linear(g, p, &format!("{name}.q"), query)?;
    let k = linear(g, p, &format!("{name}.k"), kv)?;
    let v = linear(g, p, &format!("{name}.v"), kv)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;

    let raw = g.matmul_t(q, k)?;
    let raw = g.scale(raw, 1.0 / (dh as f64).sqrt())?;
    let weights = match key_mask {
        Some(mask) => g.softmax_masked(raw, mask, heads * nq)?,
        None => g.softmax(raw)?,
    };
    let ctx = g.matmul(weights, v)?;

    let context = g.reshape(ctx, &[b, heads, nq, dh])?;
    let merged = g.permute(context, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[b, nq, d])?;
    let out = linear(g, p, &format!("{name}.o"), merged)?;
    let scores = g.reshape(raw, &[b, heads, nq, nk])?;
    let weights = g.reshape(weights, &[b, heads, nq, nk])?;
    Ok(Attention {
        out,
        context,
        scores,
        weights,
    })
}

/// Pre-norm residual block:
/// `Ŝ = S + MHA(LN(S))`, `out = Ŝ + MLP(LN(Ŝ))`.
pub(crate) fn transformer_block(
    g: &mut Graph,
    p: &BoundParams,
    name: &str,
    x: Var,
    mask: Option<&[bool]>,
    heads: usize,
) -> Result<Var> {
    let h = norm(g, p, &format!("{name}.ln1"), x)?;
    let att = multi_head_attention(g, p, &format!("{name}.attn"), h, h, mask, heads)?;
    let x = g.add(x, att.out)?;
    let h = norm(g, p, &format!("{name}.ln2"), x)?;
    let h = linear(g, p, &format!("{name}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{name}.mlp.fc2"), h)?;
    g.add(x, h)
}
