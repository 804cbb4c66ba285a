//! Teacher/student architecture.
//!
//! Both networks share one layout: a question encoder (token + position
//! embeddings, layer norm, `M` transformer blocks), an image encoder
//! (`u_j = (proj(r_j) + proj(b_j)) / 2` followed by `N` blocks), `L`
//! cross-modality layers and a two-layer sigmoid answer head. A forward pass
//! returns [`Taps`]: the per-head `[CLS]` contexts and raw `[CLS]`→object
//! scores of every cross-modality layer alongside the answer probabilities.

mod checkpoint;
mod config;
mod layers;
mod params;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    read_checkpoint, read_checkpoint_bytes, write_checkpoint, write_checkpoint_bytes, MAGIC,
};
pub use config::ModelConfig;
pub use params::{BoundParams, ModelParams, ParamGroup};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Reserved token ids.
pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;

/// Tokenized questions, `(batch, max_len)`, with `[CLS]` at position 0.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub langs: Vec<String>,
    pub batch: usize,
    pub max_len: usize,
}

impl QuestionBatch {
    /// Lays out token-id sequences as `[CLS] t1 .. tn [PAD]..`, truncating to
    /// `max_len - 1` tokens.
    pub fn from_sequences(seqs: &[Vec<usize>], langs: Vec<String>, max_len: usize) -> Result<Self> {
        if seqs.is_empty() || langs.len() != seqs.len() || max_len == 0 {
            return Err(Error::Data(
                "question batch needs one language per sequence".into(),
            ));
        }
        let mut ids = Vec::with_capacity(seqs.len() * max_len);
        let mut mask = Vec::with_capacity(seqs.len() * max_len);
        for seq in seqs {
            let take = seq.len().min(max_len - 1);
            ids.push(CLS_ID);
            mask.push(true);
            ids.extend_from_slice(&seq[..take]);
            mask.extend(std::iter::repeat_n(true, take));
            ids.extend(std::iter::repeat_n(PAD_ID, max_len - 1 - take));
            mask.extend(std::iter::repeat_n(false, max_len - 1 - take));
        }
        Ok(QuestionBatch {
            ids,
            mask,
            langs,
            batch: seqs.len(),
            max_len,
        })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.batch * self.max_len;
        if self.max_len != cfg.max_len || self.ids.len() != n || self.mask.len() != n {
            return Err(Error::shape(
                "question_batch",
                &[self.batch, self.max_len],
                &[cfg.max_len],
            ));
        }
        for b in 0..self.batch {
            if self.ids[b * self.max_len] != CLS_ID || !self.mask[b * self.max_len] {
                return Err(Error::Data(format!("row {b} does not start with [CLS]")));
            }
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} >= vocab size {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Number of unmasked tokens in row `b`.
    pub fn length(&self, b: usize) -> usize {
        self.mask[b * self.max_len..(b + 1) * self.max_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

/// RoI features `(batch, k, d_r)` and boxes `(batch, k, 4)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBatch {
    pub roi: Tensor,
    pub bbox: Tensor,
}

impl SceneBatch {
    pub fn batch(&self) -> usize {
        self.roi.shape()[0]
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let b = self.roi.shape().first().copied().unwrap_or(0);
        if self.roi.shape() != [b, cfg.objects, cfg.roi_dim] {
            return Err(Error::shape(
                "scene_batch.roi",
                self.roi.shape(),
                &[b, cfg.objects, cfg.roi_dim],
            ));
        }
        if self.bbox.shape() != [b, cfg.objects, cfg.box_dim] {
            return Err(Error::shape(
                "scene_batch.bbox",
                self.bbox.shape(),
                &[b, cfg.objects, cfg.box_dim],
            ));
        }
        if self.bbox.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(
                "bounding-box coordinates must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Cross-modality layer and head, both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TapKey {
    pub layer: usize,
    pub head: usize,
}

impl TapKey {
    pub fn new(layer: usize, head: usize) -> Self {
        TapKey { layer, head }
    }
}

/// Distillation taps recorded on a graph.
#[derive(Clone, Debug)]
pub struct Taps {
    /// `(B, d/H)` per-head `[CLS]` context of the question-side cross attention.
    pub cls: BTreeMap<TapKey, Var>,
    /// Per layer, `(B, H, k)` raw `[CLS]`→object scores before softmax.
    pub z: Vec<Var>,
    /// Per layer, `(B, H, k)` `[CLS]`→object attention weights.
    pub object_attention: Vec<Var>,
    /// `(B, d)` `[CLS]` output of the question encoder.
    pub question_cls: Var,
    /// `(B, d)` question-side `[CLS]` output of the last cross layer.
    pub final_cls: Var,
    /// `(B, |A|)` independent answer probabilities.
    pub answer_probs: Var,
}

/// Detached copy of [`Taps`].
#[derive(Clone, Debug, PartialEq)]
pub struct TapValues {
    pub cls: BTreeMap<TapKey, Tensor>,
    /// `(B, L, H, k)`
    pub z_logits: Tensor,
    pub question_cls: Tensor,
    pub final_cls: Tensor,
    pub answer_probs: Tensor,
}

impl Taps {
    pub fn values(&self, g: &Graph) -> Result<TapValues> {
        let cls = self
            .cls
            .iter()
            .map(|(k, &v)| (*k, g.value(v).clone()))
            .collect();
        let layers: Vec<&Tensor> = self.z.iter().map(|&v| g.value(v)).collect();
        // (L, B, H, k) -> (B, L, H, k)
        let stacked = Tensor::stack(&layers)?;
        let s = stacked.shape().to_vec();
        let (l, b, h, k) = (s[0], s[1], s[2], s[3]);
        let mut data = vec![0.0; stacked.numel()];
        for li in 0..l {
            for bi in 0..b {
                let src = &stacked.data()[(li * b + bi) * h * k..(li * b + bi + 1) * h * k];
                let dst = (bi * l + li) * h * k;
                data[dst..dst + h * k].copy_from_slice(src);
            }
        }
        Ok(TapValues {
            cls,
            z_logits: Tensor::new(vec![b, l, h, k], data)?,
            question_cls: g.value(self.question_cls).clone(),
            final_cls: g.value(self.final_cls).clone(),
            answer_probs: g.value(self.answer_probs).clone(),
        })
    }

    /// `(B, k)` raw scores of one tap.
    pub fn z_tap(&self, g: &mut Graph, key: TapKey) -> Result<Var> {
        let layer = *self
            .z
            .get(key.layer.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("no cross layer {}", key.layer)))?;
        let s = g.shape(layer).to_vec();
        if key.head == 0 || key.head > s[1] {
            return Err(Error::Config(format!("no attention head {}", key.head)));
        }
        let one = g.slice(layer, 1, key.head - 1, 1)?;
        g.reshape(one, &[s[0], s[2]])
    }
}

impl TapValues {
    pub fn batch(&self) -> usize {
        self.answer_probs.shape()[0]
    }

    /// Values for item `i` of the batch, keeping a leading batch axis of 1.
    pub fn item(&self, i: usize) -> TapValues {
        let keep = |t: &Tensor| {
            let r = t.row(i);
            let mut shape = vec![1];
            shape.extend_from_slice(&t.shape()[1..]);
            r.reshape(&shape).expect("row keeps element count")
        };
        TapValues {
            cls: self.cls.iter().map(|(k, t)| (*k, keep(t))).collect(),
            z_logits: keep(&self.z_logits),
            question_cls: keep(&self.question_cls),
            final_cls: keep(&self.final_cls),
            answer_probs: keep(&self.answer_probs),
        }
    }

    /// Concatenates single-item values along the batch axis.
    pub fn concat(items: &[&TapValues]) -> Result<TapValues> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("no tap values".into()))?;
        let cat = |get: &dyn Fn(&TapValues) -> &Tensor| -> Result<Tensor> {
            let mut data = Vec::new();
            let mut rows = 0;
            let tail = get(first).shape()[1..].to_vec();
            for it in items {
                let t = get(it);
                if t.shape()[1..] != tail[..] {
                    return Err(Error::shape("tap_concat", t.shape(), &tail));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor::new(shape, data)
        };
        let mut cls = BTreeMap::new();
        for key in first.cls.keys() {
            let t = cat(&|v: &TapValues| &v.cls[key])?;
            cls.insert(*key, t);
        }
        Ok(TapValues {
            cls,
            z_logits: cat(&|v| &v.z_logits)?,
            question_cls: cat(&|v| &v.question_cls)?,
            final_cls: cat(&|v| &v.final_cls)?,
            answer_probs: cat(&|v| &v.answer_probs)?,
        })
    }

    /// Registers these values as constants on `g`.
    pub fn to_taps(&self, g: &mut Graph) -> Result<Taps> {
        let mut cls = BTreeMap::new();
        for (k, t) in &self.cls {
            cls.insert(*k, g.constant(t.clone())?);
        }
        let s = self.z_logits.shape().to_vec();
        let (b, l, h, k) = (s[0], s[1], s[2], s[3]);
        let mut z = Vec::with_capacity(l);
        for li in 0..l {
            let mut data = Vec::with_capacity(b * h * k);
            for bi in 0..b {
                let off = (bi * l + li) * h * k;
                data.extend_from_slice(&self.z_logits.data()[off..off + h * k]);
            }
            z.push(g.constant(Tensor::new(vec![b, h, k], data)?)?);
        }
        Ok(Taps {
            cls,
            object_attention: Vec::new(),
            z,
            question_cls: g.constant(self.question_cls.clone())?,
            final_cls: g.constant(self.final_cls.clone())?,
            answer_probs: g.constant(self.answer_probs.clone())?,
        })
    }
}

/// Runs one pre-norm transformer block. `s` is `(len, d)` or `(B, len, d)`;
/// `mask` flags the valid positions of each row.
pub fn transformer_block(
    g: &mut Graph,
    p: &BoundParams,
    name: &str,
    s: Var,
    mask: Option<&[bool]>,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    match shape.len() {
        2 => {
            if let Some(m) = mask {
                if m.len() != shape[0] {
                    return Err(Error::shape("transformer_block.mask", &shape, &[m.len()]));
                }
            }
            let x = g.reshape(s, &[1, shape[0], shape[1]])?;
            let y = layers::transformer_block(g, p, name, x, mask, heads)?;
            g.reshape(y, &shape)
        }
        3 => layers::transformer_block(g, p, name, s, mask, heads),
        _ => Err(Error::shape("transformer_block", &shape, &[])),
    }
}

/// Question encoder: `H = Block^M(LN(tok_emb + pos_emb))`, `(B, max_len, d)`.
pub fn encode_question(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    q: &QuestionBatch,
) -> Result<Var> {
    q.validate(cfg)?;
    let (b, n) = (q.batch, q.max_len);
    let tok = g.embedding(p.var("lang.tok_emb")?, &q.ids, &[b, n])?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let pos = g.embedding(p.var("lang.pos_emb")?, &positions, &[b, n])?;
    let x = g.add(tok, pos)?;
    let mut h = layers::norm(g, p, "lang.emb_ln", x)?;
    for i in 0..cfg.lang_layers {
        h = layers::transformer_block(g, p, &format!("lang.{i}"), h, Some(&q.mask), cfg.heads)?;
    }
    Ok(h)
}

/// Image encoder: `u_j = (f_j + p_j) / 2`, then `N` unmasked blocks, `(B, k, d)`.
pub fn encode_image(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    s: &SceneBatch,
) -> Result<Var> {
    s.validate(cfg)?;
    let roi = g.constant(s.roi.clone())?;
    let bbox = g.constant(s.bbox.clone())?;
    let f = layers::linear(g, p, "img.roi", roi)?;
    let pos = layers::linear(g, p, "img.box", bbox)?;
    let sum = g.add(f, pos)?;
    let mut u = g.scale(sum, 0.5)?;
    for i in 0..cfg.image_layers {
        u = layers::transformer_block(g, p, &format!("img.{i}"), u, None, cfg.heads)?;
    }
    Ok(u)
}

/// Output of the cross-modality encoder.
pub struct CrossModal {
    pub question: Var,
    pub image: Var,
    pub cls: BTreeMap<TapKey, Var>,
    pub z: Vec<Var>,
    pub object_attention: Vec<Var>,
}

/// `L` cross-modality layers. Each layer computes both attention directions
/// from the previous layer's outputs, then one block per modality.
pub fn cross_modal_encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    h: Var,
    u: Var,
    mask: &[bool],
) -> Result<CrossModal> {
    let hs = g.shape(h).to_vec();
    let us = g.shape(u).to_vec();
    if hs.len() != 3
        || us.len() != 3
        || hs[0] != us[0]
        || hs[2] != cfg.hidden
        || us[2] != cfg.hidden
    {
        return Err(Error::shape("cross_modal_encode", &hs, &us));
    }
    if mask.len() != hs[0] * hs[1] {
        return Err(Error::shape("cross_modal_encode.mask", &hs, &[mask.len()]));
    }
    if cfg.cross_layers == 0 {
        return Err(Error::Config("cross-modality encoder needs L >= 1".into()));
    }
    let (b, k, heads, dh) = (hs[0], us[1], cfg.heads, cfg.head_dim());
    let (mut h, mut u) = (h, u);
    let mut cls = BTreeMap::new();
    let mut z = Vec::with_capacity(cfg.cross_layers);
    let mut object_attention = Vec::with_capacity(cfg.cross_layers);
    for l in 0..cfg.cross_layers {
        let q2i = format!("cross.{l}.q2i");
        let hq = layers::norm(g, p, &format!("{q2i}.ln_q"), h)?;
        let ukv = layers::norm(g, p, &format!("{q2i}.ln_kv"), u)?;
        let to_image = layers::multi_head_attention(g, p, &q2i, hq, ukv, None, heads)?;

        let i2q = format!("cross.{l}.i2q");
        let uq = layers::norm(g, p, &format!("{i2q}.ln_q"), u)?;
        let hkv = layers::norm(g, p, &format!("{i2q}.ln_kv"), h)?;
        let to_question = layers::multi_head_attention(g, p, &i2q, uq, hkv, Some(mask), heads)?;

        // [CLS] query row of every head.
        let ctx0 = g.slice(to_image.context, 2, 0, 1)?;
        for j in 0..heads {
            let one = g.slice(ctx0, 1, j, 1)?;
            let one = g.reshape(one, &[b, dh])?;
            cls.insert(TapKey::new(l + 1, j + 1), one);
        }
        let z0 = g.slice(to_image.scores, 2, 0, 1)?;
        z.push(g.reshape(z0, &[b, heads, k])?);
        let a0 = g.slice(to_image.weights, 2, 0, 1)?;
        object_attention.push(g.reshape(a0, &[b, heads, k])?);

        let h_mid = g.add(h, to_image.out)?;
        let u_mid = g.add(u, to_question.out)?;
        h = layers::transformer_block(
            g,
            p,
            &format!("cross.{l}.qblock"),
            h_mid,
            Some(mask),
            heads,
        )?;
        u = layers::transformer_block(g, p, &format!("cross.{l}.iblock"), u_mid, None, heads)?;
    }
    Ok(CrossModal {
        question: h,
        image: u,
        cls,
        z,
        object_attention,
    })
}

/// `P = gelu(W_P·cls + c_P)`, `p_i = σ(W_i·P + c_i)`.
pub fn predict_answer(g: &mut Graph, p: &BoundParams, final_cls: Var) -> Result<Var> {
    let hidden = layers::linear(g, p, "head.wp", final_cls)?;
    let hidden = g.gelu(hidden)?;
    let logits = layers::linear(g, p, "head.out", hidden)?;
    g.sigmoid(logits)
}

/// Full forward pass.
pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    q: &QuestionBatch,
    s: &SceneBatch,
) -> Result<Taps> {
    if q.batch != s.batch() {
        return Err(Error::shape("forward", &[q.batch], &[s.batch()]));
    }
    let h = encode_question(g, cfg, p, q)?;
    let q_first = g.slice(h, 1, 0, 1)?;
    let question_cls = g.reshape(q_first, &[q.batch, cfg.hidden])?;
    let u = encode_image(g, cfg, p, s)?;
    let cm = cross_modal_encode(g, cfg, p, h, u, &q.mask)?;
    let first = g.slice(cm.question, 1, 0, 1)?;
    let final_cls = g.reshape(first, &[q.batch, cfg.hidden])?;
    let answer_probs = predict_answer(g, p, final_cls)?;
    Ok(Taps {
        cls: cm.cls,
        z: cm.z,
        object_attention: cm.object_attention,
        question_cls,
        final_cls,
        answer_probs,
    })
}

/// Forward pass with every parameter frozen; returns detached values.
pub fn forward_frozen(
    cfg: &ModelConfig,
    params: &ModelParams,
    q: &QuestionBatch,
    s: &SceneBatch,
) -> Result<TapValues> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g)?;
    let taps = forward(&mut g, cfg, &p, q, s)?;
    taps.values(&g)
}
