//! Building blocks of the forward pass. Every function records onto a caller
//! supplied [`Graph`] and returns the output node.

use serde::{Deserialize, Serialize};

use super::params::{BlockSlots, FfnSlots, ModelSlots};
use super::{ItemCatalog, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Scalar, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dropout is active only in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub(crate) fn dropout<F: Scalar>(g: &mut Graph<F>, x: Var, p: f64, mode: &mut Mode<'_>) -> Var {
    match mode {
        Mode::Train(rng) if p > 0.0 => g.dropout(x, p, rng),
        _ => x,
    }
}

pub fn linear<F: Scalar>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Two-layer ReLU network.
pub fn ffn<F: Scalar>(g: &mut Graph<F>, slots: &FfnSlots<Var>, x: Var) -> Result<Var> {
    let h = linear(g, x, slots.w1, slots.b1)?;
    let h = g.relu(h);
    linear(g, h, slots.w2, slots.b2)
}

/// Routing outcome of the group gate in one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub probs: Vec<f64>,
    pub group: usize,
}

impl GateDecision {
    /// Hard assignment from probabilities; ties go to the lowest index.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let mut group = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[group] {
                group = i;
            }
        }
        Self { probs, group }
    }
}

/// Attention mask combining causality with key validity.
///
/// Query `t` may attend to key `s` iff `s <= t` and `s` is a valid position.
/// A query always sees itself so that padding rows never produce an empty
/// softmax; such rows are never read by valid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(valid: &[bool]) -> Self {
        let t = valid.len();
        let mut allowed = vec![false; t * t];
        for q in 0..t {
            for k in 0..=q {
                allowed[q * t + k] = valid[k] || k == q;
            }
        }
        Self { len: t, allowed }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }
}

/// Per-position concatenation of attribute embeddings plus a learnable
/// positional embedding. Returns `[T, n_attrs * d_model]`.
pub fn embed_sequence<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    slots: &ModelSlots<Var>,
    catalog: &ItemCatalog,
    items: &[u32],
    positions: &[usize],
) -> Result<Var> {
    if items.len() > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence of length {} exceeds max_seq_len {}; truncate before the forward pass",
            items.len(),
            cfg.max_seq_len
        )));
    }
    if items.len() != positions.len() {
        return Err(Error::shape("embed_sequence", &[items.len()], &[positions.len()]));
    }
    let x = embed_items(g, slots, catalog, items)?;
    let pos = g.embedding(slots.pos_emb, positions)?;
    g.add(x, pos)
}

/// Attribute concatenation without positional information, `[len, W]`.
pub fn embed_items<F: Scalar>(
    g: &mut Graph<F>,
    slots: &ModelSlots<Var>,
    catalog: &ItemCatalog,
    items: &[u32],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(slots.item_emb.len());
    for (m, &table) in slots.item_emb.iter().enumerate() {
        let ids = items
            .iter()
            .map(|&it| catalog.attr(it, m))
            .collect::<Result<Vec<_>>>()?;
        parts.push(g.embedding(table, &ids)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts, 1)
}

/// Multi-head causal self-attention with a post-norm residual:
/// `LayerNorm(x + Wo·Attention(x))`.
pub fn attention_block<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    blk: &BlockSlots<Var>,
    x: Var,
    mask: &AttentionMask,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let t = g.shape(x)[0];
    if mask.len() != t {
        return Err(Error::shape("attention mask", g.shape(x), &[mask.len()]));
    }
    let q = linear(g, x, blk.wq, blk.bq)?;
    let k = linear(g, x, blk.wk, blk.bk)?;
    let v = linear(g, x, blk.wv, blk.bv)?;
    let dh = cfg.head_dim();
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());

    let heads = if cfg.n_heads == 1 {
        vec![(q, k, v)]
    } else {
        (0..cfg.n_heads)
            .map(|h| {
                let (a, b) = (h * dh, (h + 1) * dh);
                Ok((g.slice(q, 1, a, b)?, g.slice(k, 1, a, b)?, g.slice(v, 1, a, b)?))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut outs = Vec::with_capacity(heads.len());
    for (qh, kh, vh) in heads {
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let probs = g.masked_softmax(scores, &mask.allowed)?;
        let probs = dropout(g, probs, cfg.dropout, mode);
        outs.push(g.matmul(probs, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    let o = linear(g, merged, blk.wo, blk.bo)?;
    let o = dropout(g, o, cfg.dropout, mode);
    let r = g.add(x, o)?;
    g.layer_norm(r, blk.ln1_gain, blk.ln1_bias, LAYER_NORM_EPS)
}

/// Group gating network: mean-pools the attention output over valid positions,
/// concatenates the user embedding, and applies a two-layer MLP and softmax.
/// Returns the probability node `[1, N]` and the hard decision.
pub fn group_gate<F: Scalar>(
    g: &mut Graph<F>,
    blk: &BlockSlots<Var>,
    attn_out: Var,
    valid: &[bool],
    user_emb: Var,
) -> Result<(Var, GateDecision)> {
    let gate = blk
        .gate
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no group gate".into()))?;
    let pooled = g.mean_pool(attn_out, valid)?;
    let input = g.concat(&[pooled, user_emb], 1)?;
    let logits = ffn(g, gate, input)?;
    let probs = g.softmax(logits, 1)?;
    let values = g
        .value(probs)
        .data()
        .iter()
        .map(|p| p.to_f64().unwrap_or(f64::NAN))
        .collect();
    Ok((probs, GateDecision::from_probs(values)))
}

/// `LayerNorm(a + FFN_u(a) + FFN_g(a))` with `FFN_g` chosen by `group`.
/// Without group FFNs (`group == None`) the block is `LayerNorm(a + FFN_u(a))`.
pub fn dual_ffn_block<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    blk: &BlockSlots<Var>,
    attn_out: Var,
    group: Option<usize>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut branch = ffn(g, &blk.ffn_u, attn_out)?;
    if let Some(i) = group {
        let slots = blk.ffn_g.get(i).ok_or_else(|| {
            Error::Contract(format!(
                "group index {i} out of range for {} group FFNs",
                blk.ffn_g.len()
            ))
        })?;
        let grp = ffn(g, slots, attn_out)?;
        branch = g.add(branch, grp)?;
    }
    let branch = dropout(g, branch, cfg.dropout, mode);
    let r = g.add(attn_out, branch)?;
    g.layer_norm(r, blk.ln2_gain, blk.ln2_bias, LAYER_NORM_EPS)
}
