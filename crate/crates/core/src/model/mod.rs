//! The client model: attribute-concatenated item embeddings, causal attention
//! blocks with a group gate and summed user/group FFNs, and an MLP head that
//! scores one candidate item.

mod config;
pub mod layers;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

pub use config::{Backbone, ModelConfig};
pub use layers::{AttentionMask, GateDecision, Mode};
pub use params::{
    count_params, layout, partition_of, partition_params, BoundParams, ModelSlots, Param,
    ParamCounts, ParamSet, Partition,
};

/// Attribute values of every item. Attribute 0 is the item id itself; the
/// remaining attributes are looked up in per-attribute columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    n_items: usize,
    columns: Vec<Vec<u32>>,
    vocab: Vec<usize>,
}

impl ItemCatalog {
    pub fn ids_only(n_items: usize) -> Self {
        Self {
            n_items,
            columns: Vec::new(),
            vocab: vec![n_items],
        }
    }

    /// `columns[m][item]` is the value of extra attribute `m + 1`.
    pub fn new(n_items: usize, columns: Vec<Vec<u32>>, extra_vocab: Vec<usize>) -> Result<Self> {
        if columns.len() != extra_vocab.len() {
            return Err(Error::shape("item catalog", &[columns.len()], &[extra_vocab.len()]));
        }
        for (col, &v) in columns.iter().zip(&extra_vocab) {
            if col.len() != n_items {
                return Err(Error::shape("item catalog column", &[n_items], &[col.len()]));
            }
            if let Some(&bad) = col.iter().find(|&&a| a as usize >= v) {
                return Err(Error::Index {
                    what: "attribute vocabulary",
                    index: bad as usize,
                    size: v,
                });
            }
        }
        let mut vocab = vec![n_items];
        vocab.extend(extra_vocab);
        Ok(Self {
            n_items,
            columns,
            vocab,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Vocabulary sizes in attribute order, suitable for `ModelConfig::attr_vocab`.
    pub fn vocab(&self) -> &[usize] {
        &self.vocab
    }

    pub fn attr(&self, item: u32, m: usize) -> Result<usize> {
        let i = item as usize;
        if i >= self.n_items {
            return Err(Error::Index {
                what: "item catalog",
                index: i,
                size: self.n_items,
            });
        }
        match m {
            0 => Ok(i),
            _ => self
                .columns
                .get(m - 1)
                .map(|c| c[i] as usize)
                .ok_or(Error::Index {
                    what: "item attribute",
                    index: m,
                    size: self.vocab.len(),
                }),
        }
    }
}

/// One scoring request: a (possibly left-padded) history and a candidate.
#[derive(Clone, Copy, Debug)]
pub struct SequenceInput<'a> {
    pub history: &'a [u32],
    /// `true` at real positions, `false` at padding.
    pub mask: &'a [bool],
    pub candidate: u32,
}

pub struct BlockGate {
    pub probs: Var,
    pub decision: GateDecision,
}

pub struct ForwardOutput {
    /// Pre-sigmoid click logit, shape `[1, 1]`.
    pub logit: Var,
    /// One entry per block; empty when group FFNs are disabled.
    pub gates: Vec<BlockGate>,
}

/// Full forward pass for one request.
///
/// Leading padding is dropped before the graph is built; positional ids keep
/// the padded slot index, so the result equals running the masked padded
/// sequence.
pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    slots: &ModelSlots<Var>,
    catalog: &ItemCatalog,
    input: SequenceInput<'_>,
    mode: &mut Mode<'_>,
) -> Result<ForwardOutput> {
    if input.history.len() != input.mask.len() {
        return Err(Error::shape(
            "sequence mask",
            &[input.history.len()],
            &[input.mask.len()],
        ));
    }
    if input.history.len() > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence of length {} exceeds max_seq_len {}",
            input.history.len(),
            cfg.max_seq_len
        )));
    }
    let first = input
        .mask
        .iter()
        .position(|&m| m)
        .ok_or_else(|| Error::DegenerateInput("empty interaction history".into()))?;
    let last = input.mask.iter().rposition(|&m| m).unwrap_or(first);
    let items = &input.history[first..];
    let valid = &input.mask[first..];
    let positions: Vec<usize> = (first..input.history.len()).collect();

    let x = layers::embed_sequence(g, cfg, slots, catalog, items, &positions)?;
    let mut x = layers::dropout(g, x, cfg.dropout, mode);
    let mask = AttentionMask::causal(valid);
    let mut gates = Vec::with_capacity(cfg.n_blocks);
    for blk in &slots.blocks {
        let a = layers::attention_block(g, cfg, blk, x, &mask, mode)?;
        let group = if cfg.group_ffn {
            let (probs, decision) = layers::group_gate(g, blk, a, valid, slots.user_emb)?;
            let i = decision.group;
            gates.push(BlockGate { probs, decision });
            Some(i)
        } else {
            None
        };
        x = layers::dual_ffn_block(g, cfg, blk, a, group, mode)?;
    }

    let row = last - first;
    let x_last = g.slice(x, 0, row, row + 1)?;
    let cand = layers::embed_items(g, slots, catalog, &[input.candidate])?;
    let mut h = g.concat(&[x_last, slots.user_emb, cand], 1)?;
    let n_layers = slots.pred.len();
    for (k, &(w, b)) in slots.pred.iter().enumerate() {
        h = layers::linear(g, h, w, b)?;
        if k + 1 < n_layers {
            h = g.relu(h);
        }
    }
    Ok(ForwardOutput { logit: h, gates })
}

/// Eval-mode score of one request.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logit: f64,
    pub prob: f64,
    pub gates: Vec<GateDecision>,
}

pub fn predict<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    catalog: &ItemCatalog,
    input: SequenceInput<'_>,
) -> Result<Prediction> {
    Ok(predict_many(cfg, params, catalog, [input])?.remove(0))
}

/// Scores several requests against one binding of the parameters.
pub fn predict_many<'a, F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    catalog: &ItemCatalog,
    inputs: impl IntoIterator<Item = SequenceInput<'a>>,
) -> Result<Vec<Prediction>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| true);
    inputs
        .into_iter()
        .map(|input| {
            let out = forward(&mut g, cfg, &bound.slots, catalog, input, &mut Mode::Eval)?;
            let logit = g.value(out.logit).item().to_f64().unwrap_or(f64::NAN);
            Ok(Prediction {
                logit,
                prob: crate::loss::sigmoid(logit),
                gates: out.gates.into_iter().map(|b| b.decision).collect(),
            })
        })
        .collect()
}
