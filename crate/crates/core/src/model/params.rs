//! Parameter layout, partition tags, and closed-form parameter counts.
//!
//! Every parameter of a client model carries exactly one [`Partition`]:
//!
//! | partition | parameters |
//! |-----------|------------|
//! | `Private` | `user_emb`, `block{l}.ffn_u.*` |
//! | `Group(l, i)` | `block{l}.ffn_g{i}.*` |
//! | `Global` | everything else: item and positional embeddings, attention, layer norms, gates, prediction MLP |
//!
//! Blocks and groups are numbered from zero.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Private,
    Global,
    Group { block: usize, group: usize },
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Private => write!(f, "PRIVATE"),
            Partition::Global => write!(f, "GLOBAL"),
            Partition::Group { block, group } => write!(f, "GROUP({block},{group})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in `[-b, b]`.
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub partition: Partition,
    init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices of the two linear layers of a feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnSlots<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSlots<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    /// Gating MLP; absent when group FFNs are disabled.
    pub gate: Option<FfnSlots<T>>,
    pub ffn_u: FfnSlots<T>,
    pub ffn_g: Vec<FfnSlots<T>>,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

/// Structured view over the flat parameter list. `T` is a layout index for
/// the template and a graph [`Var`] once bound.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSlots<T> {
    pub item_emb: Vec<T>,
    pub pos_emb: T,
    pub user_emb: T,
    pub blocks: Vec<BlockSlots<T>>,
    pub pred: Vec<(T, T)>,
}

impl<T: Copy> FfnSlots<T> {
    fn map<U>(&self, f: &impl Fn(T) -> U) -> FfnSlots<U> {
        FfnSlots {
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

impl<T: Copy> ModelSlots<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> ModelSlots<U> {
        ModelSlots {
            item_emb: self.item_emb.iter().map(|&t| f(t)).collect(),
            pos_emb: f(self.pos_emb),
            user_emb: f(self.user_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSlots {
                    wq: f(b.wq),
                    bq: f(b.bq),
                    wk: f(b.wk),
                    bk: f(b.bk),
                    wv: f(b.wv),
                    bv: f(b.bv),
                    wo: f(b.wo),
                    bo: f(b.bo),
                    ln1_gain: f(b.ln1_gain),
                    ln1_bias: f(b.ln1_bias),
                    gate: b.gate.as_ref().map(|g| g.map(&f)),
                    ffn_u: b.ffn_u.map(&f),
                    ffn_g: b.ffn_g.iter().map(|g| g.map(&f)).collect(),
                    ln2_gain: f(b.ln2_gain),
                    ln2_bias: f(b.ln2_bias),
                })
                .collect(),
            pred: self.pred.iter().map(|&(w, b)| (f(w), f(b))).collect(),
        }
    }
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, partition: Partition, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            partition,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize, p: Partition) -> (usize, usize) {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let w = self.add(format!("{prefix}.w"), vec![inp, out], p, Init::Uniform(bound));
        let b = self.add(format!("{prefix}.b"), vec![out], p, Init::Zeros);
        (w, b)
    }

    fn ffn(&mut self, prefix: &str, inp: usize, hidden: usize, out: usize, p: Partition) -> FfnSlots<usize> {
        let (w1, b1) = self.linear(&format!("{prefix}.1"), inp, hidden, p);
        let (w2, b2) = self.linear(&format!("{prefix}.2"), hidden, out, p);
        FfnSlots { w1, b1, w2, b2 }
    }
}

const EMBED_INIT: f64 = 0.5;

/// Deterministic parameter list plus the structured index into it.
pub fn layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, ModelSlots<usize>) {
    let d = cfg.d_model;
    let w = cfg.width();
    let mut b = LayoutBuilder { specs: Vec::new() };
    let global = Partition::Global;

    let item_emb = cfg
        .attr_vocab
        .iter()
        .enumerate()
        .map(|(m, &v)| b.add(format!("item_emb.{m}"), vec![v, d], global, Init::Uniform(EMBED_INIT)))
        .collect();
    let pos_emb = b.add("pos_emb".into(), vec![cfg.max_seq_len, w], global, Init::Uniform(EMBED_INIT));
    let user_emb = b.add("user_emb".into(), vec![1, w], Partition::Private, Init::Uniform(EMBED_INIT));

    let blocks = (0..cfg.n_blocks)
        .map(|l| {
            let p = format!("block{l}");
            let (wq, bq) = b.linear(&format!("{p}.attn.q"), w, w, global);
            let (wk, bk) = b.linear(&format!("{p}.attn.k"), w, w, global);
            let (wv, bv) = b.linear(&format!("{p}.attn.v"), w, w, global);
            let (wo, bo) = b.linear(&format!("{p}.attn.o"), w, w, global);
            let ln1_gain = b.add(format!("{p}.ln1.gain"), vec![w], global, Init::Ones);
            let ln1_bias = b.add(format!("{p}.ln1.bias"), vec![w], global, Init::Zeros);
            let gate = cfg
                .group_ffn
                .then(|| b.ffn(&format!("{p}.gate"), 2 * w, cfg.gate_hidden, cfg.n_groups, global));
            let ffn_u = b.ffn(&format!("{p}.ffn_u"), w, cfg.ffn_hidden, w, Partition::Private);
            let ffn_g = if cfg.group_ffn {
                (0..cfg.n_groups)
                    .map(|i| {
                        b.ffn(
                            &format!("{p}.ffn_g{i}"),
                            w,
                            cfg.ffn_hidden,
                            w,
                            Partition::Group { block: l, group: i },
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let ln2_gain = b.add(format!("{p}.ln2.gain"), vec![w], global, Init::Ones);
            let ln2_bias = b.add(format!("{p}.ln2.bias"), vec![w], global, Init::Zeros);
            BlockSlots {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_gain,
                ln1_bias,
                gate,
                ffn_u,
                ffn_g,
                ln2_gain,
                ln2_bias,
            }
        })
        .collect();

    let mut dims = vec![3 * w];
    dims.extend_from_slice(&cfg.pred_hidden);
    dims.push(1);
    let pred = dims
        .windows(2)
        .enumerate()
        .map(|(k, io)| b.linear(&format!("pred.{k}"), io[0], io[1], global))
        .collect();

    (
        b.specs,
        ModelSlots {
            item_emb,
            pos_emb,
            user_emb,
            blocks,
            pred,
        },
    )
}

/// Partition tag of every parameter name, in layout order.
pub fn partition_params(cfg: &ModelConfig) -> Result<Vec<(String, Partition)>> {
    cfg.validate()?;
    Ok(layout(cfg)
        .0
        .into_iter()
        .map(|s| (s.name, s.partition))
        .collect())
}

/// Partition of a single parameter name.
pub fn partition_of(cfg: &ModelConfig, name: &str) -> Result<Partition> {
    layout(cfg)
        .0
        .into_iter()
        .find(|s| s.name == name)
        .map(|s| s.partition)
        .ok_or_else(|| Error::Contract(format!("unknown parameter name {name:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<F> {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor<F>,
}

/// Named, partition-tagged parameters of one client model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
    slots: ModelSlots<usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (specs, slots) = layout(cfg);
        let params = specs
            .into_iter()
            .map(|s| {
                let value = match s.init {
                    Init::Uniform(b) => Tensor::uniform(&s.shape, b, rng),
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::Ones => Tensor::filled(&s.shape, F::one()),
                };
                Param {
                    name: s.name,
                    partition: s.partition,
                    value,
                }
            })
            .collect();
        Ok(Self::from_parts(params, slots))
    }

    fn from_parts(params: Vec<Param<F>>, slots: ModelSlots<usize>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self {
            params,
            index,
            slots,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn slots(&self) -> &ModelSlots<usize> {
        &self.slots
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn by_index(&self, i: usize) -> &Param<F> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<F> {
        &mut self.params[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(move |i| &mut self.params[i].value)
    }

    /// Replaces a parameter value, checking the name and shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter name {name:?}")))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                partition: p.partition,
                value: p.value.cast(),
            })
            .collect();
        ParamSet::from_parts(params, self.slots.clone())
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to `g`, as a constant where `frozen` says so.
    pub fn bind(&self, g: &mut Graph<F>, frozen: impl Fn(&Param<F>) -> bool) -> BoundParams {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if frozen(p) {
                    g.constant(p.value.clone())
                } else {
                    g.leaf(p.value.clone())
                }
            })
            .collect();
        let slots = self.slots.map(|i| vars[i]);
        BoundParams { vars, slots }
    }
}

/// Graph handles for a bound [`ParamSet`], in layout order.
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub slots: ModelSlots<Var>,
}

/// Parameter totals per partition class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub private: usize,
    pub global: usize,
    pub group: usize,
    pub total: usize,
}

/// Closed-form parameter count of one client model.
///
/// With `W = d_model * n_attrs`, `H = ffn_hidden`, `G = gate_hidden`,
/// `S = max_seq_len`, `L` blocks and `N` groups:
///
/// ```text
/// ffn     = 2·W·H + H + W
/// private = W + L·ffn
/// group   = L·N·ffn                                  (0 without group FFNs)
/// global  = d·Σ vocab + S·W
///         + L·(4·(W² + W) + 4·W + gate)
///         + Σ_k (in_k·out_k + out_k)                 over the prediction MLP
/// gate    = 2·W·G + G + G·N + N                      (0 without group FFNs)
/// ```
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let w = cfg.width();
    let (h, g, l, n) = (cfg.ffn_hidden, cfg.gate_hidden, cfg.n_blocks, cfg.n_groups);
    let ffn = 2 * w * h + h + w;
    let gate = if cfg.group_ffn {
        2 * w * g + g + g * n + n
    } else {
        0
    };
    let mut dims = vec![3 * w];
    dims.extend_from_slice(&cfg.pred_hidden);
    dims.push(1);
    let pred: usize = dims.windows(2).map(|io| io[0] * io[1] + io[1]).sum();
    let embeddings = cfg.d_model * cfg.attr_vocab.iter().sum::<usize>() + cfg.max_seq_len * w;

    let private = w + l * ffn;
    let group = if cfg.group_ffn { l * n * ffn } else { 0 };
    let global = embeddings + l * (4 * (w * w + w) + 4 * w + gate) + pred;
    Ok(ParamCounts {
        private,
        global,
        group,
        total: private + global + group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instantiated_counts(cfg: &ModelConfig) -> ParamCounts {
        let ps = ParamSet::<f32>::init(cfg, &mut Rng::new(0)).unwrap();
        let mut c = ParamCounts::default();
        for p in ps.iter() {
            let n = p.value.len();
            match p.partition {
                Partition::Private => c.private += n,
                Partition::Global => c.global += n,
                Partition::Group { .. } => c.group += n,
            }
            c.total += n;
        }
        c
    }

    #[test]
    fn closed_form_matches_instantiation() {
        for cfg in [ModelConfig::default(), ModelConfig::kuairand_like()] {
            assert_eq!(count_params(&cfg).unwrap(), instantiated_counts(&cfg));
        }
        let ablation = ModelConfig {
            group_ffn: false,
            ..ModelConfig::default()
        };
        assert_eq!(count_params(&ablation).unwrap(), instantiated_counts(&ablation));
    }

    #[test]
    fn reference_config_is_about_sixty_thousand() {
        let c = count_params(&ModelConfig::kuairand_like()).unwrap();
        assert_eq!(c.total, 60_649);
    }

    #[test]
    fn group_count_is_multiplicative() {
        let base = ModelConfig::default();
        let one = count_params(&ModelConfig { n_groups: 1, ..base.clone() }).unwrap();
        for n in 1..6 {
            let c = count_params(&ModelConfig { n_groups: n, ..base.clone() }).unwrap();
            assert_eq!(c.group, n * one.group);
        }
    }

    #[test]
    fn partition_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(partition_of(&cfg, "user_emb").unwrap(), Partition::Private);
        assert_eq!(partition_of(&cfg, "item_emb.0").unwrap(), Partition::Global);
        assert_eq!(
            partition_of(&cfg, "block1.ffn_g3.2.w").unwrap(),
            Partition::Group { block: 1, group: 3 }
        );
        assert!(matches!(partition_of(&cfg, "nope"), Err(Error::Contract(_))));
    }

    #[test]
    fn private_names_are_user_emb_and_ffn_u() {
        let cfg = ModelConfig::default();
        for (name, part) in partition_params(&cfg).unwrap() {
            let expect_private = name == "user_emb" || name.contains(".ffn_u.");
            assert_eq!(part == Partition::Private, expect_private, "{name}");
        }
    }

    #[test]
    fn every_block_group_pair_present() {
        let cfg = ModelConfig {
            n_blocks: 3,
            n_groups: 5,
            ..ModelConfig::default()
        };
        let parts = partition_params(&cfg).unwrap();
        for block in 0..3 {
            for group in 0..5 {
                assert!(parts
                    .iter()
                    .any(|(_, p)| *p == Partition::Group { block, group }));
            }
        }
    }
}
