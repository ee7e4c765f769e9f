use serde::{Deserialize, Serialize};

use super::{Delta, FederationConfig, Optimizer, UploadPayload};
use crate::data::{Sample, UserSequences};
use crate::error::{Error, Result};
use crate::loss::{balance_loss, batch_mean_probs, bce_loss, local_loss, GroupProportions};
use crate::model::{forward, predict_many, ItemCatalog, Mode, ModelConfig, Param, ParamSet, Partition};
use crate::tensor::optim::{adam_step, sgd_step, AdamConfig, AdamState};
use crate::tensor::{Graph, Rng};

const TRAIN_STREAM: u64 = 0x54_52_41_49;

/// Random stream a client trains with in a given round.
pub fn client_rng(seed: u64, round: usize, user: u32) -> Rng {
    Rng::stream(seed, &[TRAIN_STREAM, round as u64, user as u64])
}

/// Local optimizer memory. Never leaves the client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerState {
    Sgd,
    /// One moment pair per parameter tensor, in layout order.
    Adam(Vec<AdamState>),
}

impl OptimizerState {
    pub fn new(kind: Optimizer) -> Self {
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam => OptimizerState::Adam(Vec::new()),
        }
    }
}

/// Everything one client keeps between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub user: u32,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// User embedding and user FFNs.
    pub private: Vec<Param<f32>>,
    pub optimizer: OptimizerState,
    /// Group per block from the client's latest round.
    pub last_gates: Vec<usize>,
}

impl ClientState {
    /// Builds a client from its sequences. Impressions without any prior
    /// click cannot be scored and are dropped.
    pub fn new(seqs: UserSequences, init: &ParamSet<f32>, optimizer: Optimizer) -> Self {
        let keep = |v: Vec<Sample>| v.into_iter().filter(Sample::has_history).collect();
        Self {
            user: seqs.user,
            train: keep(seqs.train),
            val: keep(seqs.val),
            test: keep(seqs.test),
            private: init
                .iter()
                .filter(|p| p.partition == Partition::Private)
                .cloned()
                .collect(),
            optimizer: OptimizerState::new(optimizer),
            last_gates: Vec::new(),
        }
    }

    /// The client's full model: shared values from `snapshot`, private ones
    /// from local state.
    pub fn model(&self, snapshot: &ParamSet<f32>) -> Result<ParamSet<f32>> {
        let mut params = snapshot.clone();
        for p in &self.private {
            params.set(&p.name, p.value.clone())?;
        }
        Ok(params)
    }

    fn keep_private(&mut self, params: &ParamSet<f32>) {
        for p in &mut self.private {
            p.value = params.get(&p.name).expect("private name").clone();
        }
    }
}

/// Summary of one call to [`local_train`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStats {
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_balance: f64,
    /// Argmax of the batch-mean routing distribution of the last batch.
    pub assignments: Vec<usize>,
    pub mean_probs: Vec<Vec<f64>>,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `N · Σ f · p` on plain numbers.
pub(crate) fn balance_value(f: &GroupProportions, probs: &[Vec<f64>]) -> f64 {
    let n = f.n_groups() as f64;
    n * f
        .rows()
        .iter()
        .zip(probs)
        .map(|(fr, pr)| fr.iter().zip(pr).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
}

/// Eval-mode batch-mean routing over `samples`, per block.
pub fn probe_routing(
    cfg: &ModelConfig,
    catalog: &ItemCatalog,
    params: &ParamSet<f32>,
    samples: &[Sample],
) -> Result<Option<Vec<Vec<f64>>>> {
    if samples.is_empty() || !cfg.group_ffn {
        return Ok(None);
    }
    let preds = predict_many(cfg, params, catalog, samples.iter().map(Sample::input))?;
    let mut mean = vec![vec![0.0; cfg.n_groups]; cfg.n_blocks];
    for p in &preds {
        for (row, gate) in mean.iter_mut().zip(&p.gates) {
            for (m, &q) in row.iter_mut().zip(&gate.probs) {
                *m += q;
            }
        }
    }
    let n = preds.len() as f64;
    mean.iter_mut().flatten().for_each(|m| *m /= n);
    Ok(Some(mean))
}

fn is_gate(p: &Param<f32>) -> bool {
    p.name.contains(".gate.")
}

/// Runs `hyper.local_epochs` of minibatch training on `samples`, updating
/// `params` in place. Used by the federation and usable on its own as the
/// reference it is compared against.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    cfg: &ModelConfig,
    catalog: &ItemCatalog,
    hyper: &FederationConfig,
    f: &GroupProportions,
    params: &mut ParamSet<f32>,
    samples: &[Sample],
    optimizer: &mut OptimizerState,
    rng: &mut Rng,
) -> Result<LocalStats> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut steps, mut loss_sum, mut bal_sum) = (0usize, 0.0, 0.0);
    let mut last_probs: Option<Vec<Vec<f64>>> = None;
    let freeze_gate = hyper.freeze_gate;

    for _ in 0..hyper.local_epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(hyper.batch_size) {
            let mut g: Graph<f32> = Graph::new();
            let bound = params.bind(&mut g, |p| freeze_gate && is_gate(p));
            let mut rec = Vec::with_capacity(batch.len());
            let mut probs = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &samples[i];
                let out = forward(&mut g, cfg, &bound.slots, catalog, s.input(), &mut Mode::Train(rng))?;
                rec.push(bce_loss(&mut g, out.logit, s.label)?);
                probs.push(out.gates.iter().map(|b| b.probs).collect::<Vec<_>>());
            }
            let mut bal = Vec::new();
            if cfg.group_ffn {
                let means = batch_mean_probs(&mut g, &probs)?;
                bal.push(balance_loss(&mut g, &means, f)?);
                last_probs = Some(
                    means
                        .iter()
                        .map(|&m| g.value(m).data().iter().map(|&v| v as f64).collect())
                        .collect(),
                );
            }
            let loss = local_loss(&mut g, &rec, &bal, hyper.alpha)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric("local loss"));
            }
            g.backward(loss)?;
            loss_sum += value;
            if let Some(&b) = bal.first() {
                bal_sum += g.value(b).item() as f64;
            }
            steps += 1;

            if let OptimizerState::Adam(states) = optimizer {
                if states.is_empty() {
                    *states = params.iter().map(|p| AdamState::new(p.value.len())).collect();
                }
            }
            for (idx, &var) in bound.vars.iter().enumerate() {
                if !g.requires_grad(var) {
                    continue;
                }
                let grad = g.grad(var);
                let p = &mut params.by_index_mut(idx).value;
                match optimizer {
                    OptimizerState::Sgd => sgd_step(p, &grad, hyper.lr as f32)?,
                    OptimizerState::Adam(states) => {
                        adam_step(p, &grad, &mut states[idx], hyper.lr, AdamConfig::default())?
                    }
                }
            }
        }
    }

    if last_probs.is_none() {
        let head = &samples[..samples.len().min(hyper.batch_size)];
        last_probs = probe_routing(cfg, catalog, params, head)?;
    }
    let mean_probs = last_probs.unwrap_or_else(|| vec![vec![1.0]; cfg.n_blocks]);
    let denom = steps.max(1) as f64;
    Ok(LocalStats {
        steps,
        mean_loss: loss_sum / denom,
        mean_balance: bal_sum / denom,
        assignments: mean_probs.iter().map(|p| argmax(p)).collect(),
        mean_probs,
    })
}

/// Result of asking one client to train.
#[derive(Clone, Debug, PartialEq)]
pub enum ClientOutcome {
    Uploaded(UploadPayload, LocalStats),
    /// No usable training data.
    Skipped(u32),
}

/// One client's part of a round: load the shared snapshot, train locally,
/// keep the private parameters and upload shared deltas. Group FFN deltas
/// are sent only for the group chosen at each block.
pub fn client_round(
    client: &mut ClientState,
    cfg: &ModelConfig,
    catalog: &ItemCatalog,
    hyper: &FederationConfig,
    snapshot: &ParamSet<f32>,
    f: &GroupProportions,
    round: usize,
) -> Result<ClientOutcome> {
    if client.train.is_empty() {
        return Ok(ClientOutcome::Skipped(client.user));
    }
    let mut params = client.model(snapshot)?;
    let mut rng = client_rng(hyper.seed, round, client.user);
    let stats = local_train(
        cfg,
        catalog,
        hyper,
        f,
        &mut params,
        &client.train,
        &mut client.optimizer,
        &mut rng,
    )
    .map_err(|e| Error::Divergence {
        round,
        client: client.user as usize,
        detail: e.to_string(),
    })?;
    client.keep_private(&params);
    client.last_gates = stats.assignments.clone();

    let deltas = params
        .iter()
        .zip(snapshot.iter())
        .filter(|(p, _)| match p.partition {
            Partition::Private => false,
            Partition::Global => true,
            Partition::Group { block, group } => stats.assignments.get(block) == Some(&group),
        })
        .map(|(new, old)| Delta {
            name: new.name.clone(),
            values: new
                .value
                .data()
                .iter()
                .zip(old.value.data())
                .map(|(&a, &b)| a as f64 - b as f64)
                .collect(),
        })
        .collect();
    let payload = UploadPayload {
        client: client.user,
        n_samples: client.train.len(),
        deltas,
        assignments: stats.assignments.clone(),
        noise: None,
    };
    Ok(ClientOutcome::Uploaded(payload, stats))
}
