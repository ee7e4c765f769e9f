//! Federated training: clients keep private modules, upload deltas of shared
//! ones, and the server averages them globally or within routed groups.

mod checkpoint;
mod client;
mod noise;
mod server;

use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, UserSequences};
use crate::error::{Error, Result};
use crate::loss::GroupProportions;
use crate::metrics::{auc, logloss, EvalRecord};
use crate::model::{predict_many, ItemCatalog, ModelConfig, ParamSet, Partition};
use crate::tensor::Rng;

pub use checkpoint::CHECKPOINT_FORMAT;
pub use client::{
    client_rng, client_round, local_train, probe_routing, ClientOutcome, ClientState, LocalStats,
    OptimizerState,
};
pub use noise::{add_dp_noise, laplace, NoiseConfig, NoiseRecord};
pub use server::{aggregate_global, aggregate_group, compute_group_proportions, Weights};

const INIT_STREAM: u64 = 0x49_4E_49_54;
const SAMPLE_STREAM: u64 = 0x53_41_4D_50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Balance-loss coefficient.
    pub alpha: f64,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    /// Laplace scale on uploads; `None` removes the noise stage entirely.
    pub noise: Option<f64>,
    pub seed: u64,
    /// Evaluate every this many rounds (and always after the last one).
    pub eval_every: usize,
    /// Keep gate parameters fixed at their initial values.
    pub freeze_gate: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 500,
            local_epochs: 1,
            batch_size: 16,
            lr: 0.05,
            optimizer: Optimizer::Sgd,
            alpha: 0.1,
            participation: 1.0,
            noise: None,
            seed: 0,
            eval_every: 1,
            freeze_gate: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.batch_size == 0 {
            return bad("federation.batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("federation.lr must be a positive number");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("federation.alpha must be >= 0");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("federation.participation must be in (0, 1]");
        }
        if self.eval_every == 0 {
            return bad("federation.eval_every must be >= 1");
        }
        if let Some(s) = self.noise {
            NoiseConfig::new(s, self.seed)?;
        }
        Ok(())
    }

    pub fn noise_config(&self) -> Option<NoiseConfig> {
        self.noise.map(|strength| NoiseConfig {
            strength,
            seed: self.seed,
        })
    }
}

/// Change of one shared parameter, flattened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub name: String,
    pub values: Vec<f64>,
}

/// What a client sends to the server after local training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UploadPayload {
    pub client: u32,
    pub n_samples: usize,
    pub deltas: Vec<Delta>,
    /// Group per block.
    pub assignments: Vec<usize>,
    pub noise: Option<NoiseRecord>,
}

impl UploadPayload {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.deltas.iter().map(|d| d.name.as_str())
    }
}

/// Names in `payload` that belong to the PRIVATE partition of `params`.
pub fn private_leaks<'a>(payload: &'a UploadPayload, params: &ParamSet<f32>) -> Vec<&'a str> {
    payload
        .names()
        .filter(|n| {
            params
                .position(n)
                .map_or(true, |i| params.by_index(i).partition == Partition::Private)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    /// Private entries hold initial values and are never read.
    pub params: ParamSet<f32>,
    pub f: GroupProportions,
    pub round: usize,
    pub weights: Weights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub val: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
    pub train_loss: Option<f64>,
    pub balance_loss: f64,
    /// Share of participants routed to each group, one row per block.
    pub group_shares: Vec<Vec<f64>>,
    pub participants: usize,
    pub skipped: Vec<u32>,
    pub warning: Option<String>,
    pub noise: f64,
    pub privacy_violations: usize,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Round report plus the payloads the server received.
pub struct RoundOutput {
    pub report: RoundReport,
    pub payloads: Vec<UploadPayload>,
}

/// A running federation.
pub struct Federation {
    pub model: ModelConfig,
    pub hyper: FederationConfig,
    pub catalog: ItemCatalog,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub reports: Vec<RoundReport>,
}

impl Federation {
    /// Initializes server and clients and records the round-0 report.
    pub fn new(
        model: ModelConfig,
        hyper: FederationConfig,
        catalog: ItemCatalog,
        data: Vec<UserSequences>,
    ) -> Result<Self> {
        let mut fed = Self::init(model, hyper, catalog, data)?;
        let report = fed.initial_report()?;
        fed.reports.push(report);
        Ok(fed)
    }

    fn init(
        model: ModelConfig,
        hyper: FederationConfig,
        catalog: ItemCatalog,
        data: Vec<UserSequences>,
    ) -> Result<Self> {
        model.validate()?;
        hyper.validate()?;
        if catalog.vocab() != model.attr_vocab.as_slice() {
            return Err(Error::Config(format!(
                "model.attr_vocab {:?} does not match the data's vocabularies {:?}",
                model.attr_vocab,
                catalog.vocab()
            )));
        }
        let params = ParamSet::init(&model, &mut Rng::stream(hyper.seed, &[INIT_STREAM]))?;
        let mut clients = Vec::with_capacity(data.len());
        for seqs in data {
            if let Some(s) = seqs
                .train
                .iter()
                .chain(&seqs.val)
                .chain(&seqs.test)
                .find(|s| s.history.len() > model.max_seq_len)
            {
                return Err(Error::Config(format!(
                    "history of length {} exceeds model.max_seq_len {}",
                    s.history.len(),
                    model.max_seq_len
                )));
            }
            let mut rng = Rng::stream(hyper.seed, &[INIT_STREAM, seqs.user as u64 + 1]);
            let own = ParamSet::init(&model, &mut rng)?;
            clients.push(ClientState::new(seqs, &own, hyper.optimizer));
        }
        clients.sort_by_key(|c| c.user);
        let f = GroupProportions::uniform(model.n_blocks, model.n_groups);
        Ok(Self {
            server: ServerState {
                params,
                f,
                round: 0,
                weights: Vec::new(),
            },
            model,
            hyper,
            catalog,
            clients,
            reports: Vec::new(),
        })
    }

    fn noise_strength(&self) -> f64 {
        self.hyper.noise.unwrap_or(0.0)
    }

    fn initial_report(&self) -> Result<RoundReport> {
        let start = Instant::now();
        let probes: Vec<Option<Vec<Vec<f64>>>> = self
            .clients
            .par_iter()
            .map(|c| {
                let head = &c.train[..c.train.len().min(self.hyper.batch_size)];
                probe_routing(&self.model, &self.catalog, &c.model(&self.server.params)?, head)
            })
            .collect::<Result<_>>()?;
        let probes: Vec<Vec<Vec<f64>>> = probes.into_iter().flatten().collect();
        let (balance, shares) = if probes.is_empty() {
            (0.0, self.server.f.rows().to_vec())
        } else {
            let f = &self.server.f;
            let bal = probes
                .iter()
                .map(|p| client::balance_value(f, p))
                .sum::<f64>()
                / probes.len() as f64;
            let assign: Vec<Vec<usize>> = probes
                .iter()
                .map(|p| p.iter().map(|row| client::argmax(row)).collect())
                .collect();
            let shares =
                GroupProportions::from_assignments(&assign, self.model.n_blocks, self.model.n_groups)?;
            (bal, shares.rows().to_vec())
        };
        Ok(RoundReport {
            round: 0,
            val: Some(self.evaluate(Split::Val)?),
            test: Some(self.evaluate(Split::Test)?),
            train_loss: None,
            balance_loss: balance,
            group_shares: shares,
            participants: 0,
            skipped: Vec::new(),
            warning: None,
            noise: self.noise_strength(),
            privacy_violations: 0,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        let n = self.clients.len();
        if self.hyper.participation >= 1.0 {
            return (0..n).collect();
        }
        let k = ((self.hyper.participation * n as f64).round() as usize).clamp(1, n.max(1));
        let mut idx: Vec<usize> = (0..n).collect();
        Rng::stream(self.hyper.seed, &[SAMPLE_STREAM, round as u64]).shuffle(&mut idx);
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }

    /// Runs one round and returns its report.
    pub fn step(&mut self) -> Result<&RoundReport> {
        self.step_detailed()?;
        Ok(self.reports.last().expect("report"))
    }

    /// Like [`Federation::step`] but also hands back the received payloads.
    pub fn step_detailed(&mut self) -> Result<RoundOutput> {
        let start = Instant::now();
        let round = self.server.round + 1;
        let chosen: HashSet<usize> = self.participants(round).into_iter().collect();
        let (model, catalog, hyper) = (&self.model, &self.catalog, &self.hyper);
        let (snapshot, f) = (&self.server.params, &self.server.f);

        let outcomes: Vec<ClientOutcome> = self
            .clients
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| chosen.contains(i))
            .map(|(_, c)| client_round(c, model, catalog, hyper, snapshot, f, round))
            .collect::<Result<_>>()?;

        let mut payloads = Vec::new();
        let mut stats = Vec::new();
        let mut skipped = Vec::new();
        for o in outcomes {
            match o {
                ClientOutcome::Uploaded(p, s) => {
                    payloads.push(p);
                    stats.push(s);
                }
                ClientOutcome::Skipped(u) => skipped.push(u),
            }
        }
        if let Some(noise) = self.hyper.noise_config() {
            payloads = payloads
                .into_iter()
                .map(|p| add_dp_noise(p, &noise, round))
                .collect();
        }
        payloads.sort_by_key(|p| p.client);

        let leaks: Vec<(u32, Vec<&str>)> = payloads
            .iter()
            .map(|p| (p.client, private_leaks(p, &self.server.params)))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        if !leaks.is_empty() {
            return Err(Error::Contract(format!(
                "round {round}: private parameters in uploads {leaks:?}"
            )));
        }
        let violations = 0;

        let mut warning = None;
        if payloads.is_empty() {
            warning = Some("no payloads received; aggregation skipped".to_owned());
        } else {
            let w = aggregate_global(&payloads, &mut self.server.params)?;
            check_weights("global", &w)?;
            for ((l, i), w) in aggregate_group(&payloads, &mut self.server.params)? {
                check_weights(&format!("group ({l},{i})"), &w)?;
            }
            self.server.weights = w;
            self.server.f =
                compute_group_proportions(&payloads, self.model.n_blocks, self.model.n_groups)?;
        }
        self.server.round = round;

        let due = round % self.hyper.eval_every == 0 || round >= self.hyper.rounds;
        let (val, test) = if due {
            (Some(self.evaluate(Split::Val)?), Some(self.evaluate(Split::Test)?))
        } else {
            (None, None)
        };
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let report = RoundReport {
            round,
            val,
            test,
            train_loss: mean(stats.iter().map(|s| s.mean_loss).collect()),
            balance_loss: mean(stats.iter().map(|s| s.mean_balance).collect()).unwrap_or(0.0),
            group_shares: self.server.f.rows().to_vec(),
            participants: payloads.len(),
            skipped,
            warning,
            noise: self.noise_strength(),
            privacy_violations: violations,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.reports.push(report.clone());
        Ok(RoundOutput { report, payloads })
    }

    /// Steps until `hyper.rounds` rounds are done.
    pub fn run(&mut self) -> Result<&[RoundReport]> {
        while self.server.round < self.hyper.rounds {
            self.step()?;
        }
        Ok(&self.reports)
    }

    pub fn evaluate(&self, split: Split) -> Result<SplitMetrics> {
        let per_client: Vec<Vec<EvalRecord>> = self
            .clients
            .par_iter()
            .map(|c| {
                let samples: &[Sample] = match split {
                    Split::Val => &c.val,
                    Split::Test => &c.test,
                };
                if samples.is_empty() {
                    return Ok(Vec::new());
                }
                let params = c.model(&self.server.params)?;
                let preds = predict_many(&self.model, &params, &self.catalog, samples.iter().map(Sample::input))?;
                preds
                    .iter()
                    .zip(samples)
                    .map(|(p, s)| EvalRecord::new(p.prob, s.label))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let records: Vec<EvalRecord> = per_client.into_iter().flatten().collect();
        Ok(SplitMetrics {
            auc: auc(&records).ok(),
            logloss: logloss(&records).ok(),
            n: records.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

fn check_weights(scope: &str, w: &Weights) -> Result<()> {
    let total: f64 = w.iter().map(|x| x.1).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "{scope} aggregation weights sum to {total}"
        )));
    }
    Ok(())
}

/// Builds a federation from per-user sequences and runs every round.
pub fn run_federation(
    model: ModelConfig,
    hyper: FederationConfig,
    catalog: ItemCatalog,
    data: Vec<UserSequences>,
) -> Result<Vec<RoundReport>> {
    let mut fed = Federation::new(model, hyper, catalog, data)?;
    fed.run()?;
    Ok(fed.reports)
}
