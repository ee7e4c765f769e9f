//! JSON checkpoints of a federation.
//!
//! Layout (`format = "mrff-checkpoint/1"`):
//!
//! ```text
//! { format, model, hyper, round, f, weights,
//!   server:  [ {name, partition, value: {shape, data}} ... ]   GLOBAL and GROUP only
//!   clients: [ {user, private: [...], optimizer, last_gates} ... ]
//!   reports: [ RoundReport ... ] }
//! ```
//!
//! Random streams are derived from `(seed, round, client)`, so no generator
//! state is stored; resuming replays the same draws as an uninterrupted run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClientState, Federation, FederationConfig, OptimizerState, RoundReport, Weights};
use crate::data::UserSequences;
use crate::error::{Error, Result};
use crate::loss::GroupProportions;
use crate::model::{ItemCatalog, ModelConfig, Param, Partition};

pub const CHECKPOINT_FORMAT: &str = "mrff-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct ClientCheckpoint {
    user: u32,
    private: Vec<Param<f32>>,
    optimizer: OptimizerState,
    last_gates: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: ModelConfig,
    hyper: FederationConfig,
    round: usize,
    f: GroupProportions,
    weights: Weights,
    server: Vec<Param<f32>>,
    clients: Vec<ClientCheckpoint>,
    reports: Vec<RoundReport>,
}

fn restore_client(c: &mut ClientState, ck: ClientCheckpoint) -> Result<()> {
    if c.user != ck.user {
        return Err(Error::Checkpoint(format!(
            "client order mismatch: data has user {}, checkpoint has {}",
            c.user, ck.user
        )));
    }
    if c.private.len() != ck.private.len() {
        return Err(Error::Checkpoint(format!("user {} private set differs", c.user)));
    }
    for (mine, saved) in c.private.iter_mut().zip(ck.private) {
        if mine.name != saved.name || mine.value.shape() != saved.value.shape() {
            return Err(Error::Checkpoint(format!("unexpected private entry {}", saved.name)));
        }
        *mine = saved;
    }
    c.optimizer = ck.optimizer;
    c.last_gates = ck.last_gates;
    Ok(())
}

impl Federation {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            model: self.model.clone(),
            hyper: self.hyper.clone(),
            round: self.server.round,
            f: self.server.f.clone(),
            weights: self.server.weights.clone(),
            server: self
                .server
                .params
                .iter()
                .filter(|p| p.partition != Partition::Private)
                .cloned()
                .collect(),
            clients: self
                .clients
                .iter()
                .map(|c| ClientCheckpoint {
                    user: c.user,
                    private: c.private.clone(),
                    optimizer: c.optimizer.clone(),
                    last_gates: c.last_gates.clone(),
                })
                .collect(),
            reports: self.reports.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    /// Rebuilds a federation from a checkpoint and the same data it was
    /// trained on.
    pub fn resume(path: &Path, catalog: ItemCatalog, data: Vec<UserSequences>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", ck.format)));
        }
        let mut fed = Federation::init(ck.model, ck.hyper, catalog, data)?;
        if fed.clients.len() != ck.clients.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} clients, data has {}",
                ck.clients.len(),
                fed.clients.len()
            )));
        }
        for p in ck.server {
            if fed.server.params.position(&p.name).map(|i| fed.server.params.by_index(i).partition)
                != Some(p.partition)
            {
                return Err(Error::Checkpoint(format!("unexpected server entry {}", p.name)));
            }
            fed.server.params.set(&p.name, p.value)?;
        }
        for (c, saved) in fed.clients.iter_mut().zip(ck.clients) {
            restore_client(c, saved)?;
        }
        fed.server.round = ck.round;
        fed.server.f = ck.f;
        fed.server.weights = ck.weights;
        fed.reports = ck.reports;
        Ok(fed)
    }
}
