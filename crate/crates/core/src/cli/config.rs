//! Experiment configuration files.
//!
//! ```toml
//! seed = 7                  # required
//! out = "runs/demo"         # optional, `--out` wins
//!
//! [model]                   # any ModelConfig field; attr_vocab and n_users come from the data
//! d_model = 8
//!
//! [federation]              # any FederationConfig field except seed
//! rounds = 100
//! alpha = 0.1
//!
//! [data]                    # exactly one of `path` or `[data.synthetic]`
//! path = "log.csv"          # relative to this file
//! negative_ratio = 4        # optional, for click-only logs
//! [data.schema]
//! user = "user_id"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_interactions, prepare, sample_negatives, synthetic_generate, InteractionLog, Schema,
    SyntheticSpec, UserSequences,
};
use crate::error::{Error, Result};
use crate::federated::FederationConfig;
use crate::model::{ItemCatalog, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub schema: Schema,
    pub negative_ratio: Option<usize>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    pub data: DataConfig,
}

/// Everything a run needs once the data is in memory.
pub struct Prepared {
    pub model: ModelConfig,
    pub hyper: FederationConfig,
    pub catalog: ItemCatalog,
    pub data: Vec<UserSequences>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(model) = table.get("model").and_then(|m| m.as_table()) {
            for key in ["attr_vocab", "n_users"] {
                if model.contains_key(key) {
                    return Err(Error::Config(format!(
                        "model.{key} is derived from the data and cannot be set"
                    )));
                }
            }
        }
        if let Some(fed) = table.get("federation").and_then(|m| m.as_table()) {
            if fed.contains_key("seed") {
                return Err(Error::Config(
                    "federation.seed is not allowed; set the top-level seed".into(),
                ));
            }
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.federation.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_owned()));
        }
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &mut cfg.data.path {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.federation.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), None) if !p.exists() => return Err(Error::MissingPath(p.clone())),
            (Some(_), None) => {}
            (None, Some(s)) => s.validate()?,
            _ => {
                return Err(Error::Config(
                    "data needs exactly one of `path` or `[data.synthetic]`".into(),
                ))
            }
        }
        if self.data.negative_ratio.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config(
                "data.negative_ratio applies to file logs only".into(),
            ));
        }
        if self.federation.seed != self.seed {
            return Err(Error::Config("federation.seed differs from seed".into()));
        }
        self.federation.validate()
    }

    pub fn load_log(&self) -> Result<InteractionLog> {
        if let Some(spec) = &self.data.synthetic {
            return Ok(synthetic_generate(spec)?.log);
        }
        let path = self.data.path.as_ref().expect("validated");
        let log = load_interactions(path, &self.data.schema)?;
        Ok(match self.data.negative_ratio {
            Some(r) => sample_negatives(&log, r, self.seed),
            None => log,
        })
    }

    /// Loads the data and completes the model config from it.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let log = self.load_log()?;
        let (catalog, data) = prepare(&log, self.model.max_seq_len)?;
        let mut model = self.model.clone();
        model.attr_vocab = catalog.vocab().to_vec();
        model.n_users = log.n_users().max(1);
        model.validate()?;
        Ok(Prepared {
            model,
            hyper: self.federation.clone(),
            catalog,
            data,
        })
    }
}
