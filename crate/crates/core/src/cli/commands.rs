use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::ExperimentConfig;
use super::metrics::{write_metrics, write_timings, Summary, SUMMARY_SCHEMA};
use crate::error::{Error, Result};
use crate::federated::{Federation, RoundReport};
use crate::model::count_params;

pub const SWEEP_SCHEMA: &str = "mrff-sweep/1";
const DEFAULT_OUT: &str = "mrff-out";

/// Files written by one run.
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
}

fn summarize(cfg: &ExperimentConfig, fed: &Federation) -> Result<Summary> {
    let last_eval = fed.reports.iter().rev().find(|r| r.test.is_some());
    let best_val_auc = fed
        .reports
        .iter()
        .filter_map(|r| Some((r.round, r.val.as_ref()?.auc?)))
        .fold(None, |best: Option<(usize, f64)>, (round, auc)| match best {
            Some((_, b)) if b >= auc => best,
            _ => Some((round, auc)),
        });
    Ok(Summary {
        schema: SUMMARY_SCHEMA.to_owned(),
        seed: cfg.seed,
        rounds: fed.server.round,
        model: fed.model.clone(),
        parameters: count_params(&fed.model)?.total,
        noise: fed.hyper.noise,
        alpha: fed.hyper.alpha,
        final_val: last_eval.and_then(|r| r.val.clone()),
        final_test: last_eval.and_then(|r| r.test.clone()),
        best_val_auc,
        final_group_shares: fed.server.f.rows().to_vec(),
    })
}

/// Runs one experiment and writes `metrics.csv`, `summary.json` and
/// `timings.csv` into `out`. On divergence the rounds completed so far are
/// still written before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, quiet: bool) -> Result<RunOutcome> {
    let prepared = cfg.prepare()?;
    std::fs::create_dir_all(out)?;
    let n_groups = prepared.model.n_groups;
    let mut fed = Federation::new(prepared.model, prepared.hyper, prepared.catalog, prepared.data)?;
    let mut failure = None;
    while fed.server.round < fed.hyper.rounds {
        match fed.step() {
            Ok(r) => {
                if let (false, Some(t), Some(v)) = (quiet, &r.test, &r.val) {
                    eprintln!(
                        "round {:>4}  val auc {}  test auc {}  balance {:.4}",
                        r.round,
                        v.auc.map_or("-".into(), |a| format!("{a:.4}")),
                        t.auc.map_or("-".into(), |a| format!("{a:.4}")),
                        r.balance_loss
                    );
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    write_metrics(&out.join("metrics.csv"), &fed.reports, n_groups)?;
    write_timings(&out.join("timings.csv"), &fed.reports)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let summary = summarize(cfg, &fed)?;
    summary.write(&out.join("summary.json"))?;
    Ok(RunOutcome {
        out_dir: out.to_owned(),
        reports: fed.reports,
        summary,
    })
}

fn resolve(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let dir = out
        .map(Path::to_owned)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok((cfg, dir))
}

/// `mrff run --config <path>`.
pub fn cmd_run(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunOutcome> {
    let (cfg, dir) = resolve(config, out, seed)?;
    run_experiment(&cfg, &dir, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Groups,
    Noise,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "groups" => Ok(SweepAxis::Groups),
            "noise" => Ok(SweepAxis::Noise),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}; expected alpha, groups or noise"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Groups => "groups",
            SweepAxis::Noise => "noise",
        }
    }

    /// `cfg` with this axis set to `value`. `none` on the noise axis removes
    /// the noise stage.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = || Error::Config(format!("invalid {} value {value:?}", self.name()));
        let mut c = cfg.clone();
        match self {
            SweepAxis::Alpha => c.federation.alpha = value.parse().map_err(|_| bad())?,
            SweepAxis::Groups => {
                c.model.n_groups = value.parse().map_err(|_| bad())?;
                if c.model.n_groups == 0 {
                    return Err(bad());
                }
            }
            SweepAxis::Noise => {
                c.federation.noise = match value {
                    "none" => None,
                    v => Some(v.parse().map_err(|_| bad())?),
                }
            }
        }
        c.federation.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}={value}: {m}", self.name())),
            other => other,
        })?;
        Ok(c)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed of the sweep cell for `value`.
pub fn cell_seed(base: u64, value: &str) -> u64 {
    base.wrapping_add(fnv1a(value))
}

pub struct SweepCell {
    pub value: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub outcome: std::result::Result<Summary, String>,
}

/// Runs one experiment per value. Every value is validated before the
/// first run; a failing cell is recorded and the sweep moves on.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], out: &Path) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cells: Vec<(String, ExperimentConfig)> = values
        .iter()
        .map(|v| {
            let seed = cell_seed(cfg.seed, v);
            Ok((v.clone(), axis.apply(cfg, v)?.with_seed(seed)))
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out)?;
    let mut done = Vec::new();
    for (value, c) in cells {
        let dir = out.join(format!("{}={value}", axis.name()));
        eprintln!("sweep {}={value} seed {}", axis.name(), c.seed);
        let outcome = run_experiment(&c, &dir, true)
            .map(|r| r.summary)
            .map_err(|e| e.to_string());
        done.push(SweepCell {
            value,
            seed: c.seed,
            out_dir: dir,
            outcome,
        });
    }
    std::fs::write(out.join("sweep.csv"), render_sweep(axis, &done))?;
    Ok(done)
}

/// `mrff sweep --config <path> --axis <name> --values <csv>`.
pub fn cmd_sweep(
    config: &Path,
    axis: &str,
    values: &str,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<Vec<SweepCell>> {
    let axis: SweepAxis = axis.parse()?;
    let (cfg, dir) = resolve(config, out, seed)?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_owned())
        .filter(|v| !v.is_empty())
        .collect();
    run_sweep(&cfg, axis, &values, &dir)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// `sweep.csv`: one row per cell with its final metrics or its error.
pub fn render_sweep(axis: SweepAxis, cells: &[SweepCell]) -> String {
    let mut s = format!(
        "# schema: {SWEEP_SCHEMA}\naxis,value,seed,status,val_auc,val_logloss,test_auc,test_logloss,error\n"
    );
    for c in cells {
        let (status, m, err) = match &c.outcome {
            Ok(sum) => ("ok", Some(sum), String::new()),
            Err(e) => ("failed", None, e.replace(['\n', ','], " ")),
        };
        let val = m.and_then(|s| s.final_val.clone());
        let test = m.and_then(|s| s.final_test.clone());
        writeln!(
            s,
            "{},{},{},{status},{},{},{},{},{err}",
            axis.name(),
            c.value,
            c.seed,
            opt(val.as_ref().and_then(|v| v.auc)),
            opt(val.as_ref().and_then(|v| v.logloss)),
            opt(test.as_ref().and_then(|v| v.auc)),
            opt(test.as_ref().and_then(|v| v.logloss)),
        )
        .unwrap();
    }
    s
}

/// Fixed-width table for the terminal.
pub fn sweep_table(axis: SweepAxis, cells: &[SweepCell]) -> String {
    let mut s = format!("{:>10}  {:>9}  {:>12}  {}\n", axis.name(), "test auc", "test logloss", "status");
    for c in cells {
        match &c.outcome {
            Ok(sum) => {
                let t = sum.final_test.as_ref();
                writeln!(
                    s,
                    "{:>10}  {:>9}  {:>12}  ok",
                    c.value,
                    t.and_then(|m| m.auc).map_or("-".into(), |a| format!("{a:.4}")),
                    t.and_then(|m| m.logloss).map_or("-".into(), |a| format!("{a:.4}")),
                )
                .unwrap();
            }
            Err(e) => writeln!(s, "{:>10}  {:>9}  {:>12}  failed: {e}", c.value, "-", "-").unwrap(),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            "seed = 11\n\
             [model]\nd_model = 4\nmax_seq_len = 6\nffn_hidden = 6\ngate_hidden = 4\npred_hidden = [4]\n\
             [federation]\nrounds = 2\nbatch_size = 4\nlr = 0.1\n\
             [data.synthetic]\nn_users = 6\nitems_per_cluster = 3\nmin_impressions = 10\nmax_impressions = 12\n",
        )
        .unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(cell_seed(u64::MAX, ""), 0xcbf29ce484222324);
    }

    #[test]
    fn axis_parsing_and_application() {
        let base = tiny();
        assert_eq!(SweepAxis::Alpha.apply(&base, "0.01").unwrap().federation.alpha, 0.01);
        assert_eq!(SweepAxis::Groups.apply(&base, "3").unwrap().model.n_groups, 3);
        assert_eq!(SweepAxis::Noise.apply(&base, "none").unwrap().federation.noise, None);
        assert_eq!(SweepAxis::Noise.apply(&base, "0.2").unwrap().federation.noise, Some(0.2));
        assert!(SweepAxis::Alpha.apply(&base, "-1").is_err());
        assert!(SweepAxis::Groups.apply(&base, "0").is_err());
        assert!(SweepAxis::Noise.apply(&base, "x").is_err());
        assert!("beta".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn rounds_zero_writes_only_init_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.federation.rounds = 0;
        let out = run_experiment(&cfg, dir.path(), true).unwrap();
        assert_eq!(out.reports.len(), 1);
        let rows = super::super::metrics::read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert!(rows.iter().all(|r| r.round == 0));
        assert_eq!(rows.len(), 2 * 2);
    }

    #[test]
    fn failed_cell_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.federation.lr = 1e30;
        let cells = run_sweep(&cfg, SweepAxis::Alpha, &["0.1".into()], dir.path()).unwrap();
        assert!(cells[0].outcome.is_err());
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert!(csv.lines().nth(2).unwrap().contains(",failed,"), "{csv}");
    }
}
