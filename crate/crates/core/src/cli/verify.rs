//! Self-checks behind `mrff verify`: gradients, balance-loss identities,
//! aggregation identities and the privacy partition.

use crate::data::{prepare, synthetic_generate, SyntheticSpec, UserSequences};
use crate::error::Result;
use crate::federated::{
    add_dp_noise, aggregate_global, client_rng, aggregate_group, local_train, Delta, Federation,
    FederationConfig, NoiseConfig, OptimizerState, UploadPayload,
};
use crate::loss::{balance_loss, bce_loss, GroupProportions};
use crate::model::{forward, ItemCatalog, Mode, ModelConfig, ParamSet, Partition, SequenceInput};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{set_backward_fault, BackwardFault, Graph, Rng, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Measured quantity behind the verdict, when there is one.
    pub metric: Option<f64>,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
            metric: None,
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, d)) => Self::new(name, ok, d),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }

    fn from_grad(name: &str, r: Result<GradCheckReport>) -> Self {
        match r {
            Ok(rep) => Self {
                metric: Some(rep.max_rel_error),
                ..Self::new(
                    name,
                    rep.passes(GRAD_TOL),
                    format!("max rel error {:.2e} over {} coordinates", rep.max_rel_error, rep.coordinates),
                )
            },
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

type Body = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Reduces `x` to a scalar with fixed random weights so every coordinate of
/// the gradient is distinct.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(g.shape(x), 1.0, &mut Rng::new(seed));
    let wc = g.constant(w);
    let p = g.mul(x, wc)?;
    Ok(g.sum(p))
}

fn u(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut Rng::new(seed))
}

fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Box<Body>)> {
    let mask = vec![true, false, true, true, false, true, true, true, true, true, false, true];
    vec![
        ("matmul", vec![u(&[3, 4], 1), u(&[4, 2], 2)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("transpose", vec![u(&[3, 2], 3)], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, 9)
        })),
        ("add", vec![u(&[2, 3], 4), u(&[2, 3], 5)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("sub", vec![u(&[2, 3], 4), u(&[2, 3], 5)], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("mul", vec![u(&[2, 3], 4), u(&[2, 3], 5)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("add_row", vec![u(&[3, 4], 6), u(&[4], 7)], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, 9)
        })),
        ("scale", vec![u(&[2, 2], 8)], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 9)
        })),
        ("relu", vec![u(&[3, 3], 10)], Box::new(|g, v| {
            let y = g.relu(v[0]);
            project(g, y, 9)
        })),
        ("sigmoid", vec![u(&[3, 3], 11)], Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 9)
        })),
        ("softplus", vec![u(&[3, 3], 12)], Box::new(|g, v| {
            let y = g.softplus(v[0]);
            project(g, y, 9)
        })),
        ("softmax rows", vec![u(&[3, 4], 13)], Box::new(|g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y, 9)
        })),
        ("softmax columns", vec![u(&[3, 4], 14)], Box::new(|g, v| {
            let y = g.softmax(v[0], 0)?;
            project(g, y, 9)
        })),
        ("masked_softmax", vec![u(&[3, 4], 15)], Box::new(move |g, v| {
            let y = g.masked_softmax(v[0], &mask)?;
            project(g, y, 9)
        })),
        ("layer_norm", vec![u(&[3, 5], 16), u(&[5], 17), u(&[5], 18)], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 9)
        })),
        ("embedding_lookup", vec![u(&[6, 3], 19)], Box::new(|g, v| {
            let y = g.embedding(v[0], &[0, 2, 2, 5])?;
            project(g, y, 9)
        })),
        ("concat rows", vec![u(&[2, 3], 20), u(&[1, 3], 21)], Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]], 0)?;
            project(g, y, 9)
        })),
        ("concat columns", vec![u(&[2, 3], 20), u(&[2, 2], 21)], Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            project(g, y, 9)
        })),
        ("slice", vec![u(&[3, 5], 22)], Box::new(|g, v| {
            let y = g.slice(v[0], 1, 1, 4)?;
            project(g, y, 9)
        })),
        ("mean_pool", vec![u(&[4, 3], 23)], Box::new(|g, v| {
            let y = g.mean_pool(v[0], &[false, true, true, true])?;
            project(g, y, 9)
        })),
        ("sum", vec![u(&[2, 3], 24)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })),
        ("mean", vec![u(&[2, 3], 25)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        })),
        ("dropout", vec![u(&[3, 4], 26)], Box::new(|g, v| {
            let y = g.dropout(v[0], 0.3, &mut Rng::new(27));
            project(g, y, 9)
        })),
        ("bce click", vec![u(&[1, 1], 28)], Box::new(|g, v| bce_loss(g, v[0], 1))),
        ("bce no click", vec![u(&[1, 1], 29)], Box::new(|g, v| bce_loss(g, v[0], 0))),
        ("balance_loss", vec![u(&[1, 4], 30), u(&[1, 4], 31)], Box::new(|g, v| {
            let f = GroupProportions::new(vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.5, 0.0, 0.25, 0.25]])?;
            let p0 = g.softmax(v[0], 1)?;
            let p1 = g.softmax(v[1], 1)?;
            balance_loss(g, &[p0, p1], &f)
        })),
    ]
}

/// Two blocks, four groups, one extra item attribute, three real history
/// items behind one padding slot.
pub fn gradcheck_model() -> (ModelConfig, ItemCatalog) {
    let cfg = ModelConfig {
        d_model: 4,
        n_heads: 2,
        n_blocks: 2,
        n_groups: 4,
        max_seq_len: 4,
        ffn_hidden: 5,
        gate_hidden: 3,
        pred_hidden: vec![6],
        attr_vocab: vec![6, 3],
        ..Default::default()
    };
    let catalog = ItemCatalog::new(6, vec![vec![0, 1, 2, 0, 1, 2]], vec![3]).expect("valid catalog");
    (cfg, catalog)
}

fn full_model_check() -> Result<GradCheckReport> {
    let (cfg, catalog) = gradcheck_model();
    let params: ParamSet<f64> = ParamSet::init(&cfg, &mut Rng::new(3))?;
    let inputs: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
    let slots = params.slots().clone();
    let f = GroupProportions::new(vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1]])?;
    let history = [0, 4, 2, 5];
    let mask = [false, true, true, true];
    grad_check(
        |g, vars| {
            let s = slots.map(|i| vars[i]);
            let input = SequenceInput { history: &history, mask: &mask, candidate: 3 };
            let out = forward(g, &cfg, &s, &catalog, input, &mut Mode::Eval)?;
            let rec = bce_loss(g, out.logit, 1)?;
            let rec = g.sum(rec);
            let probs: Vec<Var> = out.gates.iter().map(|b| b.probs).collect();
            let bal = balance_loss(g, &probs, &f)?;
            let bal = g.scale(bal, 0.1);
            g.add(rec, bal)
        },
        &inputs,
        GRAD_EPS,
    )
}

/// Central-difference checks of every differentiable operation and of the
/// whole model, at 64-bit.
pub fn gradient_suite() -> Vec<Check> {
    let mut out: Vec<Check> = op_cases()
        .into_iter()
        .map(|(name, inputs, body)| {
            let r = grad_check(|g, v| body(g, v), &inputs, GRAD_EPS);
            Check::from_grad(&format!("gradient {name}"), r)
        })
        .collect();
    out.push(Check::from_grad("gradient full model", full_model_check()));
    out
}

fn balance_value(n: usize, l: usize, f: &GroupProportions, p: &[Vec<f64>]) -> Result<f64> {
    let mut g: Graph<f64> = Graph::new();
    let probs: Vec<Var> = p.iter().map(|row| g.constant(Tensor::row(row))).collect();
    debug_assert_eq!(probs.len(), l);
    debug_assert_eq!(f.n_groups(), n);
    let b = balance_loss(&mut g, &probs, f)?;
    Ok(g.value(b).item())
}

pub fn balance_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let r = (|| -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for n in 1..=8 {
            for l in 1..=4 {
                let f = GroupProportions::uniform(l, n);
                let p = vec![vec![1.0 / n as f64; n]; l];
                worst = worst.max((balance_value(n, l, &f, &p)? - l as f64).abs());
            }
        }
        Ok((worst <= 1e-10, format!("max |loss - L| {worst:.1e}")))
    })();
    out.push(Check::from_result("balance uniform equals L", r));

    let r = (|| -> Result<(bool, String)> {
        let (n, l) = (4, 2);
        let mut onehot = vec![0.0; n];
        onehot[2] = 1.0;
        let f = GroupProportions::new(vec![onehot.clone(); l])?;
        let v = balance_value(n, l, &f, &vec![onehot; l])?;
        Ok((v == (n * l) as f64, format!("value {v}")))
    })();
    out.push(Check::from_result("balance collapsed equals N*L", r));

    let r = (|| -> Result<(bool, String)> {
        let f = GroupProportions::new(vec![vec![0.1, 0.6, 0.3]])?;
        let mut g: Graph<f64> = Graph::new();
        let p = g.leaf(Tensor::row(&[0.2, 0.5, 0.3]));
        let b = balance_loss(&mut g, &[p], &f)?;
        g.backward(b)?;
        let grad = g.grad(p);
        let err = grad
            .data()
            .iter()
            .zip(&f.rows()[0])
            .map(|(a, fi)| (a - 3.0 * fi).abs())
            .fold(0.0, f64::max);
        Ok((err < 1e-12, format!("max |grad - N f| {err:.1e}")))
    })();
    out.push(Check::from_result("balance gradient equals N*f", r));
    out
}

/// Small synthetic federation shared by the identity and privacy checks.
pub fn tiny_setup(n_users: usize, seed: u64) -> Result<(ModelConfig, ItemCatalog, Vec<UserSequences>)> {
    let spec = SyntheticSpec {
        n_users,
        items_per_cluster: 3,
        min_impressions: 10,
        max_impressions: 12,
        seed,
        ..Default::default()
    };
    let log = synthetic_generate(&spec)?.log;
    let model = ModelConfig {
        d_model: 4,
        max_seq_len: 6,
        ffn_hidden: 6,
        gate_hidden: 4,
        pred_hidden: vec![4],
        ..ModelConfig::compact(spec.n_items(), n_users)
    };
    let (catalog, data) = prepare(&log, model.max_seq_len)?;
    Ok((model, catalog, data))
}

fn tiny_hyper(rounds: usize) -> FederationConfig {
    FederationConfig {
        rounds,
        lr: 0.1,
        batch_size: 4,
        seed: 5,
        ..Default::default()
    }
}

fn payload(params: &ParamSet<f32>, client: u32, n: usize, group: usize, scale: f64) -> UploadPayload {
    let deltas = params
        .iter()
        .filter(|p| match p.partition {
            Partition::Global => true,
            Partition::Group { group: g, .. } => g == group,
            Partition::Private => false,
        })
        .map(|p| Delta {
            name: p.name.clone(),
            values: (0..p.value.len()).map(|i| scale * (i as f64 + 1.0) / 7.0).collect(),
        })
        .collect();
    UploadPayload {
        client,
        n_samples: n,
        deltas,
        assignments: vec![group; 2],
        noise: None,
    }
}

pub fn aggregation_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let base = (|| -> Result<ParamSet<f32>> {
        let (model, _, _) = tiny_setup(4, 0)?;
        ParamSet::init(&model, &mut Rng::new(1))
    })();
    let base = match base {
        Ok(b) => b,
        Err(e) => return vec![Check::new("aggregation setup", false, e.to_string())],
    };

    let r = (|| -> Result<(bool, String)> {
        let ps = vec![payload(&base, 0, 3, 0, 1.0), payload(&base, 1, 1, 0, -1.0)];
        let mut p = base.clone();
        let w = aggregate_global(&ps, &mut p)?;
        let total: f64 = w.iter().map(|x| x.1).sum();
        let name = "pos_emb";
        let err = p
            .get(name)
            .expect("pos_emb")
            .data()
            .iter()
            .zip(base.get(name).expect("pos_emb").data())
            .enumerate()
            .map(|(i, (a, b))| ((*a as f64 - *b as f64) - 0.5 * (i as f64 + 1.0) / 7.0).abs())
            .fold(0.0, f64::max);
        Ok(((total - 1.0).abs() <= 1e-12 && err < 1e-5, format!("weights sum {total}, max error {err:.1e}")))
    })();
    out.push(Check::from_result("aggregation weighted mean", r));

    let r = (|| -> Result<(bool, String)> {
        let ps = vec![
            payload(&base, 0, 3, 0, 0.3),
            payload(&base, 1, 5, 1, -0.7),
            payload(&base, 2, 2, 0, 0.9),
            payload(&base, 3, 4, 3, 0.1),
        ];
        let mut a = base.clone();
        aggregate_global(&ps, &mut a)?;
        aggregate_group(&ps, &mut a)?;
        let mut b = base.clone();
        let rev: Vec<_> = [2, 0, 3, 1].iter().map(|&i| ps[i].clone()).collect();
        aggregate_global(&rev, &mut b)?;
        aggregate_group(&rev, &mut b)?;
        Ok((a == b, "bitwise comparison".into()))
    })();
    out.push(Check::from_result("aggregation permutation invariance", r));

    let r = (|| -> Result<(bool, String)> {
        let ps = vec![payload(&base, 0, 3, 0, 0.3), payload(&base, 1, 5, 1, -0.7)];
        let mut a = base.clone();
        aggregate_group(&ps, &mut a)?;
        let stale = a
            .iter()
            .zip(base.iter())
            .filter(|(p, _)| matches!(p.partition, Partition::Group { group: 2 | 3, .. }))
            .all(|(p, q)| p.value == q.value);
        Ok((stale, "groups without members unchanged".into()))
    })();
    out.push(Check::from_result("aggregation stale groups", r));

    let r = (|| -> Result<(bool, String)> {
        let p = payload(&base, 0, 3, 0, 0.3);
        let noised = add_dp_noise(p.clone(), &NoiseConfig::new(0.0, 9)?, 1);
        let same = noised.deltas == p.deltas;
        let (model, catalog, data) = tiny_setup(4, 1)?;
        let mut a = Federation::new(model.clone(), tiny_hyper(2), catalog.clone(), data.clone())?;
        a.run()?;
        let hyper = FederationConfig { noise: Some(0.0), ..tiny_hyper(2) };
        let mut b = Federation::new(model, hyper, catalog, data)?;
        b.run()?;
        Ok((same && a.server.params == b.server.params, "strength 0 vs no noise stage".into()))
    })();
    out.push(Check::from_result("noise strength zero is identity", r));

    let r = (|| -> Result<(bool, String)> {
        let (model, catalog, data) = tiny_setup(1, 2)?;
        let hyper = FederationConfig { local_epochs: 2, ..tiny_hyper(1) };
        let mut fed = Federation::new(model.clone(), hyper.clone(), catalog.clone(), data)?;
        let client = fed.clients[0].clone();
        let mut params = client.model(&fed.server.params)?;
        let f = fed.server.f.clone();
        let mut rng = client_rng(hyper.seed, 1, client.user);
        let mut opt = OptimizerState::new(hyper.optimizer);
        local_train(&model, &catalog, &hyper, &f, &mut params, &client.train, &mut opt, &mut rng)?;
        fed.step()?;
        let shared_equal = params
            .iter()
            .filter(|p| p.partition != Partition::Private)
            .filter(|p| match p.partition {
                Partition::Group { block, group } => fed.clients[0].last_gates[block] == group,
                _ => true,
            })
            .all(|p| fed.server.params.get(&p.name) == Some(&p.value));
        let private_equal = fed.clients[0]
            .private
            .iter()
            .all(|p| params.get(&p.name) == Some(&p.value));
        Ok((shared_equal && private_equal, "shared and private parameters after one round".into()))
    })();
    out.push(Check::from_result("single client equals local training", r));
    out
}

pub fn privacy_checks() -> Vec<Check> {
    let r = (|| -> Result<(bool, String)> {
        let (model, catalog, data) = tiny_setup(6, 3)?;
        let hyper = FederationConfig { noise: Some(0.1), ..tiny_hyper(4) };
        let mut fed = Federation::new(model, hyper, catalog, data)?;
        let private: Vec<String> = fed
            .server
            .params
            .iter()
            .filter(|p| p.partition == Partition::Private)
            .map(|p| p.name.clone())
            .collect();
        let mut violations = 0;
        let mut uploads = 0;
        for _ in 0..4 {
            let round = fed.step_detailed()?;
            for p in &round.payloads {
                uploads += 1;
                violations += p.names().filter(|n| private.iter().any(|q| q == n)).count();
            }
        }
        Ok((
            violations == 0 && uploads > 0 && !private.is_empty(),
            format!("{violations} private names in {uploads} uploads"),
        ))
    })();
    vec![Check::from_result("privacy partition", r)]
}

pub fn verify_all() -> Vec<Check> {
    let mut out = gradient_suite();
    out.extend(balance_checks());
    out.extend(aggregation_checks());
    out.extend(privacy_checks());
    out
}

/// Runs every check, optionally with one operation's backward pass
/// sabotaged, and restores the engine afterwards.
pub fn run_verify(fault: Option<BackwardFault>) -> Vec<Check> {
    set_backward_fault(fault);
    let out = verify_all();
    set_backward_fault(None);
    out
}

pub fn render_checks(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        s.push_str(&format!(
            "{} {}: {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        ));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        let checks = gradient_suite();
        assert!(checks.len() > 20);
        for c in checks {
            assert!(c.passed && c.metric.unwrap() < GRAD_TOL, "{c:?}");
        }
    }

    #[test]
    fn balance_and_aggregation_pass() {
        for c in balance_checks().into_iter().chain(aggregation_checks()) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn privacy_passes() {
        for c in privacy_checks() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn render_counts_failures() {
        let s = render_checks(&[Check::new("a", true, "x"), Check::new("b", false, "y")]);
        assert!(s.contains("FAIL b: y"));
        assert!(s.ends_with("2 checks, 1 failed\n"));
    }
}
