//! Training objectives: click BCE, the routing balance loss, and their
//! combination into the per-client loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a pre-sigmoid logit, in softplus form:
/// `softplus(-z)` for a click and `softplus(z)` otherwise.
pub fn bce_loss<F: Scalar>(g: &mut Graph<F>, logit: Var, label: u8) -> Result<Var> {
    match label {
        1 => {
            let neg = g.scale(logit, -F::one());
            Ok(g.softplus(neg))
        }
        0 => Ok(g.softplus(logit)),
        other => Err(Error::Contract(format!("label must be 0 or 1, got {other}"))),
    }
}

/// Share of users routed to each group, one row per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupProportions {
    rows: Vec<Vec<f64>>,
}

impl GroupProportions {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        for row in &rows {
            if row.len() != n || n == 0 {
                return Err(Error::shape("group proportions", &[n], &[row.len()]));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "group proportion row {row:?} is not a distribution"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn uniform(n_blocks: usize, n_groups: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / n_groups as f64; n_groups]; n_blocks],
        }
    }

    /// Counts hard assignments: `assignments[u][l]` is the group of user `u`
    /// at block `l`. An empty population yields uniform rows.
    pub fn from_assignments(
        assignments: &[Vec<usize>],
        n_blocks: usize,
        n_groups: usize,
    ) -> Result<Self> {
        if assignments.is_empty() {
            return Ok(Self::uniform(n_blocks, n_groups));
        }
        let mut counts = vec![vec![0usize; n_groups]; n_blocks];
        for a in assignments {
            if a.len() != n_blocks {
                return Err(Error::shape("assignment", &[n_blocks], &[a.len()]));
            }
            for (l, &grp) in a.iter().enumerate() {
                if grp >= n_groups {
                    return Err(Error::Index {
                        what: "group",
                        index: grp,
                        size: n_groups,
                    });
                }
                counts[l][grp] += 1;
            }
        }
        let total = assignments.len() as f64;
        Ok(Self {
            rows: counts
                .into_iter()
                .map(|row| row.into_iter().map(|c| c as f64 / total).collect())
                .collect(),
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn n_groups(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn max_share(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// `N · Σ_l Σ_i f[l][i] · p[l][i]`.
///
/// `probs[l]` is the `[1, N]` routing distribution at block `l`; `f` enters
/// as a constant, so only the probabilities receive gradient.
pub fn balance_loss<F: Scalar>(
    g: &mut Graph<F>,
    probs: &[Var],
    f: &GroupProportions,
) -> Result<Var> {
    if probs.len() != f.n_blocks() || probs.is_empty() {
        return Err(Error::shape("balance_loss", &[f.n_blocks()], &[probs.len()]));
    }
    let n = f.n_groups();
    let mut total: Option<Var> = None;
    for (&p, row) in probs.iter().zip(f.rows()) {
        if g.value(p).len() != n {
            return Err(Error::shape("balance_loss", &[n], g.shape(p)));
        }
        let frow: Vec<F> = row.iter().map(|&v| F::from_f64_lossy(v)).collect();
        let fc = g.constant(Tensor::new(g.shape(p).to_vec(), frow)?);
        let prod = g.mul(p, fc)?;
        let s = g.sum(prod);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one block");
    Ok(g.scale(total, F::from_usize(n).unwrap()))
}

/// Averages per-sample routing distributions over a batch, block by block.
/// `per_sample[s][l]` is sample `s`'s `[1, N]` distribution at block `l`.
pub fn batch_mean_probs<F: Scalar>(g: &mut Graph<F>, per_sample: &[Vec<Var>]) -> Result<Vec<Var>> {
    let Some(first) = per_sample.first() else {
        return Err(Error::DegenerateInput("empty batch".into()));
    };
    let n_blocks = first.len();
    (0..n_blocks)
        .map(|l| {
            let rows: Vec<Var> = per_sample.iter().map(|s| s[l]).collect();
            if rows.len() == 1 {
                return Ok(rows[0]);
            }
            let stacked = g.concat(&rows, 0)?;
            let all = vec![true; rows.len()];
            g.mean_pool(stacked, &all)
        })
        .collect()
}

/// `mean(rec) + alpha · mean(balance)`. With `alpha == 0` the balance term is
/// left out of the graph entirely, so nothing upstream of it gets gradient.
pub fn local_loss<F: Scalar>(
    g: &mut Graph<F>,
    rec_losses: &[Var],
    balance_losses: &[Var],
    alpha: f64,
) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Contract(format!("alpha must be >= 0, got {alpha}")));
    }
    let rec = mean_of(g, rec_losses)?;
    if alpha == 0.0 || balance_losses.is_empty() {
        return Ok(rec);
    }
    let bal = mean_of(g, balance_losses)?;
    let bal = g.scale(bal, F::from_f64_lossy(alpha));
    g.add(rec, bal)
}

fn mean_of<F: Scalar>(g: &mut Graph<F>, xs: &[Var]) -> Result<Var> {
    match xs {
        [] => Err(Error::DegenerateInput("mean of no losses".into())),
        [x] if g.shape(*x) == [1] => Ok(*x),
        [x] => g.mean(*x),
        _ => {
            let flat: Vec<Var> = xs.to_vec();
            let stacked = g.concat(&flat, 0)?;
            g.mean(stacked)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::numeric_derivative;

    fn scalar(g: &mut Graph<f64>, v: f64) -> Var {
        g.leaf(Tensor::new(vec![1, 1], vec![v]).unwrap())
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let z = scalar(&mut g, 0.0);
        let l = bce_loss(&mut g, z, 1).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let z = scalar(&mut g, 30.0);
        let l = bce_loss(&mut g, z, 1).unwrap();
        let v = g.value(l).item();
        assert!(v.is_finite() && (0.0..1e-12).contains(&v));

        let z = scalar(&mut g, 1e4);
        let l = bce_loss(&mut g, z, 0).unwrap();
        assert!((g.value(l).item() - 1e4).abs() < 1e-6);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_label() {
        for &(z, y) in &[(0.3, 1u8), (-1.7, 0), (2.5, 0), (-0.2, 1)] {
            let mut g = Graph::new();
            let x = scalar(&mut g, z);
            let l = bce_loss(&mut g, x, y).unwrap();
            g.backward(l).unwrap();
            let analytic = g.grad(x).item();
            assert!((analytic - (sigmoid(z) - y as f64)).abs() < 1e-12);
            let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
            let numeric = numeric_derivative(
                |v| if y == 1 { softplus(-v) } else { softplus(v) },
                z,
                1e-5,
            );
            assert!((analytic - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn bce_symmetry() {
        for z in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let mut g = Graph::new();
            let a = scalar(&mut g, z);
            let b = scalar(&mut g, -z);
            let la = bce_loss(&mut g, a, 1).unwrap();
            let lb = bce_loss(&mut g, b, 0).unwrap();
            assert_eq!(g.value(la).item(), g.value(lb).item());
        }
    }

    #[test]
    fn bce_rejects_bad_label() {
        let mut g = Graph::new();
        let z = scalar(&mut g, 0.0);
        assert!(bce_loss(&mut g, z, 2).is_err());
    }

    fn probs(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Vec<Var> {
        rows.iter()
            .map(|r| g.leaf(Tensor::row(r)))
            .collect()
    }

    #[test]
    fn balance_collapsed_case() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![1.0, 0.0, 0.0, 0.0]]);
        let f = GroupProportions::new(vec![vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let b = balance_loss(&mut g, &p, &f).unwrap();
        assert_eq!(g.value(b).item(), 4.0);
    }

    #[test]
    fn balance_uniform_is_block_count() {
        for n in 1..=6 {
            for l in 1..=3 {
                let mut g = Graph::new();
                let p = probs(&mut g, &vec![vec![1.0 / n as f64; n]; l]);
                let f = GroupProportions::uniform(l, n);
                let b = balance_loss(&mut g, &p, &f).unwrap();
                assert!((g.value(b).item() - l as f64).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn balance_dimension_mismatch() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![0.5, 0.5]]);
        let f = GroupProportions::uniform(2, 2);
        assert!(balance_loss(&mut g, &p, &f).is_err());
        let f = GroupProportions::uniform(1, 3);
        assert!(balance_loss(&mut g, &p, &f).is_err());
    }

    #[test]
    fn balance_gradient_is_n_times_f() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[vec![0.2, 0.3, 0.5]]);
        let f = GroupProportions::new(vec![vec![0.6, 0.1, 0.3]]).unwrap();
        let b = balance_loss(&mut g, &p, &f).unwrap();
        g.backward(b).unwrap();
        let grad = g.grad(p[0]);
        for (gv, fv) in grad.data().iter().zip([0.6, 0.1, 0.3]) {
            assert!((gv - 3.0 * fv).abs() < 1e-12);
        }
    }

    #[test]
    fn local_loss_arithmetic() {
        let mut g = Graph::new();
        let r = scalar(&mut g, 0.5);
        let b = scalar(&mut g, 2.0);
        let l = local_loss(&mut g, &[r], &[b], 0.1).unwrap();
        assert!((g.value(l).item() - 0.7).abs() < 1e-12);
        let l0 = local_loss(&mut g, &[r], &[b], 0.0).unwrap();
        assert_eq!(g.value(l0).item(), 0.5);
        assert!(local_loss(&mut g, &[r], &[b], -1.0).is_err());
    }

    #[test]
    fn proportions_from_assignments() {
        let a = vec![vec![0], vec![1], vec![2], vec![3]];
        let f = GroupProportions::from_assignments(&a, 1, 4).unwrap();
        assert_eq!(f.rows()[0], vec![0.25; 4]);
        let a = vec![vec![0, 1]; 5];
        let f = GroupProportions::from_assignments(&a, 2, 3).unwrap();
        assert_eq!(f.rows()[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(f.rows()[1], vec![0.0, 1.0, 0.0]);
        assert!(GroupProportions::from_assignments(&[vec![4]], 1, 4).is_err());
    }
}
