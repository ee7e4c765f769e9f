//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradient of `f` at `inputs` against central differences
/// `(f(θ + eps) - f(θ - eps)) / (2 eps)`, one coordinate at a time.
///
/// `f` receives a fresh graph and one leaf per input and must return a
/// single-element node.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for c in 0..input.len() {
            let orig = input.data()[c];
            work[k].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[k].data()[c], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((k, c));
            }
        }
    }
    Ok(report)
}

/// Central-difference derivative of a scalar function of one variable.
pub fn numeric_derivative(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let w = Tensor::new(vec![3], vec![1.5, 2.0, -0.5]).unwrap();
        let report = grad_check(
            |g, v| {
                let wc = g.constant(w.clone());
                let p = g.mul(v[0], wc)?;
                Ok(g.sum(p))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn quadratic_at_three() {
        let d = numeric_derivative(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-8);
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = Rng::new(11);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                let wc = g.constant(w.clone());
                let p = g.mul(c, wc)?;
                Ok(g.sum(p))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
