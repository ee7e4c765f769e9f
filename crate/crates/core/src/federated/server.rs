use std::collections::HashMap;

use super::UploadPayload;
use crate::error::{Error, Result};
use crate::loss::GroupProportions;
use crate::model::{ParamSet, Partition};

/// Per-client aggregation weight within one scope.
pub type Weights = Vec<(u32, f64)>;

fn sorted(payloads: &[UploadPayload]) -> Vec<&UploadPayload> {
    let mut v: Vec<&UploadPayload> = payloads.iter().collect();
    v.sort_by_key(|p| p.client);
    v
}

/// `α_u = n_u / Σ n_v` over `members`, in the given order.
fn weights(members: &[&UploadPayload]) -> Result<Weights> {
    let total: usize = members.iter().map(|p| p.n_samples).sum();
    if total == 0 {
        return Err(Error::Contract("aggregation over zero samples".into()));
    }
    Ok(members
        .iter()
        .map(|p| (p.client, p.n_samples as f64 / total as f64))
        .collect())
}

fn lookup<'a>(payloads: &[&'a UploadPayload]) -> Vec<HashMap<&'a str, &'a [f64]>> {
    payloads
        .iter()
        .map(|p| {
            p.deltas
                .iter()
                .map(|d| (d.name.as_str(), d.values.as_slice()))
                .collect()
        })
        .collect()
}

/// Adds the weighted mean of `members`' deltas for parameter `idx`.
fn apply(
    params: &mut ParamSet<f32>,
    idx: usize,
    members: &[(&HashMap<&str, &[f64]>, f64)],
) -> Result<()> {
    let p = params.by_index_mut(idx);
    let mut acc = vec![0.0f64; p.value.len()];
    for (deltas, w) in members {
        let d = deltas.get(p.name.as_str()).ok_or_else(|| {
            Error::Contract(format!("payload lacks a delta for {}", p.name))
        })?;
        if d.len() != acc.len() {
            return Err(Error::shape("aggregate", &[acc.len()], &[d.len()]));
        }
        for (a, &v) in acc.iter_mut().zip(d.iter()) {
            *a += w * v;
        }
    }
    for (x, a) in p.value.data_mut().iter_mut().zip(acc) {
        *x = (*x as f64 + a) as f32;
    }
    Ok(())
}

/// Moves every GLOBAL parameter by the sample-weighted mean delta. The
/// reduction runs in client-id order, so arrival order does not matter.
pub fn aggregate_global(payloads: &[UploadPayload], params: &mut ParamSet<f32>) -> Result<Weights> {
    if payloads.is_empty() {
        return Ok(Vec::new());
    }
    let order = sorted(payloads);
    let w = weights(&order)?;
    let maps = lookup(&order);
    let members: Vec<_> = maps.iter().zip(w.iter().map(|x| x.1)).collect();
    for idx in 0..params.len() {
        if params.by_index(idx).partition == Partition::Global {
            apply(params, idx, &members)?;
        }
    }
    Ok(w)
}

/// Aggregates each group FFN over the clients routed to it this round, with
/// weights renormalized inside the group. Groups nobody was routed to keep
/// their parameters. Returns the weights of every updated group.
pub fn aggregate_group(
    payloads: &[UploadPayload],
    params: &mut ParamSet<f32>,
) -> Result<Vec<((usize, usize), Weights)>> {
    let order = sorted(payloads);
    let maps = lookup(&order);
    let mut out: Vec<((usize, usize), Weights)> = Vec::new();
    for idx in 0..params.len() {
        let Partition::Group { block, group } = params.by_index(idx).partition else {
            continue;
        };
        let mut members = Vec::new();
        let mut chosen = Vec::new();
        for (p, m) in order.iter().zip(&maps) {
            match p.assignments.get(block) {
                Some(&a) if a == group => {
                    chosen.push(*p);
                    members.push(m);
                }
                Some(_) => {}
                None => {
                    return Err(Error::Index {
                        what: "payload assignments",
                        index: block,
                        size: p.assignments.len(),
                    })
                }
            }
        }
        if chosen.is_empty() {
            continue;
        }
        let w = weights(&chosen)?;
        let weighted: Vec<_> = members.into_iter().zip(w.iter().map(|x| x.1)).collect();
        apply(params, idx, &weighted)?;
        if out.last().map(|l| l.0) != Some((block, group)) {
            out.push(((block, group), w));
        }
    }
    Ok(out)
}

/// Share of this round's participants routed to each group, per block.
pub fn compute_group_proportions(
    payloads: &[UploadPayload],
    n_blocks: usize,
    n_groups: usize,
) -> Result<GroupProportions> {
    let a: Vec<Vec<usize>> = sorted(payloads)
        .into_iter()
        .map(|p| p.assignments.clone())
        .collect();
    GroupProportions::from_assignments(&a, n_blocks, n_groups)
}
