use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionLog};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Generator settings for logs with planted user clusters.
///
/// Items are split into `click[0].len()` item clusters of `items_per_cluster`
/// items each. A user of cluster `c` shown an item of cluster `j` clicks with
/// probability `click[c][j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    /// Impressions per user, drawn uniformly from this inclusive range.
    pub min_impressions: usize,
    pub max_impressions: usize,
    pub click: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `n` user clusters over `n` item clusters with `own` on the diagonal
    /// and `other` elsewhere.
    pub fn identity_like(n: usize, own: f64, other: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|c| (0..n).map(|j| if c == j { own } else { other }).collect())
            .collect()
    }

    pub fn n_item_clusters(&self) -> usize {
        self.click.first().map_or(0, Vec::len)
    }

    pub fn n_items(&self) -> usize {
        self.n_item_clusters() * self.items_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_clusters == 0 || self.items_per_cluster == 0 {
            return bad("synthetic sizes must be positive".into());
        }
        if self.min_impressions > self.max_impressions {
            return bad("min_impressions exceeds max_impressions".into());
        }
        if self.click.len() != self.n_clusters {
            return bad(format!(
                "click matrix has {} rows for {} clusters",
                self.click.len(),
                self.n_clusters
            ));
        }
        let width = self.n_item_clusters();
        for row in &self.click {
            if row.len() != width || width == 0 {
                return bad("click matrix rows must have equal, nonzero length".into());
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("click probabilities {row:?} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_clusters: 4,
            items_per_cluster: 10,
            min_impressions: 30,
            max_impressions: 40,
            click: Self::identity_like(4, 0.9, 0.1),
            seed: 0,
        }
    }
}

/// Generated log plus the planted labels, kept for diagnostics only.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLog {
    pub log: InteractionLog,
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
}

pub fn synthetic_generate(spec: &SyntheticSpec) -> Result<SyntheticLog> {
    spec.validate()?;
    let mut rng = Rng::stream(spec.seed, &[0x5EED]);
    // balanced partition of users into clusters
    let mut user_cluster: Vec<usize> = (0..spec.n_users).map(|u| u % spec.n_clusters).collect();
    rng.shuffle(&mut user_cluster);
    let n_items = spec.n_items();
    let item_cluster: Vec<usize> = (0..n_items).map(|i| i / spec.items_per_cluster).collect();

    let span = spec.max_impressions - spec.min_impressions + 1;
    let mut records = Vec::new();
    for (u, &c) in user_cluster.iter().enumerate() {
        let n = spec.min_impressions + rng.below(span);
        for t in 0..n {
            let item = rng.below(n_items);
            let p = spec.click[c][item_cluster[item]];
            records.push(Interaction {
                user: u as u32,
                item: item as u32,
                time: t as i64,
                label: rng.bernoulli(p) as u8,
            });
        }
    }
    Ok(SyntheticLog {
        log: InteractionLog::from_records(records, spec.n_users, n_items)?,
        user_cluster,
        item_cluster,
    })
}

/// For logs with clicks only: adds `ratio` non-click impressions per click,
/// at the click's timestamp, with items drawn uniformly from those the user
/// never clicked. Users who clicked every item get no negatives.
pub fn sample_negatives(log: &InteractionLog, ratio: usize, seed: u64) -> InteractionLog {
    let mut rng = Rng::stream(seed, &[0x4E45]);
    let mut clicked: Vec<HashSet<u32>> = vec![HashSet::new(); log.n_users()];
    for r in log.records.iter().filter(|r| r.label == 1) {
        clicked[r.user as usize].insert(r.item);
    }
    let n_items = log.n_items();
    let mut out = log.clone();
    for r in log.records.iter().filter(|r| r.label == 1) {
        let seen = &clicked[r.user as usize];
        if seen.len() >= n_items {
            continue;
        }
        for _ in 0..ratio {
            let item = loop {
                let it = rng.below(n_items) as u32;
                if !seen.contains(&it) {
                    break it;
                }
            };
            out.records.push(Interaction {
                user: r.user,
                item,
                time: r.time,
                label: 0,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn own_cluster_ctr() {
        let spec = SyntheticSpec {
            n_users: 100,
            min_impressions: 400,
            max_impressions: 400,
            ..Default::default()
        };
        let s = synthetic_generate(&spec).unwrap();
        let own: Vec<u8> = s
            .log
            .records
            .iter()
            .filter(|r| s.user_cluster[r.user as usize] == s.item_cluster[r.item as usize])
            .map(|r| r.label)
            .take(10_000)
            .collect();
        assert_eq!(own.len(), 10_000);
        let ctr = own.iter().map(|&l| l as f64).sum::<f64>() / own.len() as f64;
        assert!((ctr - 0.9).abs() <= 0.02, "{ctr}");
    }

    #[test]
    fn balanced_partition_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = synthetic_generate(&spec).unwrap();
        let b = synthetic_generate(&spec).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.user_cluster.iter().filter(|&&x| x == c).count(), 50);
        }
    }

    #[test]
    fn rejects_bad_probabilities() {
        let spec = SyntheticSpec {
            click: vec![vec![1.5]],
            n_clusters: 1,
            ..Default::default()
        };
        assert!(synthetic_generate(&spec).is_err());
    }

    #[test]
    fn negatives_avoid_clicked_items() {
        let recs = vec![
            Interaction { user: 0, item: 0, time: 1, label: 1 },
            Interaction { user: 0, item: 1, time: 2, label: 1 },
        ];
        let log = InteractionLog::from_records(recs, 1, 5).unwrap();
        let out = sample_negatives(&log, 3, 9);
        assert_eq!(out.len(), 2 + 6);
        for r in &out.records[2..] {
            assert_eq!(r.label, 0);
            assert!(r.item >= 2);
        }
    }
}
