//! Evaluation metrics for click prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOGLOSS_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Predicted click probability.
    pub score: f64,
    pub label: u8,
}

impl EvalRecord {
    pub fn new(score: f64, label: u8) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Contract(format!("score {score} outside [0, 1]")));
        }
        if label > 1 {
            return Err(Error::Contract(format!("label must be 0 or 1, got {label}")));
        }
        Ok(Self { score, label })
    }
}

/// Area under the ROC curve via the rank-sum statistic. Tied scores share
/// their average rank, so a tie between a positive and a negative counts 1/2.
pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    let pos = records.iter().filter(|r| r.label == 1).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative",
        ));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].score == records[order[i]].score {
            j += 1;
        }
        // ranks are 1-based; the tie block [i, j] shares the mean rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j]
            .iter()
            .filter(|&&k| records[k].label == 1)
            .count();
        pos_rank_sum += rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with probabilities clipped to
/// `[1e-7, 1 - 1e-7]`.
pub fn logloss(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("LogLoss of an empty set"));
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            let p = r.score.clamp(LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP);
            if r.label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(scores: &[f64], labels: &[u8]) -> Vec<EvalRecord> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| EvalRecord::new(s, l).unwrap())
            .collect()
    }

    /// Direct pairwise definition.
    fn auc_pairs(r: &[EvalRecord]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for a in r.iter().filter(|x| x.label == 1) {
            for b in r.iter().filter(|x| x.label == 0) {
                den += 1.0;
                if a.score > b.score {
                    num += 1.0;
                } else if a.score == b.score {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let r = recs(&[0.9, 0.6, 0.3], &[1, 1, 0]);
        assert_eq!(auc_pairs(&r), 1.0);
        assert_eq!(auc(&r).unwrap(), 1.0);
        assert_eq!(auc(&recs(&[0.4; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auc(&recs(&[0.2, 0.8], &[1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(
            auc(&recs(&[0.1, 0.2], &[1, 1])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(auc(&[]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_with_ties() {
        let r = recs(
            &[0.1, 0.5, 0.5, 0.5, 0.9, 0.2, 0.2, 0.7],
            &[0, 1, 0, 1, 1, 1, 0, 0],
        );
        assert!((auc(&r).unwrap() - auc_pairs(&r)).abs() < 1e-15);
    }

    #[test]
    fn logloss_examples() {
        let r = recs(&[0.5, 0.5], &[1, 0]);
        assert!((logloss(&r).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let v = logloss(&recs(&[1.0], &[1])).unwrap();
        assert!(v.is_finite() && (v - 1.0000000494736474e-7).abs() < 1e-15, "{v}");

        let r = recs(&[0.8, 0.3, 0.6], &[1, 0, 0]);
        let by_hand = -(0.8f64.ln() + 0.7f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((logloss(&r).unwrap() - by_hand).abs() < 1e-15);
    }

    #[test]
    fn logloss_empty_rejected() {
        assert!(logloss(&[]).is_err());
    }

    #[test]
    fn record_validation() {
        assert!(EvalRecord::new(1.2, 1).is_err());
        assert!(EvalRecord::new(0.5, 3).is_err());
    }
}
