use serde::{Deserialize, Serialize};

use super::{InteractionLog, SplitSpec};
use crate::model::SequenceInput;

/// Padding id for empty history slots. Masked out, so any valid id works.
pub const PAD_ITEM: u32 = 0;

/// One labeled impression with its left-padded click history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub user: u32,
    /// Index into `InteractionLog::records`.
    pub impression: usize,
    pub history: Vec<u32>,
    pub mask: Vec<bool>,
    pub candidate: u32,
    pub label: u8,
}

impl Sample {
    pub fn has_history(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    pub fn input(&self) -> SequenceInput<'_> {
        SequenceInput {
            history: &self.history,
            mask: &self.mask,
            candidate: self.candidate,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequences {
    pub user: u32,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Pairs every impression with the user's clicks strictly earlier in time,
/// keeping the most recent `max_len`.
pub fn build_sequences(log: &InteractionLog, split: &SplitSpec, max_len: usize) -> Vec<UserSequences> {
    let mut out: Vec<UserSequences> = (0..log.n_users())
        .map(|u| UserSequences {
            user: u as u32,
            ..Default::default()
        })
        .collect();
    for (u, order) in log.per_user().into_iter().enumerate() {
        let mut clicks: Vec<(i64, u32)> = Vec::new();
        let mut samples = std::collections::HashMap::with_capacity(order.len());
        for &i in &order {
            let r = &log.records[i];
            let visible = clicks.partition_point(|&(t, _)| t < r.time);
            let start = visible.saturating_sub(max_len);
            let recent = &clicks[start..visible];
            let pad = max_len - recent.len();
            let mut history = vec![PAD_ITEM; pad];
            history.extend(recent.iter().map(|&(_, it)| it));
            let mut mask = vec![false; pad];
            mask.resize(max_len, true);
            samples.insert(
                i,
                Sample {
                    user: r.user,
                    impression: i,
                    history,
                    mask,
                    candidate: r.item,
                    label: r.label,
                },
            );
            if r.label == 1 {
                clicks.push((r.time, r.item));
            }
        }
        let s = &split.users[u];
        let take = |ids: &[usize], m: &mut std::collections::HashMap<usize, Sample>| {
            ids.iter().filter_map(|i| m.remove(i)).collect::<Vec<_>>()
        };
        out[u].train = take(&s.train, &mut samples);
        out[u].val = take(&s.val, &mut samples);
        out[u].test = take(&s.test, &mut samples);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split, Interaction};

    fn build(rows: &[(u32, i64, u8)], max_len: usize) -> UserSequences {
        let recs = rows
            .iter()
            .map(|&(item, time, label)| Interaction { user: 0, item, time, label })
            .collect();
        let log = InteractionLog::from_records(recs, 1, 50).unwrap();
        let split = leave_one_out_split(&log);
        build_sequences(&log, &split, max_len).remove(0)
    }

    #[test]
    fn first_impression_is_all_padding() {
        let s = build(&[(7, 1, 1), (8, 2, 1)], 3);
        let first = &s.train[0];
        assert_eq!(first.mask, vec![false; 3]);
        assert_eq!(first.candidate, 7);
        assert!(!first.has_history());
    }

    #[test]
    fn truncates_to_most_recent() {
        let rows: Vec<_> = (0..6).map(|t| (10 + t as u32, t, 1)).collect();
        let s = build(&rows, 2);
        let last = s.test.last().unwrap();
        assert_eq!(last.history, vec![13, 14]);
        assert_eq!(last.mask, vec![true, true]);
    }

    #[test]
    fn same_time_clicks_are_not_history() {
        let s = build(&[(1, 1, 1), (2, 5, 1), (3, 5, 0), (4, 9, 1)], 4);
        let all: Vec<&Sample> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        let at5: Vec<_> = all.iter().filter(|x| x.candidate == 2 || x.candidate == 3).collect();
        for x in at5 {
            assert_eq!(x.history, vec![0, 0, 0, 1]);
        }
    }
}
