use std::path::Path;

use serde::{Deserialize, Serialize};

use super::InteractionLog;
use crate::error::Result;

/// Impression indices (into `InteractionLog::records`) of one user.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Fewer than three clicks: everything is training data.
    pub train_only: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub users: Vec<UserSplit>,
}

/// Leave-one-out on clicks.
///
/// With the user's clicks at sorted positions `p1 < … < pk` (k ≥ 3), the test
/// set is every impression after `p(k-1)` (so it ends with the last click and
/// keeps the non-clicks shown around it), validation is `(p(k-2), p(k-1)]`,
/// and training is everything up to `p(k-2)`.
pub fn leave_one_out_split(log: &InteractionLog) -> SplitSpec {
    let users = log
        .per_user()
        .into_iter()
        .map(|order| {
            let clicks: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|&(_, &i)| log.records[i].label == 1)
                .map(|(pos, _)| pos)
                .collect();
            let k = clicks.len();
            if k < 3 {
                return UserSplit {
                    train: order,
                    train_only: true,
                    ..Default::default()
                };
            }
            let (val_end, train_end) = (clicks[k - 2], clicks[k - 3]);
            UserSplit {
                train: order[..=train_end].to_vec(),
                val: order[train_end + 1..=val_end].to_vec(),
                test: order[val_end + 1..].to_vec(),
                train_only: false,
            }
        })
        .collect();
    SplitSpec { users }
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    user: &'a str,
    train_only: bool,
    val: &'a [usize],
    test: &'a [usize],
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema: &'static str,
    users: Vec<ManifestEntry<'a>>,
}

impl SplitSpec {
    /// JSON listing of each user's validation and test impression indices.
    pub fn write_manifest(&self, log: &InteractionLog, path: &Path) -> Result<()> {
        let users = self
            .users
            .iter()
            .enumerate()
            .map(|(u, s)| ManifestEntry {
                user: log.ids.users.decode(u as u32).unwrap_or(""),
                train_only: s.train_only,
                val: &s.val,
                test: &s.test,
            })
            .collect();
        let m = Manifest {
            schema: "mrff-split/1",
            users,
        };
        std::fs::write(path, serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}
