//! Interaction logs, splitting, sequence construction and synthetic data.

mod load;
mod sequence;
mod split;
mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ItemCatalog;

pub use load::{load_interactions, Schema};
pub use sequence::{build_sequences, Sample, UserSequences};
pub use split::{leave_one_out_split, SplitSpec, UserSplit};
pub use synthetic::{sample_negatives, synthetic_generate, SyntheticLog, SyntheticSpec};

/// One impression: a user saw an item at a time and clicked or not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub time: i64,
    pub label: u8,
}

/// Bijection between raw identifiers and contiguous integer ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for IdMap {
    fn from(raw: Vec<String>) -> Self {
        let index = raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i as u32))
            .collect();
        Self { raw, index }
    }
}

impl From<IdMap> for Vec<String> {
    fn from(m: IdMap) -> Self {
        m.raw
    }
}

impl IdMap {
    /// Id of `raw`, assigning the next free id on first sight.
    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len() as u32;
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), id);
        id
    }

    pub fn encode(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        self.raw.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    fn sequential(n: usize, prefix: &str) -> Self {
        (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().into()
    }
}

/// Id tables written next to a loaded log so ids can be mapped back.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: IdMap,
    pub items: IdMap,
    pub attrs: Vec<(String, IdMap)>,
}

/// Validated log with contiguous ids. Item attributes are stored per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub ids: IdMaps,
    /// `item_attrs[m][item]`, one column per extra attribute.
    pub item_attrs: Vec<Vec<u32>>,
}

impl InteractionLog {
    pub fn n_users(&self) -> usize {
        self.ids.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.ids.items.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices of every user, ordered by time with ties broken by
    /// item id and then by file order.
    pub fn per_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for (i, r) in self.records.iter().enumerate() {
            out[r.user as usize].push(i);
        }
        for idx in &mut out {
            idx.sort_by_key(|&i| (self.records[i].time, self.records[i].item, i));
        }
        out
    }

    pub fn catalog(&self) -> Result<ItemCatalog> {
        let vocab = self.ids.attrs.iter().map(|(_, m)| m.len().max(1)).collect();
        ItemCatalog::new(self.n_items(), self.item_attrs.clone(), vocab)
    }

    pub fn save_id_maps(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.ids)?)?;
        Ok(())
    }

    /// Builds a log from already-contiguous ids, for generated data.
    pub fn from_records(records: Vec<Interaction>, n_users: usize, n_items: usize) -> Result<Self> {
        for r in &records {
            if r.user as usize >= n_users || r.item as usize >= n_items || r.label > 1 {
                return Err(Error::Contract(format!("invalid record {r:?}")));
            }
        }
        Ok(Self {
            records,
            ids: IdMaps {
                users: IdMap::sequential(n_users, "u"),
                items: IdMap::sequential(n_items, "i"),
                attrs: Vec::new(),
            },
            item_attrs: Vec::new(),
        })
    }
}

/// Split, sequences and item catalog for a log, ready for a federation.
pub fn prepare(log: &InteractionLog, max_len: usize) -> Result<(ItemCatalog, Vec<UserSequences>)> {
    let split = leave_one_out_split(log);
    Ok((log.catalog()?, build_sequences(log, &split, max_len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_map_round_trip() {
        let mut m = IdMap::default();
        for raw in ["b", "a", "b", "zz", "a"] {
            m.intern(raw);
        }
        assert_eq!(m.len(), 3);
        for raw in ["a", "b", "zz"] {
            assert_eq!(m.decode(m.encode(raw).unwrap()), Some(raw));
        }
        let json = serde_json::to_string(&m).unwrap();
        let back: IdMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn per_user_order_breaks_ties_by_item() {
        let recs = vec![
            Interaction { user: 0, item: 5, time: 2, label: 1 },
            Interaction { user: 0, item: 3, time: 2, label: 0 },
            Interaction { user: 0, item: 9, time: 1, label: 1 },
        ];
        let log = InteractionLog::from_records(recs, 1, 10).unwrap();
        assert_eq!(log.per_user()[0], vec![2, 1, 0]);
    }
}
