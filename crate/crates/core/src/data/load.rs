use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IdMap, IdMaps, Interaction, InteractionLog};
use crate::error::{Error, Result};

/// Column roles of a delimited interaction file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schema {
    pub user: String,
    pub item: String,
    pub time: String,
    pub label: String,
    /// Item attribute columns, in embedding order.
    pub attrs: Vec<String>,
    /// `None` sniffs tab vs comma from the header line.
    pub delimiter: Option<char>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            user: "user_id".into(),
            item: "item_id".into(),
            time: "timestamp".into(),
            label: "label".into(),
            attrs: Vec::new(),
            delimiter: None,
        }
    }
}

fn load_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

/// Reads a delimited log with a header row and remaps every id column to
/// contiguous integers in order of first appearance.
pub fn load_interactions(path: &Path, schema: &Schema) -> Result<InteractionLog> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_owned()));
    }
    let text = std::fs::read_to_string(path)?;
    let delimiter = match schema.delimiter {
        Some(c) if c.is_ascii() => c as u8,
        Some(c) => return Err(Error::Config(format!("delimiter {c:?} is not ASCII"))),
        None if text.lines().next().unwrap_or("").contains('\t') => b'\t',
        None => b',',
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| load_err(path, 1, format!("missing column {name:?}")))
    };
    let (cu, ci, ct, cl) = (
        col(&schema.user)?,
        col(&schema.item)?,
        col(&schema.time)?,
        col(&schema.label)?,
    );
    let attr_cols = schema
        .attrs
        .iter()
        .map(|a| col(a))
        .collect::<Result<Vec<_>>>()?;

    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut attr_maps = vec![IdMap::default(); attr_cols.len()];
    let mut item_attrs: Vec<Vec<u32>> = vec![Vec::new(); attr_cols.len()];
    let mut records = Vec::new();

    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            load_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |c: usize| row.get(c).ok_or_else(|| load_err(path, line, "short row"));

        let time: i64 = field(ct)?
            .parse()
            .map_err(|_| load_err(path, line, format!("timestamp {:?} is not an integer", &row[ct])))?;
        let label = match field(cl)? {
            "0" => 0,
            "1" => 1,
            other => return Err(load_err(path, line, format!("label {other:?} is not 0 or 1"))),
        };
        let user = users.intern(field(cu)?);
        let item = items.intern(field(ci)?);
        for (m, &c) in attr_cols.iter().enumerate() {
            let v = attr_maps[m].intern(field(c)?);
            let column = &mut item_attrs[m];
            if item as usize == column.len() {
                column.push(v);
            } else if column[item as usize] != v {
                return Err(load_err(
                    path,
                    line,
                    format!("item {:?} has conflicting {:?} values", &row[ci], schema.attrs[m]),
                ));
            }
        }
        records.push(Interaction {
            user,
            item,
            time,
            label,
        });
    }

    Ok(InteractionLog {
        records,
        ids: IdMaps {
            users,
            items,
            attrs: schema.attrs.iter().cloned().zip(attr_maps).collect(),
        },
        item_attrs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_with_header() {
        let f = file("user_id,item_id,timestamp,label\n");
        let log = load_interactions(f.path(), &Schema::default()).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn duplicates_are_distinct_impressions() {
        let f = file("user_id,item_id,timestamp,label\nu1,a,5,1\nu1,a,5,1\n");
        let log = load_interactions(f.path(), &Schema::default()).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.records[0], log.records[1]);
    }

    #[test]
    fn tab_delimited_with_attributes() {
        let f = file("uid\tvid\tts\tclick\tcat\nx\tv1\t3\t0\tmusic\ny\tv2\t1\t1\tnews\nx\tv2\t2\t1\tnews\n");
        let schema = Schema {
            user: "uid".into(),
            item: "vid".into(),
            time: "ts".into(),
            label: "click".into(),
            attrs: vec!["cat".into()],
            delimiter: None,
        };
        let log = load_interactions(f.path(), &schema).unwrap();
        assert_eq!((log.n_users(), log.n_items()), (2, 2));
        assert_eq!(log.item_attrs, vec![vec![0, 1]]);
        let cat = log.catalog().unwrap();
        assert_eq!(cat.vocab(), &[2, 2]);
        assert_eq!(log.ids.items.decode(1), Some("v2"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let f = file("user_id,item_id,timestamp,label\nu,i,1,1\nu,i,2,yes\n");
        match load_interactions(f.path(), &Schema::default()) {
            Err(Error::Load { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = file("user_id,item_id,label\nu,i,1\n");
        assert!(matches!(
            load_interactions(f.path(), &Schema::default()),
            Err(Error::Load { line: 1, .. })
        ));
        let f = file("user_id,item_id,timestamp,label\nu,i,abc,1\n");
        assert!(matches!(
            load_interactions(f.path(), &Schema::default()),
            Err(Error::Load { line: 2, .. })
        ));
    }

    #[test]
    fn missing_file() {
        let r = load_interactions(Path::new("/nonexistent/log.csv"), &Schema::default());
        assert!(matches!(r, Err(Error::MissingPath(_))));
    }

    #[test]
    fn loading_is_deterministic() {
        let f = file("user_id,item_id,timestamp,label\nb,x,1,1\na,y,2,0\nb,y,3,1\n");
        let a = load_interactions(f.path(), &Schema::default()).unwrap();
        let b = load_interactions(f.path(), &Schema::default()).unwrap();
        assert_eq!(a, b);
    }
}
