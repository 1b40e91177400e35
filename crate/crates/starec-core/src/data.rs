//! Interaction logs: TSV ingest, per-user histories, and the
//! train/validation/test temporal split.
//!
//! File format is tab-separated with a required header:
//! `user_id  item_id  category_id  timestamp  label  [uf_*...]  [if_*...]`.
//! When explicit feature columns are absent, user features default to
//! `[user_id]` and item features to `[category_id, item_id]`, so the
//! first item feature is always the category.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub type UserId = u32;
pub type ItemId = u32;
pub type CategoryId = u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing required column: {0}")]
    MissingColumn(&'static str),
    #[error("empty file (no header)")]
    EmptyFile,
    #[error("unrecognized column: {0}")]
    UnknownColumn(String),
}

/// One logged (user, item) event; the atom all histories are built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub category_id: CategoryId,
    pub timestamp: u64,
    /// Click/no-click feedback.
    pub label: u8,
    pub user_features: Vec<u32>,
    pub item_features: Vec<u32>,
}

impl Interaction {
    /// Plain event without extra feature columns.
    pub fn simple(
        user_id: UserId,
        item_id: ItemId,
        category_id: CategoryId,
        timestamp: u64,
        label: u8,
    ) -> Self {
        Interaction {
            user_id,
            item_id,
            category_id,
            timestamp,
            label,
            user_features: vec![user_id],
            item_features: vec![category_id, item_id],
        }
    }
}

/// A user's events sorted ascending by timestamp (ties keep input order).
#[derive(Debug, Clone)]
pub struct UserHistory {
    pub user_id: UserId,
    pub events: Vec<Interaction>,
    /// Size of the most-recent view; clamped to the history length.
    pub recent_window: usize,
}

impl UserHistory {
    pub fn new(user_id: UserId, mut events: Vec<Interaction>, recent_window: usize) -> Self {
        // stable sort preserves input order on timestamp ties
        events.sort_by_key(|e| e.timestamp);
        let recent_window = recent_window.min(events.len());
        UserHistory {
            user_id,
            events,
            recent_window,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// History collection indexed by user, iteration order sorted by user id.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    histories: Vec<UserHistory>,
    by_user: HashMap<UserId, usize>,
}

impl Dataset {
    pub fn from_histories(mut histories: Vec<UserHistory>) -> Self {
        histories.sort_by_key(|h| h.user_id);
        let by_user = histories
            .iter()
            .enumerate()
            .map(|(i, h)| (h.user_id, i))
            .collect();
        Dataset { histories, by_user }
    }

    pub fn histories(&self) -> &[UserHistory] {
        &self.histories
    }

    pub fn get(&self, user_id: UserId) -> Option<&UserHistory> {
        self.by_user.get(&user_id).map(|&i| &self.histories[i])
    }

    pub fn index_of(&self, user_id: UserId) -> Option<usize> {
        self.by_user.get(&user_id).copied()
    }

    pub fn by_index(&self, idx: usize) -> &UserHistory {
        &self.histories[idx]
    }

    pub fn n_users(&self) -> usize {
        self.histories.len()
    }

    pub fn n_events(&self) -> usize {
        self.histories.iter().map(|h| h.len()).sum()
    }

    /// Field vocabulary sizes (max index + 1) for user and item features.
    pub fn vocab_sizes(&self) -> (Vec<usize>, Vec<usize>) {
        let mut user_vocab: Vec<usize> = Vec::new();
        let mut item_vocab: Vec<usize> = Vec::new();
        for h in &self.histories {
            for e in &h.events {
                grow_vocab(&mut user_vocab, &e.user_features);
                grow_vocab(&mut item_vocab, &e.item_features);
            }
        }
        (user_vocab, item_vocab)
    }
}

fn grow_vocab(vocab: &mut Vec<usize>, features: &[u32]) {
    if vocab.len() < features.len() {
        vocab.resize(features.len(), 0);
    }
    for (v, &f) in vocab.iter_mut().zip(features) {
        *v = (*v).max(f as usize + 1);
    }
}

/// One malformed input row.
#[derive(Debug, Clone)]
pub struct RowError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub rows_ok: usize,
    pub rows_rejected: usize,
    /// First few row-level errors, each with its 1-based line number.
    pub errors: Vec<RowError>,
}

const MAX_REPORTED_ERRORS: usize = 32;
const REQUIRED_COLUMNS: [&str; 5] = ["user_id", "item_id", "category_id", "timestamp", "label"];

/// Load a TSV interaction log into per-user sorted histories.
///
/// Malformed rows (non-integer fields, labels outside {0,1}, feature
/// count mismatches) are counted and reported but do not abort the
/// load; a missing required column does.
pub fn load_interactions(path: &Path) -> Result<LoadOutcome, DataError> {
    let file = std::fs::File::open(path)?;
    load_interactions_from(std::io::BufReader::new(file))
}

pub fn load_interactions_from<R: BufRead>(reader: R) -> Result<LoadOutcome, DataError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(DataError::EmptyFile),
    };
    let cols: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
    let mut col_index: HashMap<&str, usize> = HashMap::new();
    let mut uf_cols: Vec<usize> = Vec::new();
    let mut if_cols: Vec<usize> = Vec::new();
    for (i, c) in cols.iter().enumerate() {
        if REQUIRED_COLUMNS.contains(&c.as_str()) {
            col_index.insert(c.as_str(), i);
        } else if c.starts_with("uf_") {
            uf_cols.push(i);
        } else if c.starts_with("if_") {
            if_cols.push(i);
        } else {
            return Err(DataError::UnknownColumn(c.clone()));
        }
    }
    for req in REQUIRED_COLUMNS {
        if !col_index.contains_key(req) {
            return Err(DataError::MissingColumn(req));
        }
    }

    let mut per_user: HashMap<UserId, Vec<Interaction>> = HashMap::new();
    let mut rows_ok = 0usize;
    let mut rows_rejected = 0usize;
    let mut errors = Vec::new();
    let reject = |line: usize, reason: String, errors: &mut Vec<RowError>| {
        if errors.len() < MAX_REPORTED_ERRORS {
            errors.push(RowError { line, reason });
        }
    };

    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2; // 1-based, after header
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            rows_rejected += 1;
            reject(
                lineno,
                format!("expected {} fields, got {}", cols.len(), fields.len()),
                &mut errors,
            );
            continue;
        }
        let parse = |name: &str| -> Result<u64, String> {
            let idx = col_index[name];
            fields[idx]
                .trim()
                .parse::<u64>()
                .map_err(|_| format!("non-integer {}: {:?}", name, fields[idx]))
        };
        let row = (|| -> Result<Interaction, String> {
            let user_id = parse("user_id")? as u32;
            let item_id = parse("item_id")? as u32;
            let category_id = parse("category_id")? as u32;
            let timestamp = parse("timestamp")?;
            let label = parse("label")?;
            if label > 1 {
                return Err(format!("label must be 0 or 1, got {}", label));
            }
            let mut user_features = Vec::with_capacity(1 + uf_cols.len());
            let mut item_features = Vec::with_capacity(2 + if_cols.len());
            if uf_cols.is_empty() {
                user_features.push(user_id);
            } else {
                for &i in &uf_cols {
                    let v = fields[i]
                        .trim()
                        .parse::<u32>()
                        .map_err(|_| format!("non-integer {}: {:?}", cols[i], fields[i]))?;
                    user_features.push(v);
                }
            }
            if if_cols.is_empty() {
                item_features.push(category_id);
                item_features.push(item_id);
            } else {
                for &i in &if_cols {
                    let v = fields[i]
                        .trim()
                        .parse::<u32>()
                        .map_err(|_| format!("non-integer {}: {:?}", cols[i], fields[i]))?;
                    item_features.push(v);
                }
                if item_features[0] != category_id {
                    return Err(format!(
                        "first item feature {} does not match category_id {}",
                        item_features[0], category_id
                    ));
                }
            }
            Ok(Interaction {
                user_id,
                item_id,
                category_id,
                timestamp,
                label: label as u8,
                user_features,
                item_features,
            })
        })();
        match row {
            Ok(inter) => {
                per_user.entry(inter.user_id).or_default().push(inter);
                rows_ok += 1;
            }
            Err(reason) => {
                rows_rejected += 1;
                reject(lineno, reason, &mut errors);
            }
        }
    }

    let histories: Vec<UserHistory> = per_user
        .into_iter()
        .map(|(uid, evs)| {
            let n = evs.len();
            UserHistory::new(uid, evs, n)
        })
        .collect();
    Ok(LoadOutcome {
        dataset: Dataset::from_histories(histories),
        rows_ok,
        rows_rejected,
        errors,
    })
}

/// Write histories back to the TSV format, with explicit feature
/// columns so a write/load round trip is exact.
pub fn write_interactions(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_interactions_to(BufWriter::new(file), dataset)
}

pub fn write_interactions_to<W: Write>(mut w: W, dataset: &Dataset) -> Result<(), DataError> {
    let (uf_n, if_n) = dataset
        .histories()
        .first()
        .and_then(|h| h.events.first())
        .map(|e| (e.user_features.len(), e.item_features.len()))
        .unwrap_or((1, 2));
    let mut header = String::from("user_id\titem_id\tcategory_id\ttimestamp\tlabel");
    for i in 0..uf_n {
        header.push_str(&format!("\tuf_{}", i + 1));
    }
    for i in 0..if_n {
        header.push_str(&format!("\tif_{}", i + 1));
    }
    writeln!(w, "{}", header)?;
    for h in dataset.histories() {
        for e in &h.events {
            write!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                e.user_id, e.item_id, e.category_id, e.timestamp, e.label
            )?;
            for f in &e.user_features {
                write!(w, "\t{}", f)?;
            }
            for f in &e.item_features {
                write!(w, "\t{}", f)?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// A prediction task: the event at `target_pos` in the user's history
/// is the target; everything strictly before it is usable context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub user_id: UserId,
    /// 0-based index into the user's sorted events.
    pub target_pos: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<Task>,
    pub validation: Vec<Task>,
    pub test: Vec<Task>,
}

#[derive(Debug)]
pub struct SplitOutcome {
    pub split: DatasetSplit,
    /// Users with fewer than 4 events, excluded from all splits.
    pub excluded_users: usize,
}

/// Per user with T >= 4 events: train target is the (T-2)-th event with
/// the first T-3 as context, validation the (T-1)-th, test the T-th.
pub fn temporal_split(dataset: &Dataset) -> SplitOutcome {
    let mut split = DatasetSplit::default();
    let mut excluded = 0usize;
    for h in dataset.histories() {
        let t = h.len();
        if t < 4 {
            excluded += 1;
            continue;
        }
        split.train.push(Task {
            user_id: h.user_id,
            target_pos: t - 3,
        });
        split.validation.push(Task {
            user_id: h.user_id,
            target_pos: t - 2,
        });
        split.test.push(Task {
            user_id: h.user_id,
            target_pos: t - 1,
        });
    }
    SplitOutcome {
        split,
        excluded_users: excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsv(body: &str) -> LoadOutcome {
        load_interactions_from(body.as_bytes()).unwrap()
    }

    #[test]
    fn two_row_file_one_user() {
        let out = tsv("user_id\titem_id\tcategory_id\ttimestamp\tlabel\n1\t10\t2\t5\t1\n1\t11\t3\t3\t0\n");
        assert_eq!(out.rows_ok, 2);
        assert_eq!(out.dataset.n_users(), 1);
        let h = out.dataset.get(1).unwrap();
        assert_eq!(h.len(), 2);
        // returned sorted ascending even though the file was out of order
        assert_eq!(h.events[0].timestamp, 3);
        assert_eq!(h.events[1].timestamp, 5);
    }

    #[test]
    fn bad_label_rejected_and_counted() {
        let out = tsv("user_id\titem_id\tcategory_id\ttimestamp\tlabel\n1\t10\t2\t5\t2\n1\t11\t2\t6\t1\n");
        assert_eq!(out.rows_ok, 1);
        assert_eq!(out.rows_rejected, 1);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].line, 2);
    }

    #[test]
    fn non_integer_field_reports_line() {
        let out = tsv("user_id\titem_id\tcategory_id\ttimestamp\tlabel\n1\t10\t2\t5\t1\nx\t10\t2\t6\t1\n");
        assert_eq!(out.rows_rejected, 1);
        assert_eq!(out.errors[0].line, 3);
        assert!(out.errors[0].reason.contains("user_id"));
    }

    #[test]
    fn missing_column_names_it() {
        let err = load_interactions_from(
            "user_id\titem_id\tcategory_id\tlabel\n1\t10\t2\t1\n".as_bytes(),
        )
        .unwrap_err();
        match err {
            DataError::MissingColumn(c) => assert_eq!(c, "timestamp"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn category_must_match_first_item_feature() {
        let out = tsv(
            "user_id\titem_id\tcategory_id\ttimestamp\tlabel\tif_1\tif_2\n1\t10\t2\t5\t1\t3\t10\n",
        );
        assert_eq!(out.rows_rejected, 1);
        assert!(out.errors[0].reason.contains("category_id"));
    }

    #[test]
    fn split_positions() {
        // T=10: one-based targets 8/9/10 -> zero-based 7/8/9
        let events: Vec<Interaction> = (0..10)
            .map(|i| Interaction::simple(1, i, 0, i as u64, 0))
            .collect();
        let ds = Dataset::from_histories(vec![UserHistory::new(1, events, 10)]);
        let out = temporal_split(&ds);
        assert_eq!(out.split.train[0].target_pos, 7);
        assert_eq!(out.split.validation[0].target_pos, 8);
        assert_eq!(out.split.test[0].target_pos, 9);
        assert_eq!(out.excluded_users, 0);
    }

    #[test]
    fn split_minimal_and_excluded() {
        let mk = |n: u32, uid: UserId| {
            let events: Vec<Interaction> = (0..n)
                .map(|i| Interaction::simple(uid, i, 0, i as u64, 0))
                .collect();
            UserHistory::new(uid, events, n as usize)
        };
        let ds = Dataset::from_histories(vec![mk(4, 1), mk(3, 2)]);
        let out = temporal_split(&ds);
        // T=4: one-based targets 2/3/4, contexts of length 1/2/3
        assert_eq!(out.split.train, vec![Task { user_id: 1, target_pos: 1 }]);
        assert_eq!(
            out.split.validation,
            vec![Task { user_id: 1, target_pos: 2 }]
        );
        assert_eq!(out.split.test, vec![Task { user_id: 1, target_pos: 3 }]);
        assert_eq!(out.excluded_users, 1);
    }

    #[test]
    fn split_targets_disjoint() {
        let events: Vec<Interaction> = (0..12)
            .map(|i| Interaction::simple(7, i, 0, i as u64, 0))
            .collect();
        let ds = Dataset::from_histories(vec![UserHistory::new(7, events, 12)]);
        let out = temporal_split(&ds);
        let all = [
            out.split.train[0].target_pos,
            out.split.validation[0].target_pos,
            out.split.test[0].target_pos,
        ];
        assert_eq!(all.len(), {
            let mut v = all.to_vec();
            v.dedup();
            v.len()
        });
    }

    #[test]
    fn roundtrip_exact() {
        let out = tsv("user_id\titem_id\tcategory_id\ttimestamp\tlabel\n3\t10\t2\t5\t1\n3\t11\t4\t9\t0\n2\t5\t1\t1\t1\n");
        let mut buf = Vec::new();
        write_interactions_to(&mut buf, &out.dataset).unwrap();
        let back = load_interactions_from(buf.as_slice()).unwrap();
        assert_eq!(back.rows_ok, 3);
        for h in out.dataset.histories() {
            let other = back.dataset.get(h.user_id).unwrap();
            assert_eq!(h.events, other.events);
        }
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let out = tsv("user_id\titem_id\tcategory_id\ttimestamp\tlabel\n1\t10\t2\t5\t1\n1\t11\t2\t5\t0\n");
        let h = out.dataset.get(1).unwrap();
        assert_eq!(h.events[0].item_id, 10);
        assert_eq!(h.events[1].item_id, 11);
    }
}
