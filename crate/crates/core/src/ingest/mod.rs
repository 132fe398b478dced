//! Interaction data: loading, filtering, leave-one-out splitting, batching
//! and synthetic interest-shift generation.

mod batch;
pub mod synth;

pub use batch::{make_batches, Batch, PadSide};
pub use synth::{synth_shift_generate, SynthConfig};

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item index reserved for padding.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Bijection between item ids and dense indices. Index 0 is the padding slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            ids: vec![String::new()],
            index: HashMap::new(),
        }
    }
}

impl Vocabulary {
    /// Index of `id`, inserting it if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        (index != PAD).then(|| self.ids.get(index).map(String::as_str)).flatten()
    }

    /// Number of slots including padding.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.len() <= 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    pub users: Vec<UserRecord>,
    pub vocab: Vocabulary,
}

impl InteractionDataset {
    /// Groups interactions by user (first-seen order) and sorts each user's
    /// history by timestamp, keeping file order among ties.
    pub fn from_interactions(rows: impl IntoIterator<Item = Interaction>) -> Result<Self> {
        let mut vocab = Vocabulary::default();
        let mut users: Vec<UserRecord> = Vec::new();
        let mut user_index: HashMap<String, usize> = HashMap::new();
        for row in rows {
            if row.timestamp < 0 {
                return Err(Error::Invalid(format!("negative timestamp {}", row.timestamp)));
            }
            let item = vocab.intern(&row.item_id);
            let u = *user_index.entry(row.user_id.clone()).or_insert_with(|| {
                users.push(UserRecord {
                    user_id: row.user_id.clone(),
                    items: Vec::new(),
                    timestamps: Vec::new(),
                });
                users.len() - 1
            });
            users[u].items.push(item);
            users[u].timestamps.push(row.timestamp);
        }
        for u in &mut users {
            let mut order: Vec<usize> = (0..u.items.len()).collect();
            order.sort_by_key(|&i| u.timestamps[i]);
            u.items = order.iter().map(|&i| u.items[i]).collect();
            u.timestamps = order.iter().map(|&i| u.timestamps[i]).collect();
        }
        Ok(Self { users, vocab })
    }

    pub fn num_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    pub fn interactions(&self) -> impl Iterator<Item = Interaction> + '_ {
        self.users.iter().flat_map(move |u| {
            u.items.iter().zip(&u.timestamps).map(move |(&i, &t)| Interaction {
                user_id: u.user_id.clone(),
                item_id: self.vocab.id(i).unwrap_or_default().to_owned(),
                timestamp: t,
            })
        })
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "user_id\titem_id\ttimestamp")?;
        for row in self.interactions() {
            writeln!(out, "{}\t{}\t{}", row.user_id, row.item_id, row.timestamp)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Column names of an interaction file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsvSchema {
    pub user: String,
    pub item: String,
    pub timestamp: String,
}

impl Default for TsvSchema {
    fn default() -> Self {
        Self {
            user: "user_id".into(),
            item: "item_id".into(),
            timestamp: "timestamp".into(),
        }
    }
}

pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<InteractionDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: 1,
            msg: format!("missing column {name:?}"),
        })
    };
    let (cu, ci, ct) = (column(&schema.user)?, column(&schema.item)?, column(&schema.timestamp)?);

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| {
            record.get(i).map(str::trim).ok_or_else(|| Error::Parse {
                path: path.to_owned(),
                line,
                msg: format!("expected at least {} fields, found {}", i + 1, record.len()),
            })
        };
        let (user, item, ts) = (field(cu)?, field(ci)?, field(ct)?);
        let timestamp: i64 = ts.parse().map_err(|_| Error::Parse {
            path: path.to_owned(),
            line,
            msg: format!("timestamp {ts:?} is not an integer"),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        rows.push(Interaction {
            user_id: user.to_owned(),
            item_id: item.to_owned(),
            timestamp,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_owned()));
    }
    InteractionDataset::from_interactions(rows)
}

/// Drops users with fewer than `k` interactions and items with fewer than
/// `k` occurrences, repeating until neither rule removes anything, then
/// re-densifies the vocabulary.
pub fn filter_min_interactions(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset> {
    if k < 3 {
        return Err(Error::Invalid(format!("minimum interaction count {k} is below 3")));
    }
    let mut users: Vec<(String, Vec<(usize, i64)>)> = ds
        .users
        .iter()
        .map(|u| {
            let seq = u.items.iter().copied().zip(u.timestamps.iter().copied()).collect();
            (u.user_id.clone(), seq)
        })
        .collect();
    loop {
        let mut counts = vec![0usize; ds.vocab.len()];
        for (_, seq) in &users {
            for &(i, _) in seq {
                counts[i] += 1;
            }
        }
        let before: usize = users.iter().map(|(_, s)| s.len()).sum::<usize>() + users.len();
        for (_, seq) in &mut users {
            seq.retain(|&(i, _)| counts[i] >= k);
        }
        users.retain(|(_, seq)| seq.len() >= k);
        let after: usize = users.iter().map(|(_, s)| s.len()).sum::<usize>() + users.len();
        if after == before {
            break;
        }
    }
    if users.is_empty() {
        return Err(Error::Exhausted);
    }
    let rows = users.into_iter().flat_map(|(user, seq)| {
        let vocab = &ds.vocab;
        seq.into_iter().map(move |(i, t)| Interaction {
            user_id: user.clone(),
            item_id: vocab.id(i).unwrap_or_default().to_owned(),
            timestamp: t,
        })
    });
    InteractionDataset::from_interactions(rows)
}

/// One next-item prediction instance: a chronological input prefix and the
/// interaction that follows it.
#[derive(Clone, Debug)]
pub struct Example {
    pub user: usize,
    items: Arc<[usize]>,
    timestamps: Arc<[i64]>,
    input_len: usize,
}

impl Example {
    pub fn new(
        user: usize,
        mut items: Vec<usize>,
        mut timestamps: Vec<i64>,
        target_item: usize,
        target_timestamp: i64,
    ) -> Result<Self> {
        if items.is_empty() || items.len() != timestamps.len() {
            return Err(Error::Invalid("example needs a non-empty, aligned input".into()));
        }
        let input_len = items.len();
        items.push(target_item);
        timestamps.push(target_timestamp);
        Ok(Self {
            user,
            items: items.into(),
            timestamps: timestamps.into(),
            input_len,
        })
    }

    fn prefix_of(user: usize, items: &Arc<[usize]>, timestamps: &Arc<[i64]>, input_len: usize) -> Self {
        Self {
            user,
            items: Arc::clone(items),
            timestamps: Arc::clone(timestamps),
            input_len,
        }
    }

    pub fn input_items(&self) -> &[usize] {
        &self.items[..self.input_len]
    }

    pub fn input_timestamps(&self) -> &[i64] {
        &self.timestamps[..self.input_len]
    }

    pub fn target_item(&self) -> usize {
        self.items[self.input_len]
    }

    pub fn target_timestamp(&self) -> i64 {
        self.timestamps[self.input_len]
    }

    pub fn with_target_item(&self, target_item: usize) -> Self {
        let mut items = self.items[..=self.input_len].to_vec();
        items[self.input_len] = target_item;
        Self {
            user: self.user,
            items: items.into(),
            timestamps: self.timestamps[..=self.input_len].to_vec().into(),
            input_len: self.input_len,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SplitDataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitDataset {
    pub fn manifest(&self, ds: &InteractionDataset) -> SplitManifest {
        SplitManifest {
            users: ds.users.len(),
            items: ds.num_items() - 1,
            interactions: ds.num_interactions(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
        }
    }
}

/// Leave-one-out: the last interaction is the test target, the second to
/// last the validation target, and every earlier position `j ≥ 1` a training
/// target with the prefix before it as input.
pub fn leave_one_out_split(ds: &InteractionDataset) -> Result<SplitDataset> {
    let mut split = SplitDataset::default();
    for (u, rec) in ds.users.iter().enumerate() {
        let n = rec.items.len();
        if n < 3 {
            return Err(Error::Invalid(format!(
                "user {:?} has {n} interactions; leave-one-out needs at least 3",
                rec.user_id
            )));
        }
        let items: Arc<[usize]> = rec.items.clone().into();
        let ts: Arc<[i64]> = rec.timestamps.clone().into();
        for j in 1..n - 2 {
            split.train.push(Example::prefix_of(u, &items, &ts, j));
        }
        split.valid.push(Example::prefix_of(u, &items, &ts, n - 2));
        split.test.push(Example::prefix_of(u, &items, &ts, n - 1));
    }
    Ok(split)
}

/// Sorts by target timestamp (stable) and cuts into `k` contiguous groups;
/// the first `len % k` groups take one extra example.
pub fn segment_test_by_time(test: &[Example], k: usize) -> Result<Vec<Vec<Example>>> {
    if k < 2 {
        return Err(Error::Invalid(format!("segment count {k} is below 2")));
    }
    if test.is_empty() || k > test.len() {
        return Err(Error::Invalid(format!(
            "cannot cut {} examples into {k} segments",
            test.len()
        )));
    }
    let mut sorted = test.to_vec();
    sorted.sort_by_key(Example::target_timestamp);
    let (base, extra) = (sorted.len() / k, sorted.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut rest = sorted.into_iter();
    for s in 0..k {
        let size = base + usize::from(s < extra);
        out.push(rest.by_ref().take(size).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn ds_from(rows: &[(&str, &str, i64)]) -> InteractionDataset {
        InteractionDataset::from_interactions(rows.iter().map(|&(u, i, t)| Interaction {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: t,
        }))
        .unwrap()
    }

    #[test]
    fn load_sorts_by_timestamp() {
        let f = write_tmp("user_id\titem_id\ttimestamp\nu\ta\t30\nu\tb\t10\nu\tc\t20\n");
        let ds = load_tsv(f.path(), &TsvSchema::default()).unwrap();
        assert_eq!(ds.users.len(), 1);
        assert_eq!(ds.users[0].timestamps, vec![10, 20, 30]);
        let ids: Vec<_> = ds.users[0].items.iter().map(|&i| ds.vocab.id(i).unwrap()).collect();
        assert_eq!(ids, vec!["b", "c", "a"]);
        // first-seen order, pad at 0
        assert_eq!(ds.vocab.get("a"), Some(1));
    }

    #[test]
    fn load_separates_interleaved_users() {
        let f = write_tmp("user_id\titem_id\ttimestamp\nu1\ta\t5\nu2\tb\t9\nu1\tc\t1\nu2\td\t3\n");
        let ds = load_tsv(f.path(), &TsvSchema::default()).unwrap();
        assert_eq!(ds.users[0].timestamps, vec![1, 5]);
        assert_eq!(ds.users[1].timestamps, vec![3, 9]);
    }

    #[test]
    fn ties_keep_file_order() {
        let ds = ds_from(&[("u", "x", 5), ("u", "y", 5), ("u", "z", 1)]);
        let ids: Vec<_> = ds.users[0].items.iter().map(|&i| ds.vocab.id(i).unwrap()).collect();
        assert_eq!(ids, vec!["z", "x", "y"]);
    }

    #[test]
    fn bad_timestamp_names_line() {
        let f = write_tmp("user_id\titem_id\ttimestamp\nu\ta\t1\nu\tb\tsoon\n");
        let err = load_tsv(f.path(), &TsvSchema::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("user_id\titem_id\ttimestamp\n");
        assert!(matches!(load_tsv(f.path(), &TsvSchema::default()), Err(Error::EmptyFile(_))));
    }

    #[test]
    fn missing_column_is_an_error() {
        let f = write_tmp("user\titem_id\ttimestamp\nu\ta\t1\n");
        assert!(matches!(load_tsv(f.path(), &TsvSchema::default()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn short_user_is_dropped() {
        let mut rows = Vec::new();
        for t in 0..9 {
            rows.push(("short", "a", t));
        }
        for t in 0..12 {
            rows.push(("long", "a", t));
        }
        let ds = ds_from(&rows);
        let f = filter_min_interactions(&ds, 10).unwrap();
        assert_eq!(f.users.len(), 1);
        assert_eq!(f.users[0].user_id, "long");
    }

    #[test]
    fn dense_dataset_is_fixpoint() {
        let mut rows = Vec::new();
        for u in ["u1", "u2", "u3"] {
            for t in 0..4 {
                rows.push((u, ["a", "b", "c", "d"][t as usize], t));
            }
        }
        let ds = ds_from(&rows);
        assert_eq!(filter_min_interactions(&ds, 3).unwrap(), ds);
    }

    #[test]
    fn filtering_everything_errors() {
        let ds = ds_from(&[("u", "a", 1), ("u", "b", 2), ("u", "c", 3)]);
        assert!(matches!(filter_min_interactions(&ds, 10), Err(Error::Exhausted)));
    }

    #[test]
    fn split_of_four() {
        let ds = ds_from(&[("u", "a", 1), ("u", "b", 2), ("u", "c", 3), ("u", "d", 4)]);
        let id = |i: usize| ds.vocab.id(i).unwrap().to_owned();
        let s = leave_one_out_split(&ds).unwrap();
        assert_eq!(s.test.len(), 1);
        let names = |e: &Example| e.input_items().iter().map(|&i| id(i)).collect::<Vec<_>>();
        assert_eq!(names(&s.test[0]), vec!["a", "b", "c"]);
        assert_eq!(id(s.test[0].target_item()), "d");
        assert_eq!(names(&s.valid[0]), vec!["a", "b"]);
        assert_eq!(id(s.valid[0].target_item()), "c");
        assert_eq!(s.train.len(), 1);
        assert_eq!(names(&s.train[0]), vec!["a"]);
        assert_eq!(id(s.train[0].target_item()), "b");
    }

    #[test]
    fn three_interactions_leave_no_train_pair() {
        // targets 2..=n-2 go to train, so n = 3 feeds only valid and test
        let ds = ds_from(&[("u", "a", 1), ("u", "b", 2), ("u", "c", 3)]);
        let s = leave_one_out_split(&ds).unwrap();
        assert!(s.train.is_empty());
        assert_eq!(s.valid[0].input_items().len(), 1);
        assert_eq!(s.test[0].input_items().len(), 2);
    }

    #[test]
    fn split_rejects_short_users() {
        let ds = ds_from(&[("u", "a", 1), ("u", "b", 2)]);
        assert!(leave_one_out_split(&ds).is_err());
    }

    fn examples_with_ts(ts: &[i64]) -> Vec<Example> {
        ts.iter()
            .enumerate()
            .map(|(u, &t)| Example::new(u, vec![1], vec![0], 2, t).unwrap())
            .collect()
    }

    #[test]
    fn segment_sizes() {
        let sizes = |n: usize| {
            let ts: Vec<i64> = (0..n as i64).rev().collect();
            segment_test_by_time(&examples_with_ts(&ts), 4)
                .unwrap()
                .iter()
                .map(Vec::len)
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(8), vec![2, 2, 2, 2]);
        assert_eq!(sizes(10), vec![3, 3, 2, 2]);
    }

    #[test]
    fn segments_with_equal_timestamps_keep_order() {
        let ex = examples_with_ts(&[7; 10]);
        let segs = segment_test_by_time(&ex, 4).unwrap();
        let users: Vec<usize> = segs.iter().flatten().map(|e| e.user).collect();
        assert_eq!(users, (0..10).collect::<Vec<_>>());
        assert_eq!(segs.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
    }

    #[test]
    fn segment_errors() {
        let ex = examples_with_ts(&[1, 2, 3]);
        assert!(segment_test_by_time(&ex, 1).is_err());
        assert!(segment_test_by_time(&ex, 4).is_err());
        assert!(segment_test_by_time(&[], 2).is_err());
    }
}
