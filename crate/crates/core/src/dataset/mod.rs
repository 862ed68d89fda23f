//! Interaction data: loading, id encoding, per-user splits and feature files.

mod features;
mod synth;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use features::{load_feature_matrix, write_feature_matrix, FeatureMatrix, Modality};
pub use synth::{synth_dataset, SynthConfig, SynthOutput};

/// One raw interaction record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRow {
    pub user: String,
    pub item: String,
    pub timestamp: Option<i64>,
}

/// Deduplicated raw interactions, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionTable {
    rows: Vec<InteractionRow>,
}

impl InteractionTable {
    /// Collapses duplicate (user, item) pairs, keeping the position of the
    /// first occurrence and the earliest timestamp.
    pub fn from_rows(rows: Vec<InteractionRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset("no interaction rows".into()));
        }
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        let mut out: Vec<InteractionRow> = Vec::with_capacity(rows.len());
        for row in rows {
            match seen.get(&(row.user.clone(), row.item.clone())) {
                Some(&k) => {
                    let kept = &mut out[k];
                    kept.timestamp = match (kept.timestamp, row.timestamp) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (a, b) => a.or(b),
                    };
                }
                None => {
                    seen.insert((row.user.clone(), row.item.clone()), out.len());
                    out.push(row);
                }
            }
        }
        Ok(InteractionTable { rows: out })
    }

    pub fn rows(&self) -> &[InteractionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Reads `user<TAB>item[<TAB>timestamp]` lines. Blank lines are skipped.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(parse_err(format!(
                "expected at least 2 tab-separated fields, got {}",
                fields.len()
            )));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let timestamp = match fields.get(2) {
            Some(t) if !t.trim().is_empty() => Some(
                t.trim()
                    .parse::<i64>()
                    .map_err(|e| parse_err(format!("bad timestamp {t:?}: {e}")))?,
            ),
            _ => None,
        };
        rows.push(InteractionRow {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    InteractionTable::from_rows(rows)
}

/// Bidirectional raw-id <-> dense-index map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (k, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), k).is_some() {
                return Err(Error::invalid(format!("duplicate id {id:?} in vocabulary")));
            }
        }
        Ok(Vocab { ids, index })
    }

    fn intern(&mut self, id: &str) -> usize {
        if let Some(&k) = self.index.get(id) {
            return k;
        }
        let k = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), k);
        k
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> &str {
        &self.ids[dense]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Writes `raw_id<TAB>dense_index` lines.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for (k, id) in self.ids.iter().enumerate() {
            writeln!(f, "{id}\t{k}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let (raw, idx) = line
                .split_once('\t')
                .ok_or_else(|| err("expected raw_id<TAB>dense_index".into()))?;
            let idx: usize = idx.trim().parse().map_err(|e| err(format!("bad index: {e}")))?;
            pairs.push((idx, raw.to_string()));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(k, (idx, _))| *idx != k) {
            return Err(Error::invalid("vocabulary indices are not contiguous from 0"));
        }
        Vocab::from_ids(pairs.into_iter().map(|(_, raw)| raw).collect())
    }
}

/// Users and items with contiguous dense indices and their implicit edges.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    edges: Vec<(usize, usize)>,
    user_vocab: Vocab,
    item_vocab: Vocab,
}

impl InteractionDataset {
    pub fn new(edges: Vec<(usize, usize)>, user_vocab: Vocab, item_vocab: Vocab) -> Result<Self> {
        let (n_users, n_items) = (user_vocab.len(), item_vocab.len());
        if edges.is_empty() {
            return Err(Error::EmptyDataset("no edges".into()));
        }
        if let Some(&(u, i)) = edges.iter().find(|&&(u, i)| u >= n_users || i >= n_items) {
            return Err(Error::IndexOutOfRange {
                row: u,
                col: i,
                rows: n_users,
                cols: n_items,
            });
        }
        Ok(InteractionDataset {
            n_users,
            n_items,
            edges,
            user_vocab,
            item_vocab,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn user_vocab(&self) -> &Vocab {
        &self.user_vocab
    }

    pub fn item_vocab(&self) -> &Vocab {
        &self.item_vocab
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.edges.len() as f64 / (self.n_users as f64 * self.n_items as f64)
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_users];
        for &(u, _) in &self.edges {
            deg[u] += 1;
        }
        deg
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_items];
        for &(_, i) in &self.edges {
            deg[i] += 1;
        }
        deg
    }

    /// True when every user and every item has at least `k` edges.
    pub fn is_k_core(&self, k: usize) -> bool {
        self.user_degrees().iter().all(|&d| d >= k) && self.item_degrees().iter().all(|&d| d >= k)
    }
}

/// Assigns dense ids in first-appearance order.
pub fn encode_ids(table: &InteractionTable) -> Result<InteractionDataset> {
    if table.is_empty() {
        return Err(Error::EmptyDataset("interaction table".into()));
    }
    let mut users = Vocab::default();
    let mut items = Vocab::default();
    let edges = table
        .rows()
        .iter()
        .map(|row| (users.intern(&row.user), items.intern(&row.item)))
        .collect();
    InteractionDataset::new(edges, users, items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// A dataset with every edge labelled train, val or test.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    base: InteractionDataset,
    assignment: Vec<SplitLabel>,
    // Per-user sorted item lists, indexed [user].
    train_items: Vec<Vec<usize>>,
    val_items: Vec<Vec<usize>>,
    test_items: Vec<Vec<usize>>,
}

impl SplitDataset {
    pub fn from_assignment(base: InteractionDataset, assignment: Vec<SplitLabel>) -> Result<Self> {
        if assignment.len() != base.edges.len() {
            return Err(Error::shape(
                "split",
                format!("{} labels for {} edges", assignment.len(), base.edges.len()),
            ));
        }
        let n_users = base.n_users;
        let mut train_items = vec![Vec::new(); n_users];
        let mut val_items = vec![Vec::new(); n_users];
        let mut test_items = vec![Vec::new(); n_users];
        for (&(u, i), label) in base.edges.iter().zip(&assignment) {
            match label {
                SplitLabel::Train => train_items[u].push(i),
                SplitLabel::Val => val_items[u].push(i),
                SplitLabel::Test => test_items[u].push(i),
            }
        }
        for lists in [&mut train_items, &mut val_items, &mut test_items] {
            for l in lists.iter_mut() {
                l.sort_unstable();
            }
        }
        if let Some(u) = train_items.iter().position(|l| l.is_empty()) {
            return Err(Error::Split {
                user: base.user_vocab.raw(u).to_string(),
                reason: "no train edge".into(),
            });
        }
        Ok(SplitDataset {
            base,
            assignment,
            train_items,
            val_items,
            test_items,
        })
    }

    pub fn base(&self) -> &InteractionDataset {
        &self.base
    }

    pub fn n_users(&self) -> usize {
        self.base.n_users
    }

    pub fn n_items(&self) -> usize {
        self.base.n_items
    }

    pub fn assignment(&self) -> &[SplitLabel] {
        &self.assignment
    }

    pub fn edges_with(&self, label: SplitLabel) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.base
            .edges
            .iter()
            .zip(&self.assignment)
            .filter(move |(_, l)| **l == label)
            .map(|(e, _)| *e)
    }

    pub fn train_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges_with(SplitLabel::Train)
    }

    pub fn n_train(&self) -> usize {
        self.train_items.iter().map(Vec::len).sum()
    }

    /// Sorted item list of user `u` in the given split.
    pub fn items_of(&self, u: usize, label: SplitLabel) -> &[usize] {
        match label {
            SplitLabel::Train => &self.train_items[u],
            SplitLabel::Val => &self.val_items[u],
            SplitLabel::Test => &self.test_items[u],
        }
    }

    pub fn is_train_edge(&self, u: usize, i: usize) -> bool {
        self.train_items[u].binary_search(&i).is_ok()
    }
}

/// Shuffles each user's edges with a seeded RNG and cuts them into
/// `floor(n*train)` train, `floor(n*val)` validation and the rest test.
pub fn user_split(dataset: &InteractionDataset, ratios: SplitRatios, seed: u64) -> Result<SplitDataset> {
    let sum = ratios.train + ratios.val + ratios.test;
    if ratios.train <= 0.0 || ratios.val < 0.0 || ratios.test < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_users];
    for (k, &(u, _)) in dataset.edges.iter().enumerate() {
        by_user[u].push(k);
    }
    let mut rng = rng::stream(seed, rng::STREAM_SPLIT);
    let mut assignment = vec![SplitLabel::Train; dataset.edges.len()];
    for (u, edges) in by_user.iter_mut().enumerate() {
        let n = edges.len();
        if n < 3 {
            return Err(Error::Split {
                user: dataset.user_vocab.raw(u).to_string(),
                reason: format!("has {n} interactions, at least 3 required"),
            });
        }
        edges.shuffle(&mut rng);
        // The epsilon absorbs products such as 0.1 * 30 = 3.0000000000000004
        // as well as ones that land just below an integer.
        let n_train = ((n as f64 * ratios.train + 1e-9).floor() as usize).max(1);
        let n_val = ((n as f64 * ratios.val + 1e-9).floor() as usize).min(n - n_train);
        for (pos, &e) in edges.iter().enumerate() {
            assignment[e] = if pos < n_train {
                SplitLabel::Train
            } else if pos < n_train + n_val {
                SplitLabel::Val
            } else {
                SplitLabel::Test
            };
        }
    }
    SplitDataset::from_assignment(dataset.clone(), assignment)
}
