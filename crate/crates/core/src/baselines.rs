//! Reference models that share data, trainer and evaluation with the main
//! model.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::ScoreProvider;
use crate::model::{Architecture, GraphContext};
use crate::sparse::{build_interaction_matrix, SparseMatrix};
use crate::train::{fit, FitResult, TrainConfig};

pub const DEFAULT_KNN_NEIGHBORS: usize = 20;
pub const DEFAULT_LIGHTGCN_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    ItemKnn,
    BprMf,
    LightGcn,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::ItemKnn => "itemknn",
            BaselineKind::BprMf => "bprmf",
            BaselineKind::LightGcn => "lightgcn",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "itemknn" => Ok(BaselineKind::ItemKnn),
            "bprmf" => Ok(BaselineKind::BprMf),
            "lightgcn" => Ok(BaselineKind::LightGcn),
            other => Err(Error::invalid(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Item-based collaborative filtering over binary training interactions.
#[derive(Debug, Clone)]
pub struct ItemKnn {
    /// Row `j` lists `(i, sim(i, j))` for every item `i` that keeps `j`
    /// among its nearest neighbours.
    neighbors_t: SparseMatrix,
    train: SparseMatrix,
}

/// Cosine similarity of item columns of a binary matrix: shared users over
/// the geometric mean of the two user counts. The diagonal is omitted.
pub fn item_cosine(r: &SparseMatrix) -> Result<SparseMatrix> {
    let n_items = r.n_cols();
    let deg = r.transpose().row_sums();
    let deg = deg.values();
    let mut entries = Vec::new();
    for u in 0..r.n_rows() {
        let (items, _) = r.row(u);
        for &i in items {
            for &j in items {
                if i != j {
                    entries.push((i, j, 1.0));
                }
            }
        }
    }
    let co = SparseMatrix::from_coo(&entries, (n_items, n_items))?;
    let values = co.iter().map(|(i, j, c)| c / (deg[i] * deg[j]).sqrt()).collect();
    SparseMatrix::from_csr_parts(
        n_items,
        n_items,
        co.row_offsets().to_vec(),
        co.col_indices().to_vec(),
        values,
    )
}

/// Builds the ItemKNN scorer; each item keeps its `k_neighbors` most
/// similar items (ties by lower index).
pub fn train_itemknn(split: &SplitDataset, k_neighbors: usize) -> Result<ItemKnn> {
    if k_neighbors == 0 {
        return Err(Error::invalid("ItemKNN needs at least one neighbour"));
    }
    let train = build_interaction_matrix(split);
    let sim = item_cosine(&train)?;
    let mut kept = Vec::new();
    for i in 0..sim.n_rows() {
        let (cols, vals) = sim.row(i);
        let mut row: Vec<(usize, f64)> = cols.iter().copied().zip(vals.iter().copied()).collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        kept.extend(row.into_iter().take(k_neighbors).map(|(j, s)| (i, j, s)));
    }
    let topk = SparseMatrix::from_coo(&kept, sim.shape())?;
    Ok(ItemKnn {
        neighbors_t: topk.transpose(),
        train,
    })
}

impl ItemKnn {
    /// `sim(i, j)` after neighbour truncation.
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.neighbors_t.get(j, i)
    }
}

impl ScoreProvider for ItemKnn {
    fn n_users(&self) -> usize {
        self.train.n_rows()
    }

    fn n_items(&self) -> usize {
        self.train.n_cols()
    }

    fn score_users(&self, users: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((users.len(), self.n_items()));
        for (row, &u) in users.iter().enumerate() {
            if u >= self.n_users() {
                return Err(Error::invalid(format!("user {u} out of range")));
            }
            let mut dst = out.row_mut(row);
            for &j in self.train.row(u).0 {
                let (items, sims) = self.neighbors_t.row(j);
                for (&i, &s) in items.iter().zip(sims) {
                    dst[i] += s;
                }
            }
        }
        Ok(out)
    }
}

/// Baselines train with plain Adam.
pub fn baseline_train_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        weight_decay: 0.0,
        ..cfg.clone()
    }
}

/// Dot-product matrix factorisation trained with BPR.
pub fn train_bprmf(split: &SplitDataset, cfg: &TrainConfig, d: usize, history: Option<&Path>) -> Result<FitResult> {
    let ctx = GraphContext::new(split, Vec::new())?;
    fit(
        split,
        &ctx,
        &Architecture::MatrixFactorization { d },
        &baseline_train_config(cfg),
        history,
    )
}

/// LightGCN: ID embeddings averaged over `layers` propagation rounds.
pub fn train_lightgcn(
    split: &SplitDataset,
    cfg: &TrainConfig,
    d: usize,
    layers: usize,
    history: Option<&Path>,
) -> Result<FitResult> {
    let ctx = GraphContext::new(split, Vec::new())?;
    fit(
        split,
        &ctx,
        &Architecture::LightGcn { d, layers },
        &baseline_train_config(cfg),
        history,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{InteractionDataset, SplitLabel, Vocab};

    fn split(edges: Vec<(usize, usize)>, n_users: usize, n_items: usize) -> SplitDataset {
        let users = Vocab::from_ids((0..n_users).map(|u| format!("u{u}")).collect()).unwrap();
        let items = Vocab::from_ids((0..n_items).map(|i| format!("i{i}")).collect()).unwrap();
        let n = edges.len();
        let base = InteractionDataset::new(edges, users, items).unwrap();
        SplitDataset::from_assignment(base, vec![SplitLabel::Train; n]).unwrap()
    }

    #[test]
    fn cosine_extremes() {
        // Items 0 and 1 share both users; item 2 has a disjoint user.
        let s = split(vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)], 3, 3);
        let knn = train_itemknn(&s, 20).unwrap();
        assert!((knn.similarity(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(knn.similarity(0, 2), 0.0);
    }

    #[test]
    fn co_purchase_outranks_unrelated() {
        // a=0, b=1, c=2; u0 bought {a, b}, u1 bought {a}, u2 bought {c}.
        let s = split(vec![(0, 0), (0, 1), (1, 0), (2, 2)], 3, 3);
        let knn = train_itemknn(&s, 20).unwrap();
        let scores = knn.score_users(&[1]).unwrap();
        let want_b = 1.0 / (2.0f64 * 1.0).sqrt();
        assert!((scores[[0, 1]] - want_b).abs() < 1e-12);
        assert_eq!(scores[[0, 2]], 0.0);
        assert_eq!(knn.score_users(&[1]).unwrap(), scores);
    }

    #[test]
    fn neighbour_truncation() {
        // Item 0 co-occurs with 1 (twice) and 2 (once).
        let s = split(vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 2)], 3, 3);
        let knn = train_itemknn(&s, 1).unwrap();
        assert!(knn.similarity(0, 1) > 0.0);
        assert_eq!(knn.similarity(0, 2), 0.0);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("LightGCN".parse::<BaselineKind>().unwrap(), BaselineKind::LightGcn);
        assert_eq!("bpr-mf".parse::<BaselineKind>().unwrap(), BaselineKind::BprMf);
        assert!("vbpr".parse::<BaselineKind>().is_err());
    }
}
