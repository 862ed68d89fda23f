//! Full-ranking evaluation: top-K lists, Recall@K, NDCG@K, training AUC and
//! paired bootstrap significance.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SplitDataset, SplitLabel};
use crate::error::{Error, Result};
use crate::rng;

const SCORE_CHUNK: usize = 1024;

/// Anything that can score every item for a set of users.
pub trait ScoreProvider: Sync {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    /// `users.len() x n_items` score matrix.
    fn score_users(&self, users: &[usize]) -> Result<Array2<f64>>;
}

/// Dot-product scores of final user and item embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingScorer {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
}

impl EmbeddingScorer {
    pub fn new(user: Array2<f64>, item: Array2<f64>) -> Result<Self> {
        if user.ncols() != item.ncols() {
            return Err(Error::shape(
                "EmbeddingScorer",
                format!("user width {} vs item width {}", user.ncols(), item.ncols()),
            ));
        }
        Ok(EmbeddingScorer { user, item })
    }
}

impl ScoreProvider for EmbeddingScorer {
    fn n_users(&self) -> usize {
        self.user.nrows()
    }

    fn n_items(&self) -> usize {
        self.item.nrows()
    }

    fn score_users(&self, users: &[usize]) -> Result<Array2<f64>> {
        if let Some(&u) = users.iter().find(|&&u| u >= self.user.nrows()) {
            return Err(Error::invalid(format!("user {u} out of range")));
        }
        Ok(self.user.select(ndarray::Axis(0), users).dot(&self.item.t()))
    }
}

/// Evaluation phase; decides ground truth and which positives are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Val,
    Test,
}

impl Phase {
    pub fn label(self) -> SplitLabel {
        match self {
            Phase::Val => SplitLabel::Val,
            Phase::Test => SplitLabel::Test,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Val => "val",
            Phase::Test => "test",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" | "valid" | "validation" => Ok(Phase::Val),
            "test" => Ok(Phase::Test),
            other => Err(Error::invalid(format!("unknown phase {other:?}"))),
        }
    }
}

/// Ordered top-K item lists, indexed by user.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub k: usize,
    pub lists: Vec<Vec<usize>>,
}

/// Indices of the `k` largest entries of `scores` that are not in the sorted
/// `excluded` list, ordered by score descending then index ascending.
pub fn topk_row(scores: ArrayView1<'_, f64>, excluded: &[usize], k: usize) -> Vec<usize> {
    let better = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let mut cand: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| excluded.binary_search(i).is_err())
        .map(|(i, &s)| (s, i))
        .collect();
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, better);
        cand.truncate(k);
    }
    cand.sort_unstable_by(better);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Ranks all items for every user, skipping each user's excluded items.
/// `exclusions[u]` must be sorted.
pub fn topk_rank(provider: &dyn ScoreProvider, exclusions: &[Vec<usize>], k: usize) -> Result<RankingResult> {
    if k == 0 {
        return Err(Error::invalid("K must be >= 1"));
    }
    let n_users = provider.n_users();
    if exclusions.len() != n_users {
        return Err(Error::shape(
            "topk_rank",
            format!("{} exclusion lists for {n_users} users", exclusions.len()),
        ));
    }
    let mut lists = Vec::with_capacity(n_users);
    let users: Vec<usize> = (0..n_users).collect();
    for chunk in users.chunks(SCORE_CHUNK) {
        let scores = provider.score_users(chunk)?;
        if scores.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("ranking scores".into()));
        }
        let part: Vec<Vec<usize>> = chunk
            .par_iter()
            .enumerate()
            .map(|(row, &u)| topk_row(scores.row(row), &exclusions[u], k))
            .collect();
        lists.extend(part);
    }
    Ok(RankingResult { k, lists })
}

/// Hits among the first `k` entries of `ranked` divided by `|truth|`.
pub fn user_recall(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|i| truth.binary_search(i).is_ok()).count();
    hits as f64 / truth.len() as f64
}

/// Binary-relevance NDCG of the first `k` entries.
pub fn user_ndcg(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| truth.binary_search(i).is_ok())
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(truth.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Per-user values for users with non-empty ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// `truth[u]` must be sorted. Users with empty truth are skipped.
pub fn per_user_metrics(result: &RankingResult, truth: &[Vec<usize>], k: usize) -> Vec<UserMetrics> {
    result
        .lists
        .iter()
        .zip(truth)
        .enumerate()
        .filter(|(_, (_, t))| !t.is_empty())
        .map(|(user, (ranked, t))| UserMetrics {
            user,
            recall: user_recall(ranked, t, k),
            ndcg: user_ndcg(ranked, t, k),
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean Recall@K over users with non-empty ground truth.
pub fn recall_at_k(result: &RankingResult, truth: &[Vec<usize>], k: usize) -> f64 {
    mean(per_user_metrics(result, truth, k).iter().map(|m| m.recall))
}

/// Mean NDCG@K over users with non-empty ground truth.
pub fn ndcg_at_k(result: &RankingResult, truth: &[Vec<usize>], k: usize) -> f64 {
    mean(per_user_metrics(result, truth, k).iter().map(|m| m.ndcg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub k: usize,
    pub split: Phase,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users: usize,
    #[serde(skip)]
    pub per_user: Vec<UserMetrics>,
}

impl MetricsReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// `user_index,recall,ndcg` rows.
    pub fn write_per_user_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        writeln!(f, "user_index,recall,ndcg")?;
        for m in &self.per_user {
            writeln!(f, "{},{},{}", m.user, m.recall, m.ndcg)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Reads a per-user CSV written by [`MetricsReport::write_per_user_csv`].
pub fn read_per_user_csv(path: impl AsRef<Path>) -> Result<Vec<UserMetrics>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
        }
        out.push(UserMetrics {
            user: fields[0].trim().parse().map_err(|e| parse_err(format!("{e}")))?,
            recall: fields[1].trim().parse().map_err(|e| parse_err(format!("{e}")))?,
            ndcg: fields[2].trim().parse().map_err(|e| parse_err(format!("{e}")))?,
        });
    }
    Ok(out)
}

/// Items excluded from ranking in `phase`: train positives, plus validation
/// positives when testing.
pub fn exclusions(split: &SplitDataset, phase: Phase) -> Vec<Vec<usize>> {
    (0..split.n_users())
        .map(|u| {
            let mut ex = split.items_of(u, SplitLabel::Train).to_vec();
            if phase == Phase::Test {
                ex.extend_from_slice(split.items_of(u, SplitLabel::Val));
                ex.sort_unstable();
            }
            ex
        })
        .collect()
}

pub fn ground_truth(split: &SplitDataset, phase: Phase) -> Vec<Vec<usize>> {
    (0..split.n_users())
        .map(|u| split.items_of(u, phase.label()).to_vec())
        .collect()
}

/// Ranks, scores and aggregates one phase. `model`, `dataset` and `seed`
/// only label the report.
pub fn evaluate_model(
    provider: &dyn ScoreProvider,
    split: &SplitDataset,
    phase: Phase,
    k: usize,
    model: &str,
    dataset: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if provider.n_users() != split.n_users() || provider.n_items() != split.n_items() {
        return Err(Error::shape(
            "evaluate_model",
            format!(
                "scorer covers {}x{}, split has {}x{}",
                provider.n_users(),
                provider.n_items(),
                split.n_users(),
                split.n_items()
            ),
        ));
    }
    let ranking = topk_rank(provider, &exclusions(split, phase), k)?;
    let per_user = per_user_metrics(&ranking, &ground_truth(split, phase), k);
    Ok(MetricsReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        seed,
        k,
        split: phase,
        recall: mean(per_user.iter().map(|m| m.recall)),
        ndcg: mean(per_user.iter().map(|m| m.ndcg)),
        n_users: per_user.len(),
        per_user,
    })
}

/// Mean over users of the fraction of (train positive, non-train item)
/// pairs ranked correctly; ties count one half.
pub fn train_auc(provider: &dyn ScoreProvider, split: &SplitDataset) -> Result<f64> {
    let n_items = provider.n_items();
    let users: Vec<usize> = (0..provider.n_users()).collect();
    let mut per_user = Vec::with_capacity(users.len());
    for chunk in users.chunks(SCORE_CHUNK) {
        let scores = provider.score_users(chunk)?;
        let part: Vec<Option<f64>> = chunk
            .par_iter()
            .enumerate()
            .map(|(row, &u)| {
                let pos = split.items_of(u, SplitLabel::Train);
                let n_neg = n_items - pos.len();
                if pos.is_empty() || n_neg == 0 {
                    return None;
                }
                let mut order: Vec<(f64, bool)> = scores
                    .row(row)
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| (s, pos.binary_search(&i).is_ok()))
                    .collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0));
                // Mann-Whitney count: for each positive, negatives strictly
                // below plus half of tied negatives.
                let mut correct = 0.0;
                let mut neg_below = 0usize;
                let mut start = 0;
                while start < order.len() {
                    let mut end = start;
                    while end < order.len() && order[end].0 == order[start].0 {
                        end += 1;
                    }
                    let group = &order[start..end];
                    let g_pos = group.iter().filter(|x| x.1).count();
                    let g_neg = group.len() - g_pos;
                    correct += g_pos as f64 * (neg_below as f64 + 0.5 * g_neg as f64);
                    neg_below += g_neg;
                    start = end;
                }
                Some(correct / (pos.len() * n_neg) as f64)
            })
            .collect();
        per_user.extend(part);
    }
    Ok(mean(per_user.into_iter().flatten()))
}

/// Two-sided paired bootstrap p-value for the mean of `a - b`. Resamples
/// the centred differences and counts means at least as extreme as the
/// observed one.
pub fn compare_significance(a: &[f64], b: &[f64], n_boot: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || n_boot == 0 {
        return Err(Error::invalid("bootstrap needs data and at least one resample"));
    }
    let n = a.len();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = diff.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = diff.iter().map(|d| d - observed).collect();
    // Sums of centred values carry rounding noise of this order.
    let tol = 1e-12 * (1.0 + observed.abs());
    let mut rng = rng::stream(seed, rng::STREAM_BOOTSTRAP);
    let mut extreme = 0usize;
    for _ in 0..n_boot {
        let mut s = 0.0;
        for _ in 0..n {
            s += centred[rng.random_range(0..n)];
        }
        if (s / n as f64).abs() >= observed.abs() - tol {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (n_boot + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Fixed(Array2<f64>);

    impl ScoreProvider for Fixed {
        fn n_users(&self) -> usize {
            self.0.nrows()
        }
        fn n_items(&self) -> usize {
            self.0.ncols()
        }
        fn score_users(&self, users: &[usize]) -> Result<Array2<f64>> {
            Ok(self.0.select(ndarray::Axis(0), users))
        }
    }

    #[test]
    fn topk_examples() {
        let s = Fixed(array![[3.0, 1.0, 2.0]]);
        assert_eq!(topk_rank(&s, &[vec![]], 2).unwrap().lists[0], vec![0, 2]);
        assert_eq!(topk_rank(&s, &[vec![0]], 2).unwrap().lists[0], vec![2, 1]);
        let flat = Fixed(array![[1.0, 1.0, 1.0]]);
        assert_eq!(topk_rank(&flat, &[vec![]], 2).unwrap().lists[0], vec![0, 1]);
        assert_eq!(topk_rank(&s, &[vec![0, 1]], 5).unwrap().lists[0], vec![2]);
        assert!(topk_rank(&s, &[vec![]], 0).is_err());
    }

    #[test]
    fn recall_and_ndcg_examples() {
        assert_eq!(user_recall(&[4, 7], &[4, 7], 20), 1.0);
        assert_eq!(user_recall(&[4, 9], &[4, 7], 20), 0.5);
        assert_eq!(user_ndcg(&[3], &[3], 20), 1.0);
        let second = user_ndcg(&[1, 3], &[3], 20);
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((second - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn empty_truth_users_are_excluded() {
        let result = RankingResult {
            k: 2,
            lists: vec![vec![0, 1], vec![0, 1]],
        };
        let truth = vec![vec![0], vec![]];
        assert_eq!(recall_at_k(&result, &truth, 2), 1.0);
        assert_eq!(per_user_metrics(&result, &truth, 2).len(), 1);
    }

    #[test]
    fn bootstrap_examples() {
        let a = [0.1, 0.4, 0.3, 0.0, 0.9];
        assert_eq!(compare_significance(&a, &a, 1000, 1).unwrap(), 1.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        let p = compare_significance(&shifted, &a, 10_000, 1).unwrap();
        assert!(p < 0.001);
        assert_eq!(p, compare_significance(&shifted, &a, 10_000, 1).unwrap());
        assert!(compare_significance(&a, &a[..3], 10, 1).is_err());
    }

    #[test]
    fn auc_of_perfect_and_reversed_scores() {
        use crate::dataset::{InteractionDataset, SplitDataset, Vocab};
        let users = Vocab::from_ids(vec!["a".into()]).unwrap();
        let items = Vocab::from_ids((0..4).map(|i| i.to_string()).collect()).unwrap();
        let base = InteractionDataset::new(vec![(0, 0), (0, 1)], users, items).unwrap();
        let split = SplitDataset::from_assignment(base, vec![SplitLabel::Train; 2]).unwrap();
        assert_eq!(train_auc(&Fixed(array![[4.0, 3.0, 2.0, 1.0]]), &split).unwrap(), 1.0);
        assert_eq!(train_auc(&Fixed(array![[1.0, 2.0, 3.0, 4.0]]), &split).unwrap(), 0.0);
        assert_eq!(train_auc(&Fixed(array![[1.0, 1.0, 1.0, 1.0]]), &split).unwrap(), 0.5);
    }
}
