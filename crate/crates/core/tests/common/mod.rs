//! Brute-force references shared by the property and acceptance suites.
//! Every oracle here works on dense arrays with plain loops and shares no
//! code with the library beyond its input types.

#![allow(dead_code)]

use ndarray::Array2;
use synergraph::dataset::{synth_dataset, user_split, Modality, SplitDataset, SplitRatios, SynthConfig};
use synergraph::graph::build_modality_graph;
use synergraph::model::{GraphContext, ModalityInput};

pub fn dense_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Bipartite adjacency over users then items, scaled by
/// `1/sqrt(deg(r) deg(c))`.
pub fn dense_norm_adjacency(r: &Array2<f64>) -> Array2<f64> {
    let (nu, ni) = r.dim();
    let n = nu + ni;
    let mut a = Array2::zeros((n, n));
    for u in 0..nu {
        for i in 0..ni {
            if r[[u, i]] != 0.0 {
                a[[u, nu + i]] = 1.0;
                a[[nu + i, u]] = 1.0;
            }
        }
    }
    let deg: Vec<f64> = (0..n).map(|x| (0..n).map(|y| a[[x, y]]).sum()).collect();
    let mut l = Array2::zeros((n, n));
    for x in 0..n {
        for y in 0..n {
            if a[[x, y]] != 0.0 {
                l[[x, y]] = 1.0 / (deg[x] * deg[y]).sqrt();
            }
        }
    }
    l
}

pub fn dense_degrees(r: &Array2<f64>) -> Vec<f64> {
    let (nu, ni) = r.dim();
    let mut deg = vec![0.0; nu + ni];
    for u in 0..nu {
        for i in 0..ni {
            if r[[u, i]] != 0.0 {
                deg[u] += 1.0;
                deg[nu + i] += 1.0;
            }
        }
    }
    deg
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Full similarity matrix, then per row the `k` largest off-diagonal
/// entries (ties by smaller column).
pub fn dense_cosine_topk(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let mut cand: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, cosine(&rows[i], &rows[j])))
            .collect();
        cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(j, s) in cand.iter().take(k) {
            out[[i, j]] = s;
        }
    }
    out
}

fn dot(a: &Array2<f64>, ra: usize, b: &Array2<f64>, rb: usize) -> f64 {
    (0..a.ncols()).map(|k| a[[ra, k]] * b[[rb, k]]).sum()
}

/// `sum_b ln(1 + exp(-(u.p - u.n)))`, one sample at a time.
pub fn ref_bpr(u: &Array2<f64>, p: &Array2<f64>, n: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for b in 0..u.nrows() {
        let x = dot(u, b, p, b) - dot(u, b, n, b);
        total += (-x).exp().ln_1p();
    }
    total
}

pub fn ref_reg(u: &Array2<f64>, p: &Array2<f64>, n: &Array2<f64>, lambda: f64) -> f64 {
    let mut total = 0.0;
    for m in [u, p, n] {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                total += m[[r, c]] * m[[r, c]];
            }
        }
    }
    lambda * total
}

fn ref_lse(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - max).exp();
    }
    max + s.ln()
}

fn ref_softplus(z: f64) -> f64 {
    if z > 40.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Circle loss for similarity lists, sample by sample.
pub fn ref_circle_from_sims(s_pos: &[f64], s_neg: &[f64], margin: f64, scale: f64, conf_neg: f64) -> f64 {
    let mut lp = Vec::new();
    let mut ln = Vec::new();
    for b in 0..s_pos.len() {
        let ap = f64::max(-s_pos[b] + 1.0 + margin, 0.0);
        let an = f64::max(s_neg[b] + margin, 0.0) * (1.0 - conf_neg);
        lp.push(-ap * (s_pos[b] - (1.0 - margin)) * scale);
        ln.push(an * (s_neg[b] - margin) * scale);
    }
    ref_softplus(ref_lse(&lp) + ref_lse(&ln))
}

pub fn ref_circle(
    u: &Array2<f64>,
    fused: &Array2<f64>,
    modal: &Array2<f64>,
    margin: f64,
    scale: f64,
    conf_neg: f64,
) -> f64 {
    let mut s_pos = Vec::new();
    let mut s_neg = Vec::new();
    for b in 0..u.nrows() {
        let ub = u.row(b).to_vec();
        s_pos.push(cosine(&ub, &fused.row(b).to_vec()));
        s_neg.push(cosine(&ub, &modal.row(b).to_vec()));
    }
    ref_circle_from_sims(&s_pos, &s_neg, margin, scale, conf_neg)
}

/// Per-user `(recall, ndcg)` from a full sort of the non-excluded items;
/// `None` for users with no relevant items.
pub fn brute_user_metrics(scores: &[f64], excluded: &[usize], truth: &[usize], k: usize) -> Option<(f64, f64)> {
    if truth.is_empty() {
        return None;
    }
    let mut items: Vec<usize> = (0..scores.len()).filter(|i| !excluded.contains(i)).collect();
    items.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0.0;
    let mut dcg = 0.0;
    for (rank, item) in items.iter().take(k).enumerate() {
        if truth.contains(item) {
            hits += 1.0;
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..truth.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some((hits / truth.len() as f64, dcg / ideal))
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Clustered synthetic data, a per-user split and both modality graphs.
pub fn synthetic_context(cfg: &SynthConfig, top_k: usize, split_seed: u64) -> (SplitDataset, GraphContext) {
    let synth = synth_dataset(cfg).unwrap();
    let split = user_split(&synth.dataset, SplitRatios::default(), split_seed).unwrap();
    let inputs = Modality::ALL
        .iter()
        .map(|&m| {
            let features = synth.features(m).clone();
            let graph = build_modality_graph(&features, top_k).unwrap();
            ModalityInput {
                features,
                graph: Some(graph),
            }
        })
        .collect();
    let ctx = GraphContext::new(&split, inputs).unwrap();
    (split, ctx)
}
