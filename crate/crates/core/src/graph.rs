//! Frozen per-modality item-item graphs built from raw feature similarity.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::{FeatureMatrix, Modality};
use crate::error::{Error, Result};
use crate::sparse::{SparseMatrix, SparseOperator};

const BLOCK_ROWS: usize = 1024;
const CACHE_MAGIC: &[u8; 4] = b"SGAD";
const CACHE_VERSION: u32 = 1;

/// Normalised top-K affinity graph of one modality.
#[derive(Debug, Clone)]
pub struct ModalityGraph {
    pub modality: Modality,
    pub k: usize,
    adjacency: SparseOperator,
}

impl ModalityGraph {
    pub fn from_adjacency(modality: Modality, k: usize, adjacency: SparseMatrix) -> Self {
        ModalityGraph {
            modality,
            k,
            adjacency: SparseOperator::new(adjacency),
        }
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        self.adjacency.matrix()
    }

    pub fn operator(&self) -> &SparseOperator {
        &self.adjacency
    }
}

// Larger value first, then smaller column.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// For every item keeps the `k` most cosine-similar other items (the
/// diagonal is never a candidate). Ties go to the smaller column index.
pub fn cosine_topk(features: &FeatureMatrix, k: usize) -> Result<SparseMatrix> {
    let data = features.data();
    let n = data.nrows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "top-k must satisfy 1 <= k < n_items, got k={k}, n={n}"
        )));
    }
    let norms: Vec<f64> = data.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(item) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNormRow { item });
    }
    let mut unit = data.clone();
    for (mut row, &norm) in unit.axis_iter_mut(Axis(0)).zip(&norms) {
        row /= norm;
    }

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for start in (0..n).step_by(BLOCK_ROWS) {
        let end = (start + BLOCK_ROWS).min(n);
        let sims: Array2<f64> = unit.slice(ndarray::s![start..end, ..]).dot(&unit.t());
        let block: Vec<Vec<(usize, f64)>> = sims
            .axis_iter(Axis(0))
            .into_par_iter()
            .enumerate()
            .map(|(offset, row)| {
                let item = start + offset;
                let mut cand: Vec<(usize, f64)> = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != item)
                    .map(|(j, &s)| (j, s.clamp(-1.0, 1.0)))
                    .collect();
                cand.select_nth_unstable_by(k - 1, rank_order);
                cand.truncate(k);
                cand.sort_unstable_by_key(|&(j, _)| j);
                cand
            })
            .collect();
        rows.extend(block);
    }

    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0);
    let mut cols = Vec::with_capacity(n * k);
    let mut vals = Vec::with_capacity(n * k);
    for row in rows {
        for (j, s) in row {
            cols.push(j);
            vals.push(s);
        }
        row_offsets.push(cols.len());
    }
    SparseMatrix::from_csr_parts(n, n, row_offsets, cols, vals)
}

/// `D^-1/2 S D^-1/2` with `D = diag(row sums of S)`; zero row sums give
/// zero rows.
pub fn sym_normalize(s: &SparseMatrix) -> Result<SparseMatrix> {
    if s.n_rows() != s.n_cols() {
        return Err(Error::shape("sym_normalize", format!("{:?} is not square", s.shape())));
    }
    if let Some((row, col, value)) = s.iter().find(|&(_, _, v)| v < 0.0) {
        return Err(Error::NegativeEntry { row, col, value });
    }
    let deg = s.row_sums();
    let deg = deg.values();
    let values: Vec<f64> = s
        .iter()
        .map(|(r, c, v)| {
            let den = deg[r] * deg[c];
            if den > 0.0 {
                v / den.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    SparseMatrix::from_csr_parts(
        s.n_rows(),
        s.n_cols(),
        s.row_offsets().to_vec(),
        s.col_indices().to_vec(),
        values,
    )
}

/// Top-K cosine graph over raw features, with negative similarities
/// clipped to zero, then symmetrically normalised.
pub fn build_modality_graph(features: &FeatureMatrix, k: usize) -> Result<ModalityGraph> {
    let topk = cosine_topk(features, k)?;
    let clipped = SparseMatrix::from_csr_parts(
        topk.n_rows(),
        topk.n_cols(),
        topk.row_offsets().to_vec(),
        topk.col_indices().to_vec(),
        topk.values().iter().map(|&v| v.max(0.0)).collect(),
    )?;
    Ok(ModalityGraph::from_adjacency(
        features.modality,
        k,
        sym_normalize(&clipped)?,
    ))
}

/// Cache key derived from the feature contents, the modality and `k`.
pub fn cache_key(features: &FeatureMatrix, k: usize) -> String {
    let mut h = Sha256::new();
    h.update((features.rows() as u64).to_le_bytes());
    h.update((features.cols() as u64).to_le_bytes());
    for v in features.data().iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{hex}-{}-k{k}", features.modality)
}

/// Writes `SGAD`, u32 version, u32 n, u64 nnz, then u64 row offsets,
/// u32 column indices and f64 values, all little-endian.
pub fn write_graph_cache(path: impl AsRef<Path>, graph: &SparseMatrix) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(CACHE_MAGIC)?;
    f.write_all(&CACHE_VERSION.to_le_bytes())?;
    f.write_all(&(graph.n_rows() as u32).to_le_bytes())?;
    f.write_all(&(graph.nnz() as u64).to_le_bytes())?;
    for &o in graph.row_offsets() {
        f.write_all(&(o as u64).to_le_bytes())?;
    }
    for &c in graph.col_indices() {
        f.write_all(&(c as u32).to_le_bytes())?;
    }
    for &v in graph.values() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_graph_cache(path: impl AsRef<Path>) -> Result<SparseMatrix> {
    let path = path.as_ref();
    let err = |message: String| Error::GraphCache {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..4] != CACHE_MAGIC {
        return Err(err("bad header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let nnz = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = 20 + 8 * (n + 1) + 4 * nnz + 8 * nnz;
    if bytes.len() != expected {
        return Err(err(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut pos = 20;
    let mut take = |width: usize| {
        let s = &bytes[pos..pos + width];
        pos += width;
        s
    };
    let offsets = (0..=n)
        .map(|_| u64::from_le_bytes(take(8).try_into().unwrap()) as usize)
        .collect();
    let cols = (0..nnz)
        .map(|_| u32::from_le_bytes(take(4).try_into().unwrap()) as usize)
        .collect();
    let vals = (0..nnz)
        .map(|_| f64::from_le_bytes(take(8).try_into().unwrap()))
        .collect();
    SparseMatrix::from_csr_parts(n, n, offsets, cols, vals).map_err(|e| err(e.to_string()))
}

/// Builds the graph, reusing `cache_dir/<key>.sgad` when present.
pub fn build_modality_graph_cached(
    features: &FeatureMatrix,
    k: usize,
    cache_dir: Option<&Path>,
) -> Result<ModalityGraph> {
    let Some(dir) = cache_dir else {
        return build_modality_graph(features, k);
    };
    let path = dir.join(format!("{}.sgad", cache_key(features, k)));
    if path.exists() {
        let adjacency = read_graph_cache(&path)?;
        if adjacency.n_rows() == features.rows() {
            return Ok(ModalityGraph::from_adjacency(features.modality, k, adjacency));
        }
    }
    let graph = build_modality_graph(features, k)?;
    fs::create_dir_all(dir)?;
    write_graph_cache(&path, graph.adjacency())?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fm(data: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(Modality::Textual, data).unwrap()
    }

    #[test]
    fn three_item_example() {
        let f = fm(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let s = cosine_topk(&f, 1).unwrap();
        assert_eq!(s.row(0), (&[2usize][..], &[1.0][..]));
        assert_eq!(s.row(2), (&[0usize][..], &[1.0][..]));
        assert_eq!(s.row(1), (&[0usize][..], &[0.0][..]));
    }

    #[test]
    fn identical_rows_keep_one_unit_neighbour() {
        let f = fm(Array2::from_elem((4, 3), 0.3));
        let s = cosine_topk(&f, 1).unwrap();
        for r in 0..4 {
            let (cols, vals) = s.row(r);
            assert_eq!(cols.len(), 1);
            assert_ne!(cols[0], r);
            assert!((vals[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_k_is_dense_minus_diagonal() {
        let f = fm(array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [-1.0, 1.0]]);
        let s = cosine_topk(&f, 3).unwrap();
        assert_eq!(s.nnz(), 12);
        for r in 0..4 {
            assert_eq!(s.get(r, r), 0.0);
        }
    }

    #[test]
    fn rejects_zero_rows_and_bad_k() {
        let f = fm(array![[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(cosine_topk(&f, 1), Err(Error::ZeroNormRow { item: 1 })));
        let f = fm(array![[1.0], [2.0]]);
        assert!(cosine_topk(&f, 0).is_err());
        assert!(cosine_topk(&f, 2).is_err());
    }

    #[test]
    fn sym_normalize_examples() {
        let s = SparseMatrix::from_coo(&[(0, 1, 2.0), (1, 0, 2.0)], (2, 2)).unwrap();
        assert_eq!(sym_normalize(&s).unwrap().to_dense(), array![[0.0, 1.0], [1.0, 0.0]]);
        let unit = SparseMatrix::from_coo(&[(0, 1, 1.0), (1, 0, 1.0)], (2, 2)).unwrap();
        assert_eq!(sym_normalize(&unit).unwrap(), unit);
        let with_zero_row = SparseMatrix::from_coo(&[(0, 1, 1.0), (1, 0, 0.0)], (2, 2)).unwrap();
        let n = sym_normalize(&with_zero_row).unwrap();
        assert!(n.values().iter().all(|v| v.is_finite()));
        assert_eq!(n.get(1, 0), 0.0);
        let negative = SparseMatrix::from_coo(&[(0, 1, -1.0)], (2, 2)).unwrap();
        assert!(matches!(sym_normalize(&negative), Err(Error::NegativeEntry { .. })));
    }

    #[test]
    fn two_items_single_mutual_edge() {
        let f = fm(array![[1.0, 1.0], [2.0, 2.0]]);
        let g = build_modality_graph(&f, 1).unwrap();
        let a = g.adjacency().to_dense();
        assert!((a[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((a[[1, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(g.adjacency().nnz(), 2);
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let f = fm(array![[1.0, 0.2], [0.3, 1.0], [1.0, 0.1], [0.4, 0.4]]);
        let dir = tempfile::tempdir().unwrap();
        let fresh = build_modality_graph_cached(&f, 2, Some(dir.path())).unwrap();
        let cached = build_modality_graph_cached(&f, 2, Some(dir.path())).unwrap();
        assert_eq!(fresh.adjacency(), cached.adjacency());
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
