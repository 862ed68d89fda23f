//! Compressed sparse row matrices and the bipartite graph builders.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::dataset::SplitDataset;
use crate::error::{Error, Result};

/// CSR matrix with strictly increasing column indices inside each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

/// Row sums of a non-negative matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeVector(Vec<f64>);

impl DegreeVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `1/sqrt(deg)`, with 0 for zero-degree nodes.
    pub fn inv_sqrt(&self) -> Vec<f64> {
        self.0
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect()
    }
}

impl SparseMatrix {
    /// Builds a canonical CSR matrix from triplets; duplicates are summed.
    pub fn from_coo(entries: &[(usize, usize, f64)], shape: (usize, usize)) -> Result<Self> {
        let (n_rows, n_cols) = shape;
        for &(r, c, v) in entries {
            if r >= n_rows || c >= n_cols {
                return Err(Error::IndexOutOfRange {
                    row: r,
                    col: c,
                    rows: n_rows,
                    cols: n_cols,
                });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sparse entry ({r}, {c})")));
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = entries.to_vec();
        sorted.sort_by_key(|e| (e.0, e.1));

        let mut row_offsets = vec![0usize; n_rows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Wraps raw CSR arrays after validating every structural invariant.
    pub fn from_csr_parts(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 || row_offsets[0] != 0 {
            return Err(Error::shape(
                "csr",
                "row_offsets must have n_rows + 1 entries starting at 0",
            ));
        }
        let nnz = row_offsets[n_rows];
        if col_indices.len() != nnz || values.len() != nnz {
            return Err(Error::shape(
                "csr",
                format!(
                    "nnz {nnz} but {} columns and {} values",
                    col_indices.len(),
                    values.len()
                ),
            ));
        }
        for r in 0..n_rows {
            let (start, end) = (row_offsets[r], row_offsets[r + 1]);
            if start > end || end > nnz {
                return Err(Error::shape("csr", format!("row {r} has decreasing offsets")));
            }
            let cols = &col_indices[start..end];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::shape("csr", format!("row {r} columns not strictly increasing")));
            }
            if let Some(&c) = cols.last() {
                if c >= n_cols {
                    return Err(Error::IndexOutOfRange {
                        row: r,
                        col: c,
                        rows: n_rows,
                        cols: n_cols,
                    });
                }
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("csr value #{pos}")));
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[s..e], &self.values[s..e])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for (r, c, v) in self.iter() {
            out[[r, c]] += v;
        }
        out
    }

    /// Re-sorts and merges entries; a no-op on canonical input.
    pub fn canonicalize(&self) -> Self {
        let entries: Vec<_> = self.iter().collect();
        // Entries come from a valid matrix, so this cannot fail.
        SparseMatrix::from_coo(&entries, self.shape()).expect("entries within shape")
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c];
                col_indices[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        SparseMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn row_sums(&self) -> DegreeVector {
        DegreeVector((0..self.n_rows).map(|r| self.row(r).1.iter().sum::<f64>()).collect())
    }

    /// Scales each row to sum to one; empty rows stay empty.
    pub fn row_normalized(&self) -> Self {
        let sums = self.row_sums();
        let mut values = self.values.clone();
        for r in 0..self.n_rows {
            let s = sums.0[r];
            if s != 0.0 {
                for v in &mut values[self.row_offsets[r]..self.row_offsets[r + 1]] {
                    *v /= s;
                }
            }
        }
        SparseMatrix { values, ..self.clone() }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        self.iter().all(|(r, c, v)| (self.get(c, r) - v).abs() <= tol)
            && self
                .transpose()
                .iter()
                .all(|(r, c, v)| (self.get(r, c) - v).abs() <= tol)
    }

    /// Sparse times dense. Each output row accumulates its terms in
    /// ascending column order, so results do not depend on thread count.
    pub fn spmm(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.n_cols {
            return Err(Error::shape(
                "spmm",
                format!("{}x{} times {}x{}", self.n_rows, self.n_cols, x.nrows(), x.ncols()),
            ));
        }
        let mut out = Array2::zeros((self.n_rows, x.ncols()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut out_row)| {
                let (cols, vals) = self.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    out_row.scaled_add(v, &x.row(c));
                }
            });
        Ok(out)
    }
}

/// A frozen sparse operator together with its transpose, as needed by the
/// backward pass of `A * X`.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    matrix: Arc<SparseMatrix>,
    transpose: Arc<SparseMatrix>,
}

impl SparseOperator {
    pub fn new(matrix: SparseMatrix) -> Self {
        let transpose = Arc::new(matrix.transpose());
        SparseOperator {
            matrix: Arc::new(matrix),
            transpose,
        }
    }

    /// For matrices known to be symmetric the transpose is shared.
    pub fn symmetric(matrix: SparseMatrix) -> Self {
        let matrix = Arc::new(matrix);
        SparseOperator {
            transpose: Arc::clone(&matrix),
            matrix,
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn transpose(&self) -> &SparseMatrix {
        &self.transpose
    }
}

/// Binary `|U| x |I|` matrix over the training edges only.
pub fn build_interaction_matrix(split: &SplitDataset) -> SparseMatrix {
    let base = split.base();
    let entries: Vec<_> = split.train_edges().map(|(u, i)| (u, i, 1.0)).collect();
    SparseMatrix::from_coo(&entries, (base.n_users(), base.n_items())).expect("dataset indices are in range")
}

/// Symmetric-normalised bipartite adjacency `D^-1/2 [[0, R], [R^T, 0]] D^-1/2`
/// over `|U| + |I|` nodes, users first.
pub fn build_norm_adjacency(r: &SparseMatrix) -> Result<SparseMatrix> {
    if r.values().iter().any(|&v| v != 1.0) {
        return Err(Error::invalid("interaction matrix must be binary"));
    }
    let (n_users, n_items) = r.shape();
    let user_deg = r.row_sums();
    let item_deg = r.transpose().row_sums();
    let user_inv = user_deg.inv_sqrt();
    let item_inv = item_deg.inv_sqrt();
    let mut entries = Vec::with_capacity(2 * r.nnz());
    for (u, i, _) in r.iter() {
        let w = user_inv[u] * item_inv[i];
        entries.push((u, n_users + i, w));
        entries.push((n_users + i, u, w));
    }
    let n = n_users + n_items;
    SparseMatrix::from_coo(&entries, (n, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn coo_single_entry() {
        let m = SparseMatrix::from_coo(&[(0, 0, 1.0)], (1, 1)).unwrap();
        assert_eq!(m.to_dense(), array![[1.0]]);
    }

    #[test]
    fn coo_sums_duplicates() {
        let m = SparseMatrix::from_coo(&[(0, 1, 1.0), (0, 1, 2.0)], (1, 2)).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 3.0);
    }

    #[test]
    fn coo_rejects_out_of_range() {
        let err = SparseMatrix::from_coo(&[(2, 0, 1.0)], (2, 2)).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { row: 2, .. }));
    }

    #[test]
    fn spmm_identity_and_swap() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(SparseMatrix::identity(2).spmm(x.view()).unwrap(), x);
        let swap = SparseMatrix::from_coo(&[(0, 1, 1.0), (1, 0, 1.0)], (2, 2)).unwrap();
        assert_eq!(swap.spmm(x.view()).unwrap(), array![[3.0, 4.0], [1.0, 2.0]]);
        assert_eq!(
            SparseMatrix::zeros(2, 2).spmm(x.view()).unwrap(),
            Array2::<f64>::zeros((2, 2))
        );
    }

    #[test]
    fn spmm_shape_mismatch() {
        let x = Array2::<f64>::zeros((3, 2));
        assert!(SparseMatrix::identity(2).spmm(x.view()).is_err());
    }

    #[test]
    fn csr_parts_validation() {
        assert!(SparseMatrix::from_csr_parts(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::from_csr_parts(1, 3, vec![0, 2], vec![1, 2], vec![1.0, f64::NAN]).is_err());
        assert!(SparseMatrix::from_csr_parts(1, 3, vec![0, 2], vec![1, 2], vec![1.0, 1.0]).is_ok());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn norm_adjacency_two_users_one_item() {
        let r = SparseMatrix::from_coo(&[(0, 0, 1.0), (1, 0, 1.0)], (2, 1)).unwrap();
        let l = build_norm_adjacency(&r).unwrap();
        assert!((l.get(0, 2) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((l.get(0, 2) - 0.70711).abs() < 1e-5);
        assert!(l.is_symmetric(0.0));
    }

    #[test]
    fn norm_adjacency_single_edge() {
        let r = SparseMatrix::from_coo(&[(0, 0, 1.0)], (1, 1)).unwrap();
        let l = build_norm_adjacency(&r).unwrap();
        assert_eq!(l.to_dense(), array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn zero_degree_nodes_give_empty_rows() {
        let r = SparseMatrix::from_coo(&[(0, 0, 1.0)], (2, 2)).unwrap();
        let l = build_norm_adjacency(&r).unwrap();
        assert_eq!(l.row(1).0.len(), 0);
        assert_eq!(l.row(3).0.len(), 0);
    }

    #[test]
    fn transpose_round_trip() {
        let m = SparseMatrix::from_coo(&[(0, 2, 1.0), (1, 0, 2.0), (1, 2, 3.0)], (2, 3)).unwrap();
        assert_eq!(m.transpose().to_dense(), m.to_dense().t());
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn row_normalized_rows_sum_to_one() {
        let m = SparseMatrix::from_coo(&[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)], (3, 2)).unwrap();
        let n = m.row_normalized();
        assert_eq!(n.row_sums().values(), &[1.0, 1.0, 0.0]);
    }
}
