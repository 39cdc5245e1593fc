//! Compressed sparse row matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Row-compressed real matrix. Duplicate coordinates are summed on
/// construction, so each `(row, col)` pair appears at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Coordinate-triplet form used for JSON exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        for &(i, j, v) in entries {
            if i >= rows || j >= cols {
                return Err(Error::InvalidInput(format!("entry ({i}, {j}) outside a {rows}x{cols} matrix")));
            }
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("entry ({i}, {j}) is not finite")));
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = entries.to_vec();
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                values.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        Ok(SparseMatrix { rows, cols, indptr, indices, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        SparseMatrix { rows, cols, indptr: vec![0; rows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(d: &[f64]) -> Self {
        SparseMatrix { rows: d.len(), cols: d.len(), indptr: (0..=d.len()).collect(), indices: (0..d.len()).collect(), values: d.to_vec() }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    t.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &t).expect("dense entries are in range")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.rows).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    pub fn to_triplet_matrix(&self) -> TripletMatrix {
        TripletMatrix { rows: self.rows, cols: self.cols, entries: self.triplets() }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "apply: vector length");
        (0..self.rows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "apply_transpose: vector length");
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * yi;
                }
            }
        }
        out
    }

    pub fn try_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matrix-vector product", self.cols, x.len())?;
        Ok(self.apply(x))
    }

    pub fn transpose(&self) -> SparseMatrix {
        let t: Vec<_> = self.triplets().into_iter().map(|(i, j, v)| (j, i, v)).collect();
        SparseMatrix::from_triplets(self.cols, self.rows, &t).unwrap()
    }

    pub fn scale(&self, s: f64) -> SparseMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `diag(d) * self`.
    pub fn scale_rows(&self, d: &[f64]) -> SparseMatrix {
        assert_eq!(d.len(), self.rows);
        let mut out = self.clone();
        for i in 0..self.rows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                out.values[k] *= d[i];
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> SparseMatrix {
        let mut t = Vec::new();
        for (new_i, &i) in rows.iter().enumerate() {
            t.extend(self.row(i).map(|(j, v)| (new_i, j, v)));
        }
        SparseMatrix::from_triplets(rows.len(), self.cols, &t).unwrap()
    }

    pub fn vstack(blocks: &[&SparseMatrix]) -> Result<SparseMatrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut t = Vec::new();
        let mut offset = 0;
        for b in blocks {
            check_len("vstack columns", cols, b.cols)?;
            t.extend(b.triplets().into_iter().map(|(i, j, v)| (i + offset, j, v)));
            offset += b.rows;
        }
        SparseMatrix::from_triplets(offset, cols, &t)
    }

    /// Appends a dense row.
    pub fn push_row(&self, row: &[f64]) -> SparseMatrix {
        assert_eq!(row.len(), self.cols);
        let mut t = self.triplets();
        t.extend(row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, &v)| (self.rows, j, v)));
        SparseMatrix::from_triplets(self.rows + 1, self.cols, &t).unwrap()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                a[(i, j)] += v;
            }
        }
        a
    }

    /// Dense `selfᵀ · diag(w) · self`.
    pub fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        assert_eq!(w.len(), self.rows);
        if self.nnz() * 4 >= self.rows * self.cols && self.rows * self.cols > 0 {
            // mostly dense: one blocked product beats the scatter loop
            let x = self.to_dense();
            let mut y = x.clone();
            for (i, mut row) in y.row_iter_mut().enumerate() {
                row *= w[i];
            }
            return x.transpose() * y;
        }
        let mut g = DMatrix::zeros(self.cols, self.cols);
        for i in 0..self.rows {
            if w[i] == 0.0 {
                continue;
            }
            let (a, b) = (self.indptr[i], self.indptr[i + 1]);
            for p in a..b {
                let (j, vj) = (self.indices[p], self.values[p]);
                for q in a..b {
                    g[(j, self.indices[q])] += w[i] * vj * self.values[q];
                }
            }
        }
        g
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.weighted_gram(&vec![1.0; self.rows])
    }

    /// True when every row has at most one entry and no two rows share a column.
    pub fn is_column_diagonal(&self) -> bool {
        let mut seen = vec![false; self.cols];
        for i in 0..self.rows {
            let mut it = self.row(i).filter(|(_, v)| *v != 0.0);
            if let Some((j, _)) = it.next() {
                if it.next().is_some() || seen[j] {
                    return false;
                }
                seen[j] = true;
            }
        }
        true
    }

    /// True when no row has more than one stored nonzero, so that
    /// `selfᵀ D self` is diagonal for every diagonal `D`.
    pub fn has_single_entry_rows(&self) -> bool {
        (0..self.rows).all(|i| self.row(i).filter(|(_, v)| *v != 0.0).count() <= 1)
    }

    /// Maximum absolute column sum, the induced 1→1 norm.
    pub fn norm_1_to_1(&self) -> f64 {
        let mut sums = vec![0.0; self.cols];
        for (_, j, v) in self.triplets() {
            sums[j] += v.abs();
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    /// `self * other`.
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        check_len("matmul inner dimension", self.cols, other.rows)?;
        let mut t = Vec::new();
        for i in 0..self.rows {
            let mut acc = std::collections::BTreeMap::new();
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    *acc.entry(j).or_insert(0.0) += a * b;
                }
            }
            t.extend(acc.into_iter().map(|(j, v)| (i, j, v)));
        }
        SparseMatrix::from_triplets(self.rows, other.cols, &t)
    }

    /// Block-diagonal concatenation.
    pub fn block_diag(blocks: &[&SparseMatrix]) -> SparseMatrix {
        let (mut r0, mut c0) = (0, 0);
        let mut t = Vec::new();
        for b in blocks {
            t.extend(b.triplets().into_iter().map(|(i, j, v)| (i + r0, j + c0, v)));
            r0 += b.rows;
            c0 += b.cols;
        }
        SparseMatrix::from_triplets(r0, c0, &t).unwrap()
    }
}

impl TryFrom<TripletMatrix> for SparseMatrix {
    type Error = Error;
    fn try_from(t: TripletMatrix) -> Result<Self> {
        SparseMatrix::from_triplets(t.rows, t.cols, &t.entries)
    }
}

impl From<&SparseMatrix> for TripletMatrix {
    fn from(m: &SparseMatrix) -> Self {
        m.to_triplet_matrix()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_p_pow(a: &[f64], p: f64) -> f64 {
    a.iter().map(|x| x.abs().powf(p)).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0)]).unwrap();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.apply(&[1.0, 5.0]), vec![3.0, -1.0]);
        assert_eq!(a.apply_transpose(&[1.0, 1.0]), vec![2.0, 0.0]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(SparseMatrix::from_triplets(1, 1, &[(1, 0, 1.0)]).is_err());
        assert!(SparseMatrix::from_triplets(1, 1, &[(0, 0, f64::NAN)]).is_err());
    }

    #[test]
    fn gram_matches_dense() {
        let a = SparseMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 1, -1.0), (2, 0, 3.0)]).unwrap();
        let d = a.to_dense();
        let w = [1.0, 2.0, 0.5];
        let g = a.weighted_gram(&w);
        let expect = d.transpose() * DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&w)) * &d;
        assert!((g - expect).abs().max() < 1e-14);
    }

    #[test]
    fn matmul_and_transpose() {
        let a = SparseMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]).unwrap();
        let p = a.matmul(&a.transpose()).unwrap().to_dense();
        let d = a.to_dense();
        assert!((p - &d * d.transpose()).abs().max() < 1e-14);
        assert_eq!(a.norm_1_to_1(), 3.0);
    }

    #[test]
    fn column_diagonal_detection() {
        assert!(SparseMatrix::diag(&[1.0, 0.0, 2.0]).is_column_diagonal());
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(!a.is_column_diagonal());
    }
}
