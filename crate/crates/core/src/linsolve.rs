//! Solves with symmetric positive semidefinite operators.

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};
use crate::sparse::{dot, norm2, SparseMatrix};

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        assert_eq!(self.rows(), self.cols(), "operator must be square");
        self.rows()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        SparseMatrix::apply(self, x)
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        let mut d = vec![0.0; self.rows()];
        for (i, j, v) in self.triplets() {
            if i == j {
                d[i] += v;
            }
        }
        Some(d)
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows()).map(|i| (0..self.ncols()).map(|j| self[(i, j)] * x[j]).sum()).collect()
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.diagonal().iter().copied().collect())
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<F: Fn(&[f64]) -> Vec<f64> + Sync> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    /// Defaults to 20 times the dimension.
    pub max_iter: Option<usize>,
    pub dense_threshold: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_iter: None, dense_threshold: 512 }
    }
}

/// Pivoted Cholesky factor of a symmetric PSD matrix, with rank detection
/// after Jacobi equilibration. Solves consistent systems; directions in the
/// detected null space get zero coefficients.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    n: usize,
    rank: usize,
    perm: Vec<usize>,
    scale: Vec<f64>,
    l: DMatrix<f64>,
}

impl PsdFactor {
    pub fn new(a: &DMatrix<f64>) -> Self {
        Self::with_tol(a, 1e-12)
    }

    pub fn with_tol(a: &DMatrix<f64>, rel_tol: f64) -> Self {
        let n = a.nrows();
        let scale: Vec<f64> = (0..n)
            .map(|i| {
                let d = a[(i, i)];
                if d > 0.0 && d.is_finite() {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut w = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rank = n;
        for k in 0..n {
            let mut q = k;
            for i in k + 1..n {
                if w[(i, i)] > w[(q, q)] {
                    q = i;
                }
            }
            if !(w[(q, q)] > rel_tol) {
                rank = k;
                break;
            }
            if q != k {
                w.swap_rows(k, q);
                w.swap_columns(k, q);
                perm.swap(k, q);
            }
            let lkk = w[(k, k)].sqrt();
            w[(k, k)] = lkk;
            for i in k + 1..n {
                w[(i, k)] /= lkk;
            }
            for j in k + 1..n {
                let ljk = w[(j, k)];
                if ljk == 0.0 {
                    continue;
                }
                for i in j..n {
                    let v = w[(i, j)] - w[(i, k)] * ljk;
                    w[(i, j)] = v;
                    w[(j, i)] = v;
                }
            }
        }
        PsdFactor { n, rank, perm, scale, l: w }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let r = self.rank;
        let mut y: Vec<f64> = (0..r).map(|i| b[self.perm[i]] * self.scale[self.perm[i]]).collect();
        for i in 0..r {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..r).rev() {
            let mut s = y[i];
            for k in i + 1..r {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        let mut x = vec![0.0; self.n];
        for i in 0..r {
            x[self.perm[i]] = y[i] * self.scale[self.perm[i]];
        }
        x
    }
}

fn dense_of(op: &dyn LinearOperator) -> DMatrix<f64> {
    let n = op.dim();
    let mut a = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply(&e);
        for i in 0..n {
            a[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    a
}

fn rel_residual(op: &dyn LinearOperator, x: &[f64], b: &[f64]) -> f64 {
    let ax = op.apply(x);
    let r: f64 = ax.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    r / norm2(b)
}

/// Solves `op · x = rhs` for a symmetric PSD operator. Dense pivoted
/// Cholesky below `dense_threshold`, Jacobi-preconditioned CG above.
pub fn solve_spsd(op: &dyn LinearOperator, rhs: &[f64], opts: &SolveOptions) -> Result<Vec<f64>> {
    let n = op.dim();
    check_len("solve_spsd rhs", n, rhs.len())?;
    if norm2(rhs) == 0.0 {
        return Ok(vec![0.0; n]);
    }
    if n <= opts.dense_threshold {
        let a = dense_of(op);
        let f = PsdFactor::new(&a);
        let mut x = f.solve(rhs);
        let mut res = rel_residual(op, &x, rhs);
        for _ in 0..3 {
            if res <= opts.tol {
                break;
            }
            let ax = op.apply(&x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let dx = f.solve(&r);
            let cand: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let cres = rel_residual(op, &cand, rhs);
            if cres >= res {
                break;
            }
            x = cand;
            res = cres;
        }
        if res <= opts.tol {
            return Ok(x);
        }
        return Err(if res > 1e-6 { Error::InfeasibleRhs { residual: res } } else { Error::SolverFailure { residual: res } });
    }
    conjugate_gradient(op, rhs, opts)
}

pub fn conjugate_gradient(op: &dyn LinearOperator, rhs: &[f64], opts: &SolveOptions) -> Result<Vec<f64>> {
    let n = op.dim();
    let max_iter = opts.max_iter.unwrap_or(20 * n.max(1));
    let inv_diag: Vec<f64> = match op.diagonal() {
        Some(d) => d.into_iter().map(|v| if v > 0.0 { 1.0 / v } else { 1.0 }).collect(),
        None => vec![1.0; n],
    };
    let bnorm = norm2(rhs);
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut best = 1.0;
    for _ in 0..max_iter {
        let rn = norm2(&r) / bnorm;
        best = rn;
        if rn <= opts.tol {
            return Ok(x);
        }
        let ap = op.apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, a)| *ri -= alpha * a);
        z = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    let res = rel_residual(op, &x, rhs);
    if res <= opts.tol {
        Ok(x)
    } else {
        Err(Error::SolverFailure { residual: res.min(best.max(res)) })
    }
}

/// Moore-Penrose pseudoinverse of a symmetric PSD matrix via eigendecomposition,
/// discarding eigenvalues below `rel_tol · λ_max`.
pub fn psd_pinv(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let eig = a.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l > rel_tol * lmax && l > 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    (out, rank)
}
