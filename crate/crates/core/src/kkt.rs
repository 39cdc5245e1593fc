//! Equality-constrained convex quadratic programs
//! `min xᵀQx + lᵀx  s.t.  Ax = c`: a Schur complement for diagonal `Q`,
//! a null-space method for dense `Q`, nested CG beyond dense sizes.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::linsolve::{conjugate_gradient, FnOperator, PsdFactor, SolveOptions};
use crate::sparse::{norm2, SparseMatrix};

/// Dense problems above this dimension fall back to nested CG.
pub const DENSE_LIMIT: usize = 2500;

#[derive(Debug, Clone)]
pub enum QuadMatrix {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl QuadMatrix {
    /// `Σ_k F_kᵀ diag(w_k) F_k` over `n` columns.
    pub fn from_terms(n: usize, terms: &[(&SparseMatrix, &[f64])]) -> QuadMatrix {
        if terms.iter().all(|(f, _)| f.has_single_entry_rows()) {
            let mut d = vec![0.0; n];
            for (f, w) in terms {
                for (i, j, v) in f.triplets() {
                    d[j] += w[i] * v * v;
                }
            }
            QuadMatrix::Diagonal(d)
        } else {
            let mut q = DMatrix::zeros(n, n);
            for (f, w) in terms {
                q += f.weighted_gram(w);
            }
            QuadMatrix::Dense(q)
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            QuadMatrix::Diagonal(d) => d.len(),
            QuadMatrix::Dense(q) => q.nrows(),
        }
    }

    fn trace(&self) -> f64 {
        match self {
            QuadMatrix::Diagonal(d) => d.iter().sum(),
            QuadMatrix::Dense(q) => q.trace(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            QuadMatrix::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            QuadMatrix::Dense(q) => (0..q.nrows()).map(|i| q.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect(),
        }
    }
}

/// Constraint block with its transpose cached for repeated solves.
#[derive(Debug)]
pub struct Constraints {
    a: SparseMatrix,
    at: SparseMatrix,
    null: OnceLock<NullSpace>,
}

impl Clone for Constraints {
    fn clone(&self) -> Self {
        Constraints::new(self.a.clone())
    }
}

/// Minimum-norm right inverse of `A` and an orthonormal kernel basis `Z`.
#[derive(Debug)]
struct NullSpace {
    pinv: DMatrix<f64>,
    range: DMatrix<f64>,
    z: OnceLock<DMatrix<f64>>,
}

impl NullSpace {
    fn new(a: &SparseMatrix) -> Self {
        let n = a.cols();
        if a.rows() == 0 {
            return NullSpace { pinv: DMatrix::zeros(n, 0), range: DMatrix::zeros(n, 0), z: OnceLock::new() };
        }
        let at = a.to_dense().transpose();
        let svd = at.svd(true, true);
        let u = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested Vᵀ");
        let smax = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
        let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > 1e-12 * smax).collect();
        let mut pinv = DMatrix::zeros(n, a.rows());
        let mut range = DMatrix::zeros(n, keep.len());
        for (j, &k) in keep.iter().enumerate() {
            let uk = u.column(k);
            pinv += uk * vt.row(k) / svd.singular_values[k];
            range.set_column(j, &uk);
        }
        NullSpace { pinv, range, z: OnceLock::new() }
    }

    fn kernel(&self) -> &DMatrix<f64> {
        self.z.get_or_init(|| {
            let n = self.pinv.nrows();
            // the projector has eigenvalues 0 and 1 only, so its eigenvectors
            // give a well separated basis of the complement
            let proj = DMatrix::identity(n, n) - &self.range * self.range.transpose();
            let eig = proj.symmetric_eigen();
            let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
            let mut z = DMatrix::zeros(n, cols.len());
            for (j, &i) in cols.iter().enumerate() {
                z.set_column(j, &eig.eigenvectors.column(i));
            }
            z
        })
    }
}

enum Inverse {
    Diagonal(Vec<f64>),
    Iterative(QuadMatrix, f64),
}

impl Constraints {
    pub fn new(a: SparseMatrix) -> Self {
        let at = a.transpose();
        Constraints { a, at, null: OnceLock::new() }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.a
    }

    pub fn residual_norm(&self, x: &[f64], c: &[f64]) -> f64 {
        norm2(&self.a.apply(x).iter().zip(c).map(|(u, v)| u - v).collect::<Vec<_>>())
    }

    /// Moves `x` onto `Ax = c` along the row space of `A`.
    pub fn restore(&self, x: &mut [f64], c: &[f64]) {
        if self.a.rows() == 0 {
            return;
        }
        let ns = self.null.get_or_init(|| NullSpace::new(&self.a));
        for _ in 0..2 {
            let r: Vec<f64> = c.iter().zip(self.a.apply(x)).map(|(ci, v)| ci - v).collect();
            let dx = &ns.pinv * DVector::from_vec(r);
            x.iter_mut().zip(dx.iter()).for_each(|(u, v)| *u += v);
        }
    }

    /// Minimizer of `xᵀQx + lᵀx` over `Ax = c`.
    pub fn solve(&self, q: &QuadMatrix, lin: Option<&[f64]>, c: &[f64]) -> Result<Vec<f64>> {
        let n = self.a.cols();
        let d = self.a.rows();
        check_len("quadratic form", n, q.dim())?;
        check_len("constraint rhs", d, c.len())?;
        let zero = vec![0.0; n];
        let lin = lin.unwrap_or(&zero);
        check_len("linear term", n, lin.len())?;

        let diag_ok = match q {
            QuadMatrix::Diagonal(dv) => {
                let mx = dv.iter().fold(0.0f64, |m, v| m.max(*v));
                mx > 0.0 && dv.iter().all(|v| *v > 1e-14 * mx)
            }
            _ => false,
        };
        if diag_ok {
            let QuadMatrix::Diagonal(dv) = q else { unreachable!() };
            let inv = Inverse::Diagonal(dv.iter().map(|v| 1.0 / v).collect());
            if let Ok(x) = self.schur_solve(&inv, lin, c).and_then(|x| self.finish(x, c)) {
                return Ok(x);
            }
        }
        if n <= DENSE_LIMIT {
            let x = self.null_space_solve(q, lin, c);
            return self.finish(x, c);
        }
        // with σ > 0 the objective changes by σ‖Ax‖² − 2σcᵀAx, constant on the feasible set
        let ata_trace: f64 = self.a.triplets().iter().map(|t| t.2 * t.2).sum();
        let qt = q.trace();
        let sigma = if d == 0 || ata_trace == 0.0 {
            0.0
        } else if qt > 0.0 {
            qt / ata_trace
        } else {
            1.0
        };
        let atc = self.at.apply(c);
        let lin_eff: Vec<f64> = lin.iter().zip(&atc).map(|(l, v)| l - 2.0 * sigma * v).collect();
        let x = self.schur_solve(&Inverse::Iterative(q.clone(), sigma), &lin_eff, c)?;
        self.finish(x, c)
    }

    fn null_space_solve(&self, q: &QuadMatrix, lin: &[f64], c: &[f64]) -> Vec<f64> {
        let ns = self.null.get_or_init(|| NullSpace::new(&self.a));
        let xp = &ns.pinv * DVector::from_column_slice(c);
        let z = ns.kernel();
        if z.ncols() == 0 {
            return xp.iter().copied().collect();
        }
        let qz = match q {
            QuadMatrix::Diagonal(dv) => {
                let mut m = z.clone();
                for (i, mut row) in m.row_iter_mut().enumerate() {
                    row *= dv[i];
                }
                m
            }
            QuadMatrix::Dense(qm) => qm * z,
        };
        let mut h = z.transpose() * &qz;
        h = (&h + h.transpose()) * 0.5;
        let qxp = DVector::from_vec(q.apply(xp.as_slice()));
        let rhs = -(z.transpose() * (qxp + DVector::from_column_slice(lin) * 0.5));
        let y = DVector::from_vec(PsdFactor::new(&h).solve(rhs.as_slice()));
        (xp + z * y).iter().copied().collect()
    }

    fn schur_solve(&self, inv: &Inverse, lin_eff: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        let n = self.a.cols();
        let d = self.a.rows();
        let hinv = |v: &[f64]| -> Result<Vec<f64>> {
            match inv {
                Inverse::Diagonal(di) => Ok(di.iter().zip(v).map(|(a, b)| a * b).collect()),
                Inverse::Iterative(qm, sigma) => {
                    let op = FnOperator {
                        dim: n,
                        f: |x: &[f64]| {
                            let mut y = qm.apply(x);
                            if *sigma > 0.0 {
                                let ax = self.a.apply(x);
                                let atax = self.at.apply(&ax);
                                y.iter_mut().zip(atax).for_each(|(u, v)| *u += sigma * v);
                            }
                            y
                        },
                    };
                    conjugate_gradient(&op, v, &SolveOptions { tol: 1e-12, ..Default::default() })
                }
            }
        };

        let hl = hinv(lin_eff)?;
        if d == 0 {
            return Ok(hl.iter().map(|v| -0.5 * v).collect());
        }
        let ahl = self.a.apply(&hl);
        let rhs: Vec<f64> = c.iter().zip(&ahl).map(|(ci, v)| -2.0 * ci - v).collect();
        let lambda = if matches!(inv, Inverse::Iterative(..)) && d > DENSE_LIMIT {
            let op = FnOperator {
                dim: d,
                f: |y: &[f64]| {
                    let aty = self.at.apply(y);
                    self.a.apply(&hinv(&aty).unwrap_or_else(|_| vec![0.0; n]))
                },
            };
            conjugate_gradient(&op, &rhs, &SolveOptions { tol: 1e-12, ..Default::default() })?
        } else {
            let s = self.schur(inv, &hinv)?;
            PsdFactor::new(&s).solve(&rhs)
        };
        let atl = self.at.apply(&lambda);
        let v: Vec<f64> = lin_eff.iter().zip(&atl).map(|(a, b)| a + b).collect();
        Ok(hinv(&v)?.iter().map(|u| -0.5 * u).collect())
    }

    /// Pulls `x` back onto `Ax = c` and rejects inconsistent systems.
    fn finish(&self, mut x: Vec<f64>, c: &[f64]) -> Result<Vec<f64>> {
        if self.a.rows() > 0 {
            // Ax itself carries rounding error of order ε‖A‖‖x‖
            let spread = self.a.frobenius_norm() * norm2(&x);
            let tol = 1e-9 * (1.0 + norm2(c)) + 1e-13 * spread;
            let mut res = self.residual_norm(&x, c);
            if res > tol {
                let gram = self.a.matmul(&self.at)?.to_dense();
                let f = PsdFactor::new(&gram);
                for _ in 0..3 {
                    let r: Vec<f64> = c.iter().zip(self.a.apply(&x)).map(|(ci, v)| ci - v).collect();
                    let y = f.solve(&r);
                    let dx = self.at.apply(&y);
                    x.iter_mut().zip(dx).for_each(|(u, v)| *u += v);
                    res = self.residual_norm(&x, c);
                    if res <= tol {
                        break;
                    }
                }
            }
            if res > 1e-6 * (1.0 + norm2(c)) + 1e-9 * spread {
                return Err(Error::Infeasible(format!("constraint residual {res:.3e} after KKT solve")));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure { residual: f64::INFINITY });
        }
        Ok(x)
    }

    fn schur(&self, inv: &Inverse, hinv: &dyn Fn(&[f64]) -> Result<Vec<f64>>) -> Result<DMatrix<f64>> {
        let d = self.a.rows();
        match inv {
            Inverse::Diagonal(di) => {
                let mut s = DMatrix::zeros(d, d);
                for k in 0..self.at.rows() {
                    let col: Vec<(usize, f64)> = self.at.row(k).collect();
                    for &(i, vi) in &col {
                        for &(j, vj) in &col {
                            s[(i, j)] += vi * vj * di[k];
                        }
                    }
                }
                Ok(s)
            }
            _ => {
                let mut s = DMatrix::zeros(d, d);
                let mut e = vec![0.0; d];
                for j in 0..d {
                    e[j] = 1.0;
                    let col = self.a.apply(&hinv(&self.at.apply(&e))?);
                    for i in 0..d {
                        s[(i, j)] = col[i];
                    }
                    e[j] = 0.0;
                }
                Ok((&s + s.transpose()) * 0.5)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_diagonal() {
        let cons = Constraints::new(SparseMatrix::zeros(0, 2));
        let x = cons.solve(&QuadMatrix::Diagonal(vec![1.0, 2.0]), Some(&[2.0, -4.0]), &[]).unwrap();
        assert!((x[0] + 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn symmetric_split() {
        let a = SparseMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let cons = Constraints::new(a);
        let x = cons.solve(&QuadMatrix::Diagonal(vec![1.0, 1.0]), None, &[1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14 && (x[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn singular_quadratic_uses_constraints() {
        // Q is zero on the second coordinate; the constraint pins it.
        let a = SparseMatrix::from_triplets(1, 2, &[(0, 1, 1.0)]).unwrap();
        let cons = Constraints::new(a);
        let x = cons.solve(&QuadMatrix::Diagonal(vec![1.0, 0.0]), Some(&[-2.0, 0.0]), &[3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_constraints() {
        // incidence transpose of a path: rows sum to zero
        let a = SparseMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (1, 0, -1.0), (1, 1, 1.0), (2, 1, -1.0)]).unwrap();
        let cons = Constraints::new(a);
        let x = cons.solve(&QuadMatrix::Diagonal(vec![1.0, 1.0]), None, &[1.0, 0.0, -1.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        assert!(cons.solve(&QuadMatrix::Diagonal(vec![1.0, 1.0]), None, &[1.0, 0.0, 0.0]).is_err());
    }
}
