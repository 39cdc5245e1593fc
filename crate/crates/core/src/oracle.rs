//! Reference solvers used to certify the main solver: equality-constrained
//! damped Newton, and projected gradient descent as a second opinion. Both
//! use dense factorizations of their own rather than the KKT module.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::instance::PNormProblem;
use crate::sparse::{dot, norm2};

#[derive(Debug, Clone, Serialize)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub projected_gradient_norm: f64,
    pub feasibility: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Stop once half the squared Newton decrement is below `tol·(1+|f|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-15, max_iter: 1000 }
    }
}

/// Orthonormal basis `Q` of the row space of `A` with `Ax = c ⇔ Qx = c′`,
/// from a column-pivoted Householder QR of `Aᵀ` so the oracle shares no
/// solver code with the main path.
struct RowBasis {
    q: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl RowBasis {
    fn new(prob: &PNormProblem) -> Result<Self> {
        let n = prob.dim();
        if prob.a.rows() == 0 {
            return Ok(RowBasis { q: DMatrix::zeros(0, n), rhs: DVector::zeros(0) });
        }
        let a = prob.a.to_dense();
        let qr = a.transpose().col_piv_qr();
        let r = qr.r();
        let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
        let top = diag.first().copied().unwrap_or(0.0);
        let rank = diag.iter().take_while(|&&d| d > 1e-12 * top).count();
        let qr_rows = qr.q().columns(0, rank).transpose();
        // coordinates along the basis: (A Qᵀ) y = c, full column rank
        let c = DVector::from_column_slice(&prob.c);
        let s = &a * qr_rows.transpose();
        let sq = s.clone().qr();
        let rhs =
            sq.r().solve_upper_triangular(&(sq.q().transpose() * &c)).ok_or_else(|| Error::OracleFailure("singular constraint basis".into()))?;
        let basis = RowBasis { q: qr_rows, rhs };
        let x = basis.min_norm_point();
        let resid = (&a * DVector::from_column_slice(&x) - c).norm();
        if resid > 1e-8 * (1.0 + prob.c.iter().map(|v| v * v).sum::<f64>().sqrt()) {
            return Err(Error::Infeasible(format!("Ax = c has no solution (residual {resid:.3e})")));
        }
        Ok(basis)
    }

    fn min_norm_point(&self) -> Vec<f64> {
        (self.q.transpose() * &self.rhs).iter().copied().collect()
    }

    /// Component of `g` in `ker A`.
    fn project(&self, g: &[f64]) -> Vec<f64> {
        let gv = DVector::from_column_slice(g);
        let qg = &self.q * &gv;
        (gv - self.q.transpose() * qg).iter().copied().collect()
    }

    /// Orthonormal basis of `ker A`, from the eigenvectors of the kernel
    /// projector (eigenvalues exactly 0 or 1, so well separated).
    fn kernel_basis(&self, n: usize) -> DMatrix<f64> {
        let proj = DMatrix::identity(n, n) - self.q.transpose() * &self.q;
        let eig = proj.symmetric_eigen();
        let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
        let mut z = DMatrix::zeros(n, cols.len());
        for (j, &i) in cols.iter().enumerate() {
            z.set_column(j, &eig.eigenvectors.column(i));
        }
        z
    }
}

/// Newton direction `d = Zy` with `(ZᵀHZ)y = −Zᵀ∇f`, solved by a symmetric
/// eigendecomposition with near-null directions dropped.
fn newton_direction(z: &DMatrix<f64>, h: &DMatrix<f64>, grad: &[f64]) -> Vec<f64> {
    if z.ncols() == 0 {
        return vec![0.0; grad.len()];
    }
    let hz = z.transpose() * h * z;
    let hz = (&hz + hz.transpose()) * 0.5;
    let rhs = -(z.transpose() * DVector::from_column_slice(grad));
    let eig = hz.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut y = DVector::zeros(z.ncols());
    for k in 0..z.ncols() {
        let l = eig.eigenvalues[k];
        if l > 1e-14 * lmax {
            let v = eig.eigenvectors.column(k);
            y += v * (v.dot(&rhs) / l);
        }
    }
    (z * y).iter().copied().collect()
}

/// Full Hessian `2MᵀM + p(p−1)Nᵀdiag|Nx|^{p−2}N`.
fn hessian(prob: &PNormProblem, x: &[f64]) -> DMatrix<f64> {
    let p = prob.p;
    let nx = prob.n.apply(x);
    let wn: Vec<f64> = nx.iter().map(|v| p * (p - 1.0) * v.abs().powf(p - 2.0)).collect();
    prob.m.gram() * 2.0 + prob.n.weighted_gram(&wn)
}

/// Damped Newton with KKT steps and Armijo backtracking, started from the
/// minimum-norm feasible point.
pub fn newton_oracle(prob: &PNormProblem, opts: &NewtonOptions) -> Result<OracleSolution> {
    let basis = RowBasis::new(prob)?;
    let z = basis.kernel_basis(prob.dim());
    let mut x = basis.min_norm_point();
    let mut f = prob.objective_unchecked(&x);
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let g = prob.gradient(&x);
        let h = hessian(prob, &x);
        let d = newton_direction(&z, &h, &g);
        let slope = dot(&g, &d);
        if !(slope < 0.0) || -0.5 * slope <= opts.tol * (1.0 + f.abs()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..80 {
            let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let fy = prob.objective_unchecked(&y);
            if fy <= f + 0.25 * t * slope {
                x = y;
                f = fy;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let pg = norm2(&basis.project(&g));
            if pg <= 1e-7 * (1.0 + norm2(&g)) {
                break;
            }
            return Err(Error::OracleFailure(format!("line search failed at iteration {it} (projected gradient {pg:.3e})")));
        }
    }
    let pg = norm2(&basis.project(&prob.gradient(&x)));
    Ok(OracleSolution { f, projected_gradient_norm: pg, feasibility: prob.feasibility_residual(&x), iterations, x })
}

/// Projected gradient descent with Armijo backtracking; slow, used only to
/// cross-check the Newton oracle on small instances.
pub fn projected_gradient_oracle(prob: &PNormProblem, tol: f64, max_iter: usize) -> Result<OracleSolution> {
    let proj = RowBasis::new(prob)?;
    let mut x = proj.min_norm_point();
    let mut f = prob.objective_unchecked(&x);
    let mut t = 1.0;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let pg = proj.project(&prob.gradient(&x));
        let gg = dot(&pg, &pg);
        if gg.sqrt() <= tol {
            break;
        }
        t *= 4.0;
        let mut accepted = false;
        for _ in 0..100 {
            let y: Vec<f64> = x.iter().zip(&pg).map(|(a, b)| a - t * b).collect();
            let fy = prob.objective_unchecked(&y);
            if fy <= f - 0.5 * t * gg {
                x = y;
                f = fy;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let pg = norm2(&proj.project(&prob.gradient(&x)));
    Ok(OracleSolution { f, projected_gradient_norm: pg, feasibility: prob.feasibility_residual(&x), iterations, x })
}
