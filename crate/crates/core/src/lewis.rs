//! Leverage scores, ℓp Lewis weights, and mixed ℓ2/ℓp row sampling.

use nalgebra::DMatrix;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::linsolve::psd_pinv;
use crate::sparse::SparseMatrix;

/// Oversampling constant of the mixed sampling values.
pub const DEFAULT_LEWIS_C: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeverageResult {
    pub tau: Vec<f64>,
    pub rank: usize,
}

/// Exact leverage scores `aᵢᵀ(AᵀA)⁺aᵢ`, via a thin SVD with singular values
/// below `rel_tol·σ_max` treated as zero.
pub fn leverage_scores(a: &SparseMatrix, rel_tol: f64) -> LeverageResult {
    let d = a.to_dense();
    if d.nrows() == 0 || d.ncols() == 0 {
        return LeverageResult { tau: vec![0.0; d.nrows()], rank: 0 };
    }
    let rows = d.nrows();
    let svd = d.svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > rel_tol * smax && smax > 0.0).collect();
    let tau = (0..rows).map(|i| keep.iter().map(|&k| u[(i, k)] * u[(i, k)]).sum()).collect();
    LeverageResult { tau, rank: keep.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LewisResult {
    pub tau: Vec<f64>,
    pub p: f64,
    pub iterations: usize,
    pub fixed_point_residual: f64,
    pub converged: bool,
}

fn quadratic_scores(a: &DMatrix<f64>, weights: &[f64]) -> Vec<f64> {
    let n = a.ncols();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..a.nrows() {
        if weights[i] == 0.0 {
            continue;
        }
        let row = a.row(i);
        g += row.transpose() * row * weights[i];
    }
    let (ginv, _) = psd_pinv(&g, 1e-12);
    (0..a.nrows())
        .map(|i| {
            let row = a.row(i);
            (row * &ginv * row.transpose())[(0, 0)]
        })
        .collect()
}

/// Max relative violation of `aᵢᵀ(Aᵀ diag(τ)^{1−2/p} A)⁻¹aᵢ = τᵢ^{2/p}` over
/// nonzero rows.
pub fn lewis_residual(a: &SparseMatrix, tau: &[f64], p: f64) -> f64 {
    let d = a.to_dense();
    let nonzero: Vec<bool> = (0..d.nrows()).map(|i| d.row(i).iter().any(|v| *v != 0.0)).collect();
    let wts: Vec<f64> = tau.iter().zip(&nonzero).map(|(t, nz)| if *nz && *t > 0.0 { t.powf(1.0 - 2.0 / p) } else { 0.0 }).collect();
    let q = quadratic_scores(&d, &wts);
    (0..d.nrows())
        .filter(|&i| nonzero[i])
        .map(|i| {
            let t = tau[i].powf(2.0 / p);
            (q[i] - t).abs() / t
        })
        .fold(0.0, f64::max)
}

pub fn default_lewis_iterations(p: f64, tol: f64) -> usize {
    (2.0 * (1.0 / tol).ln().ceil() / (1.0 - (p / 2.0 - 1.0).abs())).ceil() as usize
}

/// Fixed-point iteration `w ← (aᵢᵀ(Aᵀ W^{1−2/p} A)⁻¹aᵢ)^{p/2}` from the
/// leverage scores, for `p ∈ [2, 4)`.
pub fn lewis_weights(a: &SparseMatrix, p: f64, max_iter: Option<usize>, tol: f64) -> Result<LewisResult> {
    if !(2.0..4.0).contains(&p) {
        return Err(Error::UnsupportedP(p));
    }
    let lev = leverage_scores(a, 1e-10);
    if p == 2.0 {
        let residual = lewis_residual(a, &lev.tau, p);
        return Ok(LewisResult { tau: lev.tau, p, iterations: 0, fixed_point_residual: residual, converged: true });
    }
    let d = a.to_dense();
    let nonzero: Vec<bool> = (0..d.nrows()).map(|i| d.row(i).iter().any(|v| *v != 0.0)).collect();
    let budget = max_iter.unwrap_or_else(|| default_lewis_iterations(p, tol));
    let mut w = lev.tau;
    let mut residual;
    let mut iterations = 0;
    loop {
        let wts: Vec<f64> = w.iter().zip(&nonzero).map(|(t, nz)| if *nz && *t > 0.0 { t.powf(1.0 - 2.0 / p) } else { 0.0 }).collect();
        let q = quadratic_scores(&d, &wts);
        residual = (0..w.len())
            .filter(|&i| nonzero[i])
            .map(|i| {
                let t = w[i].powf(2.0 / p);
                (q[i] - t).abs() / t
            })
            .fold(0.0, f64::max);
        if residual <= tol || iterations >= budget {
            break;
        }
        w = q.iter().zip(&nonzero).map(|(v, nz)| if *nz { v.max(0.0).powf(p / 2.0) } else { 0.0 }).collect();
        iterations += 1;
    }
    Ok(LewisResult { tau: w, p, iterations, fixed_point_residual: residual, converged: residual <= tol })
}

fn log_n(n: usize) -> f64 {
    (n as f64).ln().max(1.0)
}

/// `νᵢ = C·max(τ₂ᵢ·ln n, τₚᵢ·n^{p/2−1}·ln n)`, with `ln n` floored at 1.
pub fn mixed_sampling_values(tau_c: &[f64], tau_d: &[f64], n: usize, p: f64, c_const: f64) -> Result<Vec<f64>> {
    check_len("ℓp weights", tau_c.len(), tau_d.len())?;
    let l = log_n(n);
    let np = (n as f64).powf(p / 2.0 - 1.0);
    Ok(tau_c.iter().zip(tau_d).map(|(a, b)| c_const * (a * l).max(b * np * l)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledRows {
    pub draws: Vec<usize>,
    /// Sampling values, renormalized so that they sum to the draw count.
    pub nu: Vec<f64>,
    pub p_scale: Vec<f64>,
    pub r_scale: Vec<f64>,
}

/// Draws `N = ceil(Σν)` rows with probability `ν_b/Σν`; row `b` enters the
/// ℓp sample as `D_b/ν_b^{1/p}` and the ℓ2 sample as `C_b/ν_b^{1/2}`.
pub fn sample_rows<R: Rng + ?Sized>(
    c: &SparseMatrix,
    d: &SparseMatrix,
    nu: &[f64],
    p: f64,
    rng: &mut R,
) -> Result<(SampledRows, SparseMatrix, SparseMatrix)> {
    check_len("rows of C", nu.len(), c.rows())?;
    check_len("rows of D", nu.len(), d.rows())?;
    check_len("columns of D", c.cols(), d.cols())?;
    let total: f64 = nu.iter().sum();
    if nu.iter().any(|&v| v < 0.0 || !v.is_finite()) || !(total >= 1.0) {
        return Err(Error::InvalidInput("sampling values must be non-negative and sum to at least 1".into()));
    }
    let count = total.ceil() as usize;
    // scaling ν to sum to the draw count keeps both sampled norms unbiased
    let nu: Vec<f64> = nu.iter().map(|v| v * count as f64 / total).collect();
    let dist = WeightedIndex::new(&nu).map_err(|e| Error::InvalidInput(format!("degenerate sampling values: {e}")))?;
    let draws: Vec<usize> = (0..count).map(|_| dist.sample(rng)).collect();
    let p_scale: Vec<f64> = draws.iter().map(|&b| nu[b].powf(-1.0 / p)).collect();
    let r_scale: Vec<f64> = draws.iter().map(|&b| nu[b].powf(1.0 / p - 0.5)).collect();
    let l2_scale: Vec<f64> = p_scale.iter().zip(&r_scale).map(|(a, b)| a * b).collect();
    let cs = c.select_rows(&draws).scale_rows(&l2_scale);
    let ds = d.select_rows(&draws).scale_rows(&p_scale);
    Ok((SampledRows { draws, nu, p_scale, r_scale }, cs, ds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSparsified {
    pub m: SparseMatrix,
    pub n: SparseMatrix,
    pub rows: SampledRows,
}

fn drop_zero_rows(a: &SparseMatrix) -> SparseMatrix {
    let keep: Vec<usize> = (0..a.rows()).filter(|&i| a.row(i).any(|(_, v)| v != 0.0)).collect();
    a.select_rows(&keep)
}

/// Sparsifies the pair `(M, N)` of an `‖M·‖₂² + ‖N·‖ₚᵖ` objective. When the
/// row counts differ the two blocks are stacked against zero blocks so that
/// one sampling pass serves both.
pub fn sparsify_mixed_problem<R: Rng + ?Sized>(m: &SparseMatrix, n: &SparseMatrix, p: f64, c_const: f64, rng: &mut R) -> Result<MixedSparsified> {
    check_len("columns of N", m.cols(), n.cols())?;
    if !(2.0..4.0).contains(&p) {
        return Err(Error::UnsupportedP(p));
    }
    let cols = m.cols();
    let (c, d) = if m.rows() == n.rows() {
        (m.clone(), n.clone())
    } else {
        let zm = SparseMatrix::zeros(n.rows(), cols);
        let zn = SparseMatrix::zeros(m.rows(), cols);
        (SparseMatrix::vstack(&[m, &zm])?, SparseMatrix::vstack(&[&zn, n])?)
    };
    let tau_c = leverage_scores(&c, 1e-10).tau;
    let tau_d = if c == d && p == 2.0 { tau_c.clone() } else { lewis_weights(&d, p, None, 1e-6)?.tau };
    let nu = mixed_sampling_values(&tau_c, &tau_d, cols, p, c_const)?;
    let (rows, cs, ds) = sample_rows(&c, &d, &nu, p, rng)?;
    Ok(MixedSparsified { m: drop_zero_rows(&cs), n: drop_zero_rows(&ds), rows })
}
