//! Width-reduced multiplicative-weights solver for
//! `min ΔᵀMᵀMΔ + ‖NΔ‖ₚᵖ  s.t.  AΔ = c`, returning a point whose two energy
//! terms are within constant factors of a supplied bound `ν` on the optimum.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kkt::{Constraints, QuadMatrix};
use crate::sparse::{dot, norm2, norm_p_pow, SparseMatrix};

/// Multipliers on the Θ(·) parameter choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwuConstants {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub tau: f64,
}

impl Default for MwuConstants {
    fn default() -> Self {
        MwuConstants { alpha: 1.0, beta: 1.0, rho: 1.0, tau: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MwuParams {
    pub m1: usize,
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub tau: f64,
    pub t: usize,
    pub k_max: usize,
    pub constants: MwuConstants,
}

pub fn mwu_params(m1: usize, p: f64, constants: MwuConstants) -> Result<MwuParams> {
    if !(p > 2.0) || !p.is_finite() {
        return Err(Error::UnsupportedP(p));
    }
    if m1 == 0 {
        return Err(Error::InvalidInput("m1 must be positive".into()));
    }
    let c = constants;
    if [c.alpha, c.beta, c.rho, c.tau].iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("MWU constants must be positive".into()));
    }
    let m = m1 as f64;
    let den = p * (3.0 * p - 2.0);
    let alpha = c.alpha / p * m.powf(-(p * p - 5.0 * p + 2.0) / den);
    let beta = c.beta * m.powf((p - 2.0) / (3.0 * p - 2.0));
    let rho = c.rho * m.powf((p * p - 4.0 * p + 2.0) / den);
    let tau = c.tau * m.powf((p - 1.0) * (p - 2.0) / (3.0 * p - 2.0));
    let t = (m.powf(1.0 / p) / alpha).ceil() as usize;
    let k = 2f64.powf(-p / (p - 2.0)) * rho * rho * m.powf(2.0 / p) * beta.powf(-2.0 / (p - 2.0));
    Ok(MwuParams { m1, p, alpha, beta, rho, tau, t, k_max: k.ceil().max(1.0) as usize, constants })
}

pub fn phi_potential(w: &[f64], p: f64) -> f64 {
    norm_p_pow(w, p)
}

/// Oracle objective `m1^{(p−2)/p}‖MΔ‖² + 3^{−(p−2)} Σ r (NΔ)²`.
pub fn oracle_objective(m: &SparseMatrix, n: &SparseMatrix, r: &[f64], delta: &[f64], p: f64, m1: usize) -> f64 {
    let md = m.apply(delta);
    let nd = n.apply(delta);
    let wn: f64 = nd.iter().zip(r).map(|(v, r)| r * v * v).sum();
    (m1 as f64).powf((p - 2.0) / p) * dot(&md, &md) + 3f64.powf(-(p - 2.0)) * wn
}

/// Cached pieces of the oracle's KKT system: the constraint block and the
/// Gram matrix of `M`, reused across calls with changing resistances.
pub struct OracleSystem<'a> {
    cons: &'a Constraints,
    n_mat: &'a SparseMatrix,
    mtm: QuadMatrix,
    mtm_scale: f64,
    p: f64,
    m1: usize,
}

impl<'a> OracleSystem<'a> {
    /// `m_scale` multiplies `MᵀM`, so a scaled `M̃ = σM` is passed as `σ²`.
    pub fn new(cons: &'a Constraints, m: &SparseMatrix, n: &'a SparseMatrix, m_scale: f64, p: f64, m1: usize) -> Self {
        let dim = cons.matrix().cols();
        let mtm = QuadMatrix::from_terms(dim, &[(m, &vec![1.0; m.rows()])]);
        OracleSystem { cons, n_mat: n, mtm, mtm_scale: m_scale, p, m1 }
    }

    fn quad(&self, r: &[f64]) -> QuadMatrix {
        let dim = self.cons.matrix().cols();
        let cm = (self.m1 as f64).powf((self.p - 2.0) / self.p) * self.mtm_scale;
        let cn = 3f64.powf(-(self.p - 2.0));
        let wr: Vec<f64> = r.iter().map(|v| v * cn).collect();
        let nq = QuadMatrix::from_terms(dim, &[(self.n_mat, &wr)]);
        match (&self.mtm, nq) {
            (QuadMatrix::Diagonal(a), QuadMatrix::Diagonal(b)) => QuadMatrix::Diagonal(a.iter().zip(&b).map(|(x, y)| cm * x + y).collect()),
            (QuadMatrix::Diagonal(a), QuadMatrix::Dense(mut b)) => {
                for i in 0..dim {
                    b[(i, i)] += cm * a[i];
                }
                QuadMatrix::Dense(b)
            }
            (QuadMatrix::Dense(a), QuadMatrix::Diagonal(b)) => {
                let mut q = a * cm;
                for i in 0..dim {
                    q[(i, i)] += b[i];
                }
                QuadMatrix::Dense(q)
            }
            (QuadMatrix::Dense(a), QuadMatrix::Dense(b)) => QuadMatrix::Dense(a * cm + b),
        }
    }

    pub fn solve(&self, w: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        let r: Vec<f64> = w.iter().map(|v| v.powf(self.p - 2.0)).collect();
        self.solve_with_resistances(&r, c)
    }

    pub fn solve_with_resistances(&self, r: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        check_len("resistances", self.n_mat.rows(), r.len())?;
        if norm2(c) == 0.0 {
            return Ok(vec![0.0; self.cons.matrix().cols()]);
        }
        self.cons.solve(&self.quad(r), None, c)
    }
}

/// Minimizer of the oracle quadratic with `r = w^{p−2}` over `AΔ = c`.
pub fn oracle_solve(a: &SparseMatrix, m: &SparseMatrix, n: &SparseMatrix, c: &[f64], w: &[f64], p: f64, m1: usize) -> Result<Vec<f64>> {
    if w.iter().any(|&v| v < 1.0) {
        return Err(Error::InvalidInput("oracle weights must be at least 1".into()));
    }
    let cons = Constraints::new(a.clone());
    OracleSystem::new(&cons, m, n, 1.0, p, m1).solve(w, c)
}

/// `Ψ(r)`: value of the oracle objective at its minimizer.
pub fn psi_potential(a: &SparseMatrix, m: &SparseMatrix, n: &SparseMatrix, c: &[f64], r: &[f64], p: f64, m1: usize) -> Result<f64> {
    let cons = Constraints::new(a.clone());
    let d = OracleSystem::new(&cons, m, n, 1.0, p, m1).solve_with_resistances(r, c)?;
    Ok(oracle_objective(m, n, r, &d, p, m1))
}

/// Scaled problem data: `M̃ = ν^{−(p−2)/(2p)} M`, `c̃ = ν^{−1/p} c`; the
/// scaled solution maps back by multiplying with `descale = ν^{1/p}`.
#[derive(Debug, Clone)]
pub struct ScaledProblem {
    pub m: SparseMatrix,
    pub c: Vec<f64>,
    pub m_factor: f64,
    pub descale: f64,
}

pub fn scale_to_unit(m: &SparseMatrix, c: &[f64], p: f64, nu: f64) -> Result<ScaledProblem> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::InvalidInput(format!("scaling bound must be positive, got {nu}")));
    }
    let m_factor = nu.powf(-(p - 2.0) / (2.0 * p));
    let cf = nu.powf(-1.0 / p);
    Ok(ScaledProblem { m: m.scale(m_factor), c: c.iter().map(|v| v * cf).collect(), m_factor, descale: nu.powf(1.0 / p) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Flow,
    Width,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step_index: usize,
    pub kind: StepKind,
    pub phi: f64,
    pub psi: f64,
    pub np_energy: f64,
    pub quad_energy: f64,
    pub wallclock_ns: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct InvariantViolations {
    pub oracle_lemma: usize,
    pub psi_monotone: usize,
    pub phi_growth: usize,
    pub psi_sandwich: usize,
    pub weights_monotone: usize,
}

impl InvariantViolations {
    pub fn total(&self) -> usize {
        self.oracle_lemma + self.psi_monotone + self.phi_growth + self.psi_sandwich + self.weights_monotone
    }

    pub fn add(&mut self, o: &InvariantViolations) {
        self.oracle_lemma += o.oracle_lemma;
        self.psi_monotone += o.psi_monotone;
        self.phi_growth += o.phi_growth;
        self.psi_sandwich += o.psi_sandwich;
        self.weights_monotone += o.weights_monotone;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuStatus {
    Complete,
    Direct,
    WidthBudgetExceeded,
    WidthStalled,
}

#[derive(Debug, Clone, Serialize)]
pub struct MwuOutcome {
    pub x: Vec<f64>,
    pub status: MwuStatus,
    pub flow_steps: usize,
    pub width_steps: usize,
    pub oracle_calls: usize,
    /// `xᵀMᵀMx`.
    pub quad_energy: f64,
    /// `‖Nx‖ₚᵖ`.
    pub pow_energy: f64,
    /// `quad_energy / ν`.
    pub c1: f64,
    /// `pow_energy / (3ᵖ ν)`.
    pub c2: f64,
    pub violations: InvariantViolations,
    pub trace: Vec<TraceRecord>,
}

impl MwuOutcome {
    pub fn is_complete(&self) -> bool {
        matches!(self.status, MwuStatus::Complete | MwuStatus::Direct)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MwuOptions {
    /// A feasible point with energy at most `ν`, in unscaled coordinates;
    /// enables the right-hand side of the oracle energy check.
    pub witness: Option<Vec<f64>>,
    pub trace: bool,
    pub timings: bool,
}

const REL_SLACK: f64 = 1e-9;

/// Runs the width-reduced MWU loop on `min ΔᵀMᵀMΔ + ‖NΔ‖ₚᵖ s.t. AΔ = c`
/// under the assumption that the optimum is at most `nu`.
pub fn residual_solver(
    cons: &Constraints,
    m: &SparseMatrix,
    n: &SparseMatrix,
    c: &[f64],
    p: f64,
    nu: f64,
    constants: MwuConstants,
    opts: &MwuOptions,
) -> Result<MwuOutcome> {
    let dim = cons.matrix().cols();
    check_len("columns of M", dim, m.cols())?;
    check_len("columns of N", dim, n.cols())?;
    let finish = |x: Vec<f64>, status, flow_steps, width_steps, oracle_calls, violations, trace| {
        let mx = m.apply(&x);
        let quad_energy = dot(&mx, &mx);
        let pow_energy = norm_p_pow(&n.apply(&x), p);
        MwuOutcome {
            c1: quad_energy / nu,
            c2: pow_energy / (3f64.powf(p) * nu),
            x,
            status,
            flow_steps,
            width_steps,
            oracle_calls,
            quad_energy,
            pow_energy,
            violations,
            trace,
        }
    };

    if p == 2.0 {
        let q = QuadMatrix::from_terms(dim, &[(m, &vec![1.0; m.rows()]), (n, &vec![1.0; n.rows()])]);
        let x = if norm2(c) == 0.0 { vec![0.0; dim] } else { cons.solve(&q, None, c)? };
        return Ok(finish(x, MwuStatus::Direct, 0, 0, 1, InvariantViolations::default(), Vec::new()));
    }

    let m1 = n.rows().max(1);
    let params = mwu_params(m1, p, constants)?;
    let scaled = scale_to_unit(m, c, p, nu)?;
    let sys = OracleSystem::new(cons, m, n, scaled.m_factor * scaled.m_factor, p, m1);
    let mt = &scaled.m;
    let witness = opts.witness.as_ref().map(|w| {
        let s = 1.0 / scaled.descale;
        let ws: Vec<f64> = w.iter().map(|v| v * s).collect();
        let mw = mt.apply(&ws);
        (dot(&mw, &mw), norm_p_pow(&n.apply(&ws), p).powf(2.0 / p))
    });

    let m1f = m1 as f64;
    let cm = m1f.powf((p - 2.0) / p);
    let c3 = 3f64.powf(-(p - 2.0));
    let width_mult = 2f64.powf(1.0 / (p - 2.0));
    let start = Instant::now();

    let mut w: Vec<f64> = vec![1.0; n.rows()];
    let mut acc = vec![0.0; dim];
    let (mut i, mut k, mut calls) = (0usize, 0usize, 0usize);
    let mut viol = InvariantViolations::default();
    let mut trace = Vec::new();
    let mut prev_psi: Option<f64> = None;
    let mut best_single: Option<(f64, Vec<f64>)> = None;
    let mut status = MwuStatus::Complete;

    while i < params.t {
        let r: Vec<f64> = w.iter().map(|v| v.powf(p - 2.0)).collect();
        let delta = sys.solve_with_resistances(&r, &scaled.c)?;
        calls += 1;
        let nd = n.apply(&delta);
        let md = mt.apply(&delta);
        let quad = dot(&md, &md);
        let np = norm_p_pow(&nd, p);
        let rn2: f64 = nd.iter().zip(&r).map(|(v, r)| r * v * v).sum();
        let n2: f64 = dot(&nd, &nd);
        let psi = cm * quad + c3 * rn2;
        let phi = phi_potential(&w, p);
        let wnorm = phi.powf(1.0 / p);

        if n2 > rn2 * (1.0 + REL_SLACK) + 1e-300 {
            viol.oracle_lemma += 1;
        }
        if let Some((wq, wn)) = witness {
            let bound = (cm * wq) / c3 + wnorm.powf(p - 2.0) * wn;
            if rn2 > bound * (1.0 + 1e-7) + 1e-12 {
                viol.oracle_lemma += 1;
            }
        }
        if let Some(pp) = prev_psi {
            if psi < pp * (1.0 - 1e-7) - 1e-12 {
                viol.psi_monotone += 1;
            }
        }
        prev_psi = Some(psi);
        if witness.is_some() {
            let sandwich = cm + c3 * phi.powf((p - 2.0) / p);
            if psi > sandwich * (1.0 + 1e-7) + 1e-12 {
                viol.psi_sandwich += 1;
            }
        }
        let energy = quad + np;
        if best_single.as_ref().is_none_or(|(e, _)| energy < *e) {
            best_single = Some((energy, delta.clone()));
        }

        let kind = if np <= params.tau {
            for (we, v) in w.iter_mut().zip(&nd) {
                *we += params.alpha * v.abs();
            }
            acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += params.alpha * d);
            i += 1;
            let phi_new = phi_potential(&w, p);
            if phi_new > (phi.powf(1.0 / p) + 2.0 * params.alpha).powf(p) * (1.0 + REL_SLACK) {
                viol.phi_growth += 1;
            }
            StepKind::Flow
        } else {
            let mut boosted = 0;
            for e in 0..w.len() {
                if nd[e].abs() >= params.rho && r[e] <= params.beta {
                    w[e] *= width_mult;
                    boosted += 1;
                }
            }
            k += 1;
            if boosted == 0 {
                status = MwuStatus::WidthStalled;
            } else if k > params.k_max {
                status = MwuStatus::WidthBudgetExceeded;
            }
            StepKind::Width
        };
        if w.iter().any(|&v| v < 1.0) {
            viol.weights_monotone += 1;
        }
        if opts.trace {
            trace.push(TraceRecord {
                step_index: trace.len(),
                kind,
                phi,
                psi,
                np_energy: np,
                quad_energy: quad,
                wallclock_ns: if opts.timings { start.elapsed().as_nanos() as u64 } else { 0 },
            });
        }
        if status != MwuStatus::Complete {
            break;
        }
    }

    // the average of the flow-step solutions is feasible; see the notes on
    // the final descaling in the README
    let x_scaled: Vec<f64> = if i > 0 {
        let s = 1.0 / (params.alpha * i as f64);
        acc.iter().map(|v| v * s).collect()
    } else {
        best_single.map(|(_, d)| d).unwrap_or_else(|| vec![0.0; dim])
    };
    let x: Vec<f64> = x_scaled.iter().map(|v| v * scaled.descale).collect();
    Ok(finish(x, status, i, k, calls, viol, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_m16_p4() {
        let pr = mwu_params(16, 4.0, MwuConstants::default()).unwrap();
        assert!((pr.alpha - 0.25 * 16f64.powf(0.05)).abs() < 1e-12);
        assert!((pr.alpha - 0.2872).abs() < 1e-4);
        assert!((pr.beta - 1.7411).abs() < 1e-4);
        assert!((pr.tau - 5.278).abs() < 1e-3);
        assert!((pr.rho - 1.1487).abs() < 1e-4);
        assert_eq!(pr.t, 7);
    }

    #[test]
    fn params_m1_one() {
        let pr = mwu_params(1, 6.0, MwuConstants::default()).unwrap();
        assert!((pr.alpha - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!((pr.beta, pr.rho, pr.tau), (1.0, 1.0, 1.0));
        assert_eq!(pr.t, 6);
        assert!(mwu_params(4, 2.0, MwuConstants::default()).is_err());
    }

    #[test]
    fn oracle_zero_rhs() {
        let a = SparseMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let d = oracle_solve(&a, &SparseMatrix::zeros(2, 2), &SparseMatrix::identity(2), &[0.0], &[1.0, 1.0], 4.0, 2).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn oracle_symmetric_split() {
        let a = SparseMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let d = oracle_solve(&a, &SparseMatrix::zeros(2, 2), &SparseMatrix::identity(2), &[1.0], &[1.0, 1.0], 4.0, 2).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-14 && (d[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn potentials() {
        assert_eq!(phi_potential(&[1.0; 5], 3.0), 5.0);
        let a = SparseMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let z = SparseMatrix::zeros(2, 2);
        let id = SparseMatrix::identity(2);
        assert_eq!(psi_potential(&a, &z, &id, &[0.0], &[1.0, 1.0], 4.0, 2).unwrap(), 0.0);
        for p in [3.0, 4.0, 8.0] {
            let psi = psi_potential(&a, &z, &id, &[1.0], &[1.0, 1.0], p, 2).unwrap();
            assert!((psi - 3f64.powf(-(p - 2.0)) * 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_examples() {
        let m = SparseMatrix::identity(2);
        let s = scale_to_unit(&m, &[1.0, 2.0], 4.0, 1.0).unwrap();
        assert_eq!(s.m, m);
        assert_eq!(s.c, vec![1.0, 2.0]);
        let s = scale_to_unit(&m, &[1.0, 2.0], 2.0, 4.0).unwrap();
        assert_eq!(s.m, m);
        assert_eq!(s.c, vec![0.5, 1.0]);
        assert!(scale_to_unit(&m, &[1.0], 3.0, 0.0).is_err());
    }

    #[test]
    fn zero_rhs_runs_flow_steps() {
        let a = SparseMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let cons = Constraints::new(a);
        let out = residual_solver(
            &cons,
            &SparseMatrix::zeros(2, 2),
            &SparseMatrix::identity(2),
            &[0.0],
            4.0,
            1.0,
            MwuConstants::default(),
            &MwuOptions::default(),
        )
        .unwrap();
        assert_eq!(out.x, vec![0.0, 0.0]);
        let pr = mwu_params(2, 4.0, MwuConstants::default()).unwrap();
        assert_eq!(out.flow_steps, pr.t);
        assert_eq!(out.width_steps, 0);
    }

    #[test]
    fn two_coordinate_instance() {
        let a = SparseMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let cons = Constraints::new(a);
        let nu = 0.125;
        let opts = MwuOptions { witness: Some(vec![0.5, 0.5]), trace: true, timings: false };
        let out =
            residual_solver(&cons, &SparseMatrix::zeros(2, 2), &SparseMatrix::identity(2), &[1.0], 4.0, nu, MwuConstants::default(), &opts).unwrap();
        assert!(out.is_complete());
        assert!((out.x[0] + out.x[1] - 1.0).abs() < 1e-12);
        assert!(out.pow_energy <= 10.0 * 81.0 * nu);
        assert_eq!(out.violations.total(), 0);
        assert_eq!(out.trace.len(), out.oracle_calls);
    }
}
