//! Independent checks used by `validate`, `sparsify` and the acceptance
//! suite. Each check recomputes its reference quantity with dense linear
//! algebra or brute force rather than through the code it checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use pnorm::graph::{incidence_matrix, weighted_laplacian};
use pnorm::kkt::Constraints;
use pnorm::mwu::{mwu_params, residual_solver, InvariantViolations, MwuConstants, MwuOptions};
use pnorm::oracle::{newton_oracle, NewtonOptions};
use pnorm::sparse::{dot, norm2, norm_p_pow};
use pnorm::voltage::SparsifyResult;
use pnorm::{Graph, PNormProblem, Result, SparseMatrix, VoltageInstance};

/// `(f − f*) / max(|f*|, f0 − f*)`, with `f0` the objective at the start.
pub fn relative_gap(f: f64, f_star: f64, f0: f64) -> f64 {
    let scale = f_star.abs().max(f0 - f_star).max(f64::MIN_POSITIVE);
    (f - f_star) / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct MwuCheck {
    pub nu: f64,
    pub feasibility: f64,
    pub quad_energy: f64,
    pub pow_energy: f64,
    pub quad_ok: bool,
    pub pow_ok: bool,
    pub oracle_calls: usize,
    pub call_budget: usize,
    pub violations: InvariantViolations,
    pub complete: bool,
}

impl MwuCheck {
    pub fn guarantees_hold(&self) -> bool {
        self.feasibility <= 1e-7 && self.quad_ok && self.pow_ok && self.oracle_calls <= self.call_budget
    }

    pub fn passed(&self) -> bool {
        self.guarantees_hold() && self.violations.total() == 0
    }
}

/// Runs the MWU solver on `min ΔᵀMᵀMΔ + ‖NΔ‖ₚᵖ s.t. AΔ = c` with `ν` set to
/// the optimum found by the Newton oracle, whose minimizer is passed as the
/// witness for the per-step checks.
pub fn mwu_witness_check(a: &SparseMatrix, m: &SparseMatrix, n: &SparseMatrix, c: &[f64], p: f64, constants: MwuConstants) -> Result<MwuCheck> {
    let dim = a.cols();
    let prob = PNormProblem::new(a.clone(), c.to_vec(), m.clone(), n.clone(), vec![0.0; dim], p)?;
    let star = newton_oracle(&prob, &NewtonOptions::default())?;
    let nu = star.f;
    let cons = Constraints::new(a.clone());
    let opts = MwuOptions { witness: Some(star.x.clone()), trace: false, timings: false };
    let out = residual_solver(&cons, m, n, c, p, nu, constants, &opts)?;
    let resid: Vec<f64> = a.apply(&out.x).iter().zip(c).map(|(u, v)| u - v).collect();
    let params = mwu_params(n.rows().max(1), p, constants)?;
    Ok(MwuCheck {
        nu,
        feasibility: norm2(&resid) / norm2(c).max(f64::MIN_POSITIVE),
        quad_energy: out.quad_energy,
        pow_energy: out.pow_energy,
        quad_ok: out.quad_energy <= 10.0 * nu * (1.0 + 1e-9),
        pow_ok: out.pow_energy <= 10.0 * 3f64.powf(p) * nu * (1.0 + 1e-9),
        oracle_calls: out.oracle_calls,
        call_budget: 4 * (params.t + params.k_max),
        violations: out.violations,
        complete: out.is_complete(),
    })
}

/// Decision-type constraint system for a problem: its own rows plus the
/// kernel component `ĝ` of `b` as an extra row, with a right-hand side that
/// is reachable and nonzero. `None` when `b` lies in the row space of `A`.
pub fn decision_system(prob: &PNormProblem) -> Option<(SparseMatrix, Vec<f64>)> {
    let n = prob.dim();
    let a = prob.a.to_dense();
    let (pinv, ghat) = if prob.a.rows() == 0 {
        (DMatrix::zeros(n, 0), prob.b.clone())
    } else {
        let pinv = a.clone().pseudo_inverse(1e-12).ok()?;
        let b = nalgebra::DVector::from_column_slice(&prob.b);
        let proj = &pinv * (&a * &b);
        (pinv, (b - proj).iter().copied().collect())
    };
    let gn = norm2(&ghat);
    if gn <= 1e-9 * norm2(&prob.b).max(1e-300) {
        return None;
    }
    let ghat: Vec<f64> = ghat.iter().map(|v| v / gn).collect();
    let xc: Vec<f64> = (&pinv * nalgebra::DVector::from_column_slice(&prob.c)).iter().copied().collect();
    let mut c = prob.c.clone();
    c.push(dot(&ghat, &xc) + 1.0);
    Some((prob.a.push_row(&ghat), c))
}

/// Largest ratio `d_H(u, v) / d_G(u, v)` over all connected pairs, by
/// Floyd–Warshall on both graphs.
pub fn all_pairs_stretch(g: &Graph, lengths: &[f64], kept: &[usize]) -> f64 {
    let n = g.vertex_count();
    let fw = |edges: &mut dyn Iterator<Item = usize>| {
        let mut d = vec![f64::INFINITY; n * n];
        for v in 0..n {
            d[v * n + v] = 0.0;
        }
        for e in edges {
            let (u, v) = g.edges()[e];
            let l = lengths[e];
            if l < d[u * n + v] {
                d[u * n + v] = l;
                d[v * n + u] = l;
            }
        }
        for k in 0..n {
            for i in 0..n {
                let dik = d[i * n + k];
                if dik == f64::INFINITY {
                    continue;
                }
                for j in 0..n {
                    let c = dik + d[k * n + j];
                    if c < d[i * n + j] {
                        d[i * n + j] = c;
                    }
                }
            }
        }
        d
    };
    let dg = fw(&mut (0..g.edge_count()));
    let dh = fw(&mut kept.iter().copied());
    let mut worst: f64 = 1.0;
    for i in 0..n * n {
        if dg[i] > 0.0 && dg[i].is_finite() {
            worst = worst.max(dh[i] / dg[i]);
        }
    }
    worst
}

fn dense_laplacian(g: &Graph, w: &[f64]) -> DMatrix<f64> {
    weighted_laplacian(g, w).expect("valid weights").to_dense()
}

/// Extreme eigenvalues of `L_G^{+/2} L_H L_G^{+/2}` on the range of `L_G`.
/// `h_weights` is indexed by the original edges (zero when dropped).
pub fn generalized_extremes(g: &Graph, w: &[f64], h_weights: &[f64]) -> (f64, f64) {
    let lg = dense_laplacian(g, w);
    let lh = dense_laplacian(g, h_weights);
    let n = lg.nrows();
    let eig = lg.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-10 * lmax).collect();
    let mut wmat = DMatrix::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        wmat.set_column(j, &(eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt()));
    }
    let core = wmat.transpose() * lh * &wmat;
    let core = (&core + core.transpose()) * 0.5;
    let ev = core.symmetric_eigenvalues();
    (ev.min(), ev.max())
}

/// Extreme generalized eigenvalues for the spectral half of a voltage
/// sparsification.
pub fn voltage_spectral_extremes(inst: &VoltageInstance, res: &SparsifyResult) -> (f64, f64) {
    let mut u = vec![0.0; inst.graph.edge_count()];
    for (i, &e) in res.kept_edge_indices.iter().enumerate() {
        u[e] = res.u[i];
    }
    generalized_extremes(&inst.graph, &inst.w, &u)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SandwichStats {
    pub samples: usize,
    /// Samples with `‖T B_H x‖_p > ‖S B_G x‖_p` (beyond rounding).
    pub lower_violations: usize,
    /// Samples with `‖S B_G x‖_p > m^{1/p}(2k−1)‖T B_H x‖_p`.
    pub upper_violations: usize,
    /// Largest observed `‖S B_G x‖_p / ‖T B_H x‖_p`.
    pub worst_ratio: f64,
    pub upper_bound: f64,
}

/// Norm sandwich of the spanner half on random voltages.
pub fn voltage_sandwich<R: Rng + ?Sized>(inst: &VoltageInstance, res: &SparsifyResult, samples: usize, rng: &mut R) -> SandwichStats {
    let g = &inst.graph;
    let p = inst.p;
    let b = incidence_matrix(g);
    let m = g.edge_count();
    let k = res.stats.k as f64;
    let bound = (m as f64).powf(1.0 / p) * (2.0 * k - 1.0);
    let mut st = SandwichStats { samples, upper_bound: bound, ..Default::default() };
    for _ in 0..samples {
        let x: Vec<f64> = (0..g.vertex_count()).map(|_| rng.sample(StandardNormal)).collect();
        let bx = b.apply(&x);
        let full: Vec<f64> = bx.iter().zip(&inst.s).map(|(v, s)| v * s).collect();
        let kept: Vec<f64> = res.kept_edge_indices.iter().zip(&res.t).map(|(&e, t)| bx[e] * t).collect();
        let nf = norm_p_pow(&full, p).powf(1.0 / p);
        let nk = norm_p_pow(&kept, p).powf(1.0 / p);
        if nk > nf * (1.0 + 1e-12) {
            st.lower_violations += 1;
        }
        if nf > bound * nk * (1.0 + 1e-12) {
            st.upper_violations += 1;
        }
        if nk > 0.0 {
            st.worst_ratio = st.worst_ratio.max(nf / nk);
        } else if nf > 0.0 {
            st.worst_ratio = f64::INFINITY;
        }
    }
    st
}

#[derive(Debug, Clone, Serialize)]
pub struct NormRatios {
    pub directions: usize,
    /// Range of `‖C̃x‖₂ / ‖Cx‖₂` over the directions.
    pub l2: (f64, f64),
    /// Range of `‖D̃x‖_p / ‖Dx‖_p`.
    pub lp: (f64, f64),
}

impl NormRatios {
    pub fn within(&self, factor: f64) -> bool {
        [self.l2, self.lp].iter().all(|&(lo, hi)| lo >= 1.0 / factor && hi <= factor)
    }
}

/// Norm ratios of sampled against original matrices over `random` Gaussian
/// directions plus every coordinate direction.
pub fn sampled_norm_ratios<R: Rng + ?Sized>(
    c: &SparseMatrix,
    d: &SparseMatrix,
    cs: &SparseMatrix,
    ds: &SparseMatrix,
    p: f64,
    random: usize,
    rng: &mut R,
) -> NormRatios {
    let n = c.cols();
    let mut l2 = (f64::INFINITY, 0.0f64);
    let mut lp = (f64::INFINITY, 0.0f64);
    let mut count = 0;
    let mut visit = |x: &[f64]| {
        let a = norm2(&c.apply(x));
        if a > 0.0 {
            let r = norm2(&cs.apply(x)) / a;
            l2 = (l2.0.min(r), l2.1.max(r));
        }
        let b = norm_p_pow(&d.apply(x), p).powf(1.0 / p);
        if b > 0.0 {
            let r = norm_p_pow(&ds.apply(x), p).powf(1.0 / p) / b;
            lp = (lp.0.min(r), lp.1.max(r));
        }
        count += 1;
    };
    for _ in 0..random {
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        visit(&x);
    }
    for i in 0..n {
        let mut x = vec![0.0; n];
        x[i] = 1.0;
        visit(&x);
    }
    NormRatios { directions: count, l2, lp }
}
