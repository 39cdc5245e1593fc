//! Iterative-refinement outer loop: homotopy start, ν sweep, optional
//! reduction to a log m norm, sparsifier dispatch, decision-form solves
//! and best-step selection.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::incidence_matrix;
use crate::instance::{build_residual, descent_violation, refinement_step, PNormProblem, ResidualProblem, VoltageInstance};
use crate::kkt::{Constraints, QuadMatrix};
use crate::lewis::{sparsify_mixed_problem, DEFAULT_LEWIS_C};
use crate::linsolve::PsdFactor;
use crate::mwu::{residual_solver, InvariantViolations, MwuConstants, MwuOptions, MwuOutcome, MwuStatus, TraceRecord};
use crate::par::{map_range, Execution};
use crate::rng::{split, stream};
use crate::sparse::{dot, norm2, norm_p_pow, SparseMatrix};
use crate::voltage::{spanner_sparsify, voltage_scaling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsifierKind {
    #[default]
    Identity,
    Voltage,
    Lewis,
}

impl FromStr for SparsifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(SparsifierKind::Identity),
            "voltage" => Ok(SparsifierKind::Voltage),
            "lewis" => Ok(SparsifierKind::Lewis),
            other => Err(Error::InvalidInput(format!("unknown sparsifier {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveConfig {
    pub epsilon: f64,
    /// Approximation bound of the starting point; `None` uses the homotopy
    /// estimate.
    pub kappa0: Option<f64>,
    pub sparsifier: SparsifierKind,
    pub mwu: MwuConstants,
    pub max_outer: usize,
    pub seed: u64,
    /// Upper end of the decision window after a norm reduction.
    pub decision_b: f64,
    /// Adds the exact line-search point along each decision direction to
    /// the candidate set.
    pub line_search: bool,
    pub homotopy: bool,
    pub spectral_c: f64,
    pub lewis_c: f64,
    pub delta: f64,
    /// Stop as soon as the objective is within `epsilon` of this value.
    pub target_objective: Option<f64>,
    pub trace: bool,
    pub timings: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            epsilon: 1e-6,
            kappa0: None,
            sparsifier: SparsifierKind::Identity,
            mwu: MwuConstants::default(),
            max_outer: 500,
            seed: 0,
            decision_b: 40.0,
            line_search: true,
            homotopy: true,
            spectral_c: 1.0,
            lewis_c: DEFAULT_LEWIS_C,
            delta: 0.1,
            target_objective: None,
            trace: false,
            timings: false,
            exec: Execution::default(),
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidInput(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if let Some(k) = self.kappa0 {
            if !(k >= 1.0) {
                return Err(Error::InvalidInput(format!("kappa0 must be at least 1, got {k}")));
            }
        }
        if !(self.decision_b >= 1.0 / 33.0) {
            return Err(Error::InvalidInput("decision window needs a ≤ b".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.spectral_c > 0.0) || !(self.lewis_c > 0.0) {
            return Err(Error::InvalidInput("sparsifier constants out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionFactors {
    pub a: f64,
    pub b: f64,
    pub mu1: f64,
    pub kappa1: f64,
    pub mu2: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
}

impl Default for ReductionFactors {
    fn default() -> Self {
        ReductionFactors { a: 0.5, b: 1.0, mu1: 1.0, kappa1: 1.0, mu2: 1.0, kappa2: 1.0, kappa3: 1.0, kappa4: 1.0 }
    }
}

/// Halving schedule `f0, f0/2, …` down to `ε·f0/(κp)`; always holds `f0`.
pub fn nu_schedule(f0: f64, kappa: f64, p: f64, epsilon: f64) -> Vec<f64> {
    if !(f0 > 0.0) || !f0.is_finite() {
        return Vec::new();
    }
    let floor = epsilon * f0 / (kappa * p);
    let mut out = vec![f0];
    let mut nu = f0 / 2.0;
    while nu >= floor {
        out.push(nu);
        nu /= 2.0;
    }
    out
}

/// Residual data handed to the decision solver: `ΔᵀRΔ = ‖quad·Δ‖²` and the
/// power term `‖pow·Δ‖ₚᵖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseResidual {
    pub g: Vec<f64>,
    pub quad: SparseMatrix,
    pub pow: SparseMatrix,
    pub p: f64,
}

impl SparseResidual {
    pub fn from_residual(res: &ResidualProblem) -> Self {
        SparseResidual { g: res.g.clone(), quad: res.quad_factor(), pow: res.n.clone(), p: res.p }
    }

    pub fn value(&self, delta: &[f64]) -> f64 {
        let q = self.quad.apply(delta);
        dot(&self.g, delta) - dot(&q, &q) - norm_p_pow(&self.pow.apply(delta), self.p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub residual: SparseResidual,
    /// Multiplier applied to the power-term rows.
    pub pow_scale: f64,
    pub factors: ReductionFactors,
}

/// Target norm `max(2, ⌈ln m⌉)`.
pub fn reduced_norm(m: usize) -> f64 {
    (m.max(1) as f64).ln().ceil().max(2.0)
}

/// Rewrites the `p`-norm residual as a `p′ = ⌈ln m⌉` residual; `None` when
/// `p ≤ ln m`.
pub fn reduce_to_logm_norm(res: &SparseResidual, nu: f64, m: usize, b: f64) -> Result<Option<Reduction>> {
    let p = res.p;
    let mf = m.max(1) as f64;
    if !(p > mf.ln()) {
        return Ok(None);
    }
    if !(nu > 0.0) {
        return Err(Error::InvalidInput(format!("ν must be positive, got {nu}")));
    }
    let q = reduced_norm(m);
    let a = 1.0 / 33.0;
    let beta = 1.0;
    let gap = 1.0 / q - 1.0 / p;
    let e = p / (p - 1.0) * gap;
    let mu1 = a / (4.0 * b * beta) * mf.powf(-e - 1.0 / (q - 1.0));
    let kappa1 = 8.0 * b * beta * beta / (a * a) * mf.powf(e + 1.0 / (q - 1.0));
    let pow_scale = 2f64.powf(-1.0 / q) * (nu / mf).powf(gap);
    Ok(Some(Reduction {
        residual: SparseResidual { g: res.g.clone(), quad: res.quad.clone(), pow: res.pow.scale(pow_scale), p: q },
        pow_scale,
        factors: ReductionFactors { a, b, mu1, kappa1, ..Default::default() },
    }))
}

#[derive(Debug, Clone)]
pub struct DecisionOutcome {
    pub delta: Vec<f64>,
    pub kappa3: f64,
    pub kappa4: f64,
    pub mwu: MwuOutcome,
}

/// Solves `min ΔᵀR̃Δ + ‖ÑΔ‖ₚᵖ` over `AΔ = 0, g̃ᵀΔ = aν` with bound `bν`.
pub fn solve_decision_form(
    res: &SparseResidual,
    nu: f64,
    a: f64,
    b: f64,
    a_mat: &SparseMatrix,
    constants: MwuConstants,
    opts: &MwuOptions,
) -> Result<DecisionOutcome> {
    // on AΔ = 0 only the part of g̃ in ker A matters; projecting it keeps the
    // augmented row well separated from the rows of A
    let gp = project_kernel(a_mat, &res.g);
    if norm2(&gp) <= 1e-14 * norm2(&res.g) || norm2(&res.g) == 0.0 {
        return Err(Error::DegenerateGradient);
    }
    let cons = Constraints::new(a_mat.push_row(&gp));
    let mut c = vec![0.0; a_mat.rows()];
    c.push(a * nu);
    let bound = b * nu;
    let mwu = residual_solver(&cons, &res.quad, &res.pow, &c, res.p, bound, constants, opts)?;
    Ok(DecisionOutcome { kappa3: (mwu.quad_energy / bound).max(1.0), kappa4: (mwu.pow_energy / bound).max(1.0), delta: mwu.x.clone(), mwu })
}

/// Orthogonal projection of `v` onto `ker A`.
pub fn project_kernel(a: &SparseMatrix, v: &[f64]) -> Vec<f64> {
    if a.rows() == 0 {
        return v.to_vec();
    }
    let gram = a.matmul(&a.transpose()).expect("shapes agree").to_dense();
    let f = PsdFactor::new(&gram);
    let mut out = v.to_vec();
    for _ in 0..2 {
        let y = f.solve(&a.apply(&out));
        let aty = a.apply_transpose(&y);
        out.iter_mut().zip(aty).for_each(|(o, u)| *o -= u);
    }
    out
}

pub fn decision_scale_factor(f: &ReductionFactors, p: f64) -> f64 {
    f.a / (2.0 * f.b * f.kappa3 * f.kappa4.powf(1.0 / (p - 1.0))) * f.mu2 * f.mu1
}

pub fn decision_scale(delta: &[f64], f: &ReductionFactors, p: f64) -> Vec<f64> {
    let s = decision_scale_factor(f, p);
    delta.iter().map(|v| v * s).collect()
}

/// Index of the candidate minimizing `f(x − Δ/p)`, or `None` when no
/// candidate strictly beats `Δ = 0`; returns the winning objective too.
pub fn select_best_step(candidates: &[Vec<f64>], prob: &PNormProblem, x: &[f64]) -> (Option<usize>, f64) {
    let mut best = (None, prob.objective_unchecked(x));
    for (i, d) in candidates.iter().enumerate() {
        let f = prob.objective_unchecked(&refinement_step(x, d, prob.p));
        if f < best.1 {
            best = (Some(i), f);
        }
    }
    best
}

/// Minimizer over `θ ≥ 0` of `f(x − θ·dir)`.
pub fn line_search(prob: &PNormProblem, x: &[f64], dir: &[f64], guess: f64) -> f64 {
    let p = prob.p;
    let bd = dot(&prob.b, dir);
    let (u0, u1) = (prob.m.apply(x), prob.m.apply(dir));
    let (v0, v1) = (prob.n.apply(x), prob.n.apply(dir));
    let uu = dot(&u1, &u1);
    let u01 = dot(&u0, &u1);
    let deriv = |t: f64| {
        let mut d = -bd - 2.0 * (u01 - t * uu);
        let mut h = 2.0 * uu;
        for (a, b) in v0.iter().zip(&v1) {
            let z = a - t * b;
            let az = z.abs();
            d -= p * az.powf(p - 2.0) * z * b;
            h += p * (p - 1.0) * az.powf(p - 2.0) * b * b;
        }
        (d, h)
    };
    if !(deriv(0.0).0 < 0.0) {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, guess.max(1e-300));
    let mut bracketed = false;
    for _ in 0..2100 {
        if deriv(hi).0 >= 0.0 {
            bracketed = true;
            break;
        }
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            break;
        }
    }
    if !bracketed {
        return lo;
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (d, h) = deriv(t);
        if d == 0.0 {
            return t;
        }
        if d < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let newton = if h > 0.0 { t - d / h } else { f64::NAN };
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - t).abs() <= 1e-15 * t.abs() || hi - lo <= 1e-15 * hi {
            return next;
        }
        t = next;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparsifyInfo {
    pub quad_rows: usize,
    pub pow_rows: usize,
}

/// Replaces the residual by a sparsified one; returns `(residual, μ₂, κ₂)`.
pub fn dispatch_sparsify<R: rand::Rng + ?Sized>(
    prob: &PNormProblem,
    res: &ResidualProblem,
    input: &SparseResidual,
    pow_scale: f64,
    cfg: &SolveConfig,
    rng: &mut R,
) -> Result<(SparseResidual, f64, f64)> {
    match cfg.sparsifier {
        SparsifierKind::Identity => Ok((input.clone(), 1.0, 1.0)),
        SparsifierKind::Voltage => {
            let vs = prob.voltage.as_ref().ok_or_else(|| Error::InvalidInput("voltage sparsifier needs a voltage instance".into()))?;
            let p = res.p;
            let w: Vec<f64> = (0..vs.w.len()).map(|e| 2.0 / (p * p) * vs.w[e] + 2.0 * vs.s[e] * vs.s[e] * res.dn[e]).collect();
            let s: Vec<f64> = vs.s.iter().map(|v| v * pow_scale).collect();
            let nv = vs.graph.vertex_count();
            let inst = VoltageInstance::new(vs.graph.clone(), w, s, vec![0.0; nv], input.p)?;
            let out = spanner_sparsify(&inst, cfg.delta, cfg.spectral_c, rng)?;
            let bh = incidence_matrix(&out.graph);
            let quad = bh.scale_rows(&out.u.iter().map(|u| u.sqrt()).collect::<Vec<_>>());
            let pow = bh.scale_rows(&out.t);
            let (mu2, kappa2) = voltage_scaling(vs.graph.edge_count(), input.p, nv);
            Ok((SparseResidual { g: input.g.clone(), quad, pow, p: input.p }, mu2, kappa2))
        }
        SparsifierKind::Lewis => {
            let out = sparsify_mixed_problem(&input.quad, &input.pow, input.p, cfg.lewis_c, rng)?;
            Ok((SparseResidual { g: input.g.clone(), quad: out.m, pow: out.n, p: input.p }, 1.0, 2.0))
        }
    }
}

/// Certified bracket `[lower, upper]` on the residual optimum at `x`.
///
/// With `S = (2/p²)MᵀM + NᵀN` and `γ² = max_{AΔ=0} (gᵀΔ)²/ΔᵀSΔ`, the
/// optimum is at most `γ²/4 + (p−1)(γ/p)^{p/(p−1)}·m₁^{(p/2−1)/(p−1)}`.
/// The lower end is the exact residual maximum along the maximizing
/// direction of the quadratic model.
pub fn residual_bounds(prob: &PNormProblem, res: &ResidualProblem, cons: &Constraints) -> Result<(f64, f64)> {
    let p = prob.p;
    let n = prob.dim();
    let s = QuadMatrix::from_terms(n, &[(&prob.m, &vec![2.0 / (p * p); prob.m.rows()]), (&prob.n, &vec![1.0; prob.n.rows()])]);
    let neg: Vec<f64> = res.g.iter().map(|v| -v).collect();
    let d = cons.solve(&s, Some(&neg), &vec![0.0; prob.a.rows()])?;
    let gd = dot(&res.g, &d);
    let gamma2 = (2.0 * gd).max(0.0);
    let gamma = gamma2.sqrt();
    let m1 = prob.n.rows().max(1) as f64;
    let tail = if p > 2.0 { (p - 1.0) * (gamma / p).powf(p / (p - 1.0)) * m1.powf((p / 2.0 - 1.0) / (p - 1.0)) } else { 0.0 };
    let upper = gamma2 / 4.0 + tail;
    if !(gd > 0.0) {
        return Ok((0.0, upper));
    }
    let q = res.quad_value(&d);
    let w = norm_p_pow(&res.n.apply(&d), p);
    let phi = |t: f64| t * gd - t * t * q - t.powf(p) * w;
    let dphi = |t: f64| gd - 2.0 * q * t - p * w * t.powf(p - 1.0);
    let mut hi = 1.0;
    while dphi(hi) > 0.0 && hi < 1e300 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dphi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((phi(lo).max(0.0).min(upper), upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Scaled,
    LineSearch,
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateRecord {
    pub nu: f64,
    pub skipped: bool,
    pub objective_scaled: Option<f64>,
    pub objective_line_search: Option<f64>,
    pub factors: Option<ReductionFactors>,
    pub mwu_status: Option<MwuStatus>,
    pub oracle_calls: usize,
    pub quad_rows: usize,
    pub pow_rows: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChosenStep {
    pub nu_index: usize,
    pub kind: CandidateKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct OuterRecord {
    pub iteration: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    pub nu_top: f64,
    pub nu_low: f64,
    pub candidates: Vec<CandidateRecord>,
    pub chosen: Option<ChosenStep>,
    pub residual_value: f64,
    pub descent_violation: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Closed-form solution (quadratic objective).
    Exact,
    /// Certified relative gap at most `epsilon`.
    Certified,
    /// Residual bound fell below the sweep floor.
    FloorReached,
    TargetReached,
    /// No candidate improved the objective, or the step vanished.
    Stagnated,
    BudgetExhausted,
}

/// Wall-clock nanoseconds per phase, summed over the run. All zero unless
/// timings are requested. Candidate phases are summed across threads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ModuleTimings {
    pub homotopy_ns: u64,
    pub residual_ns: u64,
    pub sparsify_ns: u64,
    pub mwu_ns: u64,
    pub selection_ns: u64,
}

impl ModuleTimings {
    pub fn add(&mut self, o: &ModuleTimings) {
        self.homotopy_ns += o.homotopy_ns;
        self.residual_ns += o.residual_ns;
        self.sparsify_ns += o.sparsify_ns;
        self.mwu_ns += o.mwu_ns;
        self.selection_ns += o.selection_ns;
    }
}

fn lap(on: bool, t: &mut Instant) -> u64 {
    if !on {
        return 0;
    }
    let now = Instant::now();
    let d = now.duration_since(*t).as_nanos() as u64;
    *t = now;
    d
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub p: f64,
    pub timings: ModuleTimings,
    pub termination: Termination,
    pub outer_iterations: usize,
    pub oracle_calls: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub descent_violations: usize,
    pub max_descent_violation: f64,
    pub certified_lower_bound: f64,
    pub budget: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub p: f64,
    pub epsilon: f64,
    pub m: usize,
    pub kappa0: f64,
    pub homotopy: Vec<StageReport>,
    pub main: StageReport,
    pub total_oracle_calls: usize,
    pub nu_schedule_len: usize,
    pub iteration_bound: f64,
    pub mwu_violations: InvariantViolations,
    pub timings: ModuleTimings,
    pub outer: Vec<OuterRecord>,
    #[serde(skip)]
    pub mwu_trace: Vec<TraceRecord>,
    pub wallclock_ns: u64,
}

impl SolveReport {
    pub fn descent_violations(&self) -> usize {
        self.main.descent_violations + self.homotopy.iter().map(|s| s.descent_violations).sum::<usize>()
    }

    pub fn final_objective(&self) -> f64 {
        self.main.final_objective
    }
}

/// Exact minimizer of the `p = 2` analogue `bᵀx + ‖Mx‖² + ‖Nx‖²`.
pub fn quadratic_analogue(prob: &PNormProblem) -> Result<Vec<f64>> {
    let n = prob.dim();
    let cons = Constraints::new(prob.a.clone());
    let q = QuadMatrix::from_terms(n, &[(&prob.m, &vec![1.0; prob.m.rows()]), (&prob.n, &vec![1.0; prob.n.rows()])]);
    cons.solve(&q, Some(&prob.b), &prob.c)
}

/// Row count used in the log terms of the schedule and reduction.
pub fn problem_size(prob: &PNormProblem) -> usize {
    prob.n.rows().max(prob.m.rows()).max(1)
}

struct StageOutput {
    x: Vec<f64>,
    report: StageReport,
    outer: Vec<OuterRecord>,
    violations: InvariantViolations,
    trace: Vec<TraceRecord>,
}

struct CandidateSet {
    record: CandidateRecord,
    timings: ModuleTimings,
    steps: Vec<(CandidateKind, Vec<f64>)>,
    violations: InvariantViolations,
    trace: Vec<TraceRecord>,
}

fn candidate(
    prob: &PNormProblem,
    res: &ResidualProblem,
    base: &SparseResidual,
    x: &[f64],
    nu: f64,
    cfg: &SolveConfig,
    seed: u64,
) -> Result<CandidateSet> {
    let p = prob.p;
    let m = prob.n.rows();
    let mut timings = ModuleTimings::default();
    let mut clock = Instant::now();
    let red = reduce_to_logm_norm(base, nu, m, cfg.decision_b)?;
    let (input, pow_scale, mut factors) = match &red {
        Some(r) => (&r.residual, r.pow_scale, r.factors),
        None => (base, 1.0, ReductionFactors::default()),
    };
    let mut rng = stream(seed, 0);
    let (sp, mu2, kappa2) = dispatch_sparsify(prob, res, input, pow_scale, cfg, &mut rng)?;
    factors.mu2 = mu2;
    factors.kappa2 = kappa2;
    timings.sparsify_ns = lap(cfg.timings, &mut clock);
    let mut record = CandidateRecord {
        nu,
        skipped: false,
        objective_scaled: None,
        objective_line_search: None,
        factors: None,
        mwu_status: None,
        oracle_calls: 0,
        quad_rows: sp.quad.rows(),
        pow_rows: sp.pow.rows(),
    };
    let opts = MwuOptions { witness: None, trace: cfg.trace, timings: cfg.timings };
    let dec = match solve_decision_form(&sp, nu, factors.a, factors.b, &prob.a, cfg.mwu, &opts) {
        Ok(d) => d,
        Err(Error::DegenerateGradient) => {
            record.skipped = true;
            timings.mwu_ns = lap(cfg.timings, &mut clock);
            return Ok(CandidateSet { record, timings, steps: vec![], violations: InvariantViolations::default(), trace: vec![] });
        }
        Err(e) => return Err(e),
    };
    timings.mwu_ns = lap(cfg.timings, &mut clock);
    factors.kappa3 = dec.kappa3;
    factors.kappa4 = dec.kappa4;
    let scaled = decision_scale(&dec.delta, &factors, sp.p);
    record.objective_scaled = Some(prob.objective_unchecked(&refinement_step(x, &scaled, p)));
    let mut steps = vec![(CandidateKind::Scaled, scaled)];
    if cfg.line_search {
        let theta = line_search(prob, x, &dec.delta, decision_scale_factor(&factors, sp.p) / p);
        let d: Vec<f64> = dec.delta.iter().map(|v| v * p * theta).collect();
        record.objective_line_search = Some(prob.objective_unchecked(&refinement_step(x, &d, p)));
        steps.push((CandidateKind::LineSearch, d));
    }
    record.factors = Some(factors);
    record.mwu_status = Some(dec.mwu.status);
    record.oracle_calls = dec.mwu.oracle_calls;
    timings.selection_ns = lap(cfg.timings, &mut clock);
    Ok(CandidateSet { record, timings, steps, violations: dec.mwu.violations, trace: dec.mwu.trace })
}

fn outer_budget(prob: &PNormProblem, cfg: &SolveConfig, kappa0: f64) -> usize {
    let p = prob.p;
    let m = problem_size(prob);
    let kappa1 = reduce_to_logm_norm(
        &SparseResidual { g: vec![1.0], quad: SparseMatrix::zeros(0, 1), pow: SparseMatrix::zeros(0, 1), p },
        1.0,
        prob.n.rows(),
        cfg.decision_b,
    )
    .ok()
    .flatten()
    .map_or(1.0, |r| r.factors.kappa1);
    let kappa2 = match cfg.sparsifier {
        SparsifierKind::Identity => 1.0,
        SparsifierKind::Voltage => prob.voltage.as_ref().map_or(1.0, |v| voltage_scaling(v.graph.edge_count(), p, v.graph.vertex_count()).1),
        SparsifierKind::Lewis => 2.0,
    };
    let bound = 4.0 * p * kappa2 * kappa1 * (kappa0 * m as f64 / cfg.epsilon).ln().ceil();
    if bound >= cfg.max_outer as f64 {
        cfg.max_outer
    } else {
        bound as usize
    }
}

fn refine(prob: &PNormProblem, x0: Vec<f64>, cfg: &SolveConfig, kappa0: f64, stage: u64) -> Result<StageOutput> {
    let p = prob.p;
    let cons = Constraints::new(prob.a.clone());
    let budget = outer_budget(prob, cfg, kappa0);
    let f0 = prob.objective_value(&x0)?;
    let mut x = x0;
    let mut f = f0;
    let mut lower = f64::NEG_INFINITY;
    let mut floor: Option<f64> = None;
    let mut outer = Vec::new();
    let mut violations = InvariantViolations::default();
    let mut trace = Vec::new();
    let (mut calls, mut dviol, mut max_dviol) = (0usize, 0usize, f64::NEG_INFINITY);
    let mut termination = Termination::BudgetExhausted;
    let stage_seed = split(cfg.seed, stage);
    let mut timings = ModuleTimings::default();
    let mut clock = Instant::now();

    for t in 0..=budget {
        lap(cfg.timings, &mut clock);
        let res = build_residual(prob, &x)?;
        let (nu_low, nu_top) = residual_bounds(prob, &res, &cons)?;
        timings.residual_ns += lap(cfg.timings, &mut clock);
        lower = lower.max(f - 16.0 * p * nu_top);
        if let Some(target) = cfg.target_objective {
            if f - target <= cfg.epsilon * target.abs().max(f0 - target).max(f64::MIN_POSITIVE) {
                termination = Termination::TargetReached;
                break;
            }
        }
        if !(nu_top > 0.0) || f - lower <= cfg.epsilon * (f0 - f) {
            termination = Termination::Certified;
            break;
        }
        let fl = *floor.get_or_insert(cfg.epsilon * nu_top / (kappa0 * p));
        if nu_top < fl {
            termination = Termination::FloorReached;
            break;
        }
        if t == budget {
            break;
        }
        // a ν below the certified lower bound can never bracket the optimum
        let schedule: Vec<f64> = nu_schedule(nu_top, kappa0, p, cfg.epsilon).into_iter().filter(|&v| v >= fl.max(nu_low)).collect();
        let base = SparseResidual::from_residual(&res);
        let iter_seed = split(stage_seed, t as u64);
        let sets: Vec<Result<CandidateSet>> =
            map_range(schedule.len(), cfg.exec, |j| candidate(prob, &res, &base, &x, schedule[j], cfg, split(iter_seed, j as u64)));
        let mut records = Vec::with_capacity(sets.len());
        let mut flat: Vec<(usize, CandidateKind, Vec<f64>)> = Vec::new();
        for (j, s) in sets.into_iter().enumerate() {
            let s = s?;
            calls += s.record.oracle_calls;
            timings.add(&s.timings);
            violations.add(&s.violations);
            if cfg.trace {
                trace.extend(s.trace);
            }
            flat.extend(s.steps.into_iter().map(|(k, d)| (j, k, d)));
            records.push(s.record);
        }
        let deltas: Vec<Vec<f64>> = flat.iter().map(|(_, _, d)| d.clone()).collect();
        lap(cfg.timings, &mut clock);
        let (best, _) = select_best_step(&deltas, prob, &x);
        let Some(i) = best else {
            outer.push(OuterRecord {
                iteration: t,
                objective_before: f,
                objective_after: f,
                nu_top,
                nu_low,
                candidates: records,
                chosen: None,
                residual_value: 0.0,
                descent_violation: 0.0,
                step_norm: 0.0,
            });
            termination = Termination::Stagnated;
            break;
        };
        let (j, kind, delta) = &flat[i];
        let rv = res.residual_value(delta)?;
        let dv = descent_violation(prob, &x, delta, rv);
        if dv > 1e-9 * (1.0 + f.abs()) {
            dviol += 1;
        }
        max_dviol = max_dviol.max(dv / (1.0 + f.abs()));
        let step_norm = norm2(delta) / p;
        let mut x_new = refinement_step(&x, delta, p);
        cons.restore(&mut x_new, &prob.c);
        let f_new = prob.objective_unchecked(&x_new);
        // rounding near the optimum can lift the objective by an ulp; keep the old point
        let stalled = f_new > f;
        let f_new = if stalled { f } else { f_new };
        if !stalled {
            x = x_new;
        }
        outer.push(OuterRecord {
            iteration: t,
            objective_before: f,
            objective_after: f_new,
            nu_top,
            nu_low,
            candidates: records,
            chosen: Some(ChosenStep { nu_index: *j, kind: *kind }),
            residual_value: rv,
            descent_violation: dv,
            step_norm,
        });
        f = f_new;
        timings.selection_ns += lap(cfg.timings, &mut clock);
        if stalled || step_norm <= 1e-14 * (1.0 + norm2(&x)) {
            termination = Termination::Stagnated;
            break;
        }
    }
    Ok(StageOutput {
        report: StageReport {
            p,
            timings,
            termination,
            outer_iterations: outer.len(),
            oracle_calls: calls,
            initial_objective: f0,
            final_objective: f,
            descent_violations: dviol,
            max_descent_violation: max_dviol,
            certified_lower_bound: lower,
            budget,
        },
        x,
        outer,
        violations,
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct HomotopyResult {
    pub x0: Vec<f64>,
    pub kappa: f64,
    pub stages: Vec<StageReport>,
    violations: InvariantViolations,
    trace: Vec<TraceRecord>,
}

/// Exact `p = 2` solution, then constant-accuracy refinement at
/// `p_k = 4, 8, …` below `p`.
pub fn homotopy_init(prob: &PNormProblem, cfg: &SolveConfig) -> Result<HomotopyResult> {
    let mut x = quadratic_analogue(prob)?;
    let kappa = if prob.p == 2.0 { 1.0 } else { problem_size(prob) as f64 };
    let mut out = HomotopyResult { x0: Vec::new(), kappa, stages: Vec::new(), violations: InvariantViolations::default(), trace: Vec::new() };
    if cfg.homotopy {
        let stage_cfg = SolveConfig { epsilon: 0.1, max_outer: 50, target_objective: None, ..cfg.clone() };
        let mut pk = 4.0;
        while pk < prob.p {
            let sub = prob.with_p(pk)?;
            let st = refine(&sub, x, &stage_cfg, kappa, out.stages.len() as u64 + 1)?;
            x = st.x;
            out.violations.add(&st.violations);
            out.trace.extend(st.trace);
            out.stages.push(st.report);
            pk *= 2.0;
        }
    }
    out.x0 = x;
    Ok(out)
}

/// Solves `min bᵀx + ‖Mx‖² + ‖Nx‖ₚᵖ s.t. Ax = c` to relative accuracy
/// `cfg.epsilon`.
pub fn solve_pnorm(prob: &PNormProblem, cfg: &SolveConfig) -> Result<(Vec<f64>, SolveReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let p = prob.p;
    let m = problem_size(prob);
    let exact = p == 2.0 || prob.n.nnz() == 0;
    let mut clock = Instant::now();
    let init = if exact {
        HomotopyResult {
            x0: quadratic_analogue(prob)?,
            kappa: 1.0,
            stages: Vec::new(),
            violations: InvariantViolations::default(),
            trace: Vec::new(),
        }
    } else {
        homotopy_init(prob, cfg)?
    };
    let kappa0 = cfg.kappa0.unwrap_or(init.kappa);
    let mut timings = ModuleTimings { homotopy_ns: lap(cfg.timings, &mut clock), ..Default::default() };
    let main = if exact {
        let f = prob.objective_value(&init.x0)?;
        StageOutput {
            report: StageReport {
                p,
                timings: ModuleTimings::default(),
                termination: Termination::Exact,
                outer_iterations: 0,
                oracle_calls: 0,
                initial_objective: f,
                final_objective: f,
                descent_violations: 0,
                max_descent_violation: f64::NEG_INFINITY,
                certified_lower_bound: f,
                budget: 0,
            },
            x: init.x0.clone(),
            outer: Vec::new(),
            violations: InvariantViolations::default(),
            trace: Vec::new(),
        }
    } else {
        refine(prob, init.x0.clone(), cfg, kappa0, 0)?
    };
    let mut mwu_violations = init.violations;
    mwu_violations.add(&main.violations);
    let mut mwu_trace = init.trace;
    mwu_trace.extend(main.trace);
    timings.add(&main.report.timings);
    let sched = nu_schedule(1.0, kappa0, p, cfg.epsilon).len();
    let report = SolveReport {
        p,
        epsilon: cfg.epsilon,
        m,
        kappa0,
        total_oracle_calls: main.report.oracle_calls + init.stages.iter().map(|s| s.oracle_calls).sum::<usize>(),
        nu_schedule_len: sched,
        iteration_bound: 8.0 * p * (kappa0 * m as f64 / cfg.epsilon).ln() * sched as f64,
        homotopy: init.stages,
        main: main.report,
        mwu_violations,
        timings,
        outer: main.outer,
        mwu_trace,
        wallclock_ns: if cfg.timings { start.elapsed().as_nanos() as u64 } else { 0 },
    };
    Ok((main.x, report))
}
