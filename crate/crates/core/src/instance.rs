//! Problem formulations: general matrices, flows and voltages, plus the
//! residual problem used by iterative refinement.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::graph::{incidence_matrix, Graph};
use crate::sparse::{dot, norm2, norm_p_pow, SparseMatrix, TripletMatrix};

pub const FEASIBILITY_TOL: f64 = 1e-8;

/// `Σ rᵢxᵢ² + sᵢ|xᵢ|ᵖ`.
pub fn smoothed_power(r: &[f64], s: &[f64], x: &[f64], p: f64) -> Result<f64> {
    check_len("r", x.len(), r.len())?;
    check_len("s", x.len(), s.len())?;
    if r.iter().chain(s).any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("negative weight in smoothed power".into()));
    }
    Ok(x.iter().zip(r).zip(s).map(|((&xi, &ri), &si)| ri * xi * xi + si * xi.abs().powf(p)).sum())
}

/// Graph structure of a voltage problem, kept so the voltage sparsifier can
/// act on the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageStructure {
    pub graph: Graph,
    pub w: Vec<f64>,
    pub s: Vec<f64>,
}

/// `min bᵀx + ‖Mx‖₂² + ‖Nx‖ₚᵖ  s.t.  Ax = c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PNormProblem {
    pub a: SparseMatrix,
    pub c: Vec<f64>,
    pub m: SparseMatrix,
    pub n: SparseMatrix,
    pub b: Vec<f64>,
    pub p: f64,
    pub voltage: Option<VoltageStructure>,
}

impl PNormProblem {
    pub fn new(a: SparseMatrix, c: Vec<f64>, m: SparseMatrix, n: SparseMatrix, b: Vec<f64>, p: f64) -> Result<Self> {
        if !(p >= 2.0) || !p.is_finite() {
            return Err(Error::UnsupportedP(p));
        }
        let dim = b.len();
        check_len("columns of A", dim, a.cols())?;
        check_len("columns of M", dim, m.cols())?;
        check_len("columns of N", dim, n.cols())?;
        check_len("length of c", a.rows(), c.len())?;
        check_finite("b", &b)?;
        check_finite("c", &c)?;
        Ok(PNormProblem { a, c, m, n, b, p, voltage: None })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Whether `d ≤ n ≤ m1` and `n ≤ m2` hold; trees and small voltage
    /// problems legitimately violate it, so this is informational.
    pub fn satisfies_dimension_convention(&self) -> bool {
        let n = self.dim();
        self.a.rows() <= n && n <= self.n.rows() && n <= self.m.rows()
    }

    pub fn objective_value(&self, x: &[f64]) -> Result<f64> {
        check_len("x", self.dim(), x.len())?;
        Ok(self.objective_unchecked(x))
    }

    pub(crate) fn objective_unchecked(&self, x: &[f64]) -> f64 {
        let mx = self.m.apply(x);
        let nx = self.n.apply(x);
        dot(&self.b, x) + dot(&mx, &mx) + norm_p_pow(&nx, self.p)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mx = self.m.apply(x);
        let nx = self.n.apply(x);
        let p = self.p;
        let dn: Vec<f64> = nx.iter().map(|v| p * v.abs().powf(p - 2.0) * v).collect();
        let a = self.m.apply_transpose(&mx);
        let c = self.n.apply_transpose(&dn);
        self.b.iter().zip(a).zip(c).map(|((b, u), v)| b + 2.0 * u + v).collect()
    }

    pub fn feasibility_residual(&self, x: &[f64]) -> f64 {
        let ax = self.a.apply(x);
        norm2(&ax.iter().zip(&self.c).map(|(u, v)| u - v).collect::<Vec<_>>())
    }

    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        self.feasibility_residual(x) <= tol * (1.0 + norm2(&self.c) + self.a.frobenius_norm() * norm2(x))
    }

    /// The same problem with a different exponent.
    pub fn with_p(&self, p: f64) -> Result<PNormProblem> {
        let mut out = self.clone();
        if !(p >= 2.0) {
            return Err(Error::UnsupportedP(p));
        }
        out.p = p;
        Ok(out)
    }

    /// Dense well-posedness checks: `c ∈ range(A)` and `b ⊥ ker A ∩ ker M ∩ ker N`.
    pub fn check_well_posed(&self, tol: f64) -> Result<()> {
        let n = self.dim();
        let gram = self.a.gram() + self.m.gram() + self.n.gram();
        let eig = gram.symmetric_eigen();
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let bn = norm2(&self.b).max(1e-300);
        for k in 0..n {
            if eig.eigenvalues[k] <= 1e-10 * lmax {
                let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                if dot(&v, &self.b).abs() > tol * bn.max(1.0) {
                    return Err(Error::InvalidInput("b has a component in the joint kernel; objective unbounded".into()));
                }
            }
        }
        if self.a.rows() > 0 {
            let aat = self.a.matmul(&self.a.transpose())?.to_dense();
            let eig = aat.symmetric_eigen();
            let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            let cn = norm2(&self.c).max(1.0);
            for k in 0..self.a.rows() {
                if eig.eigenvalues[k] <= 1e-10 * lmax {
                    let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                    if dot(&v, &self.c).abs() > tol * cn {
                        return Err(Error::Infeasible("c is not in the range of A".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemJson {
    #[serde(rename = "A")]
    pub a: TripletMatrix,
    pub c: Vec<f64>,
    #[serde(rename = "M")]
    pub m: TripletMatrix,
    #[serde(rename = "N")]
    pub n: TripletMatrix,
    pub b: Vec<f64>,
    pub p: f64,
}

impl TryFrom<ProblemJson> for PNormProblem {
    type Error = Error;
    fn try_from(j: ProblemJson) -> Result<Self> {
        PNormProblem::new(j.a.try_into()?, j.c, j.m.try_into()?, j.n.try_into()?, j.b, j.p)
    }
}

impl From<&PNormProblem> for ProblemJson {
    fn from(p: &PNormProblem) -> Self {
        ProblemJson { a: (&p.a).into(), c: p.c.clone(), m: (&p.m).into(), n: (&p.n).into(), b: p.b.clone(), p: p.p }
    }
}

/// `max gᵀΔ − ΔᵀRΔ − ‖NΔ‖ₚᵖ` over `AΔ = 0`, with
/// `R = (2/p²)MᵀM + 2Nᵀ diag(dn) N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualProblem {
    pub g: Vec<f64>,
    pub m: SparseMatrix,
    pub n: SparseMatrix,
    pub dn: Vec<f64>,
    pub p: f64,
}

impl ResidualProblem {
    /// Stacked factor `F` with `ΔᵀRΔ = ‖FΔ‖₂²`.
    pub fn quad_factor(&self) -> SparseMatrix {
        let a = self.m.scale(2f64.sqrt() / self.p);
        let w: Vec<f64> = self.dn.iter().map(|d| (2.0 * d).sqrt()).collect();
        let b = self.n.scale_rows(&w);
        SparseMatrix::vstack(&[&a, &b]).unwrap()
    }

    pub fn quad_value(&self, delta: &[f64]) -> f64 {
        let md = self.m.apply(delta);
        let nd = self.n.apply(delta);
        let wn: f64 = nd.iter().zip(&self.dn).map(|(v, d)| d * v * v).sum();
        2.0 / (self.p * self.p) * dot(&md, &md) + 2.0 * wn
    }

    pub fn residual_value(&self, delta: &[f64]) -> Result<f64> {
        check_len("Δ", self.g.len(), delta.len())?;
        let nd = self.n.apply(delta);
        Ok(dot(&self.g, delta) - self.quad_value(delta) - norm_p_pow(&nd, self.p))
    }
}

pub fn build_residual(prob: &PNormProblem, x: &[f64]) -> Result<ResidualProblem> {
    check_len("x", prob.dim(), x.len())?;
    if !prob.is_feasible(x, FEASIBILITY_TOL) {
        return Err(Error::Infeasible(format!("residual requested at an infeasible point (‖Ax − c‖ = {:.3e})", prob.feasibility_residual(x))));
    }
    let p = prob.p;
    let mx = prob.m.apply(x);
    let nx = prob.n.apply(x);
    let dn: Vec<f64> = nx.iter().map(|v| if p == 2.0 { 1.0 } else { v.abs().powf(p - 2.0) }).collect();
    let mtmx = prob.m.apply_transpose(&mx);
    let pw: Vec<f64> = nx.iter().zip(&dn).map(|(v, d)| d * v).collect();
    let ntp = prob.n.apply_transpose(&pw);
    let g = (0..prob.dim()).map(|i| prob.b[i] / p + 2.0 / p * mtmx[i] + ntp[i]).collect();
    Ok(ResidualProblem { g, m: prob.m.clone(), n: prob.n.clone(), dn, p })
}

pub fn refinement_step(x: &[f64], delta: &[f64], p: f64) -> Vec<f64> {
    x.iter().zip(delta).map(|(a, d)| a - d / p).collect()
}

/// Checks `f(x − Δ/p) ≤ f(x) − res(Δ) + slack·(1 + |f(x)|)`; returns the
/// violation amount (non-positive when the inequality holds).
pub fn descent_violation(prob: &PNormProblem, x: &[f64], delta: &[f64], res: f64) -> f64 {
    let fx = prob.objective_unchecked(x);
    let fy = prob.objective_unchecked(&refinement_step(x, delta, prob.p));
    fy - (fx - res)
}

/// Smoothed p-norm flow instance `(G, g, r, s)`; its objective is maximized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowInstance {
    pub graph: Graph,
    pub g: Vec<f64>,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub p: f64,
}

impl FlowInstance {
    pub fn new(graph: Graph, g: Vec<f64>, r: Vec<f64>, s: Vec<f64>, p: f64) -> Result<Self> {
        let m = graph.edge_count();
        check_len("g", m, g.len())?;
        check_len("r", m, r.len())?;
        check_len("s", m, s.len())?;
        check_finite("g", &g)?;
        check_finite("r", &r)?;
        check_finite("s", &s)?;
        if r.iter().chain(&s).any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("r and s must be non-negative".into()));
        }
        if !(p >= 2.0) {
            return Err(Error::UnsupportedP(p));
        }
        Ok(FlowInstance { graph, g, r, s, p })
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }

    /// `obj(f) = gᵀf − h_p(r, s, f)`.
    pub fn objective(&self, f: &[f64]) -> Result<f64> {
        check_len("f", self.edge_count(), f.len())?;
        Ok(dot(&self.g, f) - smoothed_power(&self.r, &self.s, f, self.p)?)
    }

    /// Whether every nonzero r, s lies in `[2^{−log²n}, 2^{log²n}]`.
    pub fn is_quasipolynomially_bounded(&self) -> bool {
        let l = (self.graph.vertex_count().max(2) as f64).log2().powi(2);
        let (lo, hi) = (2f64.powf(-l), 2f64.powf(l));
        self.r.iter().chain(&self.s).all(|&v| v == 0.0 || (v >= lo && v <= hi))
    }
}

pub fn flow_objective(inst: &FlowInstance, f: &[f64]) -> Result<f64> {
    inst.objective(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageInstance {
    pub graph: Graph,
    pub w: Vec<f64>,
    pub s: Vec<f64>,
    pub d: Vec<f64>,
    pub p: f64,
}

impl VoltageInstance {
    pub fn new(graph: Graph, w: Vec<f64>, s: Vec<f64>, d: Vec<f64>, p: f64) -> Result<Self> {
        let m = graph.edge_count();
        check_len("w", m, w.len())?;
        check_len("s", m, s.len())?;
        check_len("d", graph.vertex_count(), d.len())?;
        check_finite("w", &w)?;
        check_finite("s", &s)?;
        check_finite("d", &d)?;
        if w.iter().chain(&s).any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("w and s must be non-negative".into()));
        }
        if !(p >= 2.0) {
            return Err(Error::UnsupportedP(p));
        }
        Ok(VoltageInstance { graph, w, s, d, p })
    }

    /// `dᵀv + ‖W^{1/2}Bv‖₂² + ‖U B v‖ₚᵖ`.
    pub fn objective(&self, v: &[f64]) -> Result<f64> {
        check_len("v", self.graph.vertex_count(), v.len())?;
        let bv = self.graph.differences(v);
        let q: f64 = bv.iter().zip(&self.w).map(|(x, w)| w * x * x).sum();
        let pp: f64 = bv.iter().zip(&self.s).map(|(x, s)| (s * x).abs().powf(self.p)).sum();
        Ok(dot(&self.d, v) + q + pp)
    }
}

fn check_balanced(g: &Graph, d: &[f64]) -> Result<()> {
    let (label, count) = g.components();
    let mut sum = vec![0.0; count];
    let mut mag = vec![0.0; count];
    for (v, &c) in label.iter().enumerate() {
        sum[c] += d[v];
        mag[c] += d[v].abs();
    }
    for c in 0..count {
        if sum[c].abs() > FEASIBILITY_TOL * (1.0 + mag[c]) {
            return Err(Error::Infeasible(format!("demands do not sum to zero on component {c}")));
        }
    }
    Ok(())
}

/// Flow problem `min gᵀf + ‖R^{1/2}f‖² + ‖Sf‖ₚᵖ s.t. Bᵀf = d` with
/// `S = diag(s^{1/p})`. Its objective at `f` equals `−obj(−f)`.
pub fn flow_problem(inst: &FlowInstance, demands: &[f64]) -> Result<PNormProblem> {
    check_len("demands", inst.graph.vertex_count(), demands.len())?;
    check_balanced(&inst.graph, demands)?;
    let bt = incidence_matrix(&inst.graph).transpose();
    let m = SparseMatrix::diag(&inst.r.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
    let n = SparseMatrix::diag(&inst.s.iter().map(|v| v.powf(1.0 / inst.p)).collect::<Vec<_>>());
    PNormProblem::new(bt, demands.to_vec(), m, n, inst.g.clone(), inst.p)
}

pub fn voltage_problem(inst: &VoltageInstance) -> Result<PNormProblem> {
    check_balanced(&inst.graph, &inst.d)?;
    let b = incidence_matrix(&inst.graph);
    let m = b.scale_rows(&inst.w.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
    let n = b.scale_rows(&inst.s);
    let nv = inst.graph.vertex_count();
    let mut prob = PNormProblem::new(SparseMatrix::zeros(0, nv), vec![], m, n, inst.d.clone(), inst.p)?;
    prob.voltage = Some(VoltageStructure { graph: inst.graph.clone(), w: inst.w.clone(), s: inst.s.clone() });
    Ok(prob)
}

/// Dense matrix of the residual quadratic form, for tests and oracles.
pub fn residual_quad_dense(res: &ResidualProblem) -> DMatrix<f64> {
    res.quad_factor().gram()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_problem(p: f64) -> PNormProblem {
        let a = SparseMatrix::from_triplets(1, 3, &[(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0)]).unwrap();
        let m = SparseMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 2.0), (2, 0, 0.5), (2, 2, 1.0)]).unwrap();
        let n = SparseMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (0, 1, -1.0), (1, 1, 1.0), (2, 2, 1.5)]).unwrap();
        PNormProblem::new(a, vec![1.0], m, n, vec![0.3, -0.2, 0.1], p).unwrap()
    }

    #[test]
    fn smoothed_power_examples() {
        assert_eq!(smoothed_power(&[1.0], &[1.0], &[1.0], 4.0).unwrap(), 2.0);
        assert_eq!(smoothed_power(&[1.0], &[1.0], &[0.0], 4.0).unwrap(), 0.0);
        assert_eq!(smoothed_power(&[1.0, 0.0], &[0.0, 2.0], &[3.0, 2.0], 3.0).unwrap(), 25.0);
        assert!(smoothed_power(&[-1.0], &[0.0], &[1.0], 3.0).is_err());
    }

    #[test]
    fn objective_examples() {
        let id = SparseMatrix::identity(2);
        let prob = PNormProblem::new(SparseMatrix::zeros(0, 2), vec![], id.clone(), id, vec![0.0; 2], 4.0).unwrap();
        assert_eq!(prob.objective_value(&[1.0, 2.0]).unwrap(), 22.0);
        assert_eq!(prob.objective_value(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(prob.objective_value(&[0.0]).is_err());
    }

    #[test]
    fn p_below_two_rejected() {
        let id = SparseMatrix::identity(1);
        assert!(PNormProblem::new(SparseMatrix::zeros(0, 1), vec![], id.clone(), id, vec![0.0], 1.5).is_err());
    }

    #[test]
    fn flow_objective_examples() {
        let g = Graph::new(2, vec![(0, 1)]).unwrap();
        let inst = FlowInstance::new(g, vec![1.0], vec![1.0], vec![0.0], 2.0).unwrap();
        assert_eq!(inst.objective(&[0.0]).unwrap(), 0.0);
        assert_eq!(inst.objective(&[0.5]).unwrap(), 0.25);
    }

    #[test]
    fn residual_at_zero() {
        let prob = dense_problem(3.0);
        let x0 = [1.0, 0.0, 0.0];
        let res = build_residual(&prob, &x0).unwrap();
        assert_eq!(res.residual_value(&[0.0; 3]).unwrap(), 0.0);
        let id = SparseMatrix::identity(2);
        let p0 = PNormProblem::new(SparseMatrix::zeros(0, 2), vec![], id.clone(), id, vec![2.0, 4.0], 4.0).unwrap();
        let r0 = build_residual(&p0, &[0.0, 0.0]).unwrap();
        assert_eq!(r0.g, vec![0.5, 1.0]);
        assert!(r0.dn.iter().all(|&d| d == 0.0));
        assert!((r0.quad_value(&[1.0, 0.0]) - 2.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn residual_p2_without_n() {
        let m = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let prob = PNormProblem::new(SparseMatrix::zeros(0, 2), vec![], m.clone(), SparseMatrix::zeros(2, 2), vec![1.0, -1.0], 2.0).unwrap();
        let x = [0.5, -0.25];
        let res = build_residual(&prob, &x).unwrap();
        let mtmx = m.apply_transpose(&m.apply(&x));
        for i in 0..2 {
            assert!((res.g[i] - (prob.b[i] / 2.0 + mtmx[i])).abs() < 1e-15);
        }
        let d = [0.3, 0.7];
        let md = m.apply(&d);
        assert!((res.quad_value(&d) - 0.5 * dot(&md, &md)).abs() < 1e-15);
    }

    #[test]
    fn residual_value_example() {
        let res = ResidualProblem {
            g: vec![1.0, 0.0],
            m: SparseMatrix::identity(2).scale(2f64.sqrt()),
            n: SparseMatrix::zeros(2, 2),
            dn: vec![0.0, 0.0],
            p: 2.0,
        };
        // R = (2/p²)·MᵀM = I
        assert!((res.residual_value(&[0.5, 0.0]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn infeasible_point_rejected() {
        let prob = dense_problem(3.0);
        assert!(build_residual(&prob, &[0.0; 3]).is_err());
    }

    #[test]
    fn refinement_step_examples() {
        assert_eq!(refinement_step(&[1.0, 2.0], &[0.0, 0.0], 3.0), vec![1.0, 2.0]);
        assert_eq!(refinement_step(&[2.0], &[2.0], 2.0), vec![1.0]);
    }

    #[test]
    fn zero_demand_tree_flow() {
        let g = Graph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let inst = FlowInstance::new(g, vec![1.0, -1.0], vec![1.0; 2], vec![1.0; 2], 4.0).unwrap();
        let prob = flow_problem(&inst, &[0.0; 3]).unwrap();
        let cons = crate::kkt::Constraints::new(prob.a.clone());
        let f = cons.solve(&crate::kkt::QuadMatrix::Diagonal(vec![1.0, 1.0]), None, &prob.c).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-14));
        assert_eq!(prob.objective_value(&f).unwrap(), 0.0);
    }

    #[test]
    fn single_edge_voltage() {
        let g = Graph::new(2, vec![(0, 1)]).unwrap();
        let inst = VoltageInstance::new(g, vec![1.0], vec![0.0], vec![1.0, -1.0], 3.0).unwrap();
        let prob = voltage_problem(&inst).unwrap();
        // v₀ − v₁ = −1/2 is optimal for t + t²
        let v = [-0.25, 0.25];
        assert!((prob.objective_value(&v).unwrap() + 0.25).abs() < 1e-15);
        assert!((inst.objective(&v).unwrap() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn unbalanced_demands_rejected() {
        let g = Graph::new(2, vec![(0, 1)]).unwrap();
        let inst = FlowInstance::new(g.clone(), vec![1.0], vec![1.0], vec![0.0], 2.0).unwrap();
        assert!(matches!(flow_problem(&inst, &[1.0, 0.0]), Err(Error::Infeasible(_))));
        let v = VoltageInstance::new(g, vec![1.0], vec![0.0], vec![1.0, 0.0], 3.0).unwrap();
        assert!(voltage_problem(&v).is_err());
    }

    #[test]
    fn quad_factor_matches_quad_value() {
        let prob = dense_problem(4.0);
        let res = build_residual(&prob, &[0.2, 0.5, 0.3]).unwrap();
        let d = [0.1, -0.4, 0.3];
        let fd = res.quad_factor().apply(&d);
        assert!((dot(&fd, &fd) - res.quad_value(&d)).abs() < 1e-14);
    }

    #[test]
    fn well_posedness() {
        let prob = dense_problem(3.0);
        prob.check_well_posed(1e-8).unwrap();
        let z = SparseMatrix::zeros(1, 2);
        let bad = PNormProblem::new(SparseMatrix::zeros(0, 2), vec![], z.clone(), SparseMatrix::identity(2).select_rows(&[0]), vec![0.0, 1.0], 3.0)
            .unwrap();
        assert!(bad.check_well_posed(1e-8).is_err());
    }
}
