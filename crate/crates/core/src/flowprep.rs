//! Preprocessing and approximation algebra for smoothed p-norm flow
//! instances: unbounded-cycle detection, contraction of constant cycles,
//! power-of-two rounding, bucketing by `(r, s)`, unions, and sampled checks
//! of the approximation relation between two instances.
//!
//! A map `H → G` with parameters `(κ, δ)` certifies `H ⪯ G` when every flow
//! `f` on `H` is sent to a flow `Mf` on `G` with the same residues and
//! `(obj_H(f) − δ‖f‖₁)/κ ≤ obj_G(Mf/κ)`. With `cycle_only` the condition is
//! only required for circulations.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::graph::{project_cycle_space, Graph, UnionFind};
use crate::instance::{smoothed_power, FlowInstance};
use crate::par::{map_range, Execution};
use crate::rng::{split, stream};
use crate::sparse::{dot, SparseMatrix, TripletMatrix};

/// Anything with an edge space, residues and a (maximized) objective.
pub trait FlowSystem: Sync {
    fn vertex_count(&self) -> usize;
    fn edge_count(&self) -> usize;
    fn residues(&self, f: &[f64]) -> Vec<f64>;
    fn objective(&self, f: &[f64]) -> Result<f64>;
    /// Orthogonal projection onto the circulations.
    fn project_cycles(&self, v: &[f64]) -> Result<Vec<f64>>;
}

fn project_graph_cycles(g: &Graph, v: &[f64]) -> Result<Vec<f64>> {
    if g.edge_count() == 0 {
        return Ok(Vec::new());
    }
    project_cycle_space(g, v, 1e-12)
}

impl FlowSystem for FlowInstance {
    fn vertex_count(&self) -> usize {
        self.graph.vertex_count()
    }
    fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }
    fn residues(&self, f: &[f64]) -> Vec<f64> {
        self.graph.residues(f)
    }
    fn objective(&self, f: &[f64]) -> Result<f64> {
        FlowInstance::objective(self, f)
    }
    fn project_cycles(&self, v: &[f64]) -> Result<Vec<f64>> {
        project_graph_cycles(&self.graph, v)
    }
}

/// Edge whose endpoints were merged by a contraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopEdge {
    pub vertex: usize,
    pub g: f64,
    pub r: f64,
    pub s: f64,
}

/// Flow instance plus self-loops. The edge space is the base edges followed
/// by the loops; loops never affect residues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopedInstance {
    pub base: FlowInstance,
    pub loops: Vec<LoopEdge>,
}

impl LoopedInstance {
    pub fn without_loops(base: FlowInstance) -> Self {
        LoopedInstance { base, loops: Vec::new() }
    }
}

impl FlowSystem for LoopedInstance {
    fn vertex_count(&self) -> usize {
        self.base.graph.vertex_count()
    }
    fn edge_count(&self) -> usize {
        self.base.edge_count() + self.loops.len()
    }
    fn residues(&self, f: &[f64]) -> Vec<f64> {
        self.base.graph.residues(&f[..self.base.edge_count()])
    }
    fn objective(&self, f: &[f64]) -> Result<f64> {
        check_len("flow", FlowSystem::edge_count(self), f.len())?;
        let (fb, fl) = f.split_at(self.base.edge_count());
        let p = self.base.p;
        let lp: f64 = self.loops.iter().zip(fl).map(|(l, &x)| l.g * x - l.r * x * x - l.s * x.abs().powf(p)).sum();
        Ok(self.base.objective(fb)? + lp)
    }
    fn project_cycles(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("flow", FlowSystem::edge_count(self), v.len())?;
        let (vb, vl) = v.split_at(self.base.edge_count());
        let mut out = project_graph_cycles(&self.base.graph, vb)?;
        out.extend_from_slice(vl);
        Ok(out)
    }
}

/// Linear map between edge spaces with its approximation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ApproxMapJson", into = "ApproxMapJson")]
pub struct ApproxMap {
    pub map: SparseMatrix,
    pub kappa: f64,
    pub delta: f64,
    pub cycle_only: bool,
}

#[derive(Serialize, Deserialize)]
struct ApproxMapJson {
    map: TripletMatrix,
    kappa: f64,
    delta: f64,
    cycle_only: bool,
}

impl TryFrom<ApproxMapJson> for ApproxMap {
    type Error = Error;
    fn try_from(j: ApproxMapJson) -> Result<Self> {
        ApproxMap::new(SparseMatrix::try_from(j.map)?, j.kappa, j.delta, j.cycle_only)
    }
}

impl From<ApproxMap> for ApproxMapJson {
    fn from(a: ApproxMap) -> Self {
        ApproxMapJson { map: (&a.map).into(), kappa: a.kappa, delta: a.delta, cycle_only: a.cycle_only }
    }
}

impl ApproxMap {
    pub fn new(map: SparseMatrix, kappa: f64, delta: f64, cycle_only: bool) -> Result<Self> {
        if !(kappa >= 1.0 && kappa.is_finite()) || !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidInput(format!("need κ ≥ 1 and δ ≥ 0, got κ = {kappa}, δ = {delta}")));
        }
        Ok(ApproxMap { map, kappa, delta, cycle_only })
    }

    pub fn identity(m: usize) -> Self {
        ApproxMap { map: SparseMatrix::identity(m), kappa: 1.0, delta: 0.0, cycle_only: false }
    }

    pub fn source_edges(&self) -> usize {
        self.map.cols()
    }

    pub fn target_edges(&self) -> usize {
        self.map.rows()
    }

    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.map.try_apply(f)
    }

    /// `self` then `next`: `κ = κ₁κ₂`, `δ = δ₁ + δ₂‖M₁‖₁→₁`.
    pub fn compose(&self, next: &ApproxMap) -> Result<ApproxMap> {
        Ok(ApproxMap {
            map: next.map.matmul(&self.map)?,
            kappa: self.kappa * next.kappa,
            delta: self.delta + next.delta * self.map.norm_1_to_1(),
            cycle_only: self.cycle_only || next.cycle_only,
        })
    }
}

/// Signed edge list of a cycle; `sign = +1` means the edge is traversed
/// from tail to head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedCycle {
    pub edges: Vec<(usize, i8)>,
    /// `Σ sign·g` around the cycle.
    pub gradient_sum: f64,
}

fn untouched(inst: &FlowInstance, e: usize) -> bool {
    inst.r[e] == 0.0 && inst.s[e] == 0.0
}

/// DFS forest over the untouched edges with potentials `φ` such that
/// `g(e) = φ(tail) − φ(head)` on every tree edge.
struct Forest {
    parent: Vec<Option<(usize, usize)>>,
    depth: Vec<usize>,
    phi: Vec<f64>,
    in_tree: Vec<bool>,
}

impl Forest {
    fn build(inst: &FlowInstance) -> Self {
        let g = &inst.graph;
        let n = g.vertex_count();
        let mut adj = vec![Vec::new(); n];
        for (e, &(u, v)) in g.edges().iter().enumerate() {
            if untouched(inst, e) {
                adj[u].push((v, e));
                adj[v].push((u, e));
            }
        }
        let mut parent = vec![None; n];
        let mut depth = vec![0; n];
        let mut phi = vec![0.0; n];
        let mut seen = vec![false; n];
        let mut in_tree = vec![false; g.edge_count()];
        let mut stack = Vec::new();
        for root in 0..n {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            stack.push(root);
            while let Some(u) = stack.pop() {
                for &(w, e) in &adj[u] {
                    if seen[w] {
                        continue;
                    }
                    seen[w] = true;
                    in_tree[e] = true;
                    parent[w] = Some((u, e));
                    depth[w] = depth[u] + 1;
                    let (a, _) = g.edges()[e];
                    // g(e) = φ(a) − φ(b)
                    phi[w] = if a == u { phi[u] - inst.g[e] } else { phi[u] + inst.g[e] };
                    stack.push(w);
                }
            }
        }
        Forest { parent, depth, phi, in_tree }
    }

    /// Tree edges from `v` up to (excluding) ancestor `top`, each with the
    /// sign of traversal towards the root.
    fn climb(&self, g: &Graph, mut v: usize, top: usize, out: &mut Vec<(usize, i8)>) {
        while v != top {
            let (p, e) = self.parent[v].expect("below top");
            out.push((e, if g.edges()[e].0 == v { 1 } else { -1 }));
            v = p;
        }
    }

    fn lca(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].unwrap().0;
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].unwrap().0;
        }
        while a != b {
            a = self.parent[a].unwrap().0;
            b = self.parent[b].unwrap().0;
        }
        a
    }

    /// Adds to `f` a flow along the tree path from `v` to its root carrying
    /// `amount` units, i.e. raises the residue of `v` by `amount` and lowers
    /// the root's by the same.
    fn push_to_root(&self, g: &Graph, mut v: usize, amount: f64, f: &mut [f64]) {
        while let Some((p, e)) = self.parent[v] {
            f[e] += if g.edges()[e].0 == v { amount } else { -amount };
            v = p;
        }
    }
}

/// Finds an untouched cycle whose gradient sum is nonzero, if there is one.
pub fn detect_unbounded(inst: &FlowInstance) -> Option<SignedCycle> {
    let forest = Forest::build(inst);
    let g = &inst.graph;
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        if !untouched(inst, e) || forest.in_tree[e] {
            continue;
        }
        let implied = forest.phi[u] - forest.phi[v];
        let scale = inst.g[e].abs() + forest.phi[u].abs() + forest.phi[v].abs();
        if (inst.g[e] - implied).abs() <= 1e-12 * scale {
            continue;
        }
        // e forward, then v up to the lca and down to u
        let top = forest.lca(u, v);
        let mut edges = vec![(e, 1i8)];
        forest.climb(g, v, top, &mut edges);
        let mut down = Vec::new();
        forest.climb(g, u, top, &mut down);
        edges.extend(down.into_iter().rev().map(|(e, s)| (e, -s)));
        let gradient_sum = edges.iter().map(|&(e, s)| s as f64 * inst.g[e]).sum();
        return Some(SignedCycle { edges, gradient_sum });
    }
    None
}

/// Result of contracting every component of untouched edges to a vertex.
#[derive(Debug, Clone)]
pub struct Contraction {
    pub instance: LoopedInstance,
    pub demands: Vec<f64>,
    /// Original edge index of each contracted edge (base edges, then loops).
    pub kept_edges: Vec<usize>,
    /// Component of each original vertex.
    pub vertex_map: Vec<usize>,
    /// Potentials with `g = φ(tail) − φ(head)` on untouched edges.
    pub potentials: Vec<f64>,
    /// `obj_G(f) = offset + obj_G′(forward·f)` for every feasible `f`.
    pub offset: f64,
    pub forward: SparseMatrix,
    /// Lifts circulations; see [`Contraction::lift`] for general demands.
    pub backward: SparseMatrix,
    forest_parent: Vec<Option<(usize, usize)>>,
    original: Graph,
}

impl Contraction {
    /// Lifts a flow on the contracted instance meeting `self.demands` to a
    /// flow on the original meeting `demands`.
    pub fn lift(&self, f: &[f64], demands: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.backward.try_apply(f)?;
        check_len("demands", self.original.vertex_count(), demands.len())?;
        let res = self.original.residues(&out);
        let forest = Forest { parent: self.forest_parent.clone(), depth: Vec::new(), phi: Vec::new(), in_tree: Vec::new() };
        for v in 0..demands.len() {
            let need = demands[v] - res[v];
            if need != 0.0 {
                forest.push_to_root(&self.original, v, need, &mut out);
            }
        }
        Ok(out)
    }

    pub fn forward_map(&self) -> ApproxMap {
        ApproxMap { map: self.forward.clone(), kappa: 1.0, delta: 0.0, cycle_only: true }
    }

    pub fn backward_map(&self) -> ApproxMap {
        ApproxMap { map: self.backward.clone(), kappa: 1.0, delta: 0.0, cycle_only: true }
    }
}

/// Contracts each component of untouched edges. Kept edges get gradient
/// `g − (φ(tail) − φ(head))`, which moves all of the untouched edges'
/// contribution into the constant `φᵀb`.
pub fn contract_constant_cycles(inst: &FlowInstance, demands: &[f64]) -> Result<Contraction> {
    let g = &inst.graph;
    check_len("demands", g.vertex_count(), demands.len())?;
    if detect_unbounded(inst).is_some() {
        return Err(Error::Unbounded);
    }
    let forest = Forest::build(inst);
    let (label, count) = g.components_where(|e| untouched(inst, e));
    let mut base_edges = Vec::new();
    let mut base_ids = Vec::new();
    let mut loop_ids = Vec::new();
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        if untouched(inst, e) {
            continue;
        }
        if label[u] == label[v] {
            loop_ids.push(e);
        } else {
            base_edges.push((label[u], label[v]));
            base_ids.push(e);
        }
    }
    let phi = &forest.phi;
    let g_shift = |e: usize| {
        let (u, v) = g.edges()[e];
        inst.g[e] - (phi[u] - phi[v])
    };
    let pick = |ids: &[usize], x: &[f64]| ids.iter().map(|&e| x[e]).collect::<Vec<_>>();
    let base = FlowInstance::new(
        Graph::new(count, base_edges)?,
        base_ids.iter().map(|&e| g_shift(e)).collect(),
        pick(&base_ids, &inst.r),
        pick(&base_ids, &inst.s),
        inst.p,
    )?;
    let loops = loop_ids.iter().map(|&e| LoopEdge { vertex: label[g.edges()[e].0], g: g_shift(e), r: inst.r[e], s: inst.s[e] }).collect();
    let mut new_demands = vec![0.0; count];
    for (v, &b) in demands.iter().enumerate() {
        new_demands[label[v]] += b;
    }
    let kept: Vec<usize> = base_ids.into_iter().chain(loop_ids).collect();

    let m = g.edge_count();
    let fwd: Vec<_> = kept.iter().enumerate().map(|(i, &e)| (i, e, 1.0)).collect();
    let forward = SparseMatrix::from_triplets(kept.len(), m, &fwd)?;
    let mut bwd = Vec::new();
    let mut col = vec![0.0; m];
    for (i, &e) in kept.iter().enumerate() {
        let (u, v) = g.edges()[e];
        col[e] = 1.0;
        // cancel the unit leaving u and entering v, pushing both to roots
        forest.push_to_root(g, u, -1.0, &mut col);
        forest.push_to_root(g, v, 1.0, &mut col);
        for (j, x) in col.iter_mut().enumerate() {
            if *x != 0.0 {
                bwd.push((j, i, *x));
                *x = 0.0;
            }
        }
    }
    let backward = SparseMatrix::from_triplets(m, kept.len(), &bwd)?;
    Ok(Contraction {
        instance: LoopedInstance { base, loops },
        demands: new_demands,
        kept_edges: kept,
        vertex_map: label,
        offset: dot(&forest.phi, demands),
        potentials: forest.phi.clone(),
        forward,
        backward,
        forest_parent: forest.parent,
        original: g.clone(),
    })
}

/// Largest power of two `≤ x` for `x > 0`; zero stays zero.
pub fn pow2_floor(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x.is_normal() {
        f64::from_bits(x.to_bits() & 0xFFF0_0000_0000_0000)
    } else {
        2f64.powi(x.abs().log2().floor() as i32).copysign(x)
    }
}

pub fn is_pow2_or_zero(x: f64) -> bool {
    x == 0.0 || pow2_floor(x) == x
}

/// Rounds every nonzero `r`, `s` down to a power of two.
pub fn instance_round(inst: &FlowInstance) -> FlowInstance {
    FlowInstance { r: inst.r.iter().map(|&x| pow2_floor(x)).collect(), s: inst.s.iter().map(|&x| pow2_floor(x)).collect(), ..inst.clone() }
}

fn round_looped(inst: &LoopedInstance) -> LoopedInstance {
    LoopedInstance {
        base: instance_round(&inst.base),
        loops: inst.loops.iter().map(|l| LoopEdge { r: pow2_floor(l.r), s: pow2_floor(l.s), ..l.clone() }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub r: f64,
    pub s: f64,
    pub edges: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketedInstance {
    /// Buckets with `(r, s) ≠ (0, 0)`, ordered by `(r, s)`.
    pub buckets: Vec<Bucket>,
    /// Edges with `r = s = 0`.
    pub untouched: Vec<usize>,
}

impl BucketedInstance {
    pub fn bucket_count(&self) -> usize {
        self.buckets.len() + usize::from(!self.untouched.is_empty())
    }

    /// Edge order of `buckets` followed by `untouched`.
    pub fn order(&self) -> Vec<usize> {
        self.buckets.iter().flat_map(|b| b.edges.iter().copied()).chain(self.untouched.iter().copied()).collect()
    }
}

/// Sub-instance on the same vertex set.
pub fn restrict(inst: &FlowInstance, edges: &[usize]) -> Result<FlowInstance> {
    let pick = |x: &[f64]| edges.iter().map(|&e| x[e]).collect::<Vec<_>>();
    FlowInstance::new(inst.graph.subgraph(edges), pick(&inst.g), pick(&inst.r), pick(&inst.s), inst.p)
}

/// Groups the edges of a 2-rounded instance by exact `(r, s)`.
pub fn bucket_edges(inst: &FlowInstance) -> Result<BucketedInstance> {
    if let Some(e) = (0..inst.edge_count()).find(|&e| !is_pow2_or_zero(inst.r[e]) || !is_pow2_or_zero(inst.s[e])) {
        return Err(Error::InvalidInput(format!("edge {e} is not 2-rounded")));
    }
    let mut map: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    let mut zero = Vec::new();
    for e in 0..inst.edge_count() {
        if untouched(inst, e) {
            zero.push(e);
        } else {
            // bit order agrees with numeric order for non-negative floats
            map.entry((inst.r[e].to_bits(), inst.s[e].to_bits())).or_default().push(e);
        }
    }
    let mut uf = UnionFind::new(inst.graph.vertex_count());
    for &e in &zero {
        let (u, v) = inst.graph.edges()[e];
        if !uf.union(u, v) {
            return Err(Error::CycleTouchingViolation);
        }
    }
    let buckets = map.into_iter().map(|((r, s), edges)| Bucket { r: f64::from_bits(r), s: f64::from_bits(s), edges }).collect();
    Ok(BucketedInstance { buckets, untouched: zero })
}

/// Disjoint union of the edge sets over a shared vertex set.
pub fn union_instances(parts: &[FlowInstance]) -> Result<FlowInstance> {
    let first = parts.first().ok_or_else(|| Error::InvalidInput("union of no instances".into()))?;
    let n = first.graph.vertex_count();
    let (mut edges, mut g, mut r, mut s) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for part in parts {
        check_len("union vertex count", n, part.graph.vertex_count())?;
        if part.p != first.p {
            return Err(Error::InvalidInput(format!("union of instances with p = {} and p = {}", first.p, part.p)));
        }
        edges.extend_from_slice(part.graph.edges());
        g.extend_from_slice(&part.g);
        r.extend_from_slice(&part.r);
        s.extend_from_slice(&part.s);
    }
    FlowInstance::new(Graph::new(n, edges)?, g, r, s, first.p)
}

#[derive(Debug, Clone, Serialize)]
pub struct ApproxReport {
    pub samples: usize,
    pub passed: bool,
    /// Largest `lhs − rhs` of the objective inequality.
    pub worst_violation: f64,
    /// Same, divided by `1 + |lhs| + |rhs|`.
    pub worst_relative: f64,
    /// Largest residue mismatch relative to `1 + ‖f‖₁`.
    pub worst_residue: f64,
    /// Source flow attaining the worst relative violation, if it failed.
    pub witness: Option<Vec<f64>>,
}

struct Sample {
    rel: f64,
    abs: f64,
    residue: f64,
    flow: Vec<f64>,
}

/// Samples flows `f` on `source` (circulations when the map is cycle-only)
/// at log-uniform scales in `[1e-3, 1e3]` and checks that `map` certifies
/// `source ⪯ target`.
pub fn check_approx_relation<G: FlowSystem, H: FlowSystem, R: Rng + ?Sized>(
    target: &G,
    source: &H,
    map: &ApproxMap,
    samples: usize,
    rng: &mut R,
    tol: f64,
) -> Result<ApproxReport> {
    check_len("map columns", source.edge_count(), map.source_edges())?;
    check_len("map rows", target.edge_count(), map.target_edges())?;
    if !map.cycle_only {
        check_len("vertex count", source.vertex_count(), target.vertex_count())?;
    }
    let base: u64 = rng.gen();
    let results = map_range(samples, Execution::Parallel, |i| -> Result<Sample> {
        let mut rng = stream(split(base, i as u64), 0);
        let raw: Vec<f64> = (0..source.edge_count()).map(|_| rng.sample(StandardNormal)).collect();
        let mut f = if map.cycle_only { source.project_cycles(&raw)? } else { raw };
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        f.iter_mut().for_each(|x| *x *= scale);
        let fg = map.apply(&f)?;
        let l1: f64 = f.iter().map(|x| x.abs()).sum();
        let rg = target.residues(&fg);
        let residue = if map.cycle_only {
            rg.iter().fold(0.0f64, |m, x| m.max(x.abs()))
        } else {
            rg.iter().zip(source.residues(&f)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        } / (1.0 + l1);
        let lhs = (source.objective(&f)? - map.delta * l1) / map.kappa;
        let scaled: Vec<f64> = fg.iter().map(|x| x / map.kappa).collect();
        let rhs = target.objective(&scaled)?;
        let abs = lhs - rhs;
        Ok(Sample { rel: abs / (1.0 + lhs.abs() + rhs.abs()), abs, residue, flow: f })
    });
    let mut report = ApproxReport {
        samples,
        passed: true,
        worst_violation: f64::NEG_INFINITY,
        worst_relative: f64::NEG_INFINITY,
        worst_residue: 0.0,
        witness: None,
    };
    let mut worst_flow = None;
    for s in results {
        let s = s?;
        report.worst_violation = report.worst_violation.max(s.abs);
        report.worst_residue = report.worst_residue.max(s.residue);
        if s.rel > report.worst_relative {
            report.worst_relative = s.rel;
            worst_flow = Some(s.flow);
        }
    }
    report.passed = report.worst_relative <= tol && report.worst_residue <= tol;
    if !report.passed {
        report.witness = worst_flow;
    }
    Ok(report)
}

/// Result of sparsifying one bucket: the sparse instance and maps certifying
/// `bucket ⪯ sparse` (forward) and `sparse ⪯ bucket` (backward).
#[derive(Debug, Clone)]
pub struct PluginOutput {
    pub instance: FlowInstance,
    pub forward: ApproxMap,
    pub backward: ApproxMap,
}

/// Sparsifier for a bucket whose edges share `r` and `s`.
pub trait ExpanderPlugin: Sync {
    fn name(&self) -> &str;
    fn sparsify(&self, bucket: &FlowInstance, seed: u64) -> Result<PluginOutput>;
}

/// Returns each bucket unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPlugin;

impl ExpanderPlugin for IdentityPlugin {
    fn name(&self) -> &str {
        "identity"
    }

    fn sparsify(&self, bucket: &FlowInstance, _seed: u64) -> Result<PluginOutput> {
        let id = ApproxMap::identity(bucket.edge_count());
        Ok(PluginOutput { instance: bucket.clone(), forward: id.clone(), backward: id })
    }
}

#[derive(Debug, Clone)]
pub struct FlowSparsification {
    pub sparse: LoopedInstance,
    pub contraction: Contraction,
    pub buckets: BucketedInstance,
    /// Original `⪯` sparse, mapping original flows to sparse ones.
    pub forward: ApproxMap,
    /// Sparse `⪯` original.
    pub backward: ApproxMap,
    /// Some nonzero `r`, `s` fell outside the quasipolynomial range.
    pub range_warning: bool,
}

/// Permutation matrix sending coordinate `order[i]` to `i`; trailing
/// coordinates `extra` are kept in place.
fn permutation(order: &[usize], extra: usize) -> SparseMatrix {
    let m = order.len();
    let t: Vec<_> = order.iter().enumerate().map(|(i, &e)| (i, e, 1.0)).chain((m..m + extra).map(|i| (i, i, 1.0))).collect();
    SparseMatrix::from_triplets(m + extra, m + extra, &t).unwrap()
}

/// Contracts constant cycles, rounds, buckets, sparsifies each bucket with
/// `plugin` and unions the results, composing the maps along the way.
pub fn flow_sparsify_pipeline(inst: &FlowInstance, demands: &[f64], plugin: &dyn ExpanderPlugin, seed: u64) -> Result<FlowSparsification> {
    let range_warning = !inst.is_quasipolynomially_bounded();
    let contraction = contract_constant_cycles(inst, demands)?;
    let rounded = round_looped(&contraction.instance);
    let buckets = bucket_edges(&rounded.base)?;
    let loops = rounded.loops.len();

    let parts: Vec<FlowInstance> = buckets.buckets.iter().map(|b| restrict(&rounded.base, &b.edges)).collect::<Result<_>>()?;
    let outputs = map_range(parts.len(), Execution::Parallel, |i| plugin.sparsify(&parts[i], split(seed, i as u64)));
    let mut outputs: Vec<PluginOutput> = outputs.into_iter().collect::<Result<_>>()?;
    if !buckets.untouched.is_empty() {
        outputs.push(IdentityPlugin.sparsify(&restrict(&rounded.base, &buckets.untouched)?, 0)?);
    }
    for (o, part) in outputs.iter().zip(&parts) {
        check_len("plugin forward map columns", part.edge_count(), o.forward.source_edges())?;
        check_len("plugin backward map rows", part.edge_count(), o.backward.target_edges())?;
    }
    let n = rounded.base.graph.vertex_count();
    let sparse_base = if outputs.is_empty() {
        FlowInstance::new(Graph::new(n, Vec::new())?, vec![], vec![], vec![], inst.p)?
    } else {
        union_instances(&outputs.iter().map(|o| o.instance.clone()).collect::<Vec<_>>())?
    };

    let perm = permutation(&buckets.order(), loops);
    let id_loops = SparseMatrix::identity(loops);
    let block = |pick: fn(&PluginOutput) -> &ApproxMap| {
        let mut blocks: Vec<&SparseMatrix> = outputs.iter().map(|o| &pick(o).map).collect();
        blocks.push(&id_loops);
        let kappa = outputs.iter().map(|o| pick(o).kappa).fold(1.0, f64::max);
        let delta = outputs.iter().map(|o| pick(o).delta).fold(0.0, f64::max);
        let cycle_only = outputs.iter().any(|o| pick(o).cycle_only);
        (SparseMatrix::block_diag(&blocks), kappa, delta, cycle_only)
    };
    let (fwd, kf, df, cf) = block(|o| &o.forward);
    let (bwd, kb, db, cb) = block(|o| &o.backward);
    let bucket_fwd = ApproxMap { map: fwd.matmul(&perm)?, kappa: kf, delta: df, cycle_only: cf };
    let bucket_bwd = ApproxMap { map: perm.transpose().matmul(&bwd)?, kappa: kb, delta: db, cycle_only: cb };
    // rounding: identity with κ = 1 one way and κ = 2 the other
    let m_round = rounded.edge_count();
    let round_up = ApproxMap::identity(m_round);
    let round_down = ApproxMap { kappa: 2.0, ..ApproxMap::identity(m_round) };

    let forward = contraction.forward_map().compose(&round_up)?.compose(&bucket_fwd)?;
    let backward = bucket_bwd.compose(&round_down)?.compose(&contraction.backward_map())?;
    Ok(FlowSparsification {
        sparse: LoopedInstance { base: sparse_base, loops: rounded.loops },
        contraction,
        buckets,
        forward,
        backward,
        range_warning,
    })
}

/// `Σ rᵢfᵢ² + sᵢ|fᵢ|ᵖ` on a looped instance, for diagnostics.
pub fn looped_penalty(inst: &LoopedInstance, f: &[f64]) -> Result<f64> {
    let m = inst.base.edge_count();
    let lp: f64 = inst.loops.iter().zip(&f[m..]).map(|(l, &x)| l.r * x * x + l.s * x.abs().powf(inst.base.p)).sum();
    Ok(smoothed_power(&inst.base.r, &inst.base.s, &f[..m], inst.base.p)? + lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri(g: [f64; 3], r: [f64; 3], s: [f64; 3]) -> FlowInstance {
        FlowInstance::new(Graph::new(3, vec![(0, 1), (1, 2), (2, 0)]).unwrap(), g.to_vec(), r.to_vec(), s.to_vec(), 4.0).unwrap()
    }

    fn random_instance(n: usize, m: usize, seed: u64, untouched_frac: f64) -> FlowInstance {
        let mut rng = stream(seed, 99);
        let graph = crate::generate::random_connected_graph(n, m, &mut rng).unwrap();
        let mut r = vec![0.0; m];
        let mut s = vec![0.0; m];
        for e in 0..m {
            if rng.gen::<f64>() >= untouched_frac {
                r[e] = 10f64.powf(rng.gen_range(-1.0..1.0));
                s[e] = 10f64.powf(rng.gen_range(-1.0..1.0));
            }
        }
        let g = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        FlowInstance::new(graph, g, r, s, 4.0).unwrap()
    }

    /// Same instance with gradients on untouched edges replaced by a
    /// potential difference, so no untouched cycle is unbounded.
    fn make_bounded(mut inst: FlowInstance, seed: u64) -> FlowInstance {
        let mut rng = stream(seed, 7);
        let phi: Vec<f64> = (0..inst.graph.vertex_count()).map(|_| rng.sample(StandardNormal)).collect();
        for (e, &(u, v)) in inst.graph.edges().iter().enumerate() {
            if untouched(&inst, e) {
                inst.g[e] = phi[u] - phi[v];
            }
        }
        inst
    }

    #[test]
    fn unbounded_triangle() {
        let c = detect_unbounded(&tri([1.0, 0.0, 0.0], [0.0; 3], [0.0; 3])).unwrap();
        assert_eq!(c.edges.len(), 3);
        assert!((c.gradient_sum.abs() - 1.0).abs() < 1e-15);
        assert!(detect_unbounded(&tri([1.0, -1.0, 0.0], [0.0; 3], [0.0; 3])).is_none());
        assert!(detect_unbounded(&tri([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0; 3])).is_none());
    }

    #[test]
    fn reported_cycle_is_a_signed_cycle() {
        for seed in 0..20 {
            let inst = random_instance(10, 25, seed, 0.7);
            if let Some(c) = detect_unbounded(&inst) {
                let mut f = vec![0.0; inst.edge_count()];
                for &(e, s) in &c.edges {
                    assert!(untouched(&inst, e));
                    f[e] += s as f64;
                }
                assert!(inst.graph.residues(&f).iter().all(|x| *x == 0.0));
                assert!((dot(&inst.g, &f) - c.gradient_sum).abs() < 1e-12);
                assert!(c.gradient_sum.abs() > 1e-12);
            }
            assert!(detect_unbounded(&make_bounded(inst, seed)).is_none());
        }
    }

    #[test]
    fn contract_all_untouched_triangle() {
        let c = contract_constant_cycles(&tri([0.0; 3], [0.0; 3], [0.0; 3]), &[0.0; 3]).unwrap();
        assert_eq!(c.instance.base.graph.vertex_count(), 1);
        assert_eq!(FlowSystem::edge_count(&c.instance), 0);
        assert_eq!(contract_constant_cycles(&tri([1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]), &[0.0; 3]).unwrap_err(), Error::Unbounded);
    }

    #[test]
    fn contract_nothing_is_identity() {
        let inst = tri([1.0, 2.0, 3.0], [1.0; 3], [0.0, 1.0, 2.0]);
        let c = contract_constant_cycles(&inst, &[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(c.instance.base, inst);
        assert!(c.instance.loops.is_empty());
        assert_eq!(c.forward, SparseMatrix::identity(3));
        assert_eq!(c.backward, SparseMatrix::identity(3));
        assert_eq!(c.offset, 0.0);
    }

    #[test]
    fn contraction_preserves_objective() {
        for seed in 0..10 {
            let inst = make_bounded(random_instance(12, 30, seed, 0.4), seed);
            let mut rng = stream(seed, 3);
            let b: Vec<f64> = {
                let mut b: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
                let mean = b.iter().sum::<f64>() / 12.0;
                b.iter_mut().for_each(|x| *x -= mean);
                b
            };
            let c = contract_constant_cycles(&inst, &b).unwrap();
            // forward: any flow meeting b
            let raw: Vec<f64> = (0..30).map(|_| rng.sample(StandardNormal)).collect();
            let circ = inst.project_cycles(&raw).unwrap();
            let psi = crate::graph::solve_laplacian(&inst.graph, &[1.0; 30], &b, &Default::default()).unwrap();
            let f: Vec<f64> = circ.iter().zip(inst.graph.differences(&psi)).map(|(a, b)| a + b).collect();
            let fr = inst.graph.residues(&f);
            assert!(fr.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
            let ff = c.forward.apply(&f);
            let rr = c.instance.residues(&ff);
            assert!(rr.iter().zip(&c.demands).all(|(x, y)| (x - y).abs() < 1e-9));
            let lhs = FlowInstance::objective(&inst, &f).unwrap();
            let rhs = c.offset + c.instance.objective(&ff).unwrap();
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
            let back = c.lift(&ff, &b).unwrap();
            assert!(inst.graph.residues(&back).iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
            let ob = FlowInstance::objective(&inst, &back).unwrap();
            assert!((ob - lhs).abs() < 1e-9 * (1.0 + lhs.abs()));
            // backward: circulations
            let raw: Vec<f64> = (0..FlowSystem::edge_count(&c.instance)).map(|_| rng.sample(StandardNormal)).collect();
            let fc = c.instance.project_cycles(&raw).unwrap();
            let lift = c.backward.apply(&fc);
            assert!(inst.graph.residues(&lift).iter().all(|x| x.abs() < 1e-9));
            let a = FlowInstance::objective(&inst, &lift).unwrap();
            let bb = c.instance.objective(&fc).unwrap();
            assert!((a - bb).abs() < 1e-9 * (1.0 + a.abs()));
            assert!(c.forward.norm_1_to_1() <= 1.0);
            assert!(c.backward.norm_1_to_1() <= 30.0);
        }
    }

    #[test]
    fn rounding() {
        assert_eq!(pow2_floor(3.0), 2.0);
        assert_eq!(pow2_floor(0.7), 0.5);
        assert_eq!(pow2_floor(4.0), 4.0);
        assert_eq!(pow2_floor(0.0), 0.0);
        assert_eq!(pow2_floor(f64::MIN_POSITIVE / 3.0), 2f64.powi(-1024));
        let r = instance_round(&tri([1.0, 2.0, 3.0], [3.0, 0.0, 4.0], [0.7, 1.0, 0.0]));
        assert_eq!(r.r, vec![2.0, 0.0, 4.0]);
        assert_eq!(r.s, vec![0.5, 1.0, 0.0]);
        assert_eq!(r.g, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rounding_relations_hold() {
        let inst = random_instance(10, 30, 5, 0.0);
        let rounded = instance_round(&inst);
        let mut rng = stream(1, 1);
        let up = check_approx_relation(&rounded, &inst, &ApproxMap::identity(30), 200, &mut rng, 1e-12).unwrap();
        assert!(up.passed, "{up:?}");
        let down = ApproxMap { kappa: 2.0, ..ApproxMap::identity(30) };
        let rep = check_approx_relation(&inst, &rounded, &down, 200, &mut rng, 1e-12).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn buckets() {
        let b = bucket_edges(&tri([0.0; 3], [1.0; 3], [2.0; 3])).unwrap();
        assert_eq!(b.bucket_count(), 1);
        let b = bucket_edges(&tri([0.0; 3], [1.0, 2.0, 1.0], [0.0; 3])).unwrap();
        assert_eq!(b.buckets.len(), 2);
        assert_eq!(b.buckets[0].edges, vec![0, 2]);
        assert_eq!(bucket_edges(&tri([0.0; 3], [0.0; 3], [0.0; 3])).unwrap_err(), Error::CycleTouchingViolation);
        assert!(bucket_edges(&tri([0.0; 3], [3.0; 3], [0.0; 3])).is_err());
        let b = bucket_edges(&tri([0.0; 3], [0.0, 0.0, 1.0], [0.0; 3])).unwrap();
        assert_eq!(b.untouched, vec![0, 1]);
    }

    #[test]
    fn union_behaviour() {
        let a = tri([1.0, 2.0, 3.0], [1.0; 3], [1.0; 3]);
        let empty = FlowInstance::new(Graph::new(3, vec![]).unwrap(), vec![], vec![], vec![], 4.0).unwrap();
        assert_eq!(union_instances(&[a.clone(), empty]).unwrap(), a);
        let e1 = restrict(&a, &[0]).unwrap();
        let e2 = restrict(&a, &[2]).unwrap();
        let u = union_instances(&[e1.clone(), e2.clone()]).unwrap();
        assert_eq!(u.edge_count(), 2);
        let f = [0.3, -1.2];
        let sum = FlowInstance::objective(&e1, &f[..1]).unwrap() + FlowInstance::objective(&e2, &f[1..]).unwrap();
        assert!((FlowInstance::objective(&u, &f).unwrap() - sum).abs() < 1e-15);
        let other = FlowInstance::new(Graph::new(2, vec![(0, 1)]).unwrap(), vec![0.0], vec![1.0], vec![1.0], 4.0).unwrap();
        assert!(union_instances(&[a, other]).is_err());
    }

    #[test]
    fn relation_checks() {
        let inst = random_instance(8, 20, 2, 0.0);
        let mut rng = stream(2, 2);
        for (k, d) in [(1.0, 0.0), (3.0, 0.5)] {
            let map = ApproxMap { kappa: k, delta: d, ..ApproxMap::identity(20) };
            assert!(check_approx_relation(&inst, &inst, &map, 100, &mut rng, 1e-12).unwrap().passed);
        }
        let bad = ApproxMap { kappa: 0.5, ..ApproxMap::identity(20) };
        let rep = check_approx_relation(&inst, &inst, &bad, 100, &mut rng, 1e-12).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.witness.as_ref().map(Vec::len), Some(20));
        assert!(ApproxMap::new(SparseMatrix::identity(2), 0.5, 0.0, false).is_err());
    }

    #[test]
    fn approx_map_json_round_trip() {
        let m = ApproxMap::new(SparseMatrix::from_triplets(2, 3, &[(0, 1, 2.0), (1, 2, -1.0)]).unwrap(), 2.0, 0.25, true).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"kappa\"") && s.contains("\"cycle_only\""));
        assert_eq!(serde_json::from_str::<ApproxMap>(&s).unwrap(), m);
    }

    #[test]
    fn composition_parameters() {
        let a = ApproxMap::new(SparseMatrix::diag(&[2.0, 1.0]), 2.0, 0.5, false).unwrap();
        let b = ApproxMap::new(SparseMatrix::identity(2), 3.0, 0.25, true).unwrap();
        let c = a.compose(&b).unwrap();
        assert_eq!(c.kappa, 6.0);
        assert_eq!(c.delta, 0.5 + 0.25 * 2.0);
        assert!(c.cycle_only);
    }

    #[test]
    fn identity_pipeline() {
        let inst = make_bounded(random_instance(10, 30, 4, 0.3), 4);
        let out = flow_sparsify_pipeline(&inst, &[0.0; 10], &IdentityPlugin, 1).unwrap();
        assert_eq!(out.forward.kappa, 1.0);
        assert_eq!(out.backward.kappa, 2.0);
        assert_eq!(FlowSystem::edge_count(&out.sparse), out.contraction.kept_edges.len());
        let mut rng = stream(4, 4);
        assert!(check_approx_relation(&out.sparse, &inst, &out.forward, 100, &mut rng, 1e-10).unwrap().passed);
        assert!(check_approx_relation(&inst, &out.sparse, &out.backward, 100, &mut rng, 1e-10).unwrap().passed);
        let unb = tri([1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]);
        assert_eq!(flow_sparsify_pipeline(&unb, &[0.0; 3], &IdentityPlugin, 0).unwrap_err(), Error::Unbounded);
    }
}
