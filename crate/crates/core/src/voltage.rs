//! Voltage-instance sparsification: a Baswana–Sen spanner over the ℓp edges
//! and effective-resistance sampling over the ℓ2 edges.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::graph::{shortest_path_distances, weighted_laplacian, Graph};
use crate::instance::VoltageInstance;
use crate::linsolve::psd_pinv;

/// Edge subset of a `(2k−1)`-spanner for the given positive lengths,
/// returned as sorted edge indices.
pub fn baswana_sen_spanner<R: Rng + ?Sized>(g: &Graph, lengths: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_len("edge lengths", g.edge_count(), lengths.len())?;
    if k <= 1 {
        return Err(Error::InvalidInput(format!("spanner parameter k must exceed 1, got {k}")));
    }
    if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidInput("spanner lengths must be positive and finite".into()));
    }
    let n = g.vertex_count();
    let key = |e: usize| (lengths[e], e);
    let lighter = |a: usize, b: usize| key(a).partial_cmp(&key(b)).unwrap().is_lt();

    // among parallel edges only the lightest matters
    let mut best: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let pair = (u.min(v), u.max(v));
        match best.get(&pair) {
            Some(&f) if !lighter(e, f) => {}
            _ => {
                best.insert(pair, e);
            }
        }
    }
    let mut alive = vec![false; g.edge_count()];
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (&(u, v), &e) in &best {
        alive[e] = true;
        adj[u].push((v, e));
        adj[v].push((u, e));
    }

    let mut spanner = vec![false; g.edge_count()];
    let mut cluster: Vec<Option<usize>> = (0..n).map(Some).collect();
    let prob = (n as f64).powf(-1.0 / k as f64);

    // lightest alive edge from v to each neighbouring cluster
    let neighbour_clusters = |v: usize, alive: &[bool], cluster: &[Option<usize>]| {
        let mut out: BTreeMap<usize, usize> = BTreeMap::new();
        for &(u, e) in &adj[v] {
            if !alive[e] {
                continue;
            }
            if let Some(c) = cluster[u] {
                match out.get(&c) {
                    Some(&f) if !lighter(e, f) => {}
                    _ => {
                        out.insert(c, e);
                    }
                }
            }
        }
        out
    };

    for _ in 1..k {
        let mut centers: Vec<usize> = cluster.iter().flatten().copied().collect();
        centers.sort_unstable();
        centers.dedup();
        let mut sampled = vec![false; n];
        for &c in &centers {
            sampled[c] = rng.gen::<f64>() < prob;
        }
        let mut next = vec![None; n];
        let mut kill: Vec<usize> = Vec::new();
        for v in 0..n {
            let Some(cv) = cluster[v] else { continue };
            if sampled[cv] {
                next[v] = Some(cv);
                continue;
            }
            let nb = neighbour_clusters(v, &alive, &cluster);
            let star = nb.iter().filter(|(c, _)| sampled[**c]).min_by(|a, b| key(*a.1).partial_cmp(&key(*b.1)).unwrap());
            match star {
                None => {
                    for &e in nb.values() {
                        spanner[e] = true;
                    }
                    kill.extend(adj[v].iter().map(|&(_, e)| e));
                }
                Some((&cstar, &estar)) => {
                    spanner[estar] = true;
                    next[v] = Some(cstar);
                    for (&c, &e) in &nb {
                        if c == cstar || lighter(e, estar) {
                            if c != cstar {
                                spanner[e] = true;
                            }
                            kill.extend(adj[v].iter().filter(|&&(u, _)| cluster[u] == Some(c)).map(|&(_, f)| f));
                        }
                    }
                }
            }
        }
        for e in kill {
            alive[e] = false;
        }
        cluster = next;
        for (e, &(u, v)) in g.edges().iter().enumerate() {
            if alive[e] && (cluster[u].is_none() || cluster[v].is_none() || cluster[u] == cluster[v]) {
                alive[e] = false;
            }
        }
    }
    for v in 0..n {
        for (_, e) in neighbour_clusters(v, &alive, &cluster) {
            spanner[e] = true;
        }
    }
    Ok((0..g.edge_count()).filter(|&e| spanner[e]).collect())
}

/// Largest ratio `d_H(u, v) / ℓ(u, v)` over the edges of `g`, where `H` is
/// the subgraph on `kept`; equals the all-pairs stretch.
pub fn max_edge_stretch(g: &Graph, lengths: &[f64], kept: &[usize]) -> Result<f64> {
    let h = g.subgraph(kept);
    let hl: Vec<f64> = kept.iter().map(|&e| lengths[e]).collect();
    let mut worst: f64 = 1.0;
    let mut by_tail: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (e, &(u, _)) in g.edges().iter().enumerate() {
        by_tail.entry(u).or_default().push(e);
    }
    for (u, es) in by_tail {
        let d = shortest_path_distances(&h, &hl, u)?;
        for e in es {
            worst = worst.max(d[g.edges()[e].1] / lengths[e]);
        }
    }
    Ok(worst)
}

/// Exact effective resistances `R_eff(e)` under conductances `w`.
pub fn effective_resistances(g: &Graph, w: &[f64]) -> Result<Vec<f64>> {
    let lap = weighted_laplacian(g, w)?.to_dense();
    let (pinv, _) = psd_pinv(&lap, 1e-12);
    Ok(g.edges().iter().map(|&(u, v)| (pinv[(u, u)] + pinv[(v, v)] - 2.0 * pinv[(u, v)]).max(0.0)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSample {
    /// Sorted distinct kept edge indices.
    pub edges: Vec<usize>,
    /// New weight of each kept edge.
    pub weights: Vec<f64>,
    pub draws: usize,
}

/// Number of draws `ceil(C·n·ε⁻²·ln(n/δ))`.
pub fn spectral_draws(n: usize, epsilon: f64, delta: f64, c_const: f64) -> usize {
    let n = n.max(2) as f64;
    (c_const * n * (n / delta).ln() / (epsilon * epsilon)).ceil().max(1.0) as usize
}

/// Samples edges with replacement proportionally to `w_e·R_eff(e)`, each
/// draw adding `w_e/(q·prob_e)` to the edge's new weight.
pub fn spectral_sparsify<R: Rng + ?Sized>(g: &Graph, w: &[f64], epsilon: f64, delta: f64, c_const: f64, rng: &mut R) -> Result<SpectralSample> {
    check_len("weights", g.edge_count(), w.len())?;
    if !(epsilon > 0.0 && epsilon <= 0.5) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput("spectral sparsifier needs ε ∈ (0, 1/2] and δ ∈ (0, 1)".into()));
    }
    if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidInput("weights must be non-negative".into()));
    }
    let support: Vec<usize> = (0..g.edge_count()).filter(|&e| w[e] > 0.0).collect();
    if support.is_empty() {
        return Ok(SpectralSample { edges: vec![], weights: vec![], draws: 0 });
    }
    let reff = effective_resistances(g, w)?;
    let lev: Vec<f64> = support.iter().map(|&e| w[e] * reff[e]).collect();
    let total: f64 = lev.iter().sum();
    let q = spectral_draws(g.vertex_count(), epsilon, delta, c_const);
    let dist = WeightedIndex::new(&lev).map_err(|e| Error::InvalidInput(format!("degenerate leverage scores: {e}")))?;
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for _ in 0..q {
        let i = dist.sample(rng);
        let pe = lev[i] / total;
        *acc.entry(support[i]).or_insert(0.0) += w[support[i]] / (q as f64 * pe);
    }
    Ok(SpectralSample { edges: acc.keys().copied().collect(), weights: acc.values().copied().collect(), draws: q })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsifyStats {
    pub input_edges: usize,
    pub kept_edges: usize,
    pub spanner_edges: usize,
    pub spectral_edges: usize,
    pub spectral_draws: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsifyResult {
    /// Subgraph on the kept edges, in increasing original edge order.
    pub graph: Graph,
    pub kept_edge_indices: Vec<usize>,
    pub spanner_edge_indices: Vec<usize>,
    pub spectral_edge_indices: Vec<usize>,
    /// ℓ2 weight per kept edge (zero for spanner-only edges).
    pub u: Vec<f64>,
    /// ℓp weight per kept edge, `s` restricted to spanner edges.
    pub t: Vec<f64>,
    pub stats: SparsifyStats,
}

pub fn spanner_k(n: usize) -> usize {
    ((n.max(2) as f64).log2().ceil() as usize).max(2)
}

pub fn spanner_sparsify<R: Rng + ?Sized>(inst: &VoltageInstance, delta: f64, spectral_c: f64, rng: &mut R) -> Result<SparsifyResult> {
    let g = &inst.graph;
    let k = spanner_k(g.vertex_count());
    let sp_edges: Vec<usize> = (0..g.edge_count()).filter(|&e| inst.s[e] > 0.0).collect();
    let spanner = if sp_edges.is_empty() {
        Vec::new()
    } else {
        let sub = g.subgraph(&sp_edges);
        let lengths: Vec<f64> = sp_edges.iter().map(|&e| 1.0 / inst.s[e]).collect();
        baswana_sen_spanner(&sub, &lengths, k, rng)?.into_iter().map(|i| sp_edges[i]).collect()
    };
    let spectral = spectral_sparsify(g, &inst.w, 0.5, delta / 2.0, spectral_c, rng)?;
    let mut kept: Vec<usize> = spanner.iter().chain(&spectral.edges).copied().collect();
    kept.sort_unstable();
    kept.dedup();
    let pos: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let mut u = vec![0.0; kept.len()];
    let mut t = vec![0.0; kept.len()];
    for (&e, &we) in spectral.edges.iter().zip(&spectral.weights) {
        u[pos[&e]] = we;
    }
    for &e in &spanner {
        t[pos[&e]] = inst.s[e];
    }
    Ok(SparsifyResult {
        graph: g.subgraph(&kept),
        stats: SparsifyStats {
            input_edges: g.edge_count(),
            kept_edges: kept.len(),
            spanner_edges: spanner.len(),
            spectral_edges: spectral.edges.len(),
            spectral_draws: spectral.draws,
            k,
        },
        kept_edge_indices: kept,
        spanner_edge_indices: spanner,
        spectral_edge_indices: spectral.edges,
        u,
        t,
    })
}

/// `(μ₂, κ₂) = (m^{−1/(p−1)}, m^{1/(p−1)}·(2⌈log₂n⌉ − 1))`.
pub fn voltage_scaling(m: usize, p: f64, n: usize) -> (f64, f64) {
    let e = 1.0 / (p - 1.0);
    let mf = m.max(1) as f64;
    (mf.powf(-e), mf.powf(e) * (2.0 * spanner_k(n) as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn tree_spanner_is_tree() {
        let g = Graph::new(5, vec![(0, 1), (1, 2), (1, 3), (3, 4)]).unwrap();
        let mut rng = stream(1, 0);
        for k in 2..5 {
            assert_eq!(baswana_sen_spanner(&g, &[1.0, 2.0, 0.5, 3.0], k, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn triangle_spanner() {
        let g = Graph::new(3, vec![(0, 1), (1, 2), (2, 0)]).unwrap();
        let mut rng = stream(2, 0);
        let kept = baswana_sen_spanner(&g, &[1.0; 3], 2, &mut rng).unwrap();
        assert!(kept.len() <= 3);
        assert!(max_edge_stretch(&g, &[1.0; 3], &kept).unwrap() <= 3.0);
        assert!(baswana_sen_spanner(&g, &[1.0; 3], 1, &mut rng).is_err());
    }

    #[test]
    fn single_edge_keeps_weight() {
        let g = Graph::new(2, vec![(0, 1)]).unwrap();
        let s = spectral_sparsify(&g, &[2.5], 0.5, 0.1, 1.0, &mut stream(3, 0)).unwrap();
        assert_eq!(s.edges, vec![0]);
        assert!((s.weights[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn scaling_examples() {
        assert!((voltage_scaling(16, 5.0, 4).0 - 0.5).abs() < 1e-15);
        assert!((voltage_scaling(100, 3.0, 4).0 - 0.1).abs() < 1e-15);
        assert!(voltage_scaling(100, 1e9, 4).0 > 0.999);
    }

    #[test]
    fn pure_halves() {
        let g = Graph::new(3, vec![(0, 1), (1, 2), (2, 0)]).unwrap();
        let only_l2 = VoltageInstance::new(g.clone(), vec![1.0; 3], vec![0.0; 3], vec![0.0; 3], 3.0).unwrap();
        let r = spanner_sparsify(&only_l2, 0.1, 1.0, &mut stream(4, 0)).unwrap();
        assert!(r.spanner_edge_indices.is_empty() && r.t.iter().all(|&t| t == 0.0));
        let only_lp = VoltageInstance::new(g, vec![0.0; 3], vec![1.0; 3], vec![0.0; 3], 3.0).unwrap();
        let r = spanner_sparsify(&only_lp, 0.1, 1.0, &mut stream(4, 1)).unwrap();
        assert!(r.spectral_edge_indices.is_empty() && r.u.iter().all(|&u| u == 0.0));
    }
}
