//! Directed multigraphs, incidence and Laplacian matrices, cycle-space
//! projection and shortest paths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::linsolve::{solve_spsd, SolveOptions};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphJson", into = "GraphJson")]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<GraphJson> for Graph {
    type Error = Error;
    fn try_from(g: GraphJson) -> Result<Self> {
        Graph::new(g.n, g.edges)
    }
}

impl From<Graph> for GraphJson {
    fn from(g: Graph) -> Self {
        GraphJson { n: g.n, edges: g.edges }
    }
}

impl Graph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("graph needs at least one vertex".into()));
        }
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::InvalidInput(format!("edge {i} = ({u}, {v}) out of range")));
            }
            if u == v {
                return Err(Error::InvalidInput(format!("edge {i} is a self-loop at {u}")));
            }
        }
        Ok(Graph { n, edges })
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn subgraph(&self, edge_ids: &[usize]) -> Graph {
        Graph { n: self.n, edges: edge_ids.iter().map(|&e| self.edges[e]).collect() }
    }

    /// `Bᵀ f`: net residue at each vertex (outflow minus inflow).
    pub fn residues(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (&(u, v), &x) in self.edges.iter().zip(f) {
            out[u] += x;
            out[v] -= x;
        }
        out
    }

    /// `B x`: potential difference across each edge.
    pub fn differences(&self, x: &[f64]) -> Vec<f64> {
        self.edges.iter().map(|&(u, v)| x[u] - x[v]).collect()
    }

    /// Connected component label of each vertex, restricted to edges where
    /// `keep` holds. Labels are assigned in order of the smallest vertex.
    pub fn components_where(&self, keep: impl Fn(usize) -> bool) -> (Vec<usize>, usize) {
        let mut uf = UnionFind::new(self.n);
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            if keep(e) {
                uf.union(u, v);
            }
        }
        let mut label = vec![usize::MAX; self.n];
        let mut root_label = vec![usize::MAX; self.n];
        let mut count = 0;
        for v in 0..self.n {
            let r = uf.find(v);
            if root_label[r] == usize::MAX {
                root_label[r] = count;
                count += 1;
            }
            label[v] = root_label[r];
        }
        (label, count)
    }

    pub fn components(&self) -> (Vec<usize>, usize) {
        self.components_where(|_| true)
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n];
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            adj[u].push((v, e));
            adj[v].push((u, e));
        }
        adj
    }
}

pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

pub fn incidence_matrix(g: &Graph) -> SparseMatrix {
    let mut t = Vec::with_capacity(2 * g.edge_count());
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        t.push((e, u, 1.0));
        t.push((e, v, -1.0));
    }
    SparseMatrix::from_triplets(g.edge_count(), g.vertex_count(), &t).unwrap()
}

pub fn weighted_laplacian(g: &Graph, w: &[f64]) -> Result<SparseMatrix> {
    check_len("laplacian weights", g.edge_count(), w.len())?;
    check_finite("laplacian weights", w)?;
    if w.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidInput("negative Laplacian weight".into()));
    }
    let mut t = Vec::with_capacity(4 * g.edge_count() + g.vertex_count());
    for (&(u, v), &we) in g.edges().iter().zip(w) {
        t.push((u, u, we));
        t.push((v, v, we));
        t.push((u, v, -we));
        t.push((v, u, -we));
    }
    // keep the diagonal present so preconditioners see every vertex
    t.extend((0..g.vertex_count()).map(|i| (i, i, 0.0)));
    SparseMatrix::from_triplets(g.vertex_count(), g.vertex_count(), &t)
}

fn center_per_component(x: &mut [f64], label: &[usize], count: usize) {
    let mut sum = vec![0.0; count];
    let mut size = vec![0usize; count];
    for (v, &c) in label.iter().enumerate() {
        sum[c] += x[v];
        size[c] += 1;
    }
    for (v, &c) in label.iter().enumerate() {
        x[v] -= sum[c] / size[c] as f64;
    }
}

/// Solves `L x = rhs` for `L = Bᵀ diag(w) B`. The right-hand side is
/// mean-centred on each component of the positive-weight subgraph and the
/// returned potentials are mean-zero on each such component.
pub fn solve_laplacian(g: &Graph, w: &[f64], rhs: &[f64], opts: &SolveOptions) -> Result<Vec<f64>> {
    check_len("laplacian rhs", g.vertex_count(), rhs.len())?;
    let lap = weighted_laplacian(g, w)?;
    let (label, count) = g.components_where(|e| w[e] > 0.0);
    let mut b = rhs.to_vec();
    center_per_component(&mut b, &label, count);
    let mut x = solve_spsd(&lap, &b, opts)?;
    center_per_component(&mut x, &label, count);
    Ok(x)
}

/// Projection of `grad` onto the cycle space `ker Bᵀ`: returns `grad + Bψ*`
/// with `ψ* = argmin ‖grad + Bψ‖₂`.
pub fn project_cycle_space(g: &Graph, grad: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_len("gradient", g.edge_count(), grad.len())?;
    check_finite("gradient", grad)?;
    let rhs: Vec<f64> = g.residues(grad).iter().map(|x| -x).collect();
    let opts = SolveOptions { tol, ..Default::default() };
    let psi = solve_laplacian(g, &vec![1.0; g.edge_count()], &rhs, &opts)?;
    Ok(grad.iter().zip(g.differences(&psi)).map(|(a, b)| a + b).collect())
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over the undirected graph; unreachable vertices get `+∞`.
pub fn shortest_path_distances(g: &Graph, lengths: &[f64], source: usize) -> Result<Vec<f64>> {
    check_len("edge lengths", g.edge_count(), lengths.len())?;
    if source >= g.vertex_count() {
        return Err(Error::InvalidInput(format!("source {source} out of range")));
    }
    if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidInput("edge lengths must be positive and finite".into()));
    }
    let adj = g.adjacency();
    let mut dist = vec![f64::INFINITY; g.vertex_count()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapItem(0.0, source));
    while let Some(HeapItem(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, e) in &adj[u] {
            let nd = d + lengths[e];
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapItem(nd, v));
            }
        }
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Graph {
        Graph::new(3, vec![(0, 1), (1, 2), (2, 0)]).unwrap()
    }

    #[test]
    fn incidence_single_edge() {
        let g = Graph::new(2, vec![(0, 1)]).unwrap();
        assert_eq!(incidence_matrix(&g).to_dense().as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn incidence_path() {
        let g = Graph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let b = incidence_matrix(&g).to_dense();
        assert_eq!(b.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, -1.0, 0.0]);
        assert_eq!(b.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, -1.0]);
    }

    #[test]
    fn triangle_circulation_has_zero_residue() {
        let g = triangle();
        assert_eq!(incidence_matrix(&g).apply_transpose(&[1.0, 1.0, 1.0]), vec![0.0; 3]);
    }

    #[test]
    fn self_loop_rejected() {
        assert!(Graph::new(2, vec![(1, 1)]).is_err());
        assert!(Graph::new(2, vec![(0, 2)]).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let g = Graph::new(2, vec![(0, 1)]).unwrap();
        let l = weighted_laplacian(&g, &[1.0]).unwrap().to_dense();
        assert_eq!(l.as_slice(), &[1.0, -1.0, -1.0, 1.0]);
        let z = weighted_laplacian(&triangle(), &[0.0; 3]).unwrap().to_dense();
        assert!(z.iter().all(|&v| v == 0.0));
        let t = weighted_laplacian(&triangle(), &[1.0; 3]).unwrap().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t[(i, j)], if i == j { 2.0 } else { -1.0 });
            }
        }
        assert!(weighted_laplacian(&g, &[-1.0]).is_err());
    }

    #[test]
    fn single_edge_electrical_flow() {
        let g = Graph::new(2, vec![(0, 1)]).unwrap();
        let x = solve_laplacian(&g, &[1.0], &[1.0, -1.0], &SolveOptions::default()).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let tree = Graph::new(4, vec![(0, 1), (1, 2), (1, 3)]).unwrap();
        let gh = project_cycle_space(&tree, &[1.0, -2.0, 0.5], 1e-12).unwrap();
        assert!(gh.iter().all(|v| v.abs() < 1e-10));
        let t = triangle();
        let gh = project_cycle_space(&t, &[1.0, 1.0, 1.0], 1e-12).unwrap();
        assert!(gh.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let gh = project_cycle_space(&t, &[1.0, 0.0, 0.0], 1e-12).unwrap();
        assert!(gh.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-10));
    }

    #[test]
    fn dijkstra_examples() {
        let g = Graph::new(4, vec![(0, 1), (1, 2)]).unwrap();
        let d = shortest_path_distances(&g, &[1.0, 1.0], 0).unwrap();
        assert_eq!(&d[..3], &[0.0, 1.0, 2.0]);
        assert!(d[3].is_infinite());
        assert!(shortest_path_distances(&g, &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn graph_json_roundtrip() {
        let g = triangle();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, r#"{"n":3,"edges":[[0,1],[1,2],[2,0]]}"#);
        let back: Graph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<Graph>(r#"{"n":2,"edges":[[0,0]]}"#).is_err());
    }
}
