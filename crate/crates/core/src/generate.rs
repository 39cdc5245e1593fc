//! Reproducible random instances and the on-disk instance format.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::instance::{flow_problem, voltage_problem, FlowInstance, PNormProblem, ProblemJson, VoltageInstance};
use crate::rng::stream;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Flow,
    Voltage,
    Matrix,
}

impl FromStr for InstanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(InstanceKind::Flow),
            "voltage" => Ok(InstanceKind::Voltage),
            "matrix" => Ok(InstanceKind::Matrix),
            other => Err(Error::InvalidInput(format!("unknown instance kind {other:?}"))),
        }
    }
}

/// Weights are drawn log-uniformly from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub lo: f64,
    pub hi: f64,
}

impl Default for WeightProfile {
    fn default() -> Self {
        WeightProfile { lo: 0.1, hi: 10.0 }
    }
}

impl WeightProfile {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            return self.lo;
        }
        (self.lo.ln() + rng.gen::<f64>() * (self.hi.ln() - self.lo.ln())).exp()
    }
}

impl FromStr for WeightProfile {
    type Err = Error;

    /// `lo:hi`, e.g. `0.1:10`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("weight profile must look like lo:hi, got {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let (lo, hi): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(bad());
        }
        Ok(WeightProfile { lo, hi })
    }
}

/// Instance file contents, tagged by kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InstanceFile {
    Flow { instance: FlowInstance, demands: Vec<f64> },
    Voltage { instance: VoltageInstance },
    Matrix { problem: ProblemJson },
}

impl InstanceFile {
    pub fn kind(&self) -> InstanceKind {
        match self {
            InstanceFile::Flow { .. } => InstanceKind::Flow,
            InstanceFile::Voltage { .. } => InstanceKind::Voltage,
            InstanceFile::Matrix { .. } => InstanceKind::Matrix,
        }
    }

    pub fn to_problem(&self) -> Result<PNormProblem> {
        match self {
            InstanceFile::Flow { instance, demands } => flow_problem(instance, demands),
            InstanceFile::Voltage { instance } => voltage_problem(instance),
            InstanceFile::Matrix { problem } => PNormProblem::try_from(problem.clone()),
        }
    }

    pub fn p(&self) -> f64 {
        match self {
            InstanceFile::Flow { instance, .. } => instance.p,
            InstanceFile::Voltage { instance } => instance.p,
            InstanceFile::Matrix { problem } => problem.p,
        }
    }

    /// Same instance with a different norm.
    pub fn with_p(&self, p: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            InstanceFile::Flow { instance, .. } => instance.p = p,
            InstanceFile::Voltage { instance } => instance.p = p,
            InstanceFile::Matrix { problem } => problem.p = p,
        }
        out
    }
}

/// Connected multigraph: random spanning tree plus `m − n + 1` extra edges.
pub fn random_connected_graph<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Graph> {
    if n < 2 || m + 1 < n {
        return Err(Error::InvalidInput(format!("need n ≥ 2 and m ≥ n − 1, got n = {n}, m = {m}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::with_capacity(m);
    for i in 1..n {
        let j = rng.gen_range(0..i);
        edges.push((order[j], order[i]));
    }
    while edges.len() < m {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u != v {
            edges.push((u, v));
        }
    }
    Graph::new(n, edges)
}

fn gaussian<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| rng.sample(StandardNormal)).collect()
}

/// Entries `N(0, 1/cols)`, so rows applied to a standard Gaussian vector
/// stay of unit size.
fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> SparseMatrix {
    let sd = 1.0 / (cols as f64).sqrt();
    let mut t = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            t.push((i, j, sd * rng.sample::<f64, _>(StandardNormal)));
        }
    }
    SparseMatrix::from_triplets(rows, cols, &t).expect("in range")
}

/// Random instance of the given kind. Graph kinds use `n` vertices and `m`
/// edges; the matrix kind uses `n` variables, `m` rows in each of `M` and
/// `N`, and `max(1, n/5)` constraints.
pub fn generate_instance(kind: InstanceKind, n: usize, m: usize, p: f64, seed: u64, profile: WeightProfile) -> Result<InstanceFile> {
    if !(p >= 2.0) || !p.is_finite() {
        return Err(Error::UnsupportedP(p));
    }
    let mut rng = stream(seed, kind as u64);
    match kind {
        InstanceKind::Flow => {
            let graph = random_connected_graph(n, m, &mut rng)?;
            let g = gaussian(m, &mut rng);
            let r = (0..m).map(|_| profile.sample(&mut rng)).collect();
            let s = (0..m).map(|_| profile.sample(&mut rng)).collect();
            let mut demands = vec![0.0; n];
            demands[0] = 1.0;
            demands[n - 1] = -1.0;
            if n > 2 {
                let noise = gaussian(n, &mut rng);
                let mean = noise.iter().sum::<f64>() / n as f64;
                demands.iter_mut().zip(&noise).for_each(|(d, z)| *d += z - mean);
            }
            Ok(InstanceFile::Flow { instance: FlowInstance::new(graph, g, r, s, p)?, demands })
        }
        InstanceKind::Voltage => {
            let graph = random_connected_graph(n, m, &mut rng)?;
            let w = (0..m).map(|_| profile.sample(&mut rng)).collect();
            let s = (0..m).map(|_| profile.sample(&mut rng)).collect();
            let mut d = gaussian(n, &mut rng);
            let mean = d.iter().sum::<f64>() / n as f64;
            d.iter_mut().for_each(|v| *v -= mean);
            Ok(InstanceFile::Voltage { instance: VoltageInstance::new(graph, w, s, d, p)? })
        }
        InstanceKind::Matrix => {
            if n == 0 || m == 0 {
                return Err(Error::InvalidInput("matrix instances need n, m ≥ 1".into()));
            }
            let d = (n / 5).max(1);
            let a = gaussian_matrix(d, n, &mut rng);
            let xh = gaussian(n, &mut rng);
            let c = a.apply(&xh);
            let mm = gaussian_matrix(m, n, &mut rng);
            let nn = gaussian_matrix(m, n, &mut rng);
            let b = gaussian(n, &mut rng);
            let prob = PNormProblem::new(a, c, mm, nn, b, p)?;
            Ok(InstanceFile::Matrix { problem: (&prob).into() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_flow() {
        let f = generate_instance(InstanceKind::Flow, 2, 1, 4.0, 3, WeightProfile::default()).unwrap();
        let InstanceFile::Flow { instance, demands } = f else { panic!() };
        assert_eq!(instance.graph.edge_count(), 1);
        assert_eq!(demands, vec![1.0, -1.0]);
    }

    #[test]
    fn deterministic_and_connected() {
        for kind in [InstanceKind::Flow, InstanceKind::Voltage, InstanceKind::Matrix] {
            let a = serde_json::to_string(&generate_instance(kind, 12, 30, 4.0, 9, WeightProfile::default()).unwrap()).unwrap();
            let b = serde_json::to_string(&generate_instance(kind, 12, 30, 4.0, 9, WeightProfile::default()).unwrap()).unwrap();
            assert_eq!(a, b);
            let back: InstanceFile = serde_json::from_str(&a).unwrap();
            assert!(back.to_problem().is_ok());
        }
        let g = random_connected_graph(50, 300, &mut stream(1, 1)).unwrap();
        assert_eq!(g.components().1, 1);
        assert!(random_connected_graph(5, 3, &mut stream(1, 1)).is_err());
    }

    #[test]
    fn profile_parsing() {
        assert_eq!("0.5:2".parse::<WeightProfile>().unwrap(), WeightProfile { lo: 0.5, hi: 2.0 });
        assert!("2:1".parse::<WeightProfile>().is_err());
    }
}
