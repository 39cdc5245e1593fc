use serde::Serialize;

use pnorm::driver::{ModuleTimings, SolveConfig, SolveReport, Termination};
use pnorm::generate::{InstanceFile, InstanceKind};
use pnorm::mwu::{InvariantViolations, TraceRecord};
use pnorm::PNormProblem;

use crate::error::CliResult;

#[derive(Debug, Clone, Serialize)]
pub struct InstanceDescriptor {
    pub kind: InstanceKind,
    pub path: Option<String>,
    pub vertices: Option<usize>,
    pub variables: usize,
    pub constraints: usize,
    pub quad_rows: usize,
    pub pow_rows: usize,
    pub p: f64,
}

impl InstanceDescriptor {
    pub fn new(file: &InstanceFile, prob: &PNormProblem, path: Option<String>) -> Self {
        let vertices = match file {
            InstanceFile::Flow { instance, .. } => Some(instance.graph.vertex_count()),
            InstanceFile::Voltage { instance } => Some(instance.graph.vertex_count()),
            InstanceFile::Matrix { .. } => None,
        };
        InstanceDescriptor {
            kind: file.kind(),
            path,
            vertices,
            variables: prob.dim(),
            constraints: prob.a.rows(),
            quad_rows: prob.m.rows(),
            pow_rows: prob.n.rows(),
            p: prob.p,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub instance: InstanceDescriptor,
    pub config: SolveConfig,
    pub seed: u64,
    pub final_objective: f64,
    pub initial_objective: f64,
    pub oracle_objective: Option<f64>,
    pub relative_gap: Option<f64>,
    pub termination: Termination,
    pub outer_iterations: usize,
    pub total_oracle_calls: usize,
    /// `8·p·log₂(κ₀m/ε)·|ν schedule|`, compared with `outer_iterations`.
    pub iteration_bound: f64,
    pub descent_violations: usize,
    pub mwu_violations: InvariantViolations,
    pub timings: ModuleTimings,
    pub solve: SolveReport,
}

impl RunReport {
    pub fn within_iteration_bound(&self) -> bool {
        self.outer_iterations as f64 <= self.iteration_bound
    }
}

/// MWU trace rows, floats with 17 significant digits.
pub fn write_trace<W: std::io::Write>(out: W, trace: &[TraceRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step_index", "kind", "phi", "psi", "np_energy", "quad_energy", "wallclock_ns"])?;
    for r in trace {
        let kind = match r.kind {
            pnorm::mwu::StepKind::Flow => "flow",
            pnorm::mwu::StepKind::Width => "width",
        };
        w.write_record([
            r.step_index.to_string(),
            kind.to_string(),
            format!("{:.16e}", r.phi),
            format!("{:.16e}", r.psi),
            format!("{:.16e}", r.np_energy),
            format!("{:.16e}", r.quad_energy),
            r.wallclock_ns.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
