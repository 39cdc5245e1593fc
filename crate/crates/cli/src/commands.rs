use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use pnorm::driver::{solve_pnorm, SolveConfig, SparsifierKind};
use pnorm::generate::{generate_instance, InstanceFile, InstanceKind, WeightProfile};
use pnorm::oracle::{newton_oracle, NewtonOptions};

use crate::error::{CliError, CliResult};
use crate::harness::relative_gap;
use crate::report::{write_trace, InstanceDescriptor, RunReport};
use crate::suite::{flow_checks, lewis_checks, mwu_check, structural_checks, voltage_checks, Check, CheckList};

pub fn load_instance(path: &Path) -> CliResult<InstanceFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pretty JSON with a trailing newline, to `path` or stdout.
pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Applies `k=v,...` overrides to a solver config.
pub fn apply_constants(cfg: &mut SolveConfig, spec: &str) -> CliResult<()> {
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| CliError::Invalid(format!("constant {item:?} is not k=v")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = || v.parse::<f64>().map_err(|_| CliError::Invalid(format!("constant {k}: {v:?} is not a number")));
        let flag = || v.parse::<bool>().map_err(|_| CliError::Invalid(format!("constant {k}: {v:?} is not true/false")));
        match k {
            "alpha" => cfg.mwu.alpha = num()?,
            "beta" => cfg.mwu.beta = num()?,
            "rho" => cfg.mwu.rho = num()?,
            "tau" => cfg.mwu.tau = num()?,
            "kappa0" => cfg.kappa0 = Some(num()?),
            "decision_b" => cfg.decision_b = num()?,
            "spectral_c" => cfg.spectral_c = num()?,
            "lewis_c" => cfg.lewis_c = num()?,
            "delta" => cfg.delta = num()?,
            "max_outer" => {
                let n = num()?;
                if !(n >= 1.0 && n.fract() == 0.0) {
                    return Err(CliError::Invalid(format!("max_outer must be a positive integer, got {v}")));
                }
                cfg.max_outer = n as usize;
            }
            "line_search" => cfg.line_search = flag()?,
            "homotopy" => cfg.homotopy = flag()?,
            other => return Err(CliError::Invalid(format!("unknown constant {other:?}"))),
        }
    }
    let m = &cfg.mwu;
    if [m.alpha, m.beta, m.rho, m.tau, cfg.spectral_c, cfg.lewis_c].iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(CliError::Invalid("constants must be positive and finite".into()));
    }
    cfg.validate()?;
    Ok(())
}

pub struct GenerateArgs {
    pub kind: InstanceKind,
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub seed: u64,
    pub weights: WeightProfile,
    pub output: Option<PathBuf>,
}

pub fn run_generate(args: &GenerateArgs) -> CliResult<()> {
    let file = generate_instance(args.kind, args.n, args.m, args.p, args.seed, args.weights)?;
    write_json(args.output.as_deref(), &file)
}

pub struct SolveArgs {
    pub input: PathBuf,
    pub p: Option<f64>,
    pub config: SolveConfig,
    pub oracle: bool,
    pub trace: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Solves `file` and, when asked, measures the gap against the Newton oracle.
pub fn solve_file(file: &InstanceFile, path: Option<String>, cfg: &SolveConfig, oracle: bool) -> CliResult<(Vec<f64>, RunReport)> {
    let prob = file.to_problem()?;
    prob.check_well_posed(1e-9)?;
    let (x, rep) = solve_pnorm(&prob, cfg)?;
    let oracle_objective = if oracle { Some(newton_oracle(&prob, &NewtonOptions::default())?.f) } else { None };
    let f = rep.final_objective();
    let f0 = rep.main.initial_objective;
    let report = RunReport {
        instance: InstanceDescriptor::new(file, &prob, path),
        config: cfg.clone(),
        seed: cfg.seed,
        final_objective: f,
        initial_objective: f0,
        oracle_objective,
        relative_gap: oracle_objective.map(|fs| relative_gap(f, fs, f0)),
        termination: rep.main.termination,
        outer_iterations: rep.main.outer_iterations,
        total_oracle_calls: rep.total_oracle_calls,
        iteration_bound: rep.iteration_bound,
        descent_violations: rep.descent_violations(),
        mwu_violations: rep.mwu_violations,
        timings: rep.timings,
        solve: rep,
    };
    Ok((x, report))
}

pub fn run_solve(args: &SolveArgs) -> CliResult<()> {
    let mut file = load_instance(&args.input)?;
    if let Some(p) = args.p {
        file = file.with_p(p);
    }
    let (_, report) = solve_file(&file, Some(args.input.display().to_string()), &args.config, args.oracle)?;
    write_json(args.output.as_deref(), &report)?;
    if let Some(path) = &args.trace {
        write_trace(fs::File::create(path)?, &report.solve.mwu_trace)?;
    }
    if report.descent_violations > 0 {
        return Err(CliError::Violation(format!("{} refinement steps broke the descent inequality", report.descent_violations)));
    }
    if let Some(gap) = report.relative_gap {
        if gap > args.config.epsilon {
            return Err(CliError::Violation(format!("relative gap {gap:e} exceeds epsilon {:e}", args.config.epsilon)));
        }
    }
    Ok(())
}

pub struct SparsifyArgs {
    pub input: PathBuf,
    pub kind: SparsifierKind,
    pub flow: bool,
    pub p: Option<f64>,
    pub config: SolveConfig,
    pub samples: usize,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct SparsifyReport {
    pub sparsifier: String,
    pub seed: u64,
    pub metrics: serde_json::Value,
    pub checks: CheckList,
}

pub fn sparsify_file(file: &InstanceFile, kind: SparsifierKind, flow: bool, cfg: &SolveConfig, samples: usize) -> CliResult<SparsifyReport> {
    let seed = cfg.seed;
    let (name, (metrics, checks)) = match (flow, kind, file) {
        (true, _, InstanceFile::Flow { instance, demands }) => ("flow", flow_checks(instance, demands, samples, seed)?),
        (true, _, _) => return Err(CliError::Invalid("the flow pipeline needs a flow instance".into())),
        (false, SparsifierKind::Voltage, InstanceFile::Voltage { instance }) => {
            ("voltage", voltage_checks(instance, cfg.delta, cfg.spectral_c, samples, seed)?)
        }
        (false, SparsifierKind::Voltage, _) => return Err(CliError::Invalid("the voltage sparsifier needs a voltage instance".into())),
        (false, SparsifierKind::Lewis, _) => ("lewis", lewis_checks(&file.to_problem()?, cfg.lewis_c, samples, seed)?),
        (false, SparsifierKind::Identity, _) => {
            let prob = file.to_problem()?;
            ("identity", (json!({ "rows": [prob.m.rows(), prob.n.rows()], "variables": prob.dim() }), Vec::new()))
        }
    };
    Ok(SparsifyReport { sparsifier: name.into(), seed, metrics, checks: CheckList::new(checks) })
}

pub fn run_sparsify(args: &SparsifyArgs) -> CliResult<()> {
    let mut file = load_instance(&args.input)?;
    if let Some(p) = args.p {
        file = file.with_p(p);
    }
    let report = sparsify_file(&file, args.kind, args.flow, &args.config, args.samples)?;
    write_json(args.output.as_deref(), &report)?;
    fail_on(&report.checks)
}

pub struct ValidateArgs {
    pub input: PathBuf,
    pub p: Option<f64>,
    pub config: SolveConfig,
    pub oracle: bool,
    pub samples: usize,
    pub output: Option<PathBuf>,
}

/// Runs the full invariant suite on one instance.
pub fn validate_file(file: &InstanceFile, cfg: &SolveConfig, oracle: bool, samples: usize) -> CliResult<CheckList> {
    let prob = file.to_problem()?;
    let mut checks = vec![Check::required("well_posed", true, json!({ "variables": prob.dim(), "constraints": prob.a.rows() }))];
    let (x, run) = solve_file(file, None, cfg, oracle)?;
    checks.push(Check::required("feasible", prob.is_feasible(&x, 1e-8), json!({ "termination": run.termination })));
    checks.push(Check::required("descent", run.descent_violations == 0, json!({ "violations": run.descent_violations })));
    checks.push(Check::required(
        "iteration_bound",
        run.within_iteration_bound(),
        json!({ "outer_iterations": run.outer_iterations, "bound": run.iteration_bound }),
    ));
    if let Some(gap) = run.relative_gap {
        checks.push(Check::required(
            "oracle_gap",
            gap <= cfg.epsilon,
            json!({ "gap": gap, "objective": run.final_objective, "oracle": run.oracle_objective }),
        ));
    }
    checks.extend(mwu_check(&prob, cfg.mwu)?);
    checks.extend(structural_checks(file, samples, cfg.seed)?);
    Ok(CheckList::new(checks))
}

pub fn run_validate(args: &ValidateArgs) -> CliResult<()> {
    let mut file = load_instance(&args.input)?;
    if let Some(p) = args.p {
        file = file.with_p(p);
    }
    let list = validate_file(&file, &args.config, args.oracle, args.samples)?;
    write_json(args.output.as_deref(), &list)?;
    fail_on(&list)
}

fn fail_on(list: &CheckList) -> CliResult<()> {
    if list.passed {
        Ok(())
    } else {
        Err(CliError::Violation(format!("failed checks: {}", list.failures().join(", "))))
    }
}
