//! Command-line surface: import, validate, solve, relax, rasterize, check
//! and simulate, emitting JSON/CSV reports.
//!
//! Exit codes: 0 success, 2 problem infeasible, 3 parse/validation/usage
//! error, 4 solver failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use sinopf::algorithm::{
    initial_point, simulate_measurements, solve_opf, AlgorithmConfig, AlgorithmError,
    MeasurementSet, Objective,
};
use sinopf::baseline::{
    default_fixed_values, grid_oracle, raster_region, socp_relaxation, BaselineError, RasterMode,
};
use sinopf::report::{trace_csv, SolveReport};
use sinopf::restriction::{base_points, base_points_from_json, base_points_to_json};
use sinopf::solver::SolverConfig;
use sinopf::{check_original_feasibility, import_matpower, parse_case, serialize_case, NetworkCase};

#[derive(Parser)]
#[command(name = "sinopf", version, about = "Optimal power flow on radial networks with a feasibility-preserving convex restriction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Loss,
    Cost,
    Estimate,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RasterSet {
    Original,
    Restricted,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Check a case file against all model invariants.
    Validate {
        #[arg(long)]
        case: PathBuf,
    },
    /// Convert a MATPOWER .m case into the native case JSON.
    Import {
        #[arg(long)]
        matpower: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the iterative restriction algorithm.
    Solve {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        /// Measurement JSON (required for --objective estimate).
        #[arg(long)]
        measurements: Option<PathBuf>,
        /// Stopping threshold on the squared objective change.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long = "max-iter")]
        max_iter: Option<usize>,
        /// "auto" or a JSON file holding a starting point.
        #[arg(long, default_value = "auto")]
        init: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-iteration CSV trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Optional base-points audit JSON (projections of the final point;
        /// feeds `raster --base-from`).
        #[arg(long = "base-points")]
        base_points_out: Option<PathBuf>,
    },
    /// Solve the cone relaxation (outer bound).
    Relax {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize feasible regions over two selected edges.
    Raster {
        #[arg(long)]
        case: PathBuf,
        /// Two comma-separated edge indices, e.g. "0,1".
        #[arg(long)]
        edges: String,
        #[arg(long)]
        resolution: usize,
        #[arg(long = "set", value_enum)]
        set: RasterSet,
        /// Base points JSON for the restricted set (defaults to projecting
        /// an automatically found strictly feasible point).
        #[arg(long = "base-from")]
        base_from: Option<PathBuf>,
        /// Pin an unselected edge, e.g. --fix 2=0.1 (repeatable).
        #[arg(long = "fix")]
        fix: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a point against the original constraints.
    Check {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        point: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Sample noisy measurements at an operating point.
    Simulate {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        point: PathBuf,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Brute-force grid scan (networks with at most 3 edges).
    Oracle {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        #[arg(long, default_value_t = 1001)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Program outcome carrying the process exit code.
enum Failure {
    /// Exit 2: the optimization problem itself is infeasible.
    Infeasible(String),
    /// Exit 3: unreadable/invalid input or bad usage.
    Invalid(String),
    /// Exit 4: numerical failure inside a solve.
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Infeasible(_) => 2,
            Failure::Invalid(_) => 3,
            Failure::Solver(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Infeasible(m) | Failure::Invalid(m) | Failure::Solver(m) => m,
        }
    }
}

impl From<AlgorithmError> for Failure {
    fn from(e: AlgorithmError) -> Self {
        match e {
            AlgorithmError::Infeasible { .. } => Failure::Infeasible(format!("infeasible: {e}")),
            AlgorithmError::NotStrictlyFeasible(_) | AlgorithmError::InvalidObjective(_) => {
                Failure::Invalid(e.to_string())
            }
            other => Failure::Solver(other.to_string()),
        }
    }
}

impl From<BaselineError> for Failure {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Infeasible { .. } => Failure::Infeasible(format!("infeasible: {e}")),
            BaselineError::TooLarge { .. }
            | BaselineError::BadResolution(_)
            | BaselineError::NonconvexObjective => Failure::Invalid(e.to_string()),
            other => Failure::Solver(other.to_string()),
        }
    }
}

fn read_file(path: &PathBuf) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &PathBuf, content: &str) -> Result<(), Failure> {
    fs::write(path, content)
        .map_err(|e| Failure::Invalid(format!("cannot write {}: {e}", path.display())))
}

fn load_case(path: &PathBuf) -> Result<NetworkCase, Failure> {
    let case =
        parse_case(&read_file(path)?).map_err(|e| Failure::Invalid(e.to_string()))?;
    let report = case.validate();
    if !report.ok {
        let first = &report.violations[0];
        return Err(Failure::Invalid(format!(
            "case invalid: {} ({}, {})",
            first.rule, first.element, first.message
        )));
    }
    Ok(case)
}

/// Accepts an operating-point JSON ({"z": [...], ...}), an object with a
/// bare "z" array, or a plain array.
fn load_point(path: &PathBuf, case: &NetworkCase) -> Result<Vec<f64>, Failure> {
    let value: Value = serde_json::from_str(&read_file(path)?)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let z = match &value {
        Value::Array(_) => value.clone(),
        Value::Object(map) => map
            .get("z")
            .cloned()
            .ok_or_else(|| Failure::Invalid(format!("{}: missing \"z\"", path.display())))?,
        _ => return Err(Failure::Invalid(format!("{}: expected array or object", path.display()))),
    };
    let z: Vec<f64> = serde_json::from_value(z)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    if z.len() != case.edge_count() {
        return Err(Failure::Invalid(format!(
            "point has {} entries for {} edges",
            z.len(),
            case.edge_count()
        )));
    }
    Ok(z)
}

fn objective_for(
    arg: ObjectiveArg,
    case: &NetworkCase,
    measurements: &Option<PathBuf>,
) -> Result<Objective, Failure> {
    match arg {
        ObjectiveArg::Loss => Ok(Objective::Loss),
        ObjectiveArg::Cost => Objective::cost_from_case(case).map_err(Failure::from),
        ObjectiveArg::Estimate => {
            let path = measurements.as_ref().ok_or_else(|| {
                Failure::Invalid("--objective estimate requires --measurements".into())
            })?;
            let m: MeasurementSet = serde_json::from_str(&read_file(path)?)
                .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            Ok(Objective::state_estimation(m))
        }
    }
}

fn objective_name(arg: ObjectiveArg) -> &'static str {
    match arg {
        ObjectiveArg::Loss => "loss",
        ObjectiveArg::Cost => "cost",
        ObjectiveArg::Estimate => "estimate",
    }
}

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Validate { case } => {
            let parsed = parse_case(&read_file(&case)?)
                .map_err(|e| Failure::Invalid(e.to_string()))?;
            let report = parsed.validate();
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if report.ok {
                Ok(format!(
                    "ok: {} buses, {} edges",
                    parsed.bus_count(),
                    parsed.edge_count()
                ))
            } else {
                for v in &report.violations {
                    eprintln!("violation: {} ({}): {}", v.rule, v.element, v.message);
                }
                Err(Failure::Invalid(format!(
                    "case invalid: {} violations",
                    report.violations.len()
                )))
            }
        }

        Command::Import { matpower, out } => {
            let (case, report) = import_matpower(&read_file(&matpower)?)
                .map_err(|e| Failure::Invalid(e.to_string()))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if !report.ok {
                for v in &report.violations {
                    eprintln!("violation: {} ({}): {}", v.rule, v.element, v.message);
                }
                return Err(Failure::Invalid(format!(
                    "imported case invalid: {} violations",
                    report.violations.len()
                )));
            }
            write_file(&out, &serialize_case(&case))?;
            Ok(format!(
                "imported {} buses, {} edges ({} warnings) -> {}",
                case.bus_count(),
                case.edge_count(),
                report.warnings.len(),
                out.display()
            ))
        }

        Command::Solve {
            case,
            objective,
            measurements,
            eps,
            max_iter,
            init,
            out,
            trace,
            base_points_out,
        } => {
            let network = load_case(&case)?;
            let obj = objective_for(objective, &network, &measurements)?;
            let mut config = AlgorithmConfig::default();
            if let Some(e) = eps {
                config.eps = e;
            }
            if let Some(k) = max_iter {
                config.max_outer = k;
            }
            let z0 = if init == "auto" {
                match initial_point(&network, &config) {
                    Ok(z) => z,
                    Err(AlgorithmError::Infeasible { best_violation }) => {
                        let doc = serde_json::json!({
                            "status": "infeasible",
                            "best_violation": best_violation,
                            "config": config,
                        });
                        write_file(&out, &serde_json::to_string_pretty(&doc).unwrap())?;
                        return Err(Failure::Infeasible("infeasible".into()));
                    }
                    Err(e) => return Err(e.into()),
                }
            } else {
                load_point(&PathBuf::from(&init), &network)?
            };
            let (trace_data, point) = solve_opf(&network, &obj, &z0, &config)?;
            let feas = check_original_feasibility(&network, &point.z.values, 1e-8)
                .map_err(|e| Failure::Solver(e.to_string()))?;
            if let Some(bp_path) = base_points_out {
                let bp = base_points(&network, &point.z.values, &SolverConfig::default())
                    .map_err(|e| Failure::Solver(e.to_string()))?;
                write_file(&bp_path, &base_points_to_json(&network, &bp))?;
            }
            let report = SolveReport::new(objective_name(objective), &config, &trace_data, point, feas);
            write_file(&out, &report.to_json())?;
            if let Some(trace_path) = trace {
                write_file(&trace_path, &trace_csv(&trace_data))?;
            }
            Ok(format!(
                "objective {:.9} after {} iterations, max violation {:.3e} -> {}",
                report.final_objective,
                report.iterations.len(),
                report.feasibility.max_violation,
                out.display()
            ))
        }

        Command::Relax { case, objective, out } => {
            if objective == ObjectiveArg::Estimate {
                return Err(Failure::Invalid(
                    "relaxation supports loss and cost objectives".into(),
                ));
            }
            let network = load_case(&case)?;
            let obj = objective_for(objective, &network, &None)?;
            let result = socp_relaxation(&network, &obj)?;
            write_file(&out, &serde_json::to_string_pretty(&result).unwrap())?;
            Ok(format!(
                "relaxation objective {:.9}, exactness gap {:.3e}{} -> {}",
                result.objective_value,
                result.exactness_gap,
                if result.recovered_z.is_some() {
                    " (exact, z recovered)"
                } else {
                    " (inexact)"
                },
                out.display()
            ))
        }

        Command::Raster {
            case,
            edges,
            resolution,
            set,
            base_from,
            fix,
            out,
        } => {
            let network = load_case(&case)?;
            let (a, b) = parse_edge_pair(&edges)?;
            let mut fixed = default_fixed_values(&network);
            for spec in &fix {
                let (k, v) = spec
                    .split_once('=')
                    .ok_or_else(|| Failure::Invalid(format!("--fix expects k=v, got {spec:?}")))?;
                let k: usize = k
                    .trim()
                    .parse()
                    .map_err(|_| Failure::Invalid(format!("bad edge index in --fix {spec:?}")))?;
                if k >= fixed.len() {
                    return Err(Failure::Invalid(format!("--fix edge {k} out of range")));
                }
                fixed[k] = v
                    .trim()
                    .parse()
                    .map_err(|_| Failure::Invalid(format!("bad value in --fix {spec:?}")))?;
            }
            let bp = match set {
                RasterSet::Original => None,
                RasterSet::Restricted | RasterSet::Both => {
                    Some(bp_from_source(&network, &base_from)?)
                }
            };
            let mode = match (set, &bp) {
                (RasterSet::Original, _) => RasterMode::Original,
                (RasterSet::Restricted, Some(bp)) => RasterMode::Restricted(bp),
                (RasterSet::Both, Some(bp)) => RasterMode::Both(bp),
                _ => unreachable!("base points exist for restricted modes"),
            };
            let grid = raster_region(&network, (a, b), resolution, mode, &fixed)?;
            write_file(&out, &grid.to_csv())?;
            Ok(format!(
                "wrote {} cells over edges ({a}, {b}) -> {}",
                grid.cells.len(),
                out.display()
            ))
        }

        Command::Check { case, point, tol } => {
            let network = load_case(&case)?;
            let z = load_point(&point, &network)?;
            let report = check_original_feasibility(&network, &z, tol)
                .map_err(|e| Failure::Invalid(e.to_string()))?;
            if report.feasible {
                Ok(format!(
                    "feasible: max violation {:.3e} (tol {:.1e})",
                    report.max_violation, tol
                ))
            } else {
                for (label, residual) in &report.violations {
                    eprintln!("violated: {label} by {residual:.6e}");
                }
                Err(Failure::Infeasible(format!(
                    "infeasible: max violation {:.6e} over tol {:.1e}",
                    report.max_violation, tol
                )))
            }
        }

        Command::Simulate {
            case,
            point,
            noise,
            seed,
            out,
        } => {
            let network = load_case(&case)?;
            let z = load_point(&point, &network)?;
            let m = simulate_measurements(&network, &z, noise, seed)?;
            write_file(&out, &serde_json::to_string_pretty(&m).unwrap())?;
            Ok(format!(
                "wrote {} measurements (sigma {noise}, seed {seed}) -> {}",
                m.p_hat.len() + m.q_hat.len(),
                out.display()
            ))
        }

        Command::Oracle {
            case,
            objective,
            resolution,
            out,
        } => {
            let network = load_case(&case)?;
            let obj = objective_for(objective, &network, &None)?;
            let result = grid_oracle(&network, &obj, resolution)?;
            if let Some(path) = out {
                write_file(&path, &serde_json::to_string_pretty(&result).unwrap())?;
            }
            Ok(format!(
                "oracle best {:.9} over {} feasible grid points",
                result.best_objective, result.feasible_count
            ))
        }
    }
}

fn parse_edge_pair(spec: &str) -> Result<(usize, usize), Failure> {
    let (a, b) = spec
        .split_once(',')
        .ok_or_else(|| Failure::Invalid(format!("--edges expects i,j, got {spec:?}")))?;
    let a = a
        .trim()
        .parse()
        .map_err(|_| Failure::Invalid(format!("bad edge index {a:?}")))?;
    let b = b
        .trim()
        .parse()
        .map_err(|_| Failure::Invalid(format!("bad edge index {b:?}")))?;
    Ok((a, b))
}

fn bp_from_source(
    network: &NetworkCase,
    base_from: &Option<PathBuf>,
) -> Result<sinopf::restriction::BasePoints, Failure> {
    match base_from {
        Some(path) => base_points_from_json(network, &read_file(path)?)
            .map_err(|e| Failure::Invalid(e.to_string())),
        None => {
            let config = AlgorithmConfig::default();
            let z0 = initial_point(network, &config)?;
            base_points(network, &z0, &SolverConfig::default())
                .map_err(|e| Failure::Solver(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit 2; usage errors are exit 3 here.
            let _ = e.print();
            return ExitCode::from(3);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(failure) => {
            println!("{}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
