//! The outer loop: objective catalog, initial-point acquisition, and the
//! iterate-project-linearize-solve procedure with full tracing.
//!
//! Each outer iteration projects the current feasible point onto every
//! nonempty lower-bound sublevel set, linearizes there, solves the resulting
//! convex restriction, and adopts the solution as the next anchor. Every
//! accepted iterate is verified against the original constraints, so the
//! trace is feasible throughout.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NetworkCase;
use crate::restriction::{self, BasePoints, RestrictionError};
use crate::solver::{self, ObjectiveFn, Phase1Outcome, SolverConfig, SolverError};
use crate::transform::{
    self, injection_jacobian, injections, InjectionKind, OperatingPoint, TransformError,
    DOMAIN_MARGIN,
};

#[derive(Debug, Error)]
pub enum AlgorithmError {
    #[error("initial point is not strictly feasible ({0})")]
    NotStrictlyFeasible(String),
    #[error("no strictly feasible point found (best max violation {best_violation:.6e})")]
    Infeasible { best_violation: f64 },
    #[error("iterate {iteration} failed the original-feasibility check (max violation {max_violation:.3e}); this indicates a bug in the restriction")]
    FeasibilityRegression {
        iteration: usize,
        max_violation: f64,
    },
    #[error("objective rejected: {0}")]
    InvalidObjective(String),
    #[error("solver failed at outer iteration {iteration}: {source}")]
    Solver {
        iteration: usize,
        source: SolverError,
    },
    #[error(transparent)]
    Restriction(#[from] RestrictionError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Measured nodal injections for state estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub p_hat: Vec<f64>,
    pub q_hat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Objective catalog. Linear cost coefficients must be nonnegative, which
/// keeps the composed objective convex in the transformed coordinates.
#[derive(Debug, Clone)]
pub enum Objective {
    /// Total active power loss: sum of all nodal active injections.
    Loss,
    /// Nonnegative linear generation cost over active injections.
    LinearCost(Vec<f64>),
    /// Least-squares match to measured injections (nonconvex but smooth).
    StateEstimation(MeasurementSet),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convexity {
    Convex,
    NonconvexSmooth,
}

impl Objective {
    pub fn linear_cost(coeffs: Vec<f64>) -> Result<Self, AlgorithmError> {
        if let Some(c) = coeffs.iter().find(|c| !(**c >= 0.0)) {
            return Err(AlgorithmError::InvalidObjective(format!(
                "linear cost coefficient {c} is negative"
            )));
        }
        Ok(Objective::LinearCost(coeffs))
    }

    /// Cost objective using the per-bus `cost_coeff` fields of a case.
    pub fn cost_from_case(case: &NetworkCase) -> Result<Self, AlgorithmError> {
        Self::linear_cost(case.buses.iter().map(|b| b.cost_coeff).collect())
    }

    pub fn state_estimation(m: MeasurementSet) -> Self {
        Objective::StateEstimation(m)
    }

    /// Solver callbacks over the edge variables.
    pub fn build(&self, case: &NetworkCase) -> Result<Box<dyn ObjectiveFn>, AlgorithmError> {
        match self {
            Objective::Loss => Ok(Box::new(SeparableEdgeObjective::loss(case))),
            Objective::LinearCost(c) => {
                if c.len() != case.bus_count() {
                    return Err(AlgorithmError::InvalidObjective(format!(
                        "{} cost coefficients for {} buses",
                        c.len(),
                        case.bus_count()
                    )));
                }
                if let Some(bad) = c.iter().find(|v| !(**v >= 0.0)) {
                    return Err(AlgorithmError::InvalidObjective(format!(
                        "linear cost coefficient {bad} is negative"
                    )));
                }
                Ok(Box::new(SeparableEdgeObjective::cost(case, c)))
            }
            Objective::StateEstimation(m) => {
                if m.p_hat.len() != case.bus_count() || m.q_hat.len() != case.bus_count() {
                    return Err(AlgorithmError::InvalidObjective(format!(
                        "measurement vectors ({}, {}) do not match {} buses",
                        m.p_hat.len(),
                        m.q_hat.len(),
                        case.bus_count()
                    )));
                }
                Ok(Box::new(EstimationObjective {
                    case: case.clone(),
                    p_hat: m.p_hat.clone(),
                    q_hat: m.q_hat.clone(),
                }))
            }
        }
    }

    /// Exact objective value at a point (no surrogates involved).
    pub fn exact_value(&self, case: &NetworkCase, z: &[f64]) -> Result<f64, AlgorithmError> {
        Ok(self.build(case)?.value(z))
    }
}

/// Loss and generation cost collapse to one convex term per edge:
/// `a (1 - sqrt(1 - z^2)) + d z` with `a >= 0`.
struct SeparableEdgeObjective {
    curve: Vec<f64>,  // a_e
    linear: Vec<f64>, // d_e
}

impl SeparableEdgeObjective {
    fn loss(case: &NetworkCase) -> Self {
        // sum_i p_i: the sine terms cancel across the two endpoints, the
        // loss term 2 g (1 - c) survives.
        SeparableEdgeObjective {
            curve: case.edges.iter().map(|e| 2.0 * e.g).collect(),
            linear: vec![0.0; case.edge_count()],
        }
    }

    fn cost(case: &NetworkCase, coeffs: &[f64]) -> Self {
        let mut curve = vec![0.0; case.edge_count()];
        let mut linear = vec![0.0; case.edge_count()];
        for (e, edge) in case.edges.iter().enumerate() {
            let ct = case.bus_index(edge.from).map_or(0.0, |i| coeffs[i]);
            let ch = case.bus_index(edge.to).map_or(0.0, |i| coeffs[i]);
            curve[e] = (ct + ch) * edge.g;
            linear[e] = (ct - ch) * edge.b;
        }
        SeparableEdgeObjective { curve, linear }
    }
}

impl ObjectiveFn for SeparableEdgeObjective {
    fn value(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (e, &z) in x.iter().enumerate() {
            if z.abs() >= 1.0 - DOMAIN_MARGIN {
                return f64::INFINITY;
            }
            total += self.curve[e] * (1.0 - (1.0 - z * z).sqrt()) + self.linear[e] * z;
        }
        total
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (e, &z) in x.iter().enumerate() {
            out[e] = self.curve[e] * z / (1.0 - z * z).sqrt() + self.linear[e];
        }
    }
    fn hessian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for (e, &z) in x.iter().enumerate() {
            let c = (1.0 - z * z).sqrt();
            out[(e, e)] = self.curve[e] / (c * c * c);
        }
    }
}

/// Sum of squared measurement residuals with a Gauss-Newton Hessian
/// surrogate `2 J^T J` (positive semidefinite by construction).
struct EstimationObjective {
    case: NetworkCase,
    p_hat: Vec<f64>,
    q_hat: Vec<f64>,
}

impl EstimationObjective {
    fn residuals(&self, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let (p, q) = injections(&self.case, x).ok()?;
        let rp: Vec<f64> = p.iter().zip(&self.p_hat).map(|(a, b)| a - b).collect();
        let rq: Vec<f64> = q.iter().zip(&self.q_hat).map(|(a, b)| a - b).collect();
        Some((rp, rq))
    }
}

impl ObjectiveFn for EstimationObjective {
    fn value(&self, x: &[f64]) -> f64 {
        if x.iter().any(|z| z.abs() >= 1.0 - DOMAIN_MARGIN) {
            return f64::INFINITY;
        }
        match self.residuals(x) {
            Some((rp, rq)) => {
                rp.iter().map(|r| r * r).sum::<f64>() + rq.iter().map(|r| r * r).sum::<f64>()
            }
            None => f64::INFINITY,
        }
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let (rp, rq) = self.residuals(x).expect("gradient queried in domain");
        let jac = injection_jacobian(&self.case, x).expect("gradient queried in domain");
        let n = self.case.bus_count();
        for e in 0..x.len() {
            let mut g = 0.0;
            for i in 0..n {
                g += jac[(i, e)] * rp[i] + jac[(n + i, e)] * rq[i];
            }
            out[e] = 2.0 * g;
        }
    }
    fn hessian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let jac = injection_jacobian(&self.case, x).expect("hessian queried in domain");
        let e = x.len();
        out.fill(0.0);
        for a in 0..e {
            for b in 0..e {
                let mut s = 0.0;
                for r in 0..jac.nrows() {
                    s += jac[(r, a)] * jac[(r, b)];
                }
                out[(a, b)] = 2.0 * s;
            }
        }
    }
}

/// Lemma-style classification: nonnegative linear combinations of the convex
/// injections stay convex; the least-squares objective is not monotone in
/// the injections and loses convexity.
pub fn classify_objective(obj: &Objective) -> Convexity {
    match obj {
        Objective::Loss => Convexity::Convex,
        Objective::LinearCost(_) => Convexity::Convex,
        Objective::StateEstimation(_) => Convexity::NonconvexSmooth,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    /// Stop when the squared change of the objective falls below this.
    pub eps: f64,
    /// Maximum number of outer iterations.
    pub max_outer: usize,
    pub solver: SolverConfig,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            eps: 1e-8,
            max_outer: 50,
            solver: SolverConfig::default(),
        }
    }
}

/// One accepted outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRow {
    pub k: usize,
    pub objective: f64,
    pub iterate: Vec<f64>,
    /// Worst original-constraint residual at the iterate (<= 0 feasible).
    pub max_violation: f64,
    /// |f(z_tilde) - bound| per projected constraint, keyed by bus id.
    pub projection_residuals: Vec<(u32, InjectionKind, f64)>,
    pub newton_iters: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IterationTrace {
    pub rows: Vec<IterationRow>,
}

fn strictness_margin(case: &NetworkCase, z: &[f64]) -> Result<f64, TransformError> {
    let m = transform::feasibility_margins(case, z)?;
    if m.pinned_mismatch > crate::PIN_TOL {
        return Ok(m.pinned_mismatch);
    }
    Ok(m.injection_violation.max(m.box_violation))
}

/// Clamp a guess into the z box, preferring zero when it is interior.
fn boxed_guess(case: &NetworkCase) -> Vec<f64> {
    case.z_bounds()
        .iter()
        .map(|&(lo, hi)| {
            if hi - lo <= crate::PIN_TOL {
                0.5 * (lo + hi)
            } else if lo + 1e-6 < 0.0 && hi - 1e-6 > 0.0 {
                0.0
            } else {
                0.5 * (lo + hi)
            }
        })
        .collect()
}

/// Strictly feasible starting point.
///
/// Tries z = 0 first; otherwise runs a restricted phase-1 loop: linearize the
/// lower bounds at boundary points derived from the current guess, minimize
/// the common constraint slack, and relinearize at the result (at most five
/// rounds). Returns `Infeasible` with the best achieved violation if no
/// strictly feasible point is found.
pub fn initial_point(case: &NetworkCase, config: &AlgorithmConfig) -> Result<Vec<f64>, AlgorithmError> {
    let zero = vec![0.0; case.edge_count()];
    if strictness_margin(case, &zero)? <= -1e-9 {
        return Ok(zero);
    }

    // Analytic unreachability: a finite bound outside the range of the
    // injection over the box can never be satisfied.
    for bus in 0..case.bus_count() {
        for kind in [InjectionKind::Active, InjectionKind::Reactive] {
            let (lo, hi) = transform::injection_range_over_box(case, bus, kind);
            let lower = restriction::lower_bound(case, bus, kind);
            let upper = restriction::upper_bound(case, bus, kind);
            if lower.is_finite() && lower > hi {
                return Err(AlgorithmError::Infeasible {
                    best_violation: lower - hi,
                });
            }
            if upper.is_finite() && upper < lo {
                return Err(AlgorithmError::Infeasible {
                    best_violation: lo - upper,
                });
            }
        }
    }

    let mut guess = boxed_guess(case);
    let mut best_violation = f64::INFINITY;
    for _round in 0..5 {
        let bp = restriction::base_points_lenient(case, &guess, &config.solver)?;
        let hps = restriction::hyperplanes(case, &bp)?;
        let cs = restriction::restricted_constraints(case, &hps);
        let outcome = solver::phase1(&cs, &guess, &config.solver)
            .map_err(|source| AlgorithmError::Solver { iteration: 0, source })?;
        let candidate = match outcome {
            Phase1Outcome::Feasible(x) => x,
            Phase1Outcome::Infeasible { best_point, .. } => best_point,
        };
        let margin = strictness_margin(case, &candidate)?;
        if margin <= -1e-9 {
            return Ok(candidate);
        }
        best_violation = best_violation.min(margin.max(0.0));
        guess = candidate;
    }
    Err(AlgorithmError::Infeasible { best_violation })
}

/// Runs the outer loop from a strictly feasible start.
///
/// Stops when `(c_k - c_{k-1})^2 <= eps` or after `max_outer` iterations;
/// every accepted iterate is re-verified against the original constraints at
/// tolerance 1e-8 and the loop aborts with `FeasibilityRegression` if that
/// ever fails.
pub fn solve_opf(
    case: &NetworkCase,
    objective: &Objective,
    z_init: &[f64],
    config: &AlgorithmConfig,
) -> Result<(IterationTrace, OperatingPoint), AlgorithmError> {
    if strictness_margin(case, z_init)? >= 0.0 {
        return Err(AlgorithmError::NotStrictlyFeasible(format!(
            "worst residual {:.3e}",
            strictness_margin(case, z_init)?
        )));
    }

    let mut trace = IterationTrace::default();
    let mut anchor = z_init.to_vec();
    let mut prev_objective: Option<f64> = None;

    for k in 0..config.max_outer {
        let started = Instant::now();
        let bp = restriction::base_points(case, &anchor, &config.solver)?;
        let projection_residuals = projection_residuals(case, &bp);
        let callbacks = objective.build(case)?;
        let problem = restriction::build_restricted(case, &bp, callbacks)?;
        let result = solver::solve(&problem.program, &anchor, &config.solver)
            .map_err(|source| AlgorithmError::Solver { iteration: k, source })?;

        let report = transform::check_original_feasibility(case, &result.x, 1e-8)?;
        if !report.feasible {
            return Err(AlgorithmError::FeasibilityRegression {
                iteration: k,
                max_violation: report.max_violation,
            });
        }

        let objective_value = result.objective_value;
        trace.rows.push(IterationRow {
            k,
            objective: objective_value,
            iterate: result.x.clone(),
            max_violation: report.max_violation,
            projection_residuals,
            newton_iters: result.newton_iterations,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        anchor = result.x;
        let stop = prev_objective
            .map(|prev| (objective_value - prev).powi(2) <= config.eps)
            .unwrap_or(false);
        prev_objective = Some(objective_value);
        if stop {
            break;
        }
    }

    let point = OperatingPoint::from_z(case, &anchor)?;
    Ok((trace, point))
}

fn projection_residuals(case: &NetworkCase, bp: &BasePoints) -> Vec<(u32, InjectionKind, f64)> {
    bp.points
        .iter()
        .map(|(&(bus, kind), zt)| {
            let f: f64 = transform::incident_edges(case, bus)
                .iter()
                .map(|ie| transform::edge_term(kind, ie.g, ie.b, ie.sigma, zt[ie.edge]))
                .sum();
            let bound = restriction::lower_bound(case, bus, kind);
            (case.buses[bus].id, kind, (f - bound).abs())
        })
        .collect()
}

/// Injections at `z_true` plus independent zero-mean Gaussian noise,
/// deterministic under the seed (active measurements sampled first, then
/// reactive, in bus order).
pub fn simulate_measurements(
    case: &NetworkCase,
    z_true: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<MeasurementSet, AlgorithmError> {
    let (mut p, mut q) = injections(case, z_true)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| {
            AlgorithmError::InvalidObjective(format!("invalid noise sigma: {e}"))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in p.iter_mut().chain(q.iter_mut()) {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(MeasurementSet {
        p_hat: p,
        q_hat: q,
        noise_sigma: Some(noise_sigma),
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use approx::assert_relative_eq;

    fn config() -> AlgorithmConfig {
        AlgorithmConfig::default()
    }

    #[test]
    fn classification_matches_catalog() {
        assert_eq!(classify_objective(&Objective::Loss), Convexity::Convex);
        let cost = Objective::linear_cost(vec![1.0, 0.0, 3.0]).unwrap();
        assert_eq!(classify_objective(&cost), Convexity::Convex);
        let m = MeasurementSet {
            p_hat: vec![0.0],
            q_hat: vec![0.0],
            noise_sigma: None,
            seed: None,
        };
        assert_eq!(
            classify_objective(&Objective::state_estimation(m)),
            Convexity::NonconvexSmooth
        );
        assert!(Objective::linear_cost(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn initial_point_returns_zero_when_interior() {
        let case = cases::three_bus_line();
        let z = initial_point(&case, &config()).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn initial_point_restores_feasibility() {
        let case = cases::two_bus(-0.5);
        let z = initial_point(&case, &config()).unwrap();
        let report = transform::check_original_feasibility(&case, &z, 0.0).unwrap();
        assert!(report.feasible, "violations: {:?}", report.violations);
        assert!(report.max_violation < 0.0);
        let (p, _) = injections(&case, &z).unwrap();
        assert!(p[1] < -0.5);
    }

    #[test]
    fn initial_point_detects_unreachable_bound() {
        // p_2 over the box bottoms out near -1.232, so p_max = -10 is
        // unreachable.
        let case = cases::two_bus(-10.0);
        let err = initial_point(&case, &config()).unwrap_err();
        assert!(matches!(err, AlgorithmError::Infeasible { .. }));
    }

    #[test]
    fn unconstrained_loss_converges_to_zero() {
        let case = cases::two_bus(f64::INFINITY);
        let z0 = initial_point(&case, &config()).unwrap();
        let (trace, point) = solve_opf(&case, &Objective::Loss, &z0, &config()).unwrap();
        let last = trace.rows.last().unwrap();
        assert!(last.objective.abs() < 1e-9);
        assert!(point.z.values[0].abs() < 1e-4);
    }

    #[test]
    fn two_bus_loss_matches_closed_form() {
        // Boundary condition 1.5 - 2z = sqrt(1 - z^2) gives
        // z* = (6 - sqrt(11)) / 10.
        let case = cases::two_bus(-0.5);
        let z0 = initial_point(&case, &config()).unwrap();
        let (trace, point) = solve_opf(&case, &Objective::Loss, &z0, &config()).unwrap();
        let z_star = (6.0 - 11f64.sqrt()) / 10.0;
        let loss_star = 2.0 * (1.0 - (1.0 - z_star * z_star).sqrt());
        let last = trace.rows.last().unwrap();
        assert!(
            (last.objective - loss_star).abs() < 1e-4,
            "objective {} vs {}",
            last.objective,
            loss_star
        );
        assert!((point.z.values[0] - z_star).abs() < 1e-4);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let case = cases::two_bus(-0.5);
        let err = solve_opf(&case, &Objective::Loss, &[0.0], &config()).unwrap_err();
        assert!(matches!(err, AlgorithmError::NotStrictlyFeasible(_)));
    }

    #[test]
    fn descent_is_monotone_for_convex_objectives() {
        let case = cases::three_bus_line();
        let obj = Objective::cost_from_case(&case).unwrap();
        let z0 = initial_point(&case, &config()).unwrap();
        let (trace, _) = solve_opf(&case, &obj, &z0, &config()).unwrap();
        for pair in trace.rows.windows(2) {
            assert!(pair[1].objective <= pair[0].objective + 1e-8);
        }
        for row in &trace.rows {
            assert!(row.max_violation <= 1e-8);
        }
    }

    #[test]
    fn measurements_are_deterministic() {
        let case = cases::two_bus(-0.5);
        let exact = simulate_measurements(&case, &[0.6], 0.0, 1).unwrap();
        assert_relative_eq!(exact.p_hat[0], 1.4, max_relative = 1e-12);
        assert_relative_eq!(exact.p_hat[1], -1.0, max_relative = 1e-12);
        assert_relative_eq!(exact.q_hat[0], -0.2, max_relative = 1e-12);
        assert_relative_eq!(exact.q_hat[1], 1.0, max_relative = 1e-12);

        let a = simulate_measurements(&case, &[0.3], 0.05, 99).unwrap();
        let b = simulate_measurements(&case, &[0.3], 0.05, 99).unwrap();
        assert_eq!(a.p_hat, b.p_hat);
        assert_eq!(a.q_hat, b.q_hat);
        assert_ne!(a.p_hat[0], 1.4); // noise actually applied
    }

    #[test]
    fn state_estimation_recovers_noiseless_truth() {
        let case = cases::three_bus_line();
        let z_true = [0.21, -0.13];
        let m = simulate_measurements(&case, &z_true, 0.0, 0).unwrap();
        let obj = Objective::state_estimation(m);
        let z0 = initial_point(&case, &config()).unwrap();
        let (trace, point) = solve_opf(&case, &obj, &z0, &config()).unwrap();
        let last = trace.rows.last().unwrap();
        assert!(last.objective <= 1e-8, "objective {}", last.objective);
        for (a, b) in point.z.values.iter().zip(&z_true) {
            assert!((a - b).abs() <= 1e-4);
        }
    }
}
