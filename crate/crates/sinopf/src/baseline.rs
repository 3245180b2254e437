//! Independent verification machinery: a second-order cone relaxation of the
//! same problem (an outer bound, against the restriction's inner bound), a
//! brute-force grid oracle for tiny networks, and a feasible-region
//! rasterizer for two selected edges.
//!
//! The relaxation replaces the per-edge identity `R^2 + I^2 = 1` (with
//! `R = cos(theta)`, `I = sin(theta)`) by the ball `R^2 + I^2 <= 1`, making
//! every injection linear in `(R, I)`. When the ball is tight at the
//! optimum the relaxation is exact and `I` is a feasible angle solution;
//! otherwise its objective is only a lower bound.

use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

use crate::algorithm::{classify_objective, Convexity, Objective};
use crate::model::NetworkCase;
use crate::restriction::{self, BasePoints, Hyperplane, RestrictionError};
use crate::solver::{
    self, ConstraintSet, ConvexFn, LinearConstraint, LinearObjective, Phase1Outcome,
    SmoothConstraint, SmoothConvexProgram, SolverConfig, SolverError,
};
use crate::transform::{self, TransformError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("objective is not convex; the relaxation handles loss and linear cost only")]
    NonconvexObjective,
    #[error("relaxation infeasible (certified common-slack lower bound {slack_lower_bound:.3e}); the original problem is certainly infeasible")]
    Infeasible { slack_lower_bound: f64 },
    #[error("grid oracle supports at most 3 edges, case has {edges}")]
    TooLarge { edges: usize },
    #[error("grid resolution {0} out of range (2..=2001)")]
    BadResolution(usize),
    #[error("no feasible grid point at this resolution")]
    OracleInfeasible,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Restriction(#[from] RestrictionError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Solution of the cone relaxation.
#[derive(Debug, Clone, Serialize)]
pub struct RelaxationResult {
    /// Per-edge cosine stand-ins, in [0, 1].
    pub r: Vec<f64>,
    /// Per-edge sine stand-ins, inside the z box.
    pub i: Vec<f64>,
    pub objective_value: f64,
    /// max over edges of 1 - R^2 - I^2; ~0 means the relaxation is exact.
    pub exactness_gap: f64,
    /// `i` copied out when the gap is within 1e-6; a physical solution.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovered_z: Option<Vec<f64>>,
}

/// Result of the exhaustive grid scan.
#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub best_objective: f64,
    pub argmin: Vec<f64>,
    pub feasible_count: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RasterCell {
    pub z_a: f64,
    pub z_b: f64,
    pub original: bool,
    pub restricted: bool,
}

/// Per-cell feasibility flags over the box of two selected edges, other
/// edges pinned to fixed values. Cells are evaluated at their centers, in
/// row-major order (outer loop over `z_a`).
#[derive(Debug, Clone, Serialize)]
pub struct RasterGrid {
    pub edge_a: usize,
    pub edge_b: usize,
    pub resolution: usize,
    pub bounds_a: (f64, f64),
    pub bounds_b: (f64, f64),
    pub fixed: Vec<f64>,
    pub cells: Vec<RasterCell>,
}

impl RasterGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.cells.len() * 24 + 32);
        out.push_str("z_a,z_b,original,restricted\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{}\n",
                cell.z_a,
                cell.z_b,
                cell.original as u8,
                cell.restricted as u8
            ));
        }
        out
    }
}

/// Which constraint system(s) the rasterizer evaluates.
pub enum RasterMode<'a> {
    Original,
    Restricted(&'a BasePoints),
    Both(&'a BasePoints),
}

/// The per-edge ball constraint `R_e^2 + I_e^2 <= 1` over the stacked
/// variable vector `[R; I]`.
struct DiskFn {
    edge: usize,
    edge_count: usize,
}

impl ConvexFn for DiskFn {
    fn value(&self, x: &[f64]) -> f64 {
        let r = x[self.edge];
        let i = x[self.edge_count + self.edge];
        r * r + i * i
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.edge] = 2.0 * x[self.edge];
        out[self.edge_count + self.edge] = 2.0 * x[self.edge_count + self.edge];
    }
    fn hessian_diag(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.edge] = 2.0;
        out[self.edge_count + self.edge] = 2.0;
    }
}

/// Linear coefficients of one bus injection over `[R; I]` plus its constant
/// term `sum g` (active) or `sum b` (reactive).
fn injection_row(
    case: &NetworkCase,
    bus: usize,
    kind: transform::InjectionKind,
) -> (Vec<f64>, f64) {
    let ne = case.edge_count();
    let mut row = vec![0.0; 2 * ne];
    let mut constant = 0.0;
    for ie in transform::incident_edges(case, bus) {
        match kind {
            transform::InjectionKind::Active => {
                row[ie.edge] -= ie.g;
                row[ne + ie.edge] += ie.sigma * ie.b;
                constant += ie.g;
            }
            transform::InjectionKind::Reactive => {
                row[ie.edge] -= ie.b;
                row[ne + ie.edge] -= ie.sigma * ie.g;
                constant += ie.b;
            }
        }
    }
    (row, constant)
}

fn relaxation_objective(
    case: &NetworkCase,
    objective: &Objective,
) -> Result<LinearObjective, BaselineError> {
    let ne = case.edge_count();
    let mut coeffs = vec![0.0; 2 * ne];
    let mut constant = 0.0;
    let bus_coeffs: Vec<f64> = match objective {
        Objective::Loss => vec![1.0; case.bus_count()],
        Objective::LinearCost(c) => {
            if c.len() != case.bus_count() || c.iter().any(|v| !(*v >= 0.0)) {
                return Err(BaselineError::NonconvexObjective);
            }
            c.clone()
        }
        Objective::StateEstimation(_) => return Err(BaselineError::NonconvexObjective),
    };
    for (e, edge) in case.edges.iter().enumerate() {
        let ct = case.bus_index(edge.from).map_or(0.0, |i| bus_coeffs[i]);
        let ch = case.bus_index(edge.to).map_or(0.0, |i| bus_coeffs[i]);
        coeffs[e] -= (ct + ch) * edge.g;
        coeffs[ne + e] += (ct - ch) * edge.b;
        constant += (ct + ch) * edge.g;
    }
    Ok(LinearObjective { coeffs, constant })
}

/// Solves the cone relaxation for a convex objective. The constraint system
/// is: one ball per edge, `0 <= R <= 1`, the z box on `I`, and every finite
/// injection bound as a halfspace.
pub fn socp_relaxation(
    case: &NetworkCase,
    objective: &Objective,
) -> Result<RelaxationResult, BaselineError> {
    if classify_objective(objective) != Convexity::Convex {
        return Err(BaselineError::NonconvexObjective);
    }
    let ne = case.edge_count();
    let zb = case.z_bounds();

    let smooth: Vec<SmoothConstraint> = (0..ne)
        .map(|e| SmoothConstraint {
            f: Arc::new(DiskFn {
                edge: e,
                edge_count: ne,
            }) as Arc<dyn ConvexFn>,
            upper: 1.0,
            label: format!("ball edge {e}"),
        })
        .collect();

    let mut linear = Vec::new();
    for (i, bus) in case.buses.iter().enumerate() {
        for (kind, lo, hi) in [
            (transform::InjectionKind::Active, bus.p_min, bus.p_max),
            (transform::InjectionKind::Reactive, bus.q_min, bus.q_max),
        ] {
            if !lo.is_finite() && !hi.is_finite() {
                continue;
            }
            let (row, constant) = injection_row(case, i, kind);
            if hi.is_finite() {
                linear.push(LinearConstraint {
                    normal: row.clone(),
                    offset: hi - constant,
                    label: format!("{kind}_max bus {}", bus.id),
                });
            }
            if lo.is_finite() {
                linear.push(LinearConstraint {
                    normal: row.iter().map(|v| -v).collect(),
                    offset: constant - lo,
                    label: format!("{kind}_min bus {}", bus.id),
                });
            }
        }
    }

    let mut bounds = vec![(0.0, 1.0); ne];
    bounds.extend(zb.iter().copied());

    let constraints = ConstraintSet {
        dimension: 2 * ne,
        smooth,
        linear,
        bounds,
    };

    // Strictly inside the balls and the R box for any I in the z box.
    let mut guess = vec![0.0; 2 * ne];
    for e in 0..ne {
        let (lo, hi) = zb[e];
        let i0 = if lo + 1e-6 < 0.0 && hi - 1e-6 > 0.0 {
            0.0
        } else {
            0.5 * (lo + hi)
        };
        guess[ne + e] = i0;
        guess[e] = (0.9 * (1.0 - i0 * i0).sqrt()).max(1e-3);
    }

    let cfg = SolverConfig::default();
    let start = match solver::phase1(&constraints, &guess, &cfg)? {
        Phase1Outcome::Feasible(x) => x,
        Phase1Outcome::Infeasible {
            slack_lower_bound, ..
        } => return Err(BaselineError::Infeasible { slack_lower_bound }),
    };

    let program = SmoothConvexProgram {
        objective: Box::new(relaxation_objective(case, objective)?),
        constraints,
    };
    let result = solver::solve(&program, &start, &cfg)?;

    let r = result.x[..ne].to_vec();
    let i = result.x[ne..].to_vec();
    let exactness_gap = (0..ne)
        .map(|e| 1.0 - r[e] * r[e] - i[e] * i[e])
        .fold(0.0f64, f64::max);
    let recovered_z = (exactness_gap <= 1e-6).then(|| i.clone());
    Ok(RelaxationResult {
        r,
        i,
        objective_value: result.objective_value,
        exactness_gap,
        recovered_z,
    })
}

/// Exhaustive scan of the z box on a uniform node grid (`resolution` points
/// per axis, endpoints included); feasibility is exact and the minimum of
/// the exact objective over feasible nodes is returned.
pub fn grid_oracle(
    case: &NetworkCase,
    objective: &Objective,
    resolution: usize,
) -> Result<OracleResult, BaselineError> {
    let ne = case.edge_count();
    if ne > 3 {
        return Err(BaselineError::TooLarge { edges: ne });
    }
    if !(2..=2001).contains(&resolution) {
        return Err(BaselineError::BadResolution(resolution));
    }
    let zb = case.z_bounds();
    let axis = |e: usize, k: usize| -> f64 {
        let (lo, hi) = zb[e];
        if hi - lo <= crate::PIN_TOL {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * (k as f64) / ((resolution - 1) as f64)
        }
    };
    let callbacks = objective
        .build(case)
        .map_err(|_| BaselineError::NonconvexObjective)?;

    let evaluate = |z: &[f64]| -> Option<f64> {
        let (p, q) = transform::injections(case, z).ok()?;
        for (i, bus) in case.buses.iter().enumerate() {
            if p[i] > bus.p_max || p[i] < bus.p_min || q[i] > bus.q_max || q[i] < bus.q_min {
                return None;
            }
        }
        Some(callbacks.value(z))
    };

    struct Best {
        value: f64,
        at: Vec<f64>,
        feasible: usize,
    }

    let scan_rows: Vec<Best> = (0..resolution)
        .into_par_iter()
        .map(|k0| {
            let mut best = Best {
                value: f64::INFINITY,
                at: Vec::new(),
                feasible: 0,
            };
            let mut z = vec![0.0; ne];
            if ne >= 1 {
                z[0] = axis(0, k0);
            }
            let inner = |z: &mut Vec<f64>, best: &mut Best| {
                if let Some(v) = evaluate(z) {
                    best.feasible += 1;
                    if v < best.value {
                        best.value = v;
                        best.at = z.clone();
                    }
                }
            };
            match ne {
                0 | 1 => inner(&mut z, &mut best),
                2 => {
                    for k1 in 0..resolution {
                        z[1] = axis(1, k1);
                        inner(&mut z, &mut best);
                    }
                }
                _ => {
                    for k1 in 0..resolution {
                        z[1] = axis(1, k1);
                        for k2 in 0..resolution {
                            z[2] = axis(2, k2);
                            inner(&mut z, &mut best);
                        }
                    }
                }
            }
            best
        })
        .collect();

    let mut best_objective = f64::INFINITY;
    let mut argmin = Vec::new();
    let mut feasible_count = 0;
    for row in scan_rows {
        feasible_count += row.feasible;
        if row.value < best_objective {
            best_objective = row.value;
            argmin = row.at;
        }
    }
    if feasible_count == 0 {
        return Err(BaselineError::OracleInfeasible);
    }
    Ok(OracleResult {
        best_objective,
        argmin,
        feasible_count,
        resolution,
    })
}

/// Rasterizes the feasible region over the box of two selected edges at cell
/// centers; unselected edges are pinned to `fixed`. In restricted modes the
/// hyperplanes are rebuilt from the supplied base points.
pub fn raster_region(
    case: &NetworkCase,
    edge_pair: (usize, usize),
    resolution: usize,
    mode: RasterMode<'_>,
    fixed: &[f64],
) -> Result<RasterGrid, BaselineError> {
    let (ea, eb) = edge_pair;
    let ne = case.edge_count();
    if ea >= ne {
        return Err(TransformError::UnknownEdge(ea).into());
    }
    if eb >= ne || ea == eb {
        return Err(TransformError::UnknownEdge(eb).into());
    }
    if fixed.len() != ne {
        return Err(TransformError::DimensionMismatch {
            got: fixed.len(),
            expected: ne,
        }
        .into());
    }
    if resolution == 0 || resolution > 4096 {
        return Err(BaselineError::BadResolution(resolution));
    }

    let (want_original, hyperplanes): (bool, Option<Vec<Hyperplane>>) = match &mode {
        RasterMode::Original => (true, None),
        RasterMode::Restricted(bp) => (false, Some(restriction::hyperplanes(case, bp)?)),
        RasterMode::Both(bp) => (true, Some(restriction::hyperplanes(case, bp)?)),
    };

    let zb = case.z_bounds();
    let (lo_a, hi_a) = zb[ea];
    let (lo_b, hi_b) = zb[eb];
    let center = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * (k as f64 + 0.5) / resolution as f64;

    let cells: Vec<RasterCell> = (0..resolution)
        .into_par_iter()
        .flat_map_iter(|ka| {
            let hps = hyperplanes.as_deref();
            (0..resolution).map(move |kb| {
                let z_a = center(lo_a, hi_a, ka);
                let z_b = center(lo_b, hi_b, kb);
                let mut z = fixed.to_vec();
                z[ea] = z_a;
                z[eb] = z_b;
                let (p, q) = transform::injections(case, &z).expect("z in box");
                let original = want_original && original_feasible(case, &z, &p, &q);
                let restricted = hps
                    .map(|h| restriction::restricted_feasible_at(case, h, &z, &p, &q, 0.0))
                    .unwrap_or(false);
                RasterCell {
                    z_a,
                    z_b,
                    original,
                    restricted,
                }
            })
        })
        .collect();

    Ok(RasterGrid {
        edge_a: ea,
        edge_b: eb,
        resolution,
        bounds_a: (lo_a, hi_a),
        bounds_b: (lo_b, hi_b),
        fixed: fixed.to_vec(),
        cells,
    })
}

fn original_feasible(case: &NetworkCase, z: &[f64], p: &[f64], q: &[f64]) -> bool {
    for (e, (lo, hi)) in case.z_bounds().into_iter().enumerate() {
        if z[e] < lo || z[e] > hi {
            return false;
        }
    }
    for (i, bus) in case.buses.iter().enumerate() {
        if p[i] > bus.p_max || p[i] < bus.p_min || q[i] > bus.q_max || q[i] < bus.q_min {
            return false;
        }
    }
    true
}

/// Default pinned value for unselected edges: zero when interior to the box,
/// otherwise the box midpoint.
pub fn default_fixed_values(case: &NetworkCase) -> Vec<f64> {
    case.z_bounds()
        .iter()
        .map(|&(lo, hi)| if lo < 0.0 && hi > 0.0 { 0.0 } else { 0.5 * (lo + hi) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithm::{initial_point, solve_opf, AlgorithmConfig};
    use crate::cases;
    use crate::restriction::base_points;
    use crate::transform::InjectionKind;

    #[test]
    fn relaxation_exact_on_two_bus_loss() {
        let case = cases::two_bus(-0.5);
        let res = socp_relaxation(&case, &Objective::Loss).unwrap();
        let z_star = (6.0 - 11f64.sqrt()) / 10.0;
        let loss_star = 2.0 * (1.0 - (1.0 - z_star * z_star).sqrt());
        assert!(res.exactness_gap <= 1e-6, "gap {}", res.exactness_gap);
        assert!((res.objective_value - loss_star).abs() < 1e-5);
        let rec = res.recovered_z.expect("exact relaxation recovers z");
        assert!((rec[0] - z_star).abs() < 1e-4);
        let report = transform::check_original_feasibility(&case, &rec, 1e-5).unwrap();
        assert!(report.feasible);
    }

    #[test]
    fn relaxation_trivial_when_unbounded() {
        let case = cases::two_bus(f64::INFINITY);
        let res = socp_relaxation(&case, &Objective::Loss).unwrap();
        assert!(res.objective_value.abs() < 1e-6);
        assert!(res.exactness_gap <= 1e-6);
        assert!(res.i[0].abs() < 1e-3);
        assert!((res.r[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn relaxation_detects_binding_lower_bound_inexactness() {
        let case = cases::inexact_relaxation();
        let obj = Objective::cost_from_case(&case).unwrap();
        let res = socp_relaxation(&case, &obj).unwrap();
        assert!(res.exactness_gap > 1e-3, "gap {}", res.exactness_gap);
        assert!(res.recovered_z.is_none());

        // The relaxation is an outer bound: its objective lower-bounds the
        // feasible value found by the restriction.
        let cfg = AlgorithmConfig::default();
        let z0 = initial_point(&case, &cfg).unwrap();
        let (trace, point) = solve_opf(&case, &obj, &z0, &cfg).unwrap();
        let report = transform::check_original_feasibility(&case, &point.z.values, 1e-8).unwrap();
        assert!(report.feasible);
        assert!(res.objective_value <= trace.rows.last().unwrap().objective + 1e-6);
    }

    #[test]
    fn oracle_matches_closed_form_on_two_bus() {
        let case = cases::two_bus(-0.5);
        let oracle = grid_oracle(&case, &Objective::Loss, 2001).unwrap();
        let z_star = (6.0 - 11f64.sqrt()) / 10.0;
        let loss_star = 2.0 * (1.0 - (1.0 - z_star * z_star).sqrt());
        assert!(
            (oracle.best_objective - loss_star).abs() <= 1e-4,
            "oracle {} vs {}",
            oracle.best_objective,
            loss_star
        );
        assert!(oracle.feasible_count > 0);
    }

    #[test]
    fn oracle_finds_zero_when_unbounded() {
        let case = cases::two_bus(f64::INFINITY);
        let oracle = grid_oracle(&case, &Objective::Loss, 2001).unwrap();
        assert_eq!(oracle.best_objective, 0.0);
        assert_eq!(oracle.argmin, vec![0.0]);
    }

    #[test]
    fn oracle_rejects_large_cases() {
        let case = NetworkCase {
            buses: (1..=5).map(crate::model::BusRecord::unbounded).collect(),
            edges: vec![
                cases::edge(1, 2, 1.0, 2.0),
                cases::edge(2, 3, 1.0, 2.0),
                cases::edge(3, 4, 1.0, 2.0),
                cases::edge(4, 5, 1.0, 2.0),
            ],
            slack_bus: 1,
        };
        assert!(matches!(
            grid_oracle(&case, &Objective::Loss, 101),
            Err(BaselineError::TooLarge { edges: 4 })
        ));
    }

    #[test]
    fn raster_subset_property() {
        let case = cases::three_bus_line();
        let bp = base_points(&case, &[0.0, 0.0], &SolverConfig::default()).unwrap();
        let grid = raster_region(
            &case,
            (0, 1),
            200,
            RasterMode::Both(&bp),
            &[0.0, 0.0],
        )
        .unwrap();
        assert_eq!(grid.cells.len(), 40_000);
        let violations = grid
            .cells
            .iter()
            .filter(|c| c.restricted && !c.original)
            .count();
        assert_eq!(violations, 0);
        assert!(grid.cells.iter().any(|c| c.restricted));
        assert!(grid.cells.iter().any(|c| c.original && !c.restricted));
    }

    #[test]
    fn raster_all_feasible_without_bounds() {
        let case = NetworkCase {
            buses: (1..=3).map(crate::model::BusRecord::unbounded).collect(),
            edges: vec![cases::edge(1, 2, 1.0, 2.0), cases::edge(2, 3, 0.8, 1.5)],
            slack_bus: 1,
        };
        let grid =
            raster_region(&case, (0, 1), 50, RasterMode::Original, &[0.0, 0.0]).unwrap();
        assert!(grid.cells.iter().all(|c| c.original));
        assert!(grid.cells.iter().all(|c| !c.restricted));
    }

    #[test]
    fn raster_empty_restriction_has_no_cells() {
        // Fault injection: a base point for an unreachable bound makes the
        // hyperplane constraint unsatisfiable over the whole box.
        let mut case = cases::two_bus(f64::INFINITY);
        case.buses.push(crate::model::BusRecord::unbounded(3));
        case.edges.push(cases::edge(2, 3, 0.8, 1.5));
        case.buses[1].p_min = 3.9; // above the box maximum of p_2
        let mut bp = BasePoints::default();
        bp.points.insert((1, InjectionKind::Active), vec![0.8, 0.0]);
        let grid = raster_region(&case, (0, 1), 60, RasterMode::Restricted(&bp), &[0.0, 0.0])
            .unwrap();
        assert!(grid.cells.iter().all(|c| !c.restricted));
    }

    #[test]
    fn csv_shape() {
        let case = cases::three_bus_line();
        let grid =
            raster_region(&case, (0, 1), 10, RasterMode::Original, &[0.0, 0.0]).unwrap();
        let csv = grid.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "z_a,z_b,original,restricted");
        assert_eq!(csv.lines().count(), 101);
    }
}
