//! Construction of the convex restriction: analytic emptiness tests for the
//! lower-bound sublevel sets, Euclidean projections to tangent base points,
//! the supporting hyperplanes they induce, assembly of the restricted convex
//! program, and sampling certificates for the tangency properties.
//!
//! Soundness rests on two exact implications: `h <= f` everywhere (convexity
//! of the injections) and `h >= bound` (the linear surrogate constraint)
//! together give `f >= bound`, so every point feasible for the restriction
//! is feasible for the original problem.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::model::{ModelError, NetworkCase};
use crate::solver::{
    self, ConstraintSet, ConvexFn, LinearConstraint, ObjectiveFn, SmoothConstraint,
    SmoothConvexProgram, SolverConfig, SolverError,
};
use crate::transform::{
    self, edge_term, edge_term_derivative, edge_term_minimizer, incident_edges,
    min_injection, InjectionKind, DOMAIN_MARGIN,
};

#[derive(Debug, Error)]
pub enum RestrictionError {
    #[error("point is not strictly feasible for the original problem ({0})")]
    NotStrictlyFeasible(String),
    #[error("degenerate gradient at the base point for {kind}_min bus {bus}")]
    DegenerateGradient { bus: u32, kind: InjectionKind },
    #[error("projection for {kind}_min bus {bus} failed: {source}")]
    Projection {
        bus: u32,
        kind: InjectionKind,
        source: SolverError,
    },
    #[error("malformed base-point document: {0}")]
    Format(#[from] ModelError),
    #[error(transparent)]
    Transform(#[from] transform::TransformError),
}

/// Why a (bus, kind) lower bound carries no hyperplane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Bound is -infinity; the constraint is vacuous.
    BoundInfinite,
    /// The sublevel set {f <= bound} is empty (or a single point with zero
    /// gradient): the constraint holds everywhere and can be removed.
    SetEmpty,
}

/// Tangent points from projecting a strictly feasible point onto each
/// nonempty lower-bound sublevel set, keyed by (bus position, kind).
#[derive(Debug, Clone, Default)]
pub struct BasePoints {
    pub points: BTreeMap<(usize, InjectionKind), Vec<f64>>,
    pub dropped: Vec<(usize, InjectionKind, DropReason)>,
}

/// Affine lower-bound surrogate `h(z) = normal . z + offset` for one
/// injection lower bound; tangent to the injection at the base point.
#[derive(Debug, Clone)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
    pub bound: f64,
    /// (bus position, kind) of the protected constraint.
    pub owner: (usize, InjectionKind),
}

impl Hyperplane {
    pub fn evaluate(&self, z: &[f64]) -> f64 {
        self.normal.iter().zip(z).map(|(n, v)| n * v).sum::<f64>() + self.offset
    }
}

/// The assembled convex program together with its provenance.
pub struct RestrictedProblem {
    pub program: SmoothConvexProgram,
    pub hyperplanes: Vec<Hyperplane>,
    pub base_points: BasePoints,
}

/// Sampled evidence for the supporting-hyperplane properties of one
/// restriction.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CertificateEntry {
    pub bus: u32,
    pub kind: InjectionKind,
    /// max over samples of h(z) - f(z); must stay <= ~0 (convexity).
    pub max_h_minus_f: f64,
    /// |h(z_tilde) - f(z_tilde)| at the base point.
    pub tangency_gap: f64,
    /// |f(z_tilde) - bound| at the base point.
    pub boundary_residual: f64,
}

/// Output of [`certify`]: per-hyperplane tangency evidence plus a spot check
/// that sampled restricted-feasible points satisfy the original constraints.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TangencyCertificate {
    pub samples: usize,
    pub entries: Vec<CertificateEntry>,
    pub restricted_feasible_samples: usize,
    pub subset_violations: usize,
}

impl TangencyCertificate {
    pub fn passes(&self) -> bool {
        self.subset_violations == 0
            && self.entries.iter().all(|e| {
                e.max_h_minus_f <= 1e-9 && e.tangency_gap <= 1e-8 && e.boundary_residual <= 1e-6
            })
    }
}

pub(crate) fn lower_bound(case: &NetworkCase, bus: usize, kind: InjectionKind) -> f64 {
    match kind {
        InjectionKind::Active => case.buses[bus].p_min,
        InjectionKind::Reactive => case.buses[bus].q_min,
    }
}

pub(crate) fn upper_bound(case: &NetworkCase, bus: usize, kind: InjectionKind) -> f64 {
    match kind {
        InjectionKind::Active => case.buses[bus].p_max,
        InjectionKind::Reactive => case.buses[bus].q_max,
    }
}

/// One bus injection as a solver constraint function over the full edge
/// vector. Values outside the derivative domain report +infinity so barrier
/// line searches back away from the coordinate singularities.
pub struct InjectionConstraintFn {
    terms: Vec<transform::IncidentEdge>,
    kind: InjectionKind,
}

impl InjectionConstraintFn {
    pub fn new(case: &NetworkCase, bus: usize, kind: InjectionKind) -> Self {
        InjectionConstraintFn {
            terms: incident_edges(case, bus),
            kind,
        }
    }
}

impl ConvexFn for InjectionConstraintFn {
    fn value(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for ie in &self.terms {
            if x[ie.edge].abs() >= 1.0 - DOMAIN_MARGIN {
                return f64::INFINITY;
            }
            total += edge_term(self.kind, ie.g, ie.b, ie.sigma, x[ie.edge]);
        }
        total
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for ie in &self.terms {
            out[ie.edge] = edge_term_derivative(self.kind, ie.g, ie.b, ie.sigma, x[ie.edge]);
        }
    }
    fn hessian_diag(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for ie in &self.terms {
            let z = x[ie.edge];
            let c = (1.0 - z * z).sqrt();
            let coeff = match self.kind {
                InjectionKind::Active => ie.g,
                InjectionKind::Reactive => ie.b,
            };
            out[ie.edge] = coeff / (c * c * c);
        }
    }
}

/// The same injection restricted to its incident-edge subspace; projections
/// are solved there since all other coordinates stay at the query point.
struct SubspaceInjection {
    terms: Vec<(f64, f64, f64)>, // (g, b, sigma)
    kind: InjectionKind,
}

impl ConvexFn for SubspaceInjection {
    fn value(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (k, &(g, b, sigma)) in self.terms.iter().enumerate() {
            if x[k].abs() >= 1.0 - DOMAIN_MARGIN {
                return f64::INFINITY;
            }
            total += edge_term(self.kind, g, b, sigma, x[k]);
        }
        total
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (k, &(g, b, sigma)) in self.terms.iter().enumerate() {
            out[k] = edge_term_derivative(self.kind, g, b, sigma, x[k]);
        }
    }
    fn hessian_diag(&self, x: &[f64], out: &mut [f64]) {
        for (k, &(g, b, _)) in self.terms.iter().enumerate() {
            let c = (1.0 - x[k] * x[k]).sqrt();
            let coeff = match self.kind {
                InjectionKind::Active => g,
                InjectionKind::Reactive => b,
            };
            out[k] = coeff / (c * c * c);
        }
    }
}

/// True iff the sublevel set `{f <= bound}` for the given lower bound is
/// empty, decided analytically from the closed-form minimum (a bound of
/// -infinity is vacuous and also reported as dropped).
pub fn lower_bound_set_empty(case: &NetworkCase, bus: usize, kind: InjectionKind) -> bool {
    let bound = lower_bound(case, bus, kind);
    if bound == f64::NEG_INFINITY {
        return true;
    }
    min_injection(case, bus, kind) > bound
}

fn injection_value(case: &NetworkCase, bus: usize, kind: InjectionKind, z: &[f64]) -> f64 {
    incident_edges(case, bus)
        .iter()
        .map(|ie| edge_term(kind, ie.g, ie.b, ie.sigma, z[ie.edge]))
        .sum()
}

fn injection_gradient(case: &NetworkCase, bus: usize, kind: InjectionKind, z: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; case.edge_count()];
    for ie in incident_edges(case, bus) {
        grad[ie.edge] = edge_term_derivative(kind, ie.g, ie.b, ie.sigma, z[ie.edge]);
    }
    grad
}

/// Projects one (bus, kind) lower-bound constraint; assumes the sublevel set
/// is nonempty with margin and `f(z_from) > bound`.
fn project_one(
    case: &NetworkCase,
    bus: usize,
    kind: InjectionKind,
    bound: f64,
    z_from: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>, RestrictionError> {
    let inc = incident_edges(case, bus);
    let sub_f: Arc<dyn ConvexFn> = Arc::new(SubspaceInjection {
        terms: inc.iter().map(|ie| (ie.g, ie.b, ie.sigma)).collect(),
        kind,
    });
    let sub_z0: Vec<f64> = inc.iter().map(|ie| z_from[ie.edge]).collect();
    // The per-edge closed-form minimizer is strictly inside the sublevel set
    // whenever the set is nonempty with margin.
    let hint: Vec<f64> = inc
        .iter()
        .map(|ie| edge_term_minimizer(kind, ie.g, ie.b, ie.sigma))
        .collect();
    let sub_zt = solver::project_euclidean(sub_f, bound, &sub_z0, &hint, cfg).map_err(|e| {
        RestrictionError::Projection {
            bus: case.buses[bus].id,
            kind,
            source: e,
        }
    })?;
    let mut zt = z_from.to_vec();
    for (k, ie) in inc.iter().enumerate() {
        zt[ie.edge] = sub_zt[k];
    }
    Ok(zt)
}

/// Base points for every finite, nonempty lower bound by Euclidean
/// projection of the strictly feasible `z0`; empty or vacuous constraints
/// are recorded in `dropped`.
pub fn base_points(
    case: &NetworkCase,
    z0: &[f64],
    cfg: &SolverConfig,
) -> Result<BasePoints, RestrictionError> {
    let margins = transform::feasibility_margins(case, z0)?;
    if !(margins.injection_violation < 0.0)
        || margins.box_violation > 0.0
        || margins.pinned_mismatch > crate::PIN_TOL
    {
        return Err(RestrictionError::NotStrictlyFeasible(format!(
            "worst injection residual {:.3e}, worst box residual {:.3e}",
            margins.injection_violation, margins.box_violation
        )));
    }
    base_points_lenient(case, z0, cfg)
}

/// Base-point construction that tolerates an infeasible anchor: an anchor
/// inside a lower-bound sublevel set is walked to the boundary along the
/// segment toward the box maximizer of the injection. Used by the phase-1
/// initializer; `base_points` adds the strict-feasibility precondition.
pub(crate) fn base_points_lenient(
    case: &NetworkCase,
    anchor: &[f64],
    cfg: &SolverConfig,
) -> Result<BasePoints, RestrictionError> {
    let mut out = BasePoints::default();
    for bus in 0..case.bus_count() {
        for kind in [InjectionKind::Active, InjectionKind::Reactive] {
            let bound = lower_bound(case, bus, kind);
            if bound == f64::NEG_INFINITY {
                out.dropped.push((bus, kind, DropReason::BoundInfinite));
                continue;
            }
            // The fuzz absorbs the degenerate case bound == min, whose
            // sublevel set is the single zero-gradient point: the constraint
            // then reduces to the always-true comparison min >= bound.
            if min_injection(case, bus, kind) > bound - 1e-12 {
                out.dropped.push((bus, kind, DropReason::SetEmpty));
                continue;
            }
            let fv = injection_value(case, bus, kind, anchor);
            let zt = if fv > bound + 1e-12 {
                project_one(case, bus, kind, bound, anchor, cfg)?
            } else if fv < bound - 1e-12 {
                boundary_by_line_search(case, bus, kind, bound, anchor)
            } else {
                anchor.to_vec()
            };
            out.points.insert((bus, kind), zt);
        }
    }
    Ok(out)
}

/// Walks from an anchor inside `{f <= bound}` toward the box corner
/// maximizing `f` until `f = bound` (the maximum exceeds the bound whenever
/// the original constraint is satisfiable over the box).
fn boundary_by_line_search(
    case: &NetworkCase,
    bus: usize,
    kind: InjectionKind,
    bound: f64,
    anchor: &[f64],
) -> Vec<f64> {
    let target = transform::box_maximizer(case, bus, kind, anchor);
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let point_at = |alpha: f64| -> Vec<f64> {
        anchor
            .iter()
            .zip(&target)
            .map(|(a, t)| a + alpha * (t - a))
            .collect()
    };
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let v = injection_value(case, bus, kind, &point_at(mid));
        if (v - bound).abs() <= 1e-13 * (1.0 + bound.abs()) {
            return point_at(mid);
        }
        if v < bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    point_at(0.5 * (lo + hi))
}

/// One supporting hyperplane per stored base point; each underestimates its
/// convex injection everywhere (first-order convexity) and touches it at the
/// base point.
pub fn hyperplanes(
    case: &NetworkCase,
    bp: &BasePoints,
) -> Result<Vec<Hyperplane>, RestrictionError> {
    let mut out = Vec::new();
    for (&(bus, kind), zt) in &bp.points {
        let normal = injection_gradient(case, bus, kind, zt);
        let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(RestrictionError::DegenerateGradient {
                bus: case.buses[bus].id,
                kind,
            });
        }
        let f_val = injection_value(case, bus, kind, zt);
        let offset = f_val - normal.iter().zip(zt).map(|(n, z)| n * z).sum::<f64>();
        out.push(Hyperplane {
            normal,
            offset,
            bound: lower_bound(case, bus, kind),
            owner: (bus, kind),
        });
    }
    Ok(out)
}

/// Builds the inequality system of the restriction: the z box, one smooth
/// convex constraint per finite upper injection bound, and one halfspace per
/// hyperplane.
pub(crate) fn restricted_constraints(
    case: &NetworkCase,
    hps: &[Hyperplane],
) -> ConstraintSet {
    let mut smooth = Vec::new();
    for (i, bus) in case.buses.iter().enumerate() {
        for kind in [InjectionKind::Active, InjectionKind::Reactive] {
            let upper = upper_bound(case, i, kind);
            if upper.is_finite() {
                smooth.push(SmoothConstraint {
                    f: Arc::new(InjectionConstraintFn::new(case, i, kind)),
                    upper,
                    label: format!("{kind}_max bus {}", bus.id),
                });
            }
        }
    }
    let linear = hps
        .iter()
        .map(|hp| LinearConstraint {
            normal: hp.normal.iter().map(|v| -v).collect(),
            offset: hp.offset - hp.bound,
            label: format!(
                "{}_min bus {}",
                hp.owner.1,
                case.buses[hp.owner.0].id
            ),
        })
        .collect();
    ConstraintSet {
        dimension: case.edge_count(),
        smooth,
        linear,
        bounds: case.z_bounds(),
    }
}

/// Assembles the full restricted convex program for the given objective.
pub fn build_restricted(
    case: &NetworkCase,
    bp: &BasePoints,
    objective: Box<dyn ObjectiveFn>,
) -> Result<RestrictedProblem, RestrictionError> {
    let hps = hyperplanes(case, bp)?;
    let constraints = restricted_constraints(case, &hps);
    Ok(RestrictedProblem {
        program: SmoothConvexProgram {
            objective,
            constraints,
        },
        hyperplanes: hps,
        base_points: bp.clone(),
    })
}

/// Membership test for the restricted set at a point (box, smooth uppers,
/// hyperplane lowers), given precomputed injections.
pub(crate) fn restricted_feasible_at(
    case: &NetworkCase,
    hps: &[Hyperplane],
    z: &[f64],
    p: &[f64],
    q: &[f64],
    tol: f64,
) -> bool {
    for (e, (lo, hi)) in case.z_bounds().into_iter().enumerate() {
        if z[e] < lo - tol || z[e] > hi + tol {
            return false;
        }
    }
    for (i, bus) in case.buses.iter().enumerate() {
        if p[i] > bus.p_max + tol || q[i] > bus.q_max + tol {
            return false;
        }
    }
    for hp in hps {
        if hp.evaluate(z) < hp.bound - tol {
            return false;
        }
    }
    true
}

fn original_feasible_at(case: &NetworkCase, p: &[f64], q: &[f64], tol: f64) -> bool {
    for (i, bus) in case.buses.iter().enumerate() {
        if p[i] > bus.p_max + tol
            || p[i] < bus.p_min - tol
            || q[i] > bus.q_max + tol
            || q[i] < bus.q_min - tol
        {
            return false;
        }
    }
    true
}

/// Draws `sample_count` uniform points in the z box and reports, per
/// hyperplane, the worst underestimation gap and the tangency/boundary
/// residuals at its base point; also spot-checks that every sampled
/// restricted-feasible point satisfies the original constraints.
pub fn certify(
    case: &NetworkCase,
    bp: &BasePoints,
    hps: &[Hyperplane],
    sample_count: usize,
    seed: u64,
) -> TangencyCertificate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zb = case.z_bounds();
    let mut max_gap = vec![f64::NEG_INFINITY; hps.len()];
    let mut restricted_feasible_samples = 0;
    let mut subset_violations = 0;

    for _ in 0..sample_count {
        let z: Vec<f64> = zb
            .iter()
            .map(|&(lo, hi)| {
                if hi - lo <= crate::PIN_TOL {
                    0.5 * (lo + hi)
                } else {
                    rng.random_range(lo..=hi)
                }
            })
            .collect();
        let (p, q) = crate::transform::injections(case, &z).expect("z in box");
        for (k, hp) in hps.iter().enumerate() {
            let f = injection_value(case, hp.owner.0, hp.owner.1, &z);
            let gap = hp.evaluate(&z) - f;
            if gap > max_gap[k] {
                max_gap[k] = gap;
            }
        }
        if restricted_feasible_at(case, hps, &z, &p, &q, 0.0) {
            restricted_feasible_samples += 1;
            if !original_feasible_at(case, &p, &q, 1e-12) {
                subset_violations += 1;
            }
        }
    }

    let entries = hps
        .iter()
        .enumerate()
        .map(|(k, hp)| {
            let (bus, kind) = hp.owner;
            let zt = &bp.points[&hp.owner];
            let f_at = injection_value(case, bus, kind, zt);
            CertificateEntry {
                bus: case.buses[bus].id,
                kind,
                max_h_minus_f: if sample_count == 0 {
                    f64::NEG_INFINITY
                } else {
                    max_gap[k]
                },
                tangency_gap: (hp.evaluate(zt) - f_at).abs(),
                boundary_residual: (f_at - hp.bound).abs(),
            }
        })
        .collect();

    TangencyCertificate {
        samples: sample_count,
        entries,
        restricted_feasible_samples,
        subset_violations,
    }
}

// ---------------------------------------------------------------------------
// Serialization (audit files and the rasterizer's restricted mode)
// ---------------------------------------------------------------------------

/// Base points as JSON keyed by bus id and kind.
pub fn base_points_to_json(case: &NetworkCase, bp: &BasePoints) -> String {
    let points: Vec<Value> = bp
        .points
        .iter()
        .map(|(&(bus, kind), zt)| {
            serde_json::json!({
                "bus": case.buses[bus].id,
                "kind": kind,
                "point": zt,
            })
        })
        .collect();
    let dropped: Vec<Value> = bp
        .dropped
        .iter()
        .map(|&(bus, kind, reason)| {
            serde_json::json!({
                "bus": case.buses[bus].id,
                "kind": kind,
                "reason": reason,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "points": points,
        "dropped": dropped,
    }))
    .expect("static schema")
}

pub fn base_points_from_json(case: &NetworkCase, text: &str) -> Result<BasePoints, ModelError> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| ModelError::at("$", format!("malformed JSON: {e}")))?;
    let mut bp = BasePoints::default();
    let points = root
        .get("points")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelError::at("$.points", "missing array"))?;
    for (i, item) in points.iter().enumerate() {
        let path = format!("$.points[{i}]");
        let bus_id = item
            .get("bus")
            .and_then(Value::as_u64)
            .ok_or_else(|| ModelError::at(format!("{path}.bus"), "expected bus id"))?;
        let bus = case
            .bus_index(bus_id as u32)
            .ok_or_else(|| ModelError::at(format!("{path}.bus"), "unknown bus id"))?;
        let kind: InjectionKind = serde_json::from_value(
            item.get("kind").cloned().unwrap_or(Value::Null),
        )
        .map_err(|_| ModelError::at(format!("{path}.kind"), "expected \"p\" or \"q\""))?;
        let point: Vec<f64> = serde_json::from_value(
            item.get("point").cloned().unwrap_or(Value::Null),
        )
        .map_err(|_| ModelError::at(format!("{path}.point"), "expected number array"))?;
        if point.len() != case.edge_count() {
            return Err(ModelError::at(
                format!("{path}.point"),
                format!("expected {} entries", case.edge_count()),
            ));
        }
        bp.points.insert((bus, kind), point);
    }
    Ok(bp)
}

/// Hyperplanes as JSON for audit output.
pub fn hyperplanes_to_json(case: &NetworkCase, hps: &[Hyperplane]) -> String {
    let items: Vec<Value> = hps
        .iter()
        .map(|hp| {
            serde_json::json!({
                "bus": case.buses[hp.owner.0].id,
                "kind": hp.owner.1,
                "normal": hp.normal,
                "offset": hp.offset,
                "bound": hp.bound,
            })
        })
        .collect();
    serde_json::to_string_pretty(&items).expect("static schema")
}
