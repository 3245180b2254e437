//! Evaluation in the transformed coordinates `z_e = sin(theta_tail - theta_head)`.
//!
//! For an edge `e` incident to bus `i`, write `sigma(i,e) = +1` at the tail
//! and `-1` at the head, and `c_e = sqrt(1 - z_e^2)`. Nodal injections are
//!
//! ```text
//! p_i(z) = sum_{e in delta(i)} g_e (1 - c_e) + sigma(i,e) b_e z_e
//! q_i(z) = sum_{e in delta(i)} b_e (1 - c_e) - sigma(i,e) g_e z_e
//! ```
//!
//! Both are convex on |z_e| <= 1 (g, b >= 0), separable across edges, and
//! smooth strictly inside the unit box.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NetworkCase;

/// Derivatives reject |z_e| >= 1 - DOMAIN_MARGIN to stay clear of the
/// 1/c singularity.
pub const DOMAIN_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("dimension mismatch: got {got} z entries for {expected} edges")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("unknown edge index {0}")]
    UnknownEdge(usize),
    #[error("z[{edge}] = {value} outside the derivative domain |z| < 1 - 1e-9")]
    DomainError { edge: usize, value: f64 },
    #[error("case has no valid slack bus")]
    NoSlack,
}

/// Which injection quantity an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InjectionKind {
    #[serde(rename = "p")]
    Active,
    #[serde(rename = "q")]
    Reactive,
}

impl std::fmt::Display for InjectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InjectionKind::Active => write!(f, "p"),
            InjectionKind::Reactive => write!(f, "q"),
        }
    }
}

/// Per-edge sine-of-angle-difference variables in canonical orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZVector {
    pub values: Vec<f64>,
}

impl ZVector {
    pub fn new(values: Vec<f64>, case: &NetworkCase) -> Result<Self, TransformError> {
        check_len(case, &values)?;
        Ok(ZVector { values })
    }

    pub fn zeros(case: &NetworkCase) -> Self {
        ZVector {
            values: vec![0.0; case.edge_count()],
        }
    }
}

/// A full operating point: transformed variables, recovered angles and the
/// injections they imply.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub z: ZVector,
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl OperatingPoint {
    pub fn from_z(case: &NetworkCase, z: &[f64]) -> Result<Self, TransformError> {
        let (p, q) = injections(case, z)?;
        let theta = recover_angles(case, z)?;
        Ok(OperatingPoint {
            z: ZVector {
                values: z.to_vec(),
            },
            theta,
            p,
            q,
        })
    }
}

/// Signed residuals of every original constraint at a point; residual <= 0
/// means satisfied. `violations` lists constraints with residual > tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    #[serde(with = "crate::model::inf_bound")]
    pub max_violation: f64,
    pub tolerance: f64,
    pub violations: Vec<(String, f64)>,
}

fn check_len(case: &NetworkCase, z: &[f64]) -> Result<(), TransformError> {
    if z.len() != case.edge_count() {
        return Err(TransformError::DimensionMismatch {
            got: z.len(),
            expected: case.edge_count(),
        });
    }
    Ok(())
}

fn check_derivative_domain(z: &[f64]) -> Result<(), TransformError> {
    for (e, &v) in z.iter().enumerate() {
        if v.abs() >= 1.0 - DOMAIN_MARGIN {
            return Err(TransformError::DomainError { edge: e, value: v });
        }
    }
    Ok(())
}

#[inline]
fn cos_of(z: f64) -> f64 {
    (1.0 - z * z).max(0.0).sqrt()
}

/// Nodal injections `(p, q)` indexed by bus position.
pub fn injections(case: &NetworkCase, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>), TransformError> {
    check_len(case, z)?;
    let n = case.bus_count();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for (e, edge) in case.edges.iter().enumerate() {
        let zc = z[e];
        let one_minus_c = 1.0 - cos_of(zc);
        let i = case.bus_index(edge.from).ok_or(TransformError::NoSlack)?;
        let j = case.bus_index(edge.to).ok_or(TransformError::NoSlack)?;
        p[i] += edge.g * one_minus_c + edge.b * zc;
        p[j] += edge.g * one_minus_c - edge.b * zc;
        q[i] += edge.b * one_minus_c - edge.g * zc;
        q[j] += edge.b * one_minus_c + edge.g * zc;
    }
    Ok((p, q))
}

/// Active power sent from the tail into edge `e`:
/// `g (1 - sqrt(1 - z^2)) + b z`.
pub fn branch_flow(case: &NetworkCase, z: &[f64], e: usize) -> Result<f64, TransformError> {
    check_len(case, z)?;
    let edge = case.edges.get(e).ok_or(TransformError::UnknownEdge(e))?;
    Ok(edge.g * (1.0 - cos_of(z[e])) + edge.b * z[e])
}

/// Dense Jacobian of `[p; q]` with respect to `z`: `2 |buses| x |edges|`,
/// p-rows first. Sparse in structure (bus-edge incidence).
pub fn injection_jacobian(case: &NetworkCase, z: &[f64]) -> Result<DMatrix<f64>, TransformError> {
    check_len(case, z)?;
    check_derivative_domain(z)?;
    let n = case.bus_count();
    let mut jac = DMatrix::zeros(2 * n, case.edge_count());
    for (e, edge) in case.edges.iter().enumerate() {
        let zc = z[e];
        let ratio = zc / cos_of(zc);
        let i = case.bus_index(edge.from).ok_or(TransformError::NoSlack)?;
        let j = case.bus_index(edge.to).ok_or(TransformError::NoSlack)?;
        jac[(i, e)] = edge.g * ratio + edge.b;
        jac[(j, e)] = edge.g * ratio - edge.b;
        jac[(n + i, e)] = edge.b * ratio - edge.g;
        jac[(n + j, e)] = edge.b * ratio + edge.g;
    }
    Ok(jac)
}

/// Per-edge curvature of one bus injection: `g/c^3` (active) or `b/c^3`
/// (reactive) on incident edges, zero elsewhere. Injections are separable
/// across edges, so off-diagonal curvature vanishes.
pub fn injection_hessian_diag(
    case: &NetworkCase,
    bus: usize,
    kind: InjectionKind,
    z: &[f64],
) -> Result<Vec<f64>, TransformError> {
    check_len(case, z)?;
    check_derivative_domain(z)?;
    let mut diag = vec![0.0; case.edge_count()];
    for (e, edge) in case.edges.iter().enumerate() {
        let i = case.bus_index(edge.from);
        let j = case.bus_index(edge.to);
        if i == Some(bus) || j == Some(bus) {
            let c = cos_of(z[e]);
            let coeff = match kind {
                InjectionKind::Active => edge.g,
                InjectionKind::Reactive => edge.b,
            };
            diag[e] = coeff / (c * c * c);
        }
    }
    Ok(diag)
}

/// Bus angles from tree traversal: slack fixed at zero, then
/// `theta_head = theta_tail - asin(z_e)` along each edge, breadth-first in
/// file order.
pub fn recover_angles(case: &NetworkCase, z: &[f64]) -> Result<Vec<f64>, TransformError> {
    check_len(case, z)?;
    let slack = case.slack_index().ok_or(TransformError::NoSlack)?;
    let inc = case.incidence();
    let mut theta = vec![f64::NAN; case.bus_count()];
    theta[slack] = 0.0;
    let mut queue = VecDeque::from([slack]);
    while let Some(i) = queue.pop_front() {
        for &(e, sigma) in &inc[i] {
            let edge = &case.edges[e];
            let other_id = if sigma > 0.0 { edge.to } else { edge.from };
            let j = case.bus_index(other_id).ok_or(TransformError::NoSlack)?;
            if theta[j].is_nan() {
                theta[j] = theta[i] - sigma * z[e].asin();
                queue.push_back(j);
            }
        }
    }
    Ok(theta)
}

/// Checks membership in the original (nonconvex) feasible set: the z box and
/// every finite injection bound. Residuals are raw (`lhs - bound`), so
/// <= 0 means satisfied; `feasible` holds iff all residuals <= `tol`.
pub fn check_original_feasibility(
    case: &NetworkCase,
    z: &[f64],
    tol: f64,
) -> Result<FeasibilityReport, TransformError> {
    check_len(case, z)?;
    let (p, q) = injections(case, z)?;
    let mut max_violation = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    let mut record = |label: String, residual: f64| {
        if residual.is_finite() {
            if residual > max_violation {
                max_violation = residual;
            }
            if residual > tol {
                violations.push((label, residual));
            }
        }
    };

    for (e, (lo, hi)) in case.z_bounds().into_iter().enumerate() {
        record(format!("z lower bound edge {e}"), lo - z[e]);
        record(format!("z upper bound edge {e}"), z[e] - hi);
    }
    for (i, bus) in case.buses.iter().enumerate() {
        if bus.p_min.is_finite() {
            record(format!("p_min bus {}", bus.id), bus.p_min - p[i]);
        }
        if bus.p_max.is_finite() {
            record(format!("p_max bus {}", bus.id), p[i] - bus.p_max);
        }
        if bus.q_min.is_finite() {
            record(format!("q_min bus {}", bus.id), bus.q_min - q[i]);
        }
        if bus.q_max.is_finite() {
            record(format!("q_max bus {}", bus.id), q[i] - bus.q_max);
        }
    }

    Ok(FeasibilityReport {
        feasible: max_violation <= tol,
        max_violation,
        tolerance: tol,
        violations,
    })
}

/// Parameters of one incident edge as seen from a given bus.
#[derive(Debug, Clone, Copy)]
pub(crate) struct IncidentEdge {
    pub edge: usize,
    pub g: f64,
    pub b: f64,
    pub sigma: f64,
}

pub(crate) fn incident_edges(case: &NetworkCase, bus: usize) -> Vec<IncidentEdge> {
    let mut out = Vec::new();
    for (e, edge) in case.edges.iter().enumerate() {
        if case.bus_index(edge.from) == Some(bus) {
            out.push(IncidentEdge {
                edge: e,
                g: edge.g,
                b: edge.b,
                sigma: 1.0,
            });
        } else if case.bus_index(edge.to) == Some(bus) {
            out.push(IncidentEdge {
                edge: e,
                g: edge.g,
                b: edge.b,
                sigma: -1.0,
            });
        }
    }
    out
}

/// Per-edge term of a bus injection.
#[inline]
pub(crate) fn edge_term(kind: InjectionKind, g: f64, b: f64, sigma: f64, z: f64) -> f64 {
    let one_minus_c = 1.0 - cos_of(z);
    match kind {
        InjectionKind::Active => g * one_minus_c + sigma * b * z,
        InjectionKind::Reactive => b * one_minus_c - sigma * g * z,
    }
}

#[inline]
pub(crate) fn edge_term_derivative(kind: InjectionKind, g: f64, b: f64, sigma: f64, z: f64) -> f64 {
    let ratio = z / cos_of(z);
    match kind {
        InjectionKind::Active => g * ratio + sigma * b,
        InjectionKind::Reactive => b * ratio - sigma * g,
    }
}

/// Coordinate of the unconstrained per-edge minimizer of one injection term
/// over |z| <= 1.
pub(crate) fn edge_term_minimizer(kind: InjectionKind, g: f64, b: f64, sigma: f64) -> f64 {
    let norm = (g * g + b * b).sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    match kind {
        InjectionKind::Active => -sigma * b / norm,
        InjectionKind::Reactive => sigma * g / norm,
    }
}

/// Infimum of one bus injection over the unrestricted ball |z_e| <= 1:
/// each edge contributes `g - sqrt(g^2 + b^2)` (active) or
/// `b - sqrt(g^2 + b^2)` (reactive), attained independently per edge.
pub fn min_injection(case: &NetworkCase, bus: usize, kind: InjectionKind) -> f64 {
    incident_edges(case, bus)
        .iter()
        .map(|ie| {
            let norm = (ie.g * ie.g + ie.b * ie.b).sqrt();
            match kind {
                InjectionKind::Active => ie.g - norm,
                InjectionKind::Reactive => ie.b - norm,
            }
        })
        .sum()
}

/// Extremes of one bus injection over the z box (per-edge interval scan:
/// the convex term attains its minimum at the clamped stationary point and
/// its maximum at an interval endpoint).
pub(crate) fn injection_range_over_box(
    case: &NetworkCase,
    bus: usize,
    kind: InjectionKind,
) -> (f64, f64) {
    let zb = case.z_bounds();
    let mut lo = 0.0;
    let mut hi = 0.0;
    for ie in incident_edges(case, bus) {
        let (zl, zh) = zb[ie.edge];
        let star = edge_term_minimizer(kind, ie.g, ie.b, ie.sigma).clamp(zl, zh);
        lo += edge_term(kind, ie.g, ie.b, ie.sigma, star);
        hi += edge_term(kind, ie.g, ie.b, ie.sigma, zl)
            .max(edge_term(kind, ie.g, ie.b, ie.sigma, zh));
    }
    (lo, hi)
}

/// Split feasibility margins: box and injection constraints separately, so
/// callers can demand strictness on injections while tolerating pinned box
/// coordinates (degenerate angle intervals) sitting exactly on their bound.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Margins {
    /// Worst box residual over non-pinned coordinates (<= 0 inside).
    pub box_violation: f64,
    /// Worst |z - pin| over pinned coordinates.
    pub pinned_mismatch: f64,
    /// Worst residual over finite injection bounds (< 0 strictly inside).
    pub injection_violation: f64,
}

pub(crate) fn feasibility_margins(case: &NetworkCase, z: &[f64]) -> Result<Margins, TransformError> {
    check_len(case, z)?;
    let mut box_violation = f64::NEG_INFINITY;
    let mut pinned_mismatch: f64 = 0.0;
    for (e, (lo, hi)) in case.z_bounds().into_iter().enumerate() {
        if hi - lo <= crate::PIN_TOL {
            pinned_mismatch = pinned_mismatch.max((z[e] - 0.5 * (lo + hi)).abs());
        } else {
            box_violation = box_violation.max(lo - z[e]).max(z[e] - hi);
        }
    }
    let (p, q) = injections(case, z)?;
    let mut injection_violation = f64::NEG_INFINITY;
    for (i, bus) in case.buses.iter().enumerate() {
        for (bound, value, sign) in [
            (bus.p_min, p[i], -1.0),
            (bus.p_max, p[i], 1.0),
            (bus.q_min, q[i], -1.0),
            (bus.q_max, q[i], 1.0),
        ] {
            if bound.is_finite() {
                injection_violation = injection_violation.max(sign * (value - bound));
            }
        }
    }
    Ok(Margins {
        box_violation,
        pinned_mismatch,
        injection_violation,
    })
}

/// Box corner maximizing one bus injection; coordinates not incident to the
/// bus are copied from `base`.
pub(crate) fn box_maximizer(
    case: &NetworkCase,
    bus: usize,
    kind: InjectionKind,
    base: &[f64],
) -> Vec<f64> {
    let zb = case.z_bounds();
    let mut out = base.to_vec();
    for ie in incident_edges(case, bus) {
        let (zl, zh) = zb[ie.edge];
        let at_lo = edge_term(kind, ie.g, ie.b, ie.sigma, zl);
        let at_hi = edge_term(kind, ie.g, ie.b, ie.sigma, zh);
        out[ie.edge] = if at_hi >= at_lo { zh } else { zl };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn injections_vanish_at_zero() {
        let case = cases::two_bus(-0.5);
        let (p, q) = injections(&case, &[0.0]).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn injections_hand_evaluated() {
        // g = 1, b = 2, z = 0.6 so c = 0.8.
        let case = cases::two_bus(-0.5);
        let (p, q) = injections(&case, &[0.6]).unwrap();
        assert_relative_eq!(p[0], 1.4, max_relative = 1e-12);
        assert_relative_eq!(p[1], -1.0, max_relative = 1e-12);
        assert_relative_eq!(q[0], -0.2, max_relative = 1e-12);
        assert_relative_eq!(q[1], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn injections_reject_wrong_length() {
        let case = cases::two_bus(-0.5);
        assert!(matches!(
            injections(&case, &[0.6, 0.1]),
            Err(TransformError::DimensionMismatch { got: 2, expected: 1 })
        ));
    }

    #[test]
    fn branch_flow_values() {
        let case = cases::two_bus(-0.5);
        assert_eq!(branch_flow(&case, &[0.0], 0).unwrap(), 0.0);
        assert_relative_eq!(branch_flow(&case, &[0.6], 0).unwrap(), 1.4, max_relative = 1e-12);
        let mut no_b = cases::two_bus(-0.5);
        no_b.edges[0].b = 0.0;
        assert_relative_eq!(
            branch_flow(&no_b, &[-0.6], 0).unwrap(),
            0.2,
            max_relative = 1e-12
        );
        assert!(matches!(
            branch_flow(&case, &[0.0], 3),
            Err(TransformError::UnknownEdge(3))
        ));
    }

    #[test]
    fn jacobian_entries() {
        let case = cases::two_bus(-0.5);
        let j0 = injection_jacobian(&case, &[0.0]).unwrap();
        assert_eq!(j0[(0, 0)], 2.0);
        assert_eq!(j0[(1, 0)], -2.0);
        assert_eq!(j0[(2, 0)], -1.0);
        assert_eq!(j0[(3, 0)], 1.0);

        let j = injection_jacobian(&case, &[0.6]).unwrap();
        assert_relative_eq!(j[(0, 0)], 0.6 / 0.8 + 2.0, max_relative = 1e-12);

        assert!(matches!(
            injection_jacobian(&case, &[0.999999999]),
            Err(TransformError::DomainError { .. })
        ));
    }

    #[test]
    fn hessian_diag_entries() {
        let case = cases::two_bus(-0.5);
        let h = injection_hessian_diag(&case, 0, InjectionKind::Active, &[0.0]).unwrap();
        assert_eq!(h, vec![1.0]);
        let h = injection_hessian_diag(&case, 0, InjectionKind::Active, &[0.6]).unwrap();
        assert_relative_eq!(h[0], 1.0 / 0.8f64.powi(3), max_relative = 1e-12);

        let mut no_b = cases::two_bus(-0.5);
        no_b.edges[0].b = 0.0;
        let h = injection_hessian_diag(&no_b, 0, InjectionKind::Reactive, &[0.3]).unwrap();
        assert_eq!(h, vec![0.0]); // degenerates to linear
    }

    #[test]
    fn angle_recovery() {
        let case = cases::two_bus(-0.5);
        assert_eq!(recover_angles(&case, &[0.0]).unwrap(), vec![0.0, 0.0]);
        let theta = recover_angles(&case, &[0.6]).unwrap();
        assert_relative_eq!(theta[1], -0.6435011087932844, max_relative = 1e-12);

        let line = cases::three_bus_line();
        let theta = recover_angles(&line, &[0.5, -0.5]).unwrap();
        assert_relative_eq!(theta[1], -0.5235987755982989, max_relative = 1e-12);
        assert!(theta[2].abs() < 1e-15);
    }

    #[test]
    fn angle_recovery_roundtrip() {
        let case = cases::three_bus_line();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-0.85..0.85)).collect();
            let theta = recover_angles(&case, &z).unwrap();
            for (e, edge) in case.edges.iter().enumerate() {
                let i = case.bus_index(edge.from).unwrap();
                let j = case.bus_index(edge.to).unwrap();
                assert!((z[e] - (theta[i] - theta[j]).sin()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feasibility_reports() {
        let case = cases::three_bus_line();
        let rep = check_original_feasibility(&case, &[0.0, 0.0], 0.0).unwrap();
        assert!(rep.feasible);
        assert!(rep.max_violation <= 0.0);

        let case = cases::two_bus(-0.5);
        let rep = check_original_feasibility(&case, &[0.0], 0.0).unwrap();
        assert!(!rep.feasible);
        let hit = rep
            .violations
            .iter()
            .find(|(label, _)| label == "p_max bus 2")
            .expect("p_max violated");
        assert_relative_eq!(hit.1, 0.5, max_relative = 1e-12);

        let mut wide = cases::two_bus(1.0);
        wide.edges[0].theta_min = -std::f64::consts::FRAC_PI_3;
        wide.edges[0].theta_max = std::f64::consts::FRAC_PI_3;
        let rep = check_original_feasibility(&wide, &[0.95], 0.0).unwrap();
        let hit = rep
            .violations
            .iter()
            .find(|(label, _)| label == "z upper bound edge 0")
            .expect("z bound violated");
        assert_relative_eq!(hit.1, 0.95 - 0.8660254037844386, max_relative = 1e-9);
    }

    #[test]
    fn min_injection_closed_form() {
        let case = cases::two_bus(-0.5);
        assert_relative_eq!(
            min_injection(&case, 0, InjectionKind::Active),
            1.0 - 5f64.sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            min_injection(&case, 0, InjectionKind::Reactive),
            2.0 - 5f64.sqrt(),
            max_relative = 1e-12
        );
        let mut pure_g = cases::two_bus(-0.5);
        pure_g.edges[0].b = 0.0;
        assert_eq!(min_injection(&pure_g, 0, InjectionKind::Active), 0.0);
    }

    #[test]
    fn min_injection_is_attained_lower_bound() {
        let case = cases::three_bus_line();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bus in 0..3 {
            for kind in [InjectionKind::Active, InjectionKind::Reactive] {
                let m = min_injection(&case, bus, kind);
                for _ in 0..10_000 {
                    let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let (p, q) = injections(&case, &z).unwrap();
                    let v = match kind {
                        InjectionKind::Active => p[bus],
                        InjectionKind::Reactive => q[bus],
                    };
                    assert!(v >= m - 1e-12);
                }
                // Equality at the closed-form minimizer.
                let mut zstar = vec![0.0; 2];
                for ie in incident_edges(&case, bus) {
                    zstar[ie.edge] = edge_term_minimizer(kind, ie.g, ie.b, ie.sigma);
                }
                let (p, q) = injections(&case, &zstar).unwrap();
                let v = match kind {
                    InjectionKind::Active => p[bus],
                    InjectionKind::Reactive => q[bus],
                };
                assert!((v - m).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn orientation_antisymmetry_and_loss() {
        // p_i + p_j = 2 g (1 - c) >= 0 per edge; b-terms cancel. Same shape
        // for q with 2 b (1 - c).
        let case = cases::two_bus(-0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let z = [rng.random_range(-0.999..0.999)];
            let (p, q) = injections(&case, &z).unwrap();
            let c = (1.0 - z[0] * z[0]).sqrt();
            assert_relative_eq!(p[0] + p[1], 2.0 * (1.0 - c), epsilon = 1e-12);
            assert_relative_eq!(q[0] + q[1], 4.0 * (1.0 - c), epsilon = 1e-12);
            assert!(p[0] + p[1] >= -1e-15);
        }
    }

    #[test]
    fn injections_convex_along_segments() {
        let case = cases::three_bus_line();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let za: Vec<f64> = (0..2).map(|_| rng.random_range(-0.99..0.99)).collect();
            let zb: Vec<f64> = (0..2).map(|_| rng.random_range(-0.99..0.99)).collect();
            let lam: f64 = rng.random_range(0.0..1.0);
            let mid: Vec<f64> = za
                .iter()
                .zip(&zb)
                .map(|(a, b)| lam * a + (1.0 - lam) * b)
                .collect();
            let (pa, qa) = injections(&case, &za).unwrap();
            let (pb, qb) = injections(&case, &zb).unwrap();
            let (pm, qm) = injections(&case, &mid).unwrap();
            for i in 0..3 {
                assert!(pm[i] <= lam * pa[i] + (1.0 - lam) * pb[i] + 1e-12);
                assert!(qm[i] <= lam * qa[i] + (1.0 - lam) * qb[i] + 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let case = cases::three_bus_line();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..100 {
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            let jac = injection_jacobian(&case, &z).unwrap();
            for e in 0..2 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[e] += h;
                zm[e] -= h;
                let (pp, qp) = injections(&case, &zp).unwrap();
                let (pm, qm) = injections(&case, &zm).unwrap();
                for i in 0..3 {
                    let fd_p = (pp[i] - pm[i]) / (2.0 * h);
                    let fd_q = (qp[i] - qm[i]) / (2.0 * h);
                    let scale_p = jac[(i, e)].abs().max(1.0);
                    let scale_q = jac[(3 + i, e)].abs().max(1.0);
                    assert!((jac[(i, e)] - fd_p).abs() <= 1e-6 * scale_p);
                    assert!((jac[(3 + i, e)] - fd_q).abs() <= 1e-6 * scale_q);
                }
            }
        }
    }
}
