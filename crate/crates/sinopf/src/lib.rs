//! Feasibility-guaranteed AC optimal power flow on radial networks.
//!
//! The toolkit works in the transformed coordinates `z_e = sin(theta_ij)`,
//! where angle bounds become a box, upper injection bounds are smooth convex
//! constraints, and the nonconvex lower injection bounds are replaced by
//! supporting hyperplanes anchored at Euclidean projections of the current
//! iterate. Each restricted problem is convex, every point feasible for it
//! is feasible for the original problem, and iterating the
//! project-linearize-solve loop drives the objective down while preserving
//! feasibility at every step. Voltage magnitudes are fixed at 1.0 per unit
//! throughout.
//!
//! Modules:
//! - [`model`]: network records, validation, case JSON.
//! - [`matpower`]: MATPOWER `.m` import.
//! - [`transform`]: injections, flows, derivatives, angle recovery,
//!   feasibility checking in the transformed coordinates.
//! - [`solver`]: log-barrier Newton solver, Euclidean projection, phase 1.
//! - [`restriction`]: base points, supporting hyperplanes, the restricted
//!   convex program, tangency certificates.
//! - [`algorithm`]: objective catalog and the outer iteration loop.
//! - [`baseline`]: cone relaxation, grid oracle, region rasterizer.
//! - [`report`]: JSON/CSV solve reports.

pub mod algorithm;
pub mod baseline;
pub mod cases;
pub mod matpower;
pub mod model;
pub mod report;
pub mod restriction;
pub mod solver;
pub mod transform;

/// Box widths at or below this are treated as pinned (fixed) coordinates.
pub(crate) const PIN_TOL: f64 = 1e-12;

pub use matpower::import_matpower;
pub use model::{
    parse_case, serialize_case, BusRecord, EdgeRecord, ModelError, NetworkCase, ValidationReport,
};
pub use transform::{
    branch_flow, check_original_feasibility, injection_hessian_diag, injection_jacobian,
    injections, min_injection, recover_angles, FeasibilityReport, InjectionKind, OperatingPoint,
    TransformError, ZVector,
};
