//! Log-barrier Newton path-following for smooth convex programs over
//! box + linear + smooth convex inequality constraints, plus the Euclidean
//! projection and phase-1 feasibility routines built on it.
//!
//! The Newton system is assembled densely and factored with Cholesky;
//! problem sizes here stay in the low hundreds of variables. Nonconvex
//! least-squares objectives are admitted through a PSD (Gauss-Newton)
//! Hessian surrogate: the iterates then converge to a feasible stationary
//! point instead of a certified global optimum, and every feasibility
//! guarantee is unaffected because the constraint set stays convex.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pinned coordinates (box width at or below this) are fixed at the midpoint
/// and eliminated from the Newton system.
use crate::PIN_TOL;

/// If a line search stalls while the Newton decrement is already below this,
/// the stage is accepted as converged (progress below floating-point noise).
const STALL_ACCEPT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("start point is not strictly feasible: {0}")]
    NotStrictlyFeasibleStart(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Smooth convex scalar function with per-coordinate (diagonal) curvature.
pub trait ConvexFn: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    /// Writes the full gradient into `out` (overwriting).
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Writes the Hessian diagonal into `out` (overwriting). All constraint
    /// functions in this crate are separable, so the diagonal is exact.
    fn hessian_diag(&self, x: &[f64], out: &mut [f64]);
}

/// Objective callbacks. The Hessian may be a PSD surrogate.
pub trait ObjectiveFn: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn hessian(&self, x: &[f64], out: &mut DMatrix<f64>);
}

/// One smooth inequality `f(x) <= upper`.
pub struct SmoothConstraint {
    pub f: Arc<dyn ConvexFn>,
    pub upper: f64,
    pub label: String,
}

/// One halfspace `normal . x <= offset`.
#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub normal: Vec<f64>,
    pub offset: f64,
    pub label: String,
}

/// The inequality system of a program; `bounds` uses +/- infinity for open
/// sides.
pub struct ConstraintSet {
    pub dimension: usize,
    pub smooth: Vec<SmoothConstraint>,
    pub linear: Vec<LinearConstraint>,
    pub bounds: Vec<(f64, f64)>,
}

impl ConstraintSet {
    pub fn unconstrained(dimension: usize) -> Self {
        ConstraintSet {
            dimension,
            smooth: Vec::new(),
            linear: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); dimension],
        }
    }

    /// Number of barrier terms (pinned box coordinates contribute none).
    fn inequality_count(&self) -> usize {
        let mut m = self.smooth.len() + self.linear.len();
        for &(lo, hi) in &self.bounds {
            if hi - lo <= PIN_TOL {
                continue;
            }
            if lo.is_finite() {
                m += 1;
            }
            if hi.is_finite() {
                m += 1;
            }
        }
        m
    }

    fn pinned(&self, i: usize) -> Option<f64> {
        let (lo, hi) = self.bounds[i];
        (hi - lo <= PIN_TOL && lo.is_finite()).then(|| 0.5 * (lo + hi))
    }

    /// Worst slack over smooth and linear constraints (positive = strictly
    /// inside), ignoring the box.
    pub fn min_relaxable_slack(&self, x: &[f64]) -> f64 {
        let mut min_s = f64::INFINITY;
        for sc in &self.smooth {
            min_s = min_s.min(sc.upper - sc.f.value(x));
        }
        for lc in &self.linear {
            min_s = min_s.min(lc.offset - dot(&lc.normal, x));
        }
        min_s
    }

    /// Worst box slack over free coordinates; pinned coordinates must match
    /// their pin within `PIN_TOL` or this returns a negative slack.
    fn min_box_slack(&self, x: &[f64]) -> f64 {
        let mut min_s = f64::INFINITY;
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if let Some(pin) = self.pinned(i) {
                if (x[i] - pin).abs() > PIN_TOL {
                    return -(x[i] - pin).abs();
                }
                continue;
            }
            if lo.is_finite() {
                min_s = min_s.min(x[i] - lo);
            }
            if hi.is_finite() {
                min_s = min_s.min(hi - x[i]);
            }
        }
        min_s
    }
}

/// Solver-facing program: objective plus a convex inequality system.
pub struct SmoothConvexProgram {
    pub objective: Box<dyn ObjectiveFn>,
    pub constraints: ConstraintSet,
}

impl SmoothConvexProgram {
    pub fn dimension(&self) -> usize {
        self.constraints.dimension
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub barrier_initial_t: f64,
    pub barrier_growth: f64,
    /// Stop once m/t falls below this; m counts barrier terms.
    pub duality_gap_tol: f64,
    /// Per-stage Newton decrement threshold (lambda^2 / 2).
    pub newton_decrement_tol: f64,
    pub max_newton_per_stage: usize,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub min_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            barrier_initial_t: 1.0,
            barrier_growth: 10.0,
            duality_gap_tol: 1e-8,
            newton_decrement_tol: 1e-10,
            max_newton_per_stage: 50,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            min_step: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub status: SolverStatus,
    pub x: Vec<f64>,
    pub objective_value: f64,
    pub newton_iterations: usize,
    /// m/t at exit; upper bound on the optimality gap for convex objectives.
    pub certified_gap: f64,
}

/// Outcome of the phase-1 search for a strictly feasible point.
#[derive(Debug, Clone)]
pub enum Phase1Outcome {
    Feasible(Vec<f64>),
    /// No point had every relaxed slack above the margin; carries the
    /// certified lower bound on the common slack variable and the best
    /// point reached (useful as the next linearization guess).
    Infeasible {
        slack_lower_bound: f64,
        best_point: Vec<f64>,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Barrier machinery
// ---------------------------------------------------------------------------

struct Workspace {
    grad_buf: Vec<f64>,
    hdiag_buf: Vec<f64>,
    hess_buf: DMatrix<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            grad_buf: vec![0.0; n],
            hdiag_buf: vec![0.0; n],
            hess_buf: DMatrix::zeros(n, n),
        }
    }
}

/// Barrier merit `t * f0(x) - sum ln(slack)`; +infinity outside the strictly
/// feasible region (any slack <= 0, or a NaN from an out-of-domain query).
fn merit(prog: &SmoothConvexProgram, x: &[f64], t: f64) -> f64 {
    let cs = &prog.constraints;
    let mut total = if t > 0.0 { t * prog.objective.value(x) } else { 0.0 };
    if !total.is_finite() {
        return f64::INFINITY;
    }
    for sc in &cs.smooth {
        let s = sc.upper - sc.f.value(x);
        if !(s > 0.0) {
            return f64::INFINITY;
        }
        total -= s.ln();
    }
    for lc in &cs.linear {
        let s = lc.offset - dot(&lc.normal, x);
        if !(s > 0.0) {
            return f64::INFINITY;
        }
        total -= s.ln();
    }
    for (i, &(lo, hi)) in cs.bounds.iter().enumerate() {
        if cs.pinned(i).is_some() {
            continue;
        }
        if lo.is_finite() {
            let s = x[i] - lo;
            if !(s > 0.0) {
                return f64::INFINITY;
            }
            total -= s.ln();
        }
        if hi.is_finite() {
            let s = hi - x[i];
            if !(s > 0.0) {
                return f64::INFINITY;
            }
            total -= s.ln();
        }
    }
    total
}

/// Gradient and Hessian of the barrier merit at a strictly feasible x.
fn assemble(
    prog: &SmoothConvexProgram,
    x: &[f64],
    t: f64,
    ws: &mut Workspace,
) -> Result<(DVector<f64>, DMatrix<f64>), SolverError> {
    let cs = &prog.constraints;
    let n = cs.dimension;
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);

    if t > 0.0 {
        prog.objective.gradient(x, &mut ws.grad_buf);
        for i in 0..n {
            grad[i] += t * ws.grad_buf[i];
        }
        prog.objective.hessian(x, &mut ws.hess_buf);
        for i in 0..n {
            for j in 0..n {
                hess[(i, j)] += t * ws.hess_buf[(i, j)];
            }
        }
    }

    for sc in &cs.smooth {
        let s = sc.upper - sc.f.value(x);
        if !(s > 0.0) {
            return Err(SolverError::NumericalFailure(format!(
                "constraint {:?} has nonpositive slack {s} during assembly",
                sc.label
            )));
        }
        sc.f.gradient(x, &mut ws.grad_buf);
        sc.f.hessian_diag(x, &mut ws.hdiag_buf);
        let inv_s = 1.0 / s;
        let inv_s2 = inv_s * inv_s;
        // Rank-one and diagonal contributions; gradients here touch few
        // coordinates, so skip zero entries.
        let support: Vec<usize> = (0..n)
            .filter(|&i| ws.grad_buf[i] != 0.0 || ws.hdiag_buf[i] != 0.0)
            .collect();
        for &i in &support {
            grad[i] += ws.grad_buf[i] * inv_s;
            hess[(i, i)] += ws.hdiag_buf[i] * inv_s;
            for &j in &support {
                hess[(i, j)] += ws.grad_buf[i] * ws.grad_buf[j] * inv_s2;
            }
        }
    }

    for lc in &cs.linear {
        let s = lc.offset - dot(&lc.normal, x);
        if !(s > 0.0) {
            return Err(SolverError::NumericalFailure(format!(
                "constraint {:?} has nonpositive slack {s} during assembly",
                lc.label
            )));
        }
        let inv_s = 1.0 / s;
        let inv_s2 = inv_s * inv_s;
        let support: Vec<usize> = (0..n).filter(|&i| lc.normal[i] != 0.0).collect();
        for &i in &support {
            grad[i] += lc.normal[i] * inv_s;
            for &j in &support {
                hess[(i, j)] += lc.normal[i] * lc.normal[j] * inv_s2;
            }
        }
    }

    for (i, &(lo, hi)) in cs.bounds.iter().enumerate() {
        if cs.pinned(i).is_some() {
            continue;
        }
        if lo.is_finite() {
            let s = x[i] - lo;
            grad[i] -= 1.0 / s;
            hess[(i, i)] += 1.0 / (s * s);
        }
        if hi.is_finite() {
            let s = hi - x[i];
            grad[i] += 1.0 / s;
            hess[(i, i)] += 1.0 / (s * s);
        }
    }

    Ok((grad, hess))
}

/// Largest step along `dx` keeping all linear and box constraints strictly
/// feasible (exact ratio test; smooth constraints are handled by merit
/// backtracking).
fn max_step(cs: &ConstraintSet, x: &[f64], dx: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for lc in &cs.linear {
        let denom = dot(&lc.normal, dx);
        if denom > 0.0 {
            let s = lc.offset - dot(&lc.normal, x);
            alpha = alpha.min(s / denom);
        }
    }
    for (i, &(lo, hi)) in cs.bounds.iter().enumerate() {
        if cs.pinned(i).is_some() {
            continue;
        }
        if dx[i] < 0.0 && lo.is_finite() {
            alpha = alpha.min((x[i] - lo) / -dx[i]);
        }
        if dx[i] > 0.0 && hi.is_finite() {
            alpha = alpha.min((hi - x[i]) / dx[i]);
        }
    }
    alpha
}

fn solve_newton_system(
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    free: &[usize],
) -> Result<DVector<f64>, SolverError> {
    let nf = free.len();
    let mut hf = DMatrix::zeros(nf, nf);
    let mut gf = DVector::zeros(nf);
    for (a, &i) in free.iter().enumerate() {
        gf[a] = grad[i];
        for (b, &j) in free.iter().enumerate() {
            hf[(a, b)] = hess[(i, j)];
        }
    }
    let scale = (0..nf).map(|a| hf[(a, a)].abs()).fold(1.0f64, f64::max);
    let mut ridge = 0.0;
    for _ in 0..10 {
        let mut m = hf.clone();
        if ridge > 0.0 {
            for a in 0..nf {
                m[(a, a)] += ridge;
            }
        }
        if let Some(chol) = m.cholesky() {
            let step = chol.solve(&(-&gf));
            if step.iter().all(|v| v.is_finite()) {
                let mut dx = DVector::zeros(grad.len());
                for (a, &i) in free.iter().enumerate() {
                    dx[i] = step[a];
                }
                return Ok(dx);
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
    Err(SolverError::NumericalFailure(
        "Newton system not positive definite after ridge escalation".into(),
    ))
}

struct StageOutcome {
    iters: usize,
    /// Accepted merit values, first entry at the stage start.
    #[cfg_attr(not(test), allow(dead_code))]
    merits: Vec<f64>,
}

/// One centering stage: damped Newton on the barrier merit at fixed t.
fn newton_stage(
    prog: &SmoothConvexProgram,
    x: &mut DVector<f64>,
    t: f64,
    free: &[usize],
    cfg: &SolverConfig,
    max_iters: usize,
    ws: &mut Workspace,
) -> Result<StageOutcome, SolverError> {
    let cs = &prog.constraints;
    let mut merits = vec![merit(prog, x.as_slice(), t)];
    for iter in 0..max_iters {
        let (grad, hess) = assemble(prog, x.as_slice(), t, ws)?;
        let dx = solve_newton_system(&hess, &grad, free)?;
        let dec2 = -grad.dot(&dx);
        if dec2 / 2.0 <= cfg.newton_decrement_tol {
            return Ok(StageOutcome { iters: iter, merits });
        }

        let amax = max_step(cs, x.as_slice(), dx.as_slice());
        let mut alpha = (0.99 * amax).min(1.0);
        let phi0 = merits[merits.len() - 1];
        let slope = grad.dot(&dx); // negative
        let accepted = loop {
            if alpha < cfg.min_step {
                break None;
            }
            let xt = x.clone() + alpha * &dx;
            let phit = merit(prog, xt.as_slice(), t);
            if phit.is_finite() && phit <= phi0 + cfg.armijo_c1 * alpha * slope {
                break Some((xt, phit));
            }
            alpha *= cfg.backtrack_factor;
        };
        match accepted {
            Some((xt, phit)) => {
                *x = xt;
                merits.push(phit);
            }
            None => {
                if dec2 / 2.0 <= STALL_ACCEPT {
                    return Ok(StageOutcome { iters: iter, merits });
                }
                return Err(SolverError::NumericalFailure(format!(
                    "line search stalled with Newton decrement {dec2:.3e}"
                )));
            }
        }
    }
    Ok(StageOutcome {
        iters: max_iters,
        merits,
    })
}

fn free_coordinates(cs: &ConstraintSet) -> Vec<usize> {
    (0..cs.dimension).filter(|&i| cs.pinned(i).is_none()).collect()
}

fn snap_pinned(cs: &ConstraintSet, x: &mut DVector<f64>) {
    for i in 0..cs.dimension {
        if let Some(pin) = cs.pinned(i) {
            x[i] = pin;
        }
    }
}

fn describe_start(cs: &ConstraintSet, x: &[f64]) -> String {
    for sc in &cs.smooth {
        let s = sc.upper - sc.f.value(x);
        if !(s > 0.0) {
            return format!("{} has slack {s}", sc.label);
        }
    }
    for lc in &cs.linear {
        let s = lc.offset - dot(&lc.normal, x);
        if !(s > 0.0) {
            return format!("{} has slack {s}", lc.label);
        }
    }
    for (i, &(lo, hi)) in cs.bounds.iter().enumerate() {
        if cs.pinned(i).is_some() {
            continue;
        }
        if (lo.is_finite() && x[i] <= lo) || (hi.is_finite() && x[i] >= hi) {
            return format!("coordinate {i} = {} outside box ({lo}, {hi})", x[i]);
        }
    }
    "unknown constraint".into()
}

/// Barrier method from a strictly feasible start. For convex objectives the
/// result is globally optimal to `certified_gap`; for PSD-surrogate
/// objectives it is a feasible stationary point.
pub fn solve(
    prog: &SmoothConvexProgram,
    start: &[f64],
    cfg: &SolverConfig,
) -> Result<SolverResult, SolverError> {
    let cs = &prog.constraints;
    let n = cs.dimension;
    if start.len() != n {
        return Err(SolverError::Dimension(format!(
            "start has {} entries, program dimension is {n}",
            start.len()
        )));
    }
    let mut ws = Workspace::new(n);
    let mut x = DVector::from_column_slice(start);
    snap_pinned(cs, &mut x);
    let free = free_coordinates(cs);

    let strict = cs.min_relaxable_slack(x.as_slice()).min(cs.min_box_slack(x.as_slice()));
    if !(strict > 0.0) {
        return Err(SolverError::NotStrictlyFeasibleStart(describe_start(
            cs,
            x.as_slice(),
        )));
    }
    let mut total_newton = 0;
    if strict < 1e-9 && !free.is_empty() {
        // Nudge toward the analytic center so the first stage starts with
        // workable slacks.
        let st = newton_stage(prog, &mut x, 0.0, &free, cfg, 3, &mut ws)?;
        total_newton += st.iters;
    }

    let m = cs.inequality_count();
    if free.is_empty() {
        // Everything pinned: nothing to optimize.
        return Ok(SolverResult {
            status: SolverStatus::Optimal,
            objective_value: prog.objective.value(x.as_slice()),
            x: x.as_slice().to_vec(),
            newton_iterations: 0,
            certified_gap: 0.0,
        });
    }

    if m == 0 {
        // Unconstrained: plain damped Newton on the objective.
        let st = newton_stage(prog, &mut x, 1.0, &free, cfg, 200, &mut ws)?;
        total_newton += st.iters;
        return Ok(SolverResult {
            status: SolverStatus::Optimal,
            objective_value: prog.objective.value(x.as_slice()),
            x: x.as_slice().to_vec(),
            newton_iterations: total_newton,
            certified_gap: 0.0,
        });
    }

    let mut t = cfg.barrier_initial_t;
    loop {
        let st = newton_stage(prog, &mut x, t, &free, cfg, cfg.max_newton_per_stage, &mut ws)?;
        total_newton += st.iters;
        if m as f64 / t <= cfg.duality_gap_tol {
            break;
        }
        t *= cfg.barrier_growth;
    }

    Ok(SolverResult {
        status: SolverStatus::Optimal,
        objective_value: prog.objective.value(x.as_slice()),
        x: x.as_slice().to_vec(),
        newton_iterations: total_newton,
        certified_gap: m as f64 / t,
    })
}

// ---------------------------------------------------------------------------
// Stock objectives
// ---------------------------------------------------------------------------

/// `c . x + constant`.
pub struct LinearObjective {
    pub coeffs: Vec<f64>,
    pub constant: f64,
}

impl ObjectiveFn for LinearObjective {
    fn value(&self, x: &[f64]) -> f64 {
        dot(&self.coeffs, x) + self.constant
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.coeffs);
    }
    fn hessian(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
    }
}

/// Squared Euclidean distance to a target point.
pub struct SquaredDistance {
    pub target: Vec<f64>,
}

impl ObjectiveFn for SquaredDistance {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = 2.0 * (x[i] - self.target[i]);
        }
    }
    fn hessian(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for i in 0..out.nrows() {
            out[(i, i)] = 2.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Euclidean projection
// ---------------------------------------------------------------------------

/// Euclidean projection of `z0` onto the convex sublevel set `{f <= upper}`.
///
/// `interior_hint` must satisfy `f(hint) < upper` strictly. If `z0` is
/// already in the set it is returned unchanged. Otherwise the projection is
/// computed by the barrier method and then polished onto the boundary by a
/// bisection along the segment toward `z0`, so the result lands on
/// `f = upper` to machine accuracy while staying within the certified
/// distance gap of the true projection.
pub fn project_euclidean(
    f: Arc<dyn ConvexFn>,
    upper: f64,
    z0: &[f64],
    interior_hint: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>, SolverError> {
    let n = z0.len();
    if interior_hint.len() != n {
        return Err(SolverError::Dimension(
            "interior hint dimension differs from z0".into(),
        ));
    }
    if f.value(z0) <= upper {
        return Ok(z0.to_vec());
    }
    if !(f.value(interior_hint) < upper) {
        return Err(SolverError::NotStrictlyFeasibleStart(format!(
            "interior hint has f = {} with bound {upper}",
            f.value(interior_hint)
        )));
    }

    let prog = SmoothConvexProgram {
        objective: Box::new(SquaredDistance { target: z0.to_vec() }),
        constraints: ConstraintSet {
            dimension: n,
            smooth: vec![SmoothConstraint {
                f: Arc::clone(&f),
                upper,
                label: "projection sublevel set".into(),
            }],
            linear: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        },
    };
    let result = solve(&prog, interior_hint, cfg)?;
    let mut inside = result.x;

    // Boundary polish: move toward z0 until f = upper. Walking this segment
    // only shortens the distance to z0, so optimality is preserved.
    debug_assert!(f.value(&inside) <= upper);
    let mut lo = 0.0f64; // at `inside`, f < upper
    let mut hi = 1.0f64; // at z0, f > upper
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let point: Vec<f64> = inside
            .iter()
            .zip(z0)
            .map(|(a, b)| a + mid * (b - a))
            .collect();
        let v = f.value(&point);
        if (v - upper).abs() <= 1e-13 * (1.0 + upper.abs()) {
            return Ok(point);
        }
        if v < upper {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    for (a, b) in inside.iter_mut().zip(z0) {
        *a += t * (*b - *a);
    }
    Ok(inside)
}

// ---------------------------------------------------------------------------
// Phase 1
// ---------------------------------------------------------------------------

struct Relaxed {
    inner: Arc<dyn ConvexFn>,
    n: usize,
}

impl ConvexFn for Relaxed {
    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(&x[..self.n]) - x[self.n]
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.gradient(&x[..self.n], &mut out[..self.n]);
        out[self.n] = -1.0;
    }
    fn hessian_diag(&self, x: &[f64], out: &mut [f64]) {
        self.inner.hessian_diag(&x[..self.n], &mut out[..self.n]);
        out[self.n] = 0.0;
    }
}

/// Minimizes the common constraint relaxation `s` over `(x, s)` with every
/// smooth/linear constraint loosened to `f(x) <= upper + s` and the box kept
/// hard. Returns a strictly feasible point (all relaxed slacks above 1e-9)
/// as soon as one is found, or `Infeasible` with a certified lower bound
/// on `s`.
pub fn phase1(
    cs: &ConstraintSet,
    guess: &[f64],
    cfg: &SolverConfig,
) -> Result<Phase1Outcome, SolverError> {
    const MARGIN: f64 = 1e-9;
    let n = cs.dimension;
    if guess.len() != n {
        return Err(SolverError::Dimension(format!(
            "guess has {} entries, constraint set dimension is {n}",
            guess.len()
        )));
    }

    // Clamp the guess strictly inside the box.
    let mut x0 = guess.to_vec();
    for (i, &(lo, hi)) in cs.bounds.iter().enumerate() {
        if hi - lo <= PIN_TOL {
            if lo.is_finite() {
                x0[i] = 0.5 * (lo + hi);
            }
            continue;
        }
        let width = (hi - lo).min(1.0);
        let eps = (1e-6 * width).min(0.25 * width);
        if lo.is_finite() && x0[i] < lo + eps {
            x0[i] = lo + eps;
        }
        if hi.is_finite() && x0[i] > hi - eps {
            x0[i] = hi - eps;
        }
    }

    let worst = -cs.min_relaxable_slack(&x0);
    if worst < -MARGIN {
        return Ok(Phase1Outcome::Feasible(x0));
    }
    let s0 = worst.max(0.0) + 1.0;

    let smooth: Vec<SmoothConstraint> = cs
        .smooth
        .iter()
        .map(|sc| SmoothConstraint {
            f: Arc::new(Relaxed {
                inner: Arc::clone(&sc.f),
                n,
            }) as Arc<dyn ConvexFn>,
            upper: sc.upper,
            label: sc.label.clone(),
        })
        .collect();
    let linear: Vec<LinearConstraint> = cs
        .linear
        .iter()
        .map(|lc| {
            let mut normal = lc.normal.clone();
            normal.push(-1.0);
            LinearConstraint {
                normal,
                offset: lc.offset,
                label: lc.label.clone(),
            }
        })
        .collect();
    let mut bounds = cs.bounds.clone();
    // Keep the s-domain compact so the barrier problem is well posed.
    bounds.push((-(worst.max(0.0) + 2.0), s0 + 1.0));

    let aug = SmoothConvexProgram {
        objective: Box::new(LinearObjective {
            coeffs: (0..n).map(|_| 0.0).chain([1.0]).collect(),
            constant: 0.0,
        }),
        constraints: ConstraintSet {
            dimension: n + 1,
            smooth,
            linear,
            bounds,
        },
    };

    let mut x = DVector::from_vec(x0.iter().copied().chain([s0]).collect::<Vec<f64>>());
    snap_pinned(&aug.constraints, &mut x);
    let free = free_coordinates(&aug.constraints);
    let m = aug.constraints.inequality_count();
    let mut ws = Workspace::new(n + 1);
    let mut t = cfg.barrier_initial_t;
    let mut best = x.as_slice()[..n].to_vec();
    let mut best_slack = cs.min_relaxable_slack(&best);
    loop {
        newton_stage(&aug, &mut x, t, &free, cfg, cfg.max_newton_per_stage, &mut ws)?;
        let candidate = &x.as_slice()[..n];
        let slack = cs.min_relaxable_slack(candidate);
        if slack > best_slack {
            best_slack = slack;
            best = candidate.to_vec();
        }
        if slack > MARGIN {
            return Ok(Phase1Outcome::Feasible(candidate.to_vec()));
        }
        if m as f64 / t <= cfg.duality_gap_tol {
            break;
        }
        t *= cfg.barrier_growth;
    }

    let s_final = x[n];
    Ok(Phase1Outcome::Infeasible {
        slack_lower_bound: s_final - m as f64 / t,
        best_point: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = x^2 on one coordinate.
    struct Square;
    impl ConvexFn for Square {
        fn value(&self, x: &[f64]) -> f64 {
            x[0] * x[0]
        }
        fn gradient(&self, x: &[f64], out: &mut [f64]) {
            out[0] = 2.0 * x[0];
        }
        fn hessian_diag(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 2.0;
        }
    }

    /// Loss-shaped 1-D constraint g (1 - sqrt(1 - z^2)) + b z.
    struct LossTerm {
        g: f64,
        b: f64,
    }
    impl ConvexFn for LossTerm {
        fn value(&self, x: &[f64]) -> f64 {
            let z = x[0];
            if z.abs() >= 1.0 - 1e-9 {
                return f64::INFINITY;
            }
            self.g * (1.0 - (1.0 - z * z).sqrt()) + self.b * z
        }
        fn gradient(&self, x: &[f64], out: &mut [f64]) {
            let z = x[0];
            out[0] = self.g * z / (1.0 - z * z).sqrt() + self.b;
        }
        fn hessian_diag(&self, x: &[f64], out: &mut [f64]) {
            let z = x[0];
            out[0] = self.g / (1.0 - z * z).sqrt().powi(3);
        }
    }

    fn one_dim_lp() -> SmoothConvexProgram {
        SmoothConvexProgram {
            objective: Box::new(LinearObjective {
                coeffs: vec![1.0],
                constant: 0.0,
            }),
            constraints: ConstraintSet {
                dimension: 1,
                smooth: Vec::new(),
                linear: vec![LinearConstraint {
                    normal: vec![-1.0],
                    offset: -0.25,
                    label: "x >= 0.25".into(),
                }],
                bounds: vec![(0.0, 1.0)],
            },
        }
    }

    #[test]
    fn lp_active_bound() {
        let prog = one_dim_lp();
        let res = solve(&prog, &[0.5], &SolverConfig::default()).unwrap();
        assert!((res.x[0] - 0.25).abs() < 1e-6, "x = {}", res.x[0]);
        assert!(res.certified_gap <= 1e-8);
        assert_eq!(res.status, SolverStatus::Optimal);
    }

    #[test]
    fn quadratic_with_smooth_constraint() {
        // minimize (x - 0.3)^2 subject to x^2 <= 0.04 -> x = 0.2
        let prog = SmoothConvexProgram {
            objective: Box::new(SquaredDistance { target: vec![0.3] }),
            constraints: ConstraintSet {
                dimension: 1,
                smooth: vec![SmoothConstraint {
                    f: Arc::new(Square),
                    upper: 0.04,
                    label: "x^2 <= 0.04".into(),
                }],
                linear: Vec::new(),
                bounds: vec![(f64::NEG_INFINITY, f64::INFINITY)],
            },
        };
        let res = solve(&prog, &[0.0], &SolverConfig::default()).unwrap();
        assert!((res.x[0] - 0.2).abs() < 1e-6, "x = {}", res.x[0]);
    }

    #[test]
    fn rejects_infeasible_start() {
        let prog = one_dim_lp();
        let err = solve(&prog, &[0.1], &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolverError::NotStrictlyFeasibleStart(_)));
    }

    #[test]
    fn merit_nonincreasing_within_stage() {
        let prog = one_dim_lp();
        let mut ws = Workspace::new(1);
        let mut x = DVector::from_vec(vec![0.9]);
        let cfg = SolverConfig::default();
        let st = newton_stage(&prog, &mut x, 4.0, &[0], &cfg, 30, &mut ws).unwrap();
        for pair in st.merits.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn pinned_coordinate_is_fixed() {
        // Two variables; the second pinned at 0.3 by a degenerate box.
        let prog = SmoothConvexProgram {
            objective: Box::new(SquaredDistance {
                target: vec![0.7, 0.0],
            }),
            constraints: ConstraintSet {
                dimension: 2,
                smooth: Vec::new(),
                linear: Vec::new(),
                bounds: vec![(0.0, 1.0), (0.3, 0.3)],
            },
        };
        let res = solve(&prog, &[0.5, 0.3], &SolverConfig::default()).unwrap();
        assert!((res.x[0] - 0.7).abs() < 1e-6);
        assert_eq!(res.x[1], 0.3);
    }

    #[test]
    fn projection_onto_symmetric_loss_set() {
        // g = 1, b = 0: sublevel set {1 - sqrt(1-z^2) <= u} = [-0.5, 0.5]
        // for u = 1 - sqrt(0.75). Projecting 0.8 lands on 0.5.
        let u = 1.0 - 0.75f64.sqrt();
        let f: Arc<dyn ConvexFn> = Arc::new(LossTerm { g: 1.0, b: 0.0 });
        let z = project_euclidean(f, u, &[0.8], &[0.0], &SolverConfig::default()).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-9, "z = {}", z[0]);
    }

    #[test]
    fn projection_onto_shifted_loss_set() {
        // g = 1, b = 2, bound = f(-0.2): the sublevel set is [-1, -0.2];
        // projecting 0.5 lands on -0.2.
        let f: Arc<dyn ConvexFn> = Arc::new(LossTerm { g: 1.0, b: 2.0 });
        let u = f.value(&[-0.2]);
        let hint = [-2.0 / 5f64.sqrt()];
        let z = project_euclidean(f, u, &[0.5], &hint, &SolverConfig::default()).unwrap();
        assert!((z[0] + 0.2).abs() < 1e-9, "z = {}", z[0]);
    }

    #[test]
    fn projection_of_boundary_point_is_identity() {
        let f: Arc<dyn ConvexFn> = Arc::new(Square);
        let u = f.value(&[0.2]); // exactly on the boundary
        let z = project_euclidean(f, u, &[0.2], &[0.0], &SolverConfig::default()).unwrap();
        assert_eq!(z, vec![0.2]);
    }

    #[test]
    fn projection_kkt_side_property() {
        // z0 - proj is a nonnegative multiple of the constraint gradient.
        let f: Arc<dyn ConvexFn> = Arc::new(LossTerm { g: 2.0, b: 1.0 });
        let u = f.value(&[0.1]);
        let z0 = [0.7];
        let z = project_euclidean(
            Arc::clone(&f),
            u,
            &z0,
            &[-1.0 / 5f64.sqrt()],
            &SolverConfig::default(),
        )
        .unwrap();
        let mut grad = vec![0.0];
        f.gradient(&z, &mut grad);
        assert!(grad[0] * (z0[0] - z[0]) >= -1e-10);
    }

    #[test]
    fn phase1_accepts_already_feasible_guess() {
        let prog = one_dim_lp();
        match phase1(&prog.constraints, &[0.5], &SolverConfig::default()).unwrap() {
            Phase1Outcome::Feasible(x) => {
                assert!(x[0] > 0.25 && x[0] < 1.0);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn phase1_finds_interior_from_violating_guess() {
        let prog = one_dim_lp();
        match phase1(&prog.constraints, &[0.05], &SolverConfig::default()).unwrap() {
            Phase1Outcome::Feasible(x) => {
                assert!(x[0] > 0.25 + 1e-9);
                assert!(x[0] < 1.0);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn phase1_certifies_contradiction() {
        // x <= -1 and x >= 1 cannot hold; min common slack is 1.
        let cs = ConstraintSet {
            dimension: 1,
            smooth: Vec::new(),
            linear: vec![
                LinearConstraint {
                    normal: vec![1.0],
                    offset: -1.0,
                    label: "x <= -1".into(),
                },
                LinearConstraint {
                    normal: vec![-1.0],
                    offset: -1.0,
                    label: "x >= 1".into(),
                },
            ],
            bounds: vec![(-5.0, 5.0)],
        };
        match phase1(&cs, &[0.0], &SolverConfig::default()).unwrap() {
            Phase1Outcome::Infeasible {
                slack_lower_bound, ..
            } => {
                assert!((slack_lower_bound - 1.0).abs() < 1e-4);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}
