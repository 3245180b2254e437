//! Solve reports: JSON with the full effective configuration (so a run is
//! reproducible from the report alone) and a per-iteration CSV trace.
//! Wall-clock times live in a separate `timing` block that determinism
//! comparisons exclude.

use serde::Serialize;

use crate::algorithm::{AlgorithmConfig, IterationTrace};
use crate::transform::{FeasibilityReport, OperatingPoint};

#[derive(Debug, Clone, Serialize)]
pub struct IterationSummary {
    pub k: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub newton_iters: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub per_iteration_ms: Vec<f64>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub objective: String,
    pub status: String,
    pub config: AlgorithmConfig,
    pub iterations: Vec<IterationSummary>,
    pub final_objective: f64,
    pub final_point: OperatingPoint,
    pub feasibility: FeasibilityReport,
    pub timing: Timing,
}

impl SolveReport {
    pub fn new(
        objective: impl Into<String>,
        config: &AlgorithmConfig,
        trace: &IterationTrace,
        final_point: OperatingPoint,
        feasibility: FeasibilityReport,
    ) -> Self {
        let iterations = trace
            .rows
            .iter()
            .map(|row| IterationSummary {
                k: row.k,
                objective: row.objective,
                max_violation: row.max_violation,
                newton_iters: row.newton_iters,
            })
            .collect();
        let per_iteration_ms: Vec<f64> = trace.rows.iter().map(|r| r.wall_ms).collect();
        let total_ms = per_iteration_ms.iter().sum();
        SolveReport {
            objective: objective.into(),
            status: "optimal".into(),
            config: config.clone(),
            final_objective: trace.rows.last().map(|r| r.objective).unwrap_or(f64::NAN),
            iterations,
            final_point,
            feasibility,
            timing: Timing {
                per_iteration_ms,
                total_ms,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// CSV trace: one row per outer iteration.
pub fn trace_csv(trace: &IterationTrace) -> String {
    let mut out = String::from("k,objective,max_violation,newton_iters,wall_ms\n");
    for row in &trace.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.k, row.objective, row.max_violation, row.newton_iters, row.wall_ms
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithm::{initial_point, solve_opf, Objective};
    use crate::cases;
    use crate::transform::check_original_feasibility;

    #[test]
    fn report_roundtrips_and_segregates_timing() {
        let case = cases::two_bus(-0.5);
        let cfg = AlgorithmConfig::default();
        let z0 = initial_point(&case, &cfg).unwrap();
        let (trace, point) = solve_opf(&case, &Objective::Loss, &z0, &cfg).unwrap();
        let feas = check_original_feasibility(&case, &point.z.values, 1e-8).unwrap();
        let report = SolveReport::new("loss", &cfg, &trace, point, feas);
        let json = report.to_json();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(value.get("timing").is_some());
        assert!(value.get("config").is_some());
        assert_eq!(value["status"], "optimal");
        // Iteration entries carry no wall-clock fields.
        assert!(value["iterations"][0].get("wall_ms").is_none());

        let csv = trace_csv(&trace);
        assert!(csv.starts_with("k,objective,max_violation,newton_iters,wall_ms\n"));
        assert_eq!(csv.lines().count(), trace.rows.len() + 1);
    }
}
