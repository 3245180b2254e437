//! wasm-bindgen surface for the browser demo. The page drives three
//! operations: rasterize the original/restricted regions over two edges,
//! run the iterative algorithm and return the iterate path with the
//! supporting hyperplanes of every round, and list the built-in cases.
//!
//! All payloads cross the boundary as JSON strings or flat byte arrays so
//! the page needs no framework and the crate no DOM bindings.

use wasm_bindgen::prelude::*;

use sinopf::algorithm::{initial_point, solve_opf, AlgorithmConfig, Objective};
use sinopf::baseline::{default_fixed_values, raster_region, RasterMode};
use sinopf::restriction::{base_points, hyperplanes};
use sinopf::solver::SolverConfig;
use sinopf::{cases, parse_case, serialize_case, NetworkCase};

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn load(case_json: &str) -> Result<NetworkCase, JsValue> {
    let case = parse_case(case_json).map_err(err)?;
    let report = case.validate();
    if !report.ok {
        let v = &report.violations[0];
        return Err(err(format!("{} ({}): {}", v.rule, v.element, v.message)));
    }
    Ok(case)
}

/// Built-in example cases as a JSON object `{name: caseDocument}`.
#[wasm_bindgen]
pub fn builtin_cases() -> String {
    let entries = [
        ("three-bus line", cases::three_bus_line()),
        ("two-bus load", cases::two_bus(-0.5)),
        ("inexact relaxation", cases::inexact_relaxation()),
    ];
    let mut map = serde_json::Map::new();
    for (name, case) in entries {
        let doc: serde_json::Value =
            serde_json::from_str(&serialize_case(&case)).expect("case serializes");
        map.insert(name.to_string(), doc);
    }
    serde_json::Value::Object(map).to_string()
}

/// Metadata for the selected edge pair: z-box bounds and the pinned values
/// used for all other edges.
#[wasm_bindgen]
pub fn region_info(case_json: &str, edge_a: usize, edge_b: usize) -> Result<String, JsValue> {
    let case = load(case_json)?;
    let zb = case.z_bounds();
    if edge_a >= zb.len() || edge_b >= zb.len() {
        return Err(err("edge index out of range"));
    }
    Ok(serde_json::json!({
        "edge_count": case.edge_count(),
        "lo_a": zb[edge_a].0,
        "hi_a": zb[edge_a].1,
        "lo_b": zb[edge_b].0,
        "hi_b": zb[edge_b].1,
        "fixed": default_fixed_values(&case),
    })
    .to_string())
}

/// Region flags over the box of two edges at the given resolution, row-major
/// with the `edge_a` axis outermost. Bit 0: original feasible set, bit 1:
/// convex restriction anchored at an automatically found feasible point.
/// When no feasible point exists the restriction bit stays zero everywhere.
#[wasm_bindgen]
pub fn raster_flags(
    case_json: &str,
    edge_a: usize,
    edge_b: usize,
    resolution: usize,
) -> Result<Vec<u8>, JsValue> {
    let case = load(case_json)?;
    let fixed = default_fixed_values(&case);
    let bp = initial_point(&case, &AlgorithmConfig::default())
        .ok()
        .and_then(|z0| base_points(&case, &z0, &SolverConfig::default()).ok());
    let mode = match &bp {
        Some(bp) => RasterMode::Both(bp),
        None => RasterMode::Original,
    };
    let grid = raster_region(&case, (edge_a, edge_b), resolution, mode, &fixed).map_err(err)?;
    Ok(grid
        .cells
        .iter()
        .map(|c| (c.original as u8) | ((c.restricted as u8) << 1))
        .collect())
}

/// Runs the iterative algorithm and returns the path of iterates together
/// with the hyperplanes linearized at each round's anchor, as JSON.
#[wasm_bindgen]
pub fn solve_trace(
    case_json: &str,
    objective: &str,
    max_iter: usize,
) -> Result<String, JsValue> {
    let case = load(case_json)?;
    let obj = match objective {
        "loss" => Objective::Loss,
        "cost" => Objective::cost_from_case(&case).map_err(err)?,
        other => return Err(err(format!("unknown objective {other:?} (loss|cost)"))),
    };
    let mut config = AlgorithmConfig::default();
    if max_iter > 0 {
        config.max_outer = max_iter;
    }
    let z0 = initial_point(&case, &config).map_err(err)?;
    let (trace, point) = solve_opf(&case, &obj, &z0, &config).map_err(err)?;

    let mut iterations = Vec::new();
    let mut anchor = z0.clone();
    for row in &trace.rows {
        let hps = base_points(&case, &anchor, &config.solver)
            .and_then(|bp| hyperplanes(&case, &bp))
            .map_err(err)?;
        let hyperplane_docs: Vec<serde_json::Value> = hps
            .iter()
            .map(|hp| {
                serde_json::json!({
                    "bus": case.buses[hp.owner.0].id,
                    "kind": match hp.owner.1 {
                        sinopf::InjectionKind::Active => "p",
                        sinopf::InjectionKind::Reactive => "q",
                    },
                    "normal": hp.normal,
                    "offset": hp.offset,
                    "bound": hp.bound,
                })
            })
            .collect();
        iterations.push(serde_json::json!({
            "k": row.k,
            "z": row.iterate,
            "objective": row.objective,
            "max_violation": row.max_violation,
            "hyperplanes": hyperplane_docs,
        }));
        anchor = row.iterate.clone();
    }

    Ok(serde_json::json!({
        "initial": z0,
        "iterations": iterations,
        "final_z": point.z.values,
        "final_theta": point.theta,
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_cases_parse_back() {
        let doc: serde_json::Value = serde_json::from_str(&builtin_cases()).unwrap();
        let obj = doc.as_object().unwrap();
        assert_eq!(obj.len(), 3);
        for (_, case_doc) in obj {
            let case = parse_case(&case_doc.to_string()).unwrap();
            assert!(case.validate().ok);
        }
    }

    #[test]
    fn raster_flags_cover_grid() {
        let case_json = serialize_case(&cases::three_bus_line());
        let flags = raster_flags(&case_json, 0, 1, 80).unwrap();
        assert_eq!(flags.len(), 6400);
        // Yellow (restricted) cells are a subset of cyan (original) cells.
        assert!(flags.iter().all(|&f| f & 2 == 0 || f & 1 == 1));
        assert!(flags.iter().any(|&f| f & 2 != 0));
    }

    #[test]
    fn solve_trace_shape() {
        let case_json = serialize_case(&cases::three_bus_line());
        let doc: serde_json::Value =
            serde_json::from_str(&solve_trace(&case_json, "cost", 10).unwrap()).unwrap();
        let iterations = doc["iterations"].as_array().unwrap();
        assert!(!iterations.is_empty());
        assert_eq!(iterations[0]["hyperplanes"].as_array().unwrap().len(), 4);
        assert!(doc["final_z"].as_array().unwrap().len() == 2);
    }
}
