//! MATPOWER case import (`mpc.bus` / `mpc.branch` / `mpc.gen` tables only).
//!
//! Per branch with series impedance `r + jx` the edge parameters are
//! `g = r / (r^2 + x^2)` and `b = x / (r^2 + x^2)`, which keeps `b >= 0`
//! for inductive lines under the sign convention of the injection formulas.
//! Bus injection bounds come from aggregated generator limits minus the
//! fixed load; buses without generators become equality-like fixed
//! injections. Everything outside this model (shunts, line charging, taps,
//! phase shifts, voltage magnitude limits) is ignored with a warning rather
//! than silently reinterpreted.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_3;

use crate::model::{BusRecord, EdgeRecord, ModelError, NetworkCase, ValidationReport, Violation};

/// Angle limits fall back to +/- 60 degrees when MATPOWER marks them
/// unconstrained (0, 0); limits outside the open (-pi/2, pi/2) window are
/// clamped to +/- 89.9 degrees with a warning.
const DEFAULT_ANGLE_LIMIT: f64 = FRAC_PI_3;
const ANGLE_CLAMP: f64 = 89.9 * std::f64::consts::PI / 180.0;

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|line| line.split('%').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn scalar_after(text: &str, key: &str) -> Option<f64> {
    let idx = text.find(key)?;
    let rest = &text[idx + key.len()..];
    let eq = rest.find('=')?;
    let tail = &rest[eq + 1..];
    let end = tail.find(';')?;
    tail[..end].trim().parse().ok()
}

fn table(text: &str, name: &str) -> Result<Vec<Vec<f64>>, ModelError> {
    let key = format!("mpc.{name}");
    let idx = text
        .find(&key)
        .ok_or_else(|| ModelError::at(key.clone(), "table not found"))?;
    let rest = &text[idx + key.len()..];
    let open = rest
        .find('[')
        .ok_or_else(|| ModelError::at(key.clone(), "missing '['"))?;
    let body = &rest[open + 1..];
    let close = body
        .find(']')
        .ok_or_else(|| ModelError::at(key.clone(), "missing closing ']'"))?;
    let mut rows = Vec::new();
    for raw_row in body[..close].split([';', '\n']) {
        let cells: Result<Vec<f64>, _> = raw_row
            .split([' ', '\t', ','])
            .filter(|tok| !tok.trim().is_empty())
            .map(|tok| tok.trim().parse::<f64>())
            .collect();
        let cells = cells.map_err(|e| {
            ModelError::at(key.clone(), format!("unreadable row {raw_row:?}: {e}"))
        })?;
        if !cells.is_empty() {
            rows.push(cells);
        }
    }
    Ok(rows)
}

fn col(row: &[f64], idx: usize) -> f64 {
    row.get(idx).copied().unwrap_or(0.0)
}

/// Imports a MATPOWER `.m` case. The returned report carries both the
/// import warnings and the standard case validation (tree shape, parameter
/// signs, angle windows).
pub fn import_matpower(text: &str) -> Result<(NetworkCase, ValidationReport), ModelError> {
    let text = strip_comments(text);
    let mut warnings = Vec::new();
    let mut extra_violations: Vec<Violation> = Vec::new();

    let base_mva = match scalar_after(&text, "mpc.baseMVA") {
        Some(v) if v > 0.0 => v,
        _ => {
            warnings.push("baseMVA missing or invalid; assuming 100".into());
            100.0
        }
    };

    let bus_rows = table(&text, "bus")?;
    let gen_rows = table(&text, "gen")?;
    let branch_rows = table(&text, "branch")?;

    // Aggregate in-service generator limits per bus (MW / MVAr).
    let mut gen_limits: HashMap<u32, (f64, f64, f64, f64)> = HashMap::new();
    let mut first_gen_bus = None;
    for row in &gen_rows {
        if col(row, 7) == 0.0 {
            continue;
        }
        let bus = col(row, 0) as u32;
        first_gen_bus.get_or_insert(bus);
        let entry = gen_limits.entry(bus).or_insert((0.0, 0.0, 0.0, 0.0));
        entry.0 += col(row, 9); // PMIN
        entry.1 += col(row, 8); // PMAX
        entry.2 += col(row, 4); // QMIN
        entry.3 += col(row, 3); // QMAX
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut slack = None;
    let mut voltage_limit_buses = 0usize;
    for row in &bus_rows {
        if row.len() < 4 {
            return Err(ModelError::at(
                "mpc.bus",
                format!("bus row needs at least 4 columns, got {}", row.len()),
            ));
        }
        let id = col(row, 0) as u32;
        if col(row, 1) == 3.0 && slack.is_none() {
            slack = Some(id);
        }
        let pd = col(row, 2) / base_mva;
        let qd = col(row, 3) / base_mva;
        if col(row, 4) != 0.0 || col(row, 5) != 0.0 {
            warnings.push(format!("bus {id}: shunt (GS/BS) ignored"));
        }
        if row.len() >= 13 && (col(row, 11) != 0.0 || col(row, 12) != 0.0) {
            voltage_limit_buses += 1;
        }
        let (pmin, pmax, qmin, qmax) = gen_limits.get(&id).copied().unwrap_or((0.0, 0.0, 0.0, 0.0));
        buses.push(BusRecord {
            id,
            p_min: pmin / base_mva - pd,
            p_max: pmax / base_mva - pd,
            q_min: qmin / base_mva - qd,
            q_max: qmax / base_mva - qd,
            cost_coeff: 0.0,
        });
    }
    if voltage_limit_buses > 0 {
        warnings.push(format!(
            "voltage magnitude limits ignored on {voltage_limit_buses} buses (magnitudes fixed at 1.0)"
        ));
    }

    let slack_bus = match slack {
        Some(s) => s,
        None => match first_gen_bus {
            Some(g) => {
                warnings.push(format!("no type-3 bus; slack set to first generator bus {g}"));
                g
            }
            None => {
                let first = buses.first().map(|b| b.id).unwrap_or(0);
                warnings.push(format!("no type-3 bus or generator; slack set to bus {first}"));
                first
            }
        },
    };

    let mut edges = Vec::with_capacity(branch_rows.len());
    for (k, row) in branch_rows.iter().enumerate() {
        if row.len() < 4 {
            return Err(ModelError::at(
                "mpc.branch",
                format!("branch row needs at least 4 columns, got {}", row.len()),
            ));
        }
        let status = if row.len() > 10 { col(row, 10) } else { 1.0 };
        if status == 0.0 {
            warnings.push(format!("branch {k}: out of service, dropped"));
            continue;
        }
        let r = col(row, 2);
        let x = col(row, 3);
        let denom = r * r + x * x;
        if denom == 0.0 {
            extra_violations.push(Violation {
                rule: "line impedance nonzero".into(),
                element: format!("branch {k}"),
                message: "r = x = 0".into(),
            });
            continue;
        }
        if col(row, 4) != 0.0 {
            warnings.push(format!("branch {k}: line charging (B) ignored"));
        }
        let tap = col(row, 8);
        if tap != 0.0 && tap != 1.0 {
            warnings.push(format!("branch {k}: tap ignored (tap = {tap})"));
        }
        if col(row, 9) != 0.0 {
            warnings.push(format!("branch {k}: phase shift ignored"));
        }

        let (mut theta_min, mut theta_max) = (-DEFAULT_ANGLE_LIMIT, DEFAULT_ANGLE_LIMIT);
        if row.len() >= 13 {
            let angmin = col(row, 11);
            let angmax = col(row, 12);
            if angmin != 0.0 || angmax != 0.0 {
                theta_min = angmin.to_radians();
                theta_max = angmax.to_radians();
                if theta_min < -ANGLE_CLAMP || theta_max > ANGLE_CLAMP {
                    theta_min = theta_min.max(-ANGLE_CLAMP);
                    theta_max = theta_max.min(ANGLE_CLAMP);
                    warnings.push(format!(
                        "branch {k}: angle limit clamped into (-pi/2, pi/2)"
                    ));
                }
            }
        }

        edges.push(EdgeRecord {
            from: col(row, 0) as u32,
            to: col(row, 1) as u32,
            g: r / denom,
            b: x / denom,
            theta_min,
            theta_max,
        });
    }

    let case = NetworkCase {
        buses,
        edges,
        slack_bus,
    };
    let mut report = case.validate();
    report.violations.extend(extra_violations);
    report.ok = report.violations.is_empty();
    let mut merged = warnings;
    merged.append(&mut report.warnings);
    report.warnings = merged;
    Ok((case, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_bus_case(branch_extras: &str) -> String {
        format!(
            "function mpc = case2\n\
             mpc.version = '2';\n\
             mpc.baseMVA = 100;\n\
             %% bus data\n\
             mpc.bus = [\n\
             \t1 3 0 0 0 0 1 1.0 0 12.47 1 0 0;\n\
             \t2 1 50 10 0 0 1 1.0 0 12.47 1 0 0;\n\
             ];\n\
             mpc.gen = [\n\
             \t1 0 0 900 -900 1.0 100 1 900 -900;\n\
             ];\n\
             mpc.branch = [\n\
             \t1 2 0.03 0.04 0 0 0 0 {branch_extras} 0 0;\n\
             ];\n"
        )
    }

    #[test]
    fn admittance_mapping() {
        // r = 0.03, x = 0.04: 1/(r^2 + x^2) = 400, so g = 12, b = 16.
        let (case, report) = import_matpower(&two_bus_case("0 0 1")).unwrap();
        assert!(report.ok, "violations: {:?}", report.violations);
        assert_relative_eq!(case.edges[0].g, 12.0, max_relative = 1e-12);
        assert_relative_eq!(case.edges[0].b, 16.0, max_relative = 1e-12);
        // Load bus becomes an equality-like fixed injection of -0.5 pu.
        assert_relative_eq!(case.buses[1].p_min, -0.5, max_relative = 1e-12);
        assert_relative_eq!(case.buses[1].p_max, -0.5, max_relative = 1e-12);
        assert_relative_eq!(case.buses[1].q_min, -0.1, max_relative = 1e-12);
        // Slack keeps its generator range.
        assert_relative_eq!(case.buses[0].p_max, 9.0, max_relative = 1e-12);
        assert_eq!(case.slack_bus, 1);
    }

    #[test]
    fn tap_zero_is_silent_tap_value_warns() {
        let (_, report) = import_matpower(&two_bus_case("0 0 1")).unwrap();
        assert!(!report.warnings.iter().any(|w| w.contains("tap ignored")));
        let (_, report) = import_matpower(&two_bus_case("0.95 0 1")).unwrap();
        assert!(report.warnings.iter().any(|w| w.contains("tap ignored")));
    }

    #[test]
    fn out_of_service_branch_dropped_breaks_tree() {
        let text = two_bus_case("0 0 0"); // status 0
        let (case, report) = import_matpower(&text).unwrap();
        assert_eq!(case.edge_count(), 0);
        assert!(!report.ok);
        assert!(report.violations.iter().any(|v| v.rule == "not a tree"));
    }

    #[test]
    fn angle_limits_respected_and_clamped() {
        let mk = |angmin: f64, angmax: f64| {
            format!(
                "mpc.baseMVA = 100;\n\
                 mpc.bus = [ 1 3 0 0 0 0 1 1 0 12 1 0 0; 2 1 0 0 0 0 1 1 0 12 1 0 0 ];\n\
                 mpc.gen = [ 1 0 0 10 -10 1 100 1 10 -10 ];\n\
                 mpc.branch = [ 1 2 0.01 0.02 0 0 0 0 0 0 1 {angmin} {angmax} ];\n"
            )
        };
        let (case, _) = import_matpower(&mk(-30.0, 30.0)).unwrap();
        assert_relative_eq!(case.edges[0].theta_max, 30f64.to_radians(), max_relative = 1e-12);

        let (case, report) = import_matpower(&mk(-120.0, 120.0)).unwrap();
        assert!(case.edges[0].theta_max < std::f64::consts::FRAC_PI_2);
        assert!(report.warnings.iter().any(|w| w.contains("clamped")));

        let (case, _) = import_matpower(&mk(0.0, 0.0)).unwrap();
        assert_relative_eq!(case.edges[0].theta_max, DEFAULT_ANGLE_LIMIT, max_relative = 1e-12);
    }

    #[test]
    fn missing_table_is_a_parse_error() {
        let err = import_matpower("mpc.baseMVA = 100;\nmpc.bus = [1 3 0 0];\n").unwrap_err();
        let ModelError::Parse { path, .. } = err;
        assert!(path.contains("gen") || path.contains("branch"));
    }
}
