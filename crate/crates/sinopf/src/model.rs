//! Network data model: buses, canonically oriented edges, validation and
//! case-file parsing.
//!
//! A case is a radial (tree) network. Every edge carries a conductance-role
//! parameter `g >= 0`, a susceptance-role parameter `b >= 0` and angle
//! difference bounds strictly inside (-pi/2, pi/2). Voltage magnitudes are
//! fixed at 1.0 per unit throughout the toolkit; only angles (through
//! `z = sin(theta_ij)`) are decision variables.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::FRAC_PI_2;

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    /// Malformed document; `path` locates the offending JSON node.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
}

impl ModelError {
    pub(crate) fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// One bus: injection bounds (per-unit, possibly infinite) and a linear
/// generation-cost coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct BusRecord {
    pub id: u32,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost_coeff: f64,
}

impl BusRecord {
    /// Unbounded bus with zero cost.
    pub fn unbounded(id: u32) -> Self {
        BusRecord {
            id,
            p_min: f64::NEG_INFINITY,
            p_max: f64::INFINITY,
            q_min: f64::NEG_INFINITY,
            q_max: f64::INFINITY,
            cost_coeff: 0.0,
        }
    }
}

/// One edge in canonical orientation `from -> to`.
///
/// `b >= 0` under the sign convention used by the injection formulas
/// (inductive lines); this is required for the reactive injection to be
/// convex in the transformed coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub from: u32,
    pub to: u32,
    pub g: f64,
    pub b: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

/// Immutable radial network. Bus order and edge orientation are exactly the
/// file order; every vector downstream indexes by these positions.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub buses: Vec<BusRecord>,
    pub edges: Vec<EdgeRecord>,
    pub slack_bus: u32,
}

/// One violated validation rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub rule: String,
    pub element: String,
    pub message: String,
}

/// Outcome of `NetworkCase::validate`. Violations are data, not errors;
/// `ok` holds exactly when `violations` is empty.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    fn finish(mut self) -> Self {
        self.ok = self.violations.is_empty();
        self
    }

    fn violate(&mut self, rule: &str, element: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            rule: rule.to_string(),
            element: element.into(),
            message: message.into(),
        });
    }
}

impl NetworkCase {
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Position of a bus id in file order.
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> Option<usize> {
        self.bus_index(self.slack_bus)
    }

    /// Per-bus incident edges as `(edge position, sigma)` with sigma = +1 at
    /// the tail and -1 at the head, in edge file order.
    pub fn incidence(&self) -> Vec<Vec<(usize, f64)>> {
        let mut inc = vec![Vec::new(); self.buses.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            if let Some(i) = self.bus_index(edge.from) {
                inc[i].push((e, 1.0));
            }
            if let Some(j) = self.bus_index(edge.to) {
                inc[j].push((e, -1.0));
            }
        }
        inc
    }

    /// Per-edge interval `[sin(theta_min), sin(theta_max)]` for the
    /// transformed variable.
    pub fn z_bounds(&self) -> Vec<(f64, f64)> {
        self.edges
            .iter()
            .map(|e| (e.theta_min.sin(), e.theta_max.sin()))
            .collect()
    }

    /// Checks every record invariant plus the tree/connectivity requirement.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();

        let mut seen = HashMap::new();
        for bus in &self.buses {
            if let Some(prev) = seen.insert(bus.id, ()) {
                let _ = prev;
                report.violate(
                    "bus ids unique",
                    format!("bus {}", bus.id),
                    "duplicate bus id",
                );
            }
            if !(bus.p_min <= bus.p_max) {
                report.violate(
                    "injection bounds ordered",
                    format!("bus {}", bus.id),
                    format!("p_min {} > p_max {}", bus.p_min, bus.p_max),
                );
            }
            if !(bus.q_min <= bus.q_max) {
                report.violate(
                    "injection bounds ordered",
                    format!("bus {}", bus.id),
                    format!("q_min {} > q_max {}", bus.q_min, bus.q_max),
                );
            }
            if !(bus.cost_coeff >= 0.0) {
                report.violate(
                    "cost coefficient nonnegative",
                    format!("bus {}", bus.id),
                    format!("cost_coeff {}", bus.cost_coeff),
                );
            }
        }

        for (k, edge) in self.edges.iter().enumerate() {
            let elem = format!("edge {} ({}->{})", k, edge.from, edge.to);
            if edge.from == edge.to {
                report.violate("edge endpoints distinct", elem.clone(), "self-loop");
            }
            if self.bus_index(edge.from).is_none() || self.bus_index(edge.to).is_none() {
                report.violate("edge endpoints exist", elem.clone(), "unknown bus id");
            }
            if !(edge.g >= 0.0) {
                report.violate(
                    "conductance nonnegative",
                    elem.clone(),
                    format!("g = {}", edge.g),
                );
            }
            if !(edge.b >= 0.0) {
                report.violate(
                    "susceptance nonnegative",
                    elem.clone(),
                    format!("b = {} (reactive injection would lose convexity)", edge.b),
                );
            }
            if !(edge.theta_min <= edge.theta_max) {
                report.violate(
                    "angle bounds ordered",
                    elem.clone(),
                    format!("theta_min {} > theta_max {}", edge.theta_min, edge.theta_max),
                );
            }
            if !(edge.theta_min > -FRAC_PI_2 && edge.theta_max < FRAC_PI_2) {
                report.violate(
                    "angle bound outside (-pi/2, pi/2)",
                    elem,
                    format!("bounds [{}, {}]", edge.theta_min, edge.theta_max),
                );
            }
        }

        if self.slack_index().is_none() {
            report.violate(
                "slack bus exists",
                format!("bus {}", self.slack_bus),
                "slack bus id not present",
            );
        }

        // Tree check: |E| = |N| - 1 and connected.
        if !self.buses.is_empty() {
            if self.edges.len() + 1 != self.buses.len() {
                report.violate(
                    "not a tree",
                    "network",
                    format!(
                        "{} edges for {} buses (expected |edges| = |buses| - 1)",
                        self.edges.len(),
                        self.buses.len()
                    ),
                );
            } else if !self.is_connected() {
                report.violate("not a tree", "network", "graph is disconnected");
            }
        }

        report.finish()
    }

    fn is_connected(&self) -> bool {
        if self.buses.is_empty() {
            return true;
        }
        let inc = self.incidence();
        let mut seen = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &(e, _) in &inc[i] {
                let edge = &self.edges[e];
                for id in [edge.from, edge.to] {
                    if let Some(j) = self.bus_index(id) {
                        if !seen[j] {
                            seen[j] = true;
                            count += 1;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        count == self.buses.len()
    }
}

// ---------------------------------------------------------------------------
// Case JSON
// ---------------------------------------------------------------------------

fn expect_obj<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, ModelError> {
    v.as_object()
        .ok_or_else(|| ModelError::at(path, "expected an object"))
}

fn expect_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, ModelError> {
    v.as_array()
        .ok_or_else(|| ModelError::at(path, "expected an array"))
}

fn get<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    parent: &str,
) -> Result<&'a Value, ModelError> {
    obj.get(key)
        .ok_or_else(|| ModelError::at(format!("{parent}.{key}"), "missing required field"))
}

fn expect_num(v: &Value, path: &str) -> Result<f64, ModelError> {
    v.as_f64()
        .ok_or_else(|| ModelError::at(path, "expected a number"))
}

fn expect_id(v: &Value, path: &str) -> Result<u32, ModelError> {
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| ModelError::at(path, "expected a nonnegative integer bus id"))
}

/// A bound field: a finite number, the sentinels `"inf"` / `"-inf"`, or
/// absent (defaulting to the given infinity).
fn parse_bound(obj: &Map<String, Value>, key: &str, default: f64, parent: &str) -> Result<f64, ModelError> {
    let path = format!("{parent}.{key}");
    match obj.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(Value::String(s)) if s == "inf" => Ok(f64::INFINITY),
        Some(Value::String(s)) if s == "-inf" => Ok(f64::NEG_INFINITY),
        Some(v) => expect_num(v, &path),
    }
}

fn bound_value(x: f64) -> Value {
    if x == f64::INFINITY {
        Value::String("inf".into())
    } else if x == f64::NEG_INFINITY {
        Value::String("-inf".into())
    } else {
        serde_json::json!(x)
    }
}

/// Parses a case document in the schema emitted by [`serialize_case`].
/// Absent optional bounds default to +/- infinity, absent `cost_coeff` to 0.
pub fn parse_case(text: &str) -> Result<NetworkCase, ModelError> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| ModelError::at("$", format!("malformed JSON: {e}")))?;
    let obj = expect_obj(&root, "$")?;

    let slack_bus = expect_id(get(obj, "slack_bus", "$")?, "$.slack_bus")?;

    let mut buses = Vec::new();
    for (i, item) in expect_array(get(obj, "buses", "$")?, "$.buses")?.iter().enumerate() {
        let path = format!("$.buses[{i}]");
        let bus = expect_obj(item, &path)?;
        buses.push(BusRecord {
            id: expect_id(get(bus, "id", &path)?, &format!("{path}.id"))?,
            p_min: parse_bound(bus, "p_min", f64::NEG_INFINITY, &path)?,
            p_max: parse_bound(bus, "p_max", f64::INFINITY, &path)?,
            q_min: parse_bound(bus, "q_min", f64::NEG_INFINITY, &path)?,
            q_max: parse_bound(bus, "q_max", f64::INFINITY, &path)?,
            cost_coeff: match bus.get("cost_coeff") {
                None | Some(Value::Null) => 0.0,
                Some(v) => expect_num(v, &format!("{path}.cost_coeff"))?,
            },
        });
    }

    let mut edges = Vec::new();
    for (i, item) in expect_array(get(obj, "edges", "$")?, "$.edges")?.iter().enumerate() {
        let path = format!("$.edges[{i}]");
        let edge = expect_obj(item, &path)?;
        edges.push(EdgeRecord {
            from: expect_id(get(edge, "from", &path)?, &format!("{path}.from"))?,
            to: expect_id(get(edge, "to", &path)?, &format!("{path}.to"))?,
            g: expect_num(get(edge, "g", &path)?, &format!("{path}.g"))?,
            b: expect_num(get(edge, "b", &path)?, &format!("{path}.b"))?,
            theta_min: expect_num(get(edge, "theta_min", &path)?, &format!("{path}.theta_min"))?,
            theta_max: expect_num(get(edge, "theta_max", &path)?, &format!("{path}.theta_max"))?,
        });
    }

    Ok(NetworkCase {
        buses,
        edges,
        slack_bus,
    })
}

/// Emits the case JSON schema; infinite bounds become the `"inf"` / `"-inf"`
/// sentinels so that round-trips are field-exact.
pub fn serialize_case(case: &NetworkCase) -> String {
    let buses: Vec<Value> = case
        .buses
        .iter()
        .map(|b| {
            serde_json::json!({
                "id": b.id,
                "p_min": bound_value(b.p_min),
                "p_max": bound_value(b.p_max),
                "q_min": bound_value(b.q_min),
                "q_max": bound_value(b.q_max),
                "cost_coeff": b.cost_coeff,
            })
        })
        .collect();
    let edges: Vec<Value> = case
        .edges
        .iter()
        .map(|e| {
            serde_json::json!({
                "from": e.from,
                "to": e.to,
                "g": e.g,
                "b": e.b,
                "theta_min": e.theta_min,
                "theta_max": e.theta_max,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "slack_bus": case.slack_bus,
        "buses": buses,
        "edges": edges,
    });
    serde_json::to_string_pretty(&doc).expect("static schema")
}

/// Serde adapter for fields that may legitimately be +/- infinity.
pub mod inf_bound {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() {
            let s = if *x > 0.0 { "inf" } else { "-inf" };
            s.serialize(ser)
        } else {
            x.serialize(ser)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(x) => Ok(x),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid bound: {s:?}"))),
        }
    }
}
