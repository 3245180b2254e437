//! Small built-in example networks used by the CLI demos, the browser demo
//! and the test suites.

use std::f64::consts::FRAC_PI_3;

use crate::model::{BusRecord, EdgeRecord, NetworkCase};

/// Edge with +/- pi/3 angle bounds.
pub fn edge(from: u32, to: u32, g: f64, b: f64) -> EdgeRecord {
    EdgeRecord {
        from,
        to,
        g,
        b,
        theta_min: -FRAC_PI_3,
        theta_max: FRAC_PI_3,
    }
}

/// Two buses joined by a line with g = 1, b = 2; bus 1 is the slack and
/// unbounded, bus 2 must consume (`p_max` negative makes it a load).
pub fn two_bus(p2_max: f64) -> NetworkCase {
    let mut load = BusRecord::unbounded(2);
    load.p_max = p2_max;
    NetworkCase {
        buses: vec![BusRecord::unbounded(1), load],
        edges: vec![edge(1, 2, 1.0, 2.0)],
        slack_bus: 1,
    }
}

/// Three-bus line 1 - 2 - 3. The slack bus is unbounded; buses 2 and 3 carry
/// all eight finite injection bounds, every lower-bound sublevel set
/// nonempty, and z = 0 is strictly feasible.
pub fn three_bus_line() -> NetworkCase {
    let bus2 = BusRecord {
        id: 2,
        p_min: -1.0,
        p_max: 0.8,
        q_min: -0.3,
        q_max: 0.9,
        cost_coeff: 0.2,
    };
    let bus3 = BusRecord {
        id: 3,
        p_min: -0.6,
        p_max: 0.7,
        q_min: -0.15,
        q_max: 0.8,
        cost_coeff: 0.0,
    };
    NetworkCase {
        buses: vec![BusRecord::unbounded(1), bus2, bus3],
        edges: vec![edge(1, 2, 1.0, 2.0), edge(2, 3, 0.8, 1.5)],
        slack_bus: 1,
    }
}

/// Two-bus case with a binding reactive lower bound arranged so the
/// second-order cone relaxation rests strictly inside the disk (inexact),
/// while the true problem stays feasible. Objective of interest: generation
/// cost with coefficient 1 at the slack bus.
pub fn inexact_relaxation() -> NetworkCase {
    let mut slack = BusRecord::unbounded(1);
    slack.cost_coeff = 1.0;
    let mut bus2 = BusRecord::unbounded(2);
    bus2.q_min = 0.3; // must produce reactive power
    NetworkCase {
        buses: vec![slack, bus2],
        edges: vec![edge(1, 2, 1.0, 2.0)],
        slack_bus: 1,
    }
}
