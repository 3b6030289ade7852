//! Radial distribution network model and exact branch-flow power flow.
//!
//! The network is a spanning tree rooted at the slack bus. The solver works on
//! the squared-voltage / squared-current branch-flow formulation: for a line
//! carrying sending-end flows `(P, Q)` out of bus `n` into bus `m`,
//!
//! ```text
//!   v_m = v_n - 2 (R P + X Q) + (R^2 + X^2) l        (voltage drop)
//!   P^2 + Q^2 = l v_n                                 (current definition)
//! ```
//!
//! with `v` the squared voltage magnitude and `l` the squared current, all in
//! per-unit. A backward/forward sweep solves these exactly on a tree: the
//! backward pass resolves each line's `l` from the downstream demand by a
//! per-line quadratic, the forward pass propagates voltages from the slack.

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("network descriptor parse error: {0}")]
    Parse(String),
    #[error("base voltage must be positive, got {0}")]
    NonpositiveBase(f64),
    #[error("power base must be positive, got {0}")]
    NonpositivePowerBase(f64),
    #[error("bus ids must be contiguous 0..{expected}; id {found} out of place")]
    BadBusIds { expected: usize, found: usize },
    #[error("slack bus {0} is not a valid bus id")]
    BadSlackBus(usize),
    #[error("line {index} references unknown bus {bus}")]
    UnknownBus { index: usize, bus: usize },
    #[error("duplicate line between buses {0} and {1}")]
    DuplicateLine(usize, usize),
    #[error("line between buses {0} and {1} closes a cycle")]
    Cycle(usize, usize),
    #[error("bus {0} is not connected to the slack bus")]
    Disconnected(usize),
    #[error("negative impedance on line {0}")]
    NegativeImpedance(usize),
    #[error("injection profile has {found} entries, network has {expected} buses")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("power flow did not converge in {iterations} iterations (last voltage update {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("power flow diverged at bus {bus} (squared voltage {v_sq:.3e}); loading likely infeasible")]
    Diverged { bus: usize, v_sq: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A network node. `parent_line` is the index of the line towards the slack
/// bus; only the slack bus has none.
#[derive(Debug, Clone)]
pub struct Bus {
    pub id: usize,
    pub parent_line: Option<usize>,
    /// Nominal load anchor used by scenario and profile generators (kW).
    pub nominal_p_kw: f64,
    pub nominal_q_kvar: f64,
}

/// A distribution line, oriented parent-to-child after network validation.
#[derive(Debug, Clone)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    pub resistance_pu: f64,
    pub reactance_pu: f64,
}

/// Per-bus net withdrawals. Positive = consumption. The slack-bus entry is
/// ignored by the solver.
#[derive(Debug, Clone)]
pub struct InjectionProfile {
    pub active_kw: Vec<f64>,
    pub reactive_kvar: Vec<f64>,
}

impl InjectionProfile {
    pub fn zeros(n_buses: usize) -> Self {
        Self {
            active_kw: vec![0.0; n_buses],
            reactive_kvar: vec![0.0; n_buses],
        }
    }
}

/// Converged branch-flow solution. Voltages are squared per-unit magnitudes,
/// line flows are sending-end values in kW/kvar, `line_i_sq` is squared
/// per-unit current.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub v_sq_pu: Vec<f64>,
    pub line_p_kw: Vec<f64>,
    pub line_q_kvar: Vec<f64>,
    pub line_i_sq: Vec<f64>,
    pub iterations: usize,
    /// Largest branch-equation residual |P^2 + Q^2 - l v| over all lines (pu).
    pub max_residual: f64,
}

impl PowerFlowSolution {
    /// Voltage magnitudes in pu.
    pub fn v_pu(&self) -> Vec<f64> {
        self.v_sq_pu.iter().map(|v| v.sqrt()).collect()
    }
}

/// Voltage magnitude bounds in pu.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VoltageLimits {
    pub v_min_pu: f64,
    pub v_max_pu: f64,
}

impl VoltageLimits {
    pub fn new(v_min_pu: f64, v_max_pu: f64) -> Self {
        assert!(
            0.0 < v_min_pu && v_min_pu < v_max_pu,
            "voltage limits must satisfy 0 < v_min < v_max"
        );
        Self { v_min_pu, v_max_pu }
    }
}

impl Default for VoltageLimits {
    fn default() -> Self {
        Self { v_min_pu: 0.95, v_max_pu: 1.05 }
    }
}

/// Result of checking a solution against voltage limits.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ViolationReport {
    pub count: usize,
    pub max_excess_pu: f64,
}

/// Immutable, validated radial network.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    base_kv: f64,
    base_mva: f64,
    slack_bus: usize,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    /// Line indices ordered parent-before-child (forward sweep order).
    sweep_order: Vec<usize>,
    /// Per bus, the indices of lines leaving it towards children.
    child_lines: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct NetworkFile {
    base_kv: f64,
    #[serde(default = "default_base_mva")]
    base_mva: f64,
    slack_bus: usize,
    buses: Vec<BusEntry>,
    lines: Vec<LineEntry>,
}

fn default_base_mva() -> f64 {
    1.0
}

#[derive(Deserialize)]
struct BusEntry {
    id: usize,
    #[serde(default)]
    p_kw: f64,
    #[serde(default)]
    q_kvar: f64,
}

#[derive(Deserialize)]
struct LineEntry {
    from: usize,
    to: usize,
    r_ohm: f64,
    x_ohm: f64,
}

/// Parse and validate a network descriptor (JSON or TOML). Line impedances in
/// the file are in ohms and are converted to per-unit on the declared bases.
pub fn load_network(descriptor: &str) -> Result<NetworkModel, GridError> {
    let file: NetworkFile = if descriptor.trim_start().starts_with('{') {
        serde_json::from_str(descriptor).map_err(|e| GridError::Parse(e.to_string()))?
    } else {
        toml::from_str(descriptor).map_err(|e| GridError::Parse(e.to_string()))?
    };
    if file.base_kv <= 0.0 {
        return Err(GridError::NonpositiveBase(file.base_kv));
    }
    if file.base_mva <= 0.0 {
        return Err(GridError::NonpositivePowerBase(file.base_mva));
    }
    let z_base_ohm = file.base_kv * file.base_kv / file.base_mva;
    let nominal: Vec<(f64, f64)> = {
        let n = file.buses.len();
        let mut loads = vec![(0.0, 0.0); n];
        for (pos, b) in file.buses.iter().enumerate() {
            if b.id >= n || b.id != pos {
                return Err(GridError::BadBusIds { expected: n, found: b.id });
            }
            loads[b.id] = (b.p_kw, b.q_kvar);
        }
        loads
    };
    let lines: Vec<(usize, usize, f64, f64)> = file
        .lines
        .iter()
        .map(|l| (l.from, l.to, l.r_ohm / z_base_ohm, l.x_ohm / z_base_ohm))
        .collect();
    NetworkModel::build(file.base_kv, file.base_mva, file.slack_bus, nominal, &lines)
}

/// Read a network descriptor from disk.
pub fn load_network_file(path: &std::path::Path) -> Result<NetworkModel, GridError> {
    let text = std::fs::read_to_string(path)?;
    load_network(&text)
}

impl NetworkModel {
    /// Construct directly from per-unit line impedances (tests and toys).
    /// Buses are `0..n_buses` with zero nominal load.
    pub fn from_pu_lines(
        base_kv: f64,
        slack_bus: usize,
        n_buses: usize,
        lines: &[(usize, usize, f64, f64)],
    ) -> Result<Self, GridError> {
        Self::build(base_kv, 1.0, slack_bus, vec![(0.0, 0.0); n_buses], lines)
    }

    fn build(
        base_kv: f64,
        base_mva: f64,
        slack_bus: usize,
        nominal: Vec<(f64, f64)>,
        raw_lines: &[(usize, usize, f64, f64)],
    ) -> Result<Self, GridError> {
        if base_kv <= 0.0 {
            return Err(GridError::NonpositiveBase(base_kv));
        }
        if base_mva <= 0.0 {
            return Err(GridError::NonpositivePowerBase(base_mva));
        }
        let n = nominal.len();
        if slack_bus >= n {
            return Err(GridError::BadSlackBus(slack_bus));
        }
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let mut seen_pairs = std::collections::BTreeSet::new();
        for (idx, &(a, b, r, x)) in raw_lines.iter().enumerate() {
            for bus in [a, b] {
                if bus >= n {
                    return Err(GridError::UnknownBus { index: idx, bus });
                }
            }
            if a == b {
                return Err(GridError::Cycle(a, b));
            }
            if r < 0.0 || x < 0.0 {
                return Err(GridError::NegativeImpedance(idx));
            }
            if !seen_pairs.insert((a.min(b), a.max(b))) {
                return Err(GridError::DuplicateLine(a.min(b), a.max(b)));
            }
            adjacency[a].push((b, idx));
            adjacency[b].push((a, idx));
        }

        // BFS from the slack orients every line parent-to-child and rejects
        // cycles and disconnected buses.
        let mut buses: Vec<Bus> = nominal
            .iter()
            .enumerate()
            .map(|(id, &(p, q))| Bus { id, parent_line: None, nominal_p_kw: p, nominal_q_kvar: q })
            .collect();
        let mut lines: Vec<Option<Line>> = vec![None; raw_lines.len()];
        let mut child_lines: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sweep_order = Vec::with_capacity(raw_lines.len());
        let mut visited = vec![false; n];
        visited[slack_bus] = true;
        let mut queue = std::collections::VecDeque::from([slack_bus]);
        while let Some(bus) = queue.pop_front() {
            for &(other, idx) in &adjacency[bus] {
                if lines[idx].is_some() {
                    continue; // already oriented from the other side
                }
                if visited[other] {
                    return Err(GridError::Cycle(bus, other));
                }
                visited[other] = true;
                let (_, _, r, x) = raw_lines[idx];
                lines[idx] = Some(Line {
                    from_bus: bus,
                    to_bus: other,
                    resistance_pu: r,
                    reactance_pu: x,
                });
                buses[other].parent_line = Some(idx);
                child_lines[bus].push(idx);
                sweep_order.push(idx);
                queue.push_back(other);
            }
        }
        if let Some(bus) = visited.iter().position(|&v| !v) {
            return Err(GridError::Disconnected(bus));
        }
        let lines = lines.into_iter().map(|l| l.expect("all lines oriented")).collect();
        Ok(Self { base_kv, base_mva, slack_bus, buses, lines, sweep_order, child_lines })
    }

    /// The bundled IEEE 33-bus feeder (12.66 kV, 32 lines, loads in kW).
    pub fn ieee33() -> Self {
        load_network(include_str!("../assets/ieee33.json")).expect("bundled 33-bus feeder is valid")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn slack_bus(&self) -> usize {
        self.slack_bus
    }

    pub fn base_kv(&self) -> f64 {
        self.base_kv
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / (self.base_mva * 1000.0)
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.base_mva * 1000.0
    }

    /// Nominal loads as an injection profile.
    pub fn nominal_injections(&self) -> InjectionProfile {
        InjectionProfile {
            active_kw: self.buses.iter().map(|b| b.nominal_p_kw).collect(),
            reactive_kvar: self.buses.iter().map(|b| b.nominal_q_kvar).collect(),
        }
    }

    /// Sum of line resistances along the path slack -> bus, doubled; the
    /// LinDistFlow sensitivity of v at `bus` to a withdrawal at `other` is the
    /// shared-path portion of this.
    pub fn path_lines(&self, bus: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = bus;
        while let Some(l) = self.buses[cur].parent_line {
            path.push(l);
            cur = self.lines[l].from_bus;
        }
        path.reverse();
        path
    }
}

/// Solve the branch-flow equations by backward/forward sweep.
///
/// Iterates until the largest squared-voltage update falls to `tol`. The final
/// backward pass leaves flows exactly consistent with the converged voltages,
/// so the reported branch residual is at machine precision.
pub fn solve_power_flow(
    net: &NetworkModel,
    inj: &InjectionProfile,
    slack_v_pu: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, GridError> {
    let n = net.n_buses();
    if inj.active_kw.len() != n || inj.reactive_kvar.len() != n {
        return Err(GridError::DimensionMismatch {
            expected: n,
            found: inj.active_kw.len().min(inj.reactive_kvar.len()),
        });
    }
    assert!(tol > 0.0, "solver tolerance must be positive");

    let p_pu: Vec<f64> = inj.active_kw.iter().map(|&kw| net.kw_to_pu(kw)).collect();
    let q_pu: Vec<f64> = inj.reactive_kvar.iter().map(|&kv| net.kw_to_pu(kv)).collect();

    let v_slack = slack_v_pu * slack_v_pu;
    let mut v = vec![v_slack; n];
    let mut line_p = vec![0.0; net.n_lines()];
    let mut line_q = vec![0.0; net.n_lines()];
    let mut line_l = vec![0.0; net.n_lines()];

    let backward = |v: &[f64],
                    line_p: &mut [f64],
                    line_q: &mut [f64],
                    line_l: &mut [f64]|
     -> Result<(), GridError> {
        for &l in net.sweep_order.iter().rev() {
            let line = &net.lines[l];
            let m = line.to_bus;
            let mut dp = p_pu[m];
            let mut dq = q_pu[m];
            for &c in &net.child_lines[m] {
                dp += line_p[c];
                dq += line_q[c];
            }
            let r = line.resistance_pu;
            let x = line.reactance_pu;
            let vn = v[line.from_bus];
            // Sending-end flows satisfy P = dp + R l, Q = dq + X l with
            // l vn = P^2 + Q^2; eliminate P, Q to a quadratic in l.
            let a = r * r + x * x;
            let b = 2.0 * (r * dp + x * dq) - vn;
            let c = dp * dp + dq * dq;
            let ell = if a == 0.0 {
                if b.abs() < f64::EPSILON { 0.0 } else { -c / b }
            } else {
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    // No real branch current supports this demand: past the
                    // loadability limit of the line.
                    return Err(GridError::Diverged { bus: m, v_sq: vn });
                }
                (-b - disc.sqrt()) / (2.0 * a)
            };
            let ell = ell.max(0.0);
            line_l[l] = ell;
            line_p[l] = dp + r * ell;
            line_q[l] = dq + x * ell;
        }
        Ok(())
    };

    let mut iterations = 0;
    loop {
        backward(&v, &mut line_p, &mut line_q, &mut line_l)?;
        let mut delta: f64 = 0.0;
        for &l in &net.sweep_order {
            let line = &net.lines[l];
            let r = line.resistance_pu;
            let x = line.reactance_pu;
            let vm = v[line.from_bus] - 2.0 * (r * line_p[l] + x * line_q[l])
                + (r * r + x * x) * line_l[l];
            if vm <= 0.0 {
                return Err(GridError::Diverged { bus: line.to_bus, v_sq: vm });
            }
            delta = delta.max((vm - v[line.to_bus]).abs());
            v[line.to_bus] = vm;
        }
        iterations += 1;
        if delta <= tol {
            break;
        }
        if iterations >= max_iter {
            return Err(GridError::NonConvergence { iterations, residual: delta });
        }
    }
    // One more backward pass against the converged voltages makes the branch
    // residual exact.
    backward(&v, &mut line_p, &mut line_q, &mut line_l)?;

    let mut max_residual: f64 = 0.0;
    for (l, line) in net.lines.iter().enumerate() {
        let res = (line_p[l] * line_p[l] + line_q[l] * line_q[l] - line_l[l] * v[line.from_bus])
            .abs();
        max_residual = max_residual.max(res);
    }

    Ok(PowerFlowSolution {
        v_sq_pu: v,
        line_p_kw: line_p.iter().map(|&p| net.pu_to_kw(p)).collect(),
        line_q_kvar: line_q.iter().map(|&q| net.pu_to_kw(q)).collect(),
        line_i_sq: line_l,
        iterations,
        max_residual,
    })
}

/// Count buses whose voltage magnitude lies outside the limits and report the
/// worst excursion in pu.
pub fn check_voltage_limits(sol: &PowerFlowSolution, lim: &VoltageLimits) -> ViolationReport {
    let mut report = ViolationReport::default();
    for &v_sq in &sol.v_sq_pu {
        let vm = v_sq.sqrt();
        let excess = (lim.v_min_pu - vm).max(vm - lim.v_max_pu);
        if excess > 0.0 {
            report.count += 1;
            report.max_excess_pu = report.max_excess_pu.max(excess);
        }
    }
    report
}
