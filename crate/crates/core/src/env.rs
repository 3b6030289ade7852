//! The episodic multi-agent dispatch environment: exogenous price and load
//! playback, device state transitions, exact power flow, and the per-agent
//! reward with its intertemporal penalty terms.
//!
//! Each agent controls the building and battery at one bus. A step
//! denormalizes the joint action, advances every battery, injects the
//! resulting net withdrawals into the network, solves the branch-flow
//! equations exactly, and settles the reward on the applied (post-clamp)
//! powers:
//!
//! ```text
//!   r_i = lf * (P_dr + P_dis) - lb * (P_ch + d - P_dr) - ldr * P_dr
//!         - penalty(cumulative DR budget) - penalty(end-of-horizon SOC)
//! ```
//!
//! The DR-budget penalty is charged incrementally at each offending step and
//! the SOC penalty at the final step, so the episode total equals the
//! horizon-level penalty definition while the learning signal stays dense.

use crate::der::{self, AgentDevices, DevicePowers, DrLedger, EssState, FleetSpec};
use crate::grid::{
    self, GridError, InjectionProfile, NetworkModel, PowerFlowSolution, ViolationReport,
    VoltageLimits,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("csv error: {0}")]
    Csv(String),
    #[error("missing column {0}")]
    MissingColumn(&'static str),
    #[error("non-finite value in column {column} at row {row}")]
    NonFinite { column: &'static str, row: usize },
    #[error("negative demand {value} at bus {bus}, hour {hour}")]
    NegativeDemand { bus: usize, hour: usize, value: f64 },
    #[error("price and load series have different lengths ({prices} vs {loads})")]
    LengthMismatch { prices: usize, loads: usize },
    #[error("hour {hour} lists {found} bus rows, expected {expected}")]
    IncompleteHour { hour: usize, found: usize, expected: usize },
    #[error("timestamps of price and load files disagree at row {0}")]
    TimestampMismatch(usize),
    #[error("empty profile data")]
    Empty,
    #[error(
        "demand {demand} kW at bus {bus}, hour {hour} does not exceed the DR capacity {p_dr_max} kW"
    )]
    DemandBelowDrCap { bus: usize, hour: usize, demand: f64, p_dr_max: f64 },
    #[error("profiles cover {available} hours, episode needs {needed}")]
    ProfileTooShort { available: usize, needed: usize },
    #[error("episode start {start} out of range (max {max})")]
    BadEpisodeStart { start: usize, max: usize },
    #[error("step called after the episode ended")]
    EpisodeOver,
    #[error("power flow failed at step {step}: {source}")]
    PowerFlow { step: usize, source: GridError },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Der(#[from] der::DerError),
}

/// Exogenous price series, one entry per hour.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceSeries {
    pub lambda_flex: Vec<f64>,
    pub lambda_buy: Vec<f64>,
    pub lambda_dr: Vec<f64>,
}

impl PriceSeries {
    pub fn len(&self) -> usize {
        self.lambda_flex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda_flex.is_empty()
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.is_empty() {
            return Err(EnvError::Empty);
        }
        for (name, series) in [
            ("lambda_flex", &self.lambda_flex),
            ("lambda_buy", &self.lambda_buy),
            ("lambda_dr", &self.lambda_dr),
        ] {
            if series.len() != self.len() {
                return Err(EnvError::LengthMismatch { prices: self.len(), loads: series.len() });
            }
            if let Some(row) = series.iter().position(|v| !v.is_finite()) {
                return Err(EnvError::NonFinite { column: name, row });
            }
        }
        Ok(())
    }
}

/// Per-bus demand and reactive absorption, indexed `[hour][bus]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExogenousProfiles {
    pub demand_kw: Vec<Vec<f64>>,
    pub reactive_kvar: Vec<Vec<f64>>,
}

impl ExogenousProfiles {
    pub fn len(&self) -> usize {
        self.demand_kw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demand_kw.is_empty()
    }

    pub fn n_buses(&self) -> usize {
        self.demand_kw.first().map(|r| r.len()).unwrap_or(0)
    }
}

/// Parse hourly price and load CSVs.
///
/// Expected columns: `timestamp, lambda_flex, lambda_buy[, lambda_dr]` and
/// `timestamp, bus_id, active_kw, reactive_kvar`. When the price file has no
/// `lambda_dr` column the fleet-wide `default_lambda_dr` fills the series.
/// Validates finiteness, nonnegative demand, hour alignment between the two
/// files, and the contract requirement that demand strictly exceeds the DR
/// capacity at every agent bus.
pub fn load_profiles(
    prices_csv: &str,
    loads_csv: &str,
    fleet: &FleetSpec,
    default_lambda_dr: f64,
) -> Result<(PriceSeries, ExogenousProfiles), EnvError> {
    let mut price_reader = csv::Reader::from_reader(prices_csv.as_bytes());
    let headers = price_reader.headers().map_err(|e| EnvError::Csv(e.to_string()))?.clone();
    let col = |name: &'static str| -> Result<usize, EnvError> {
        headers.iter().position(|h| h == name).ok_or(EnvError::MissingColumn(name))
    };
    let ts_col = col("timestamp")?;
    let flex_col = col("lambda_flex")?;
    let buy_col = col("lambda_buy")?;
    let dr_col = headers.iter().position(|h| h == "lambda_dr");

    let mut timestamps: Vec<String> = Vec::new();
    let mut prices =
        PriceSeries { lambda_flex: Vec::new(), lambda_buy: Vec::new(), lambda_dr: Vec::new() };
    for (row, record) in price_reader.records().enumerate() {
        let record = record.map_err(|e| EnvError::Csv(e.to_string()))?;
        let parse = |idx: usize, column: &'static str| -> Result<f64, EnvError> {
            record
                .get(idx)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or(EnvError::NonFinite { column, row })
        };
        timestamps.push(record.get(ts_col).unwrap_or_default().to_string());
        prices.lambda_flex.push(parse(flex_col, "lambda_flex")?);
        prices.lambda_buy.push(parse(buy_col, "lambda_buy")?);
        prices.lambda_dr.push(match dr_col {
            Some(idx) => parse(idx, "lambda_dr")?,
            None => default_lambda_dr,
        });
    }
    prices.validate()?;

    let mut load_reader = csv::Reader::from_reader(loads_csv.as_bytes());
    let headers = load_reader.headers().map_err(|e| EnvError::Csv(e.to_string()))?.clone();
    let col = |name: &'static str| -> Result<usize, EnvError> {
        headers.iter().position(|h| h == name).ok_or(EnvError::MissingColumn(name))
    };
    let (ts_col, bus_col, p_col, q_col) =
        (col("timestamp")?, col("bus_id")?, col("active_kw")?, col("reactive_kvar")?);

    // Rows arrive grouped by hour; buses may appear in any order inside one.
    let mut hours: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<(usize, f64, f64)>> = Vec::new();
    let mut n_buses = 0usize;
    for (row, record) in load_reader.records().enumerate() {
        let record = record.map_err(|e| EnvError::Csv(e.to_string()))?;
        let ts = record.get(ts_col).unwrap_or_default().to_string();
        let bus: usize = record
            .get(bus_col)
            .and_then(|v| v.trim().parse().ok())
            .ok_or(EnvError::NonFinite { column: "bus_id", row })?;
        let parse = |idx: usize, column: &'static str| -> Result<f64, EnvError> {
            record
                .get(idx)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or(EnvError::NonFinite { column, row })
        };
        let p = parse(p_col, "active_kw")?;
        let q = parse(q_col, "reactive_kvar")?;
        if hours.last() != Some(&ts) {
            hours.push(ts);
            rows.push(Vec::new());
        }
        rows.last_mut().expect("pushed above").push((bus, p, q));
        n_buses = n_buses.max(bus + 1);
    }
    if rows.is_empty() {
        return Err(EnvError::Empty);
    }
    if hours.len() != timestamps.len() {
        return Err(EnvError::LengthMismatch { prices: timestamps.len(), loads: hours.len() });
    }
    if let Some(i) = hours.iter().zip(&timestamps).position(|(a, b)| a != b) {
        return Err(EnvError::TimestampMismatch(i));
    }

    let mut profiles = ExogenousProfiles {
        demand_kw: vec![vec![0.0; n_buses]; rows.len()],
        reactive_kvar: vec![vec![0.0; n_buses]; rows.len()],
    };
    for (hour, hour_rows) in rows.iter().enumerate() {
        if hour_rows.len() != n_buses {
            return Err(EnvError::IncompleteHour {
                hour,
                found: hour_rows.len(),
                expected: n_buses,
            });
        }
        for &(bus, p, q) in hour_rows {
            if p < 0.0 {
                return Err(EnvError::NegativeDemand { bus, hour, value: p });
            }
            profiles.demand_kw[hour][bus] = p;
            profiles.reactive_kvar[hour][bus] = q;
        }
    }
    validate_fleet_demand(fleet, &profiles)?;
    Ok((prices, profiles))
}

/// Check the contract-side condition `P_dr_max < d` at every agent bus, hour.
pub fn validate_fleet_demand(
    fleet: &FleetSpec,
    profiles: &ExogenousProfiles,
) -> Result<(), EnvError> {
    for agent in &fleet.agents {
        for (hour, row) in profiles.demand_kw.iter().enumerate() {
            let demand = row[agent.bus];
            if agent.building.p_dr_max_kw > 0.0 && demand <= agent.building.p_dr_max_kw {
                return Err(EnvError::DemandBelowDrCap {
                    bus: agent.bus,
                    hour,
                    demand,
                    p_dr_max: agent.building.p_dr_max_kw,
                });
            }
        }
    }
    Ok(())
}

/// What one agent sees before acting.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub soc_kwh: f64,
    pub demand_kw: f64,
    pub reactive_kvar: f64,
    /// Flexibility prices up to and including the current hour, oldest first,
    /// zero-padded before the start of the data.
    pub price_history: Vec<f64>,
    pub time_index: usize,
    pub dr_budget_remaining_kwh: f64,
}

/// One agent's normalized action pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub alpha_dr: f64,
    pub alpha_ess: f64,
}

/// Joint action, agents in bus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub Vec<AgentAction>);

impl ActionVector {
    pub fn zeros(n_agents: usize) -> Self {
        Self(vec![AgentAction { alpha_dr: 0.0, alpha_ess: 0.0 }; n_agents])
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 2, 0, "flat action length must be even");
        Self(flat.chunks_exact(2).map(|c| AgentAction { alpha_dr: c[0], alpha_ess: c[1] }).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|a| [a.alpha_dr, a.alpha_ess]).collect()
    }

    pub fn n_agents(&self) -> usize {
        self.0.len()
    }

    /// Clamp to the declared ranges, reporting how many coordinates moved.
    pub fn clamped(&self) -> (Self, usize) {
        let mut moved = 0;
        let clamped = Self(
            self.0
                .iter()
                .map(|a| {
                    let dr = a.alpha_dr.clamp(0.0, 1.0);
                    let ess = a.alpha_ess.clamp(-1.0, 1.0);
                    if dr != a.alpha_dr {
                        moved += 1;
                    }
                    if ess != a.alpha_ess {
                        moved += 1;
                    }
                    AgentAction { alpha_dr: dr, alpha_ess: ess }
                })
                .collect(),
        );
        (clamped, moved)
    }
}

/// Everything produced by one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Per-agent reward including penalty terms (EUR).
    pub rewards: Vec<f64>,
    /// Sum of the per-agent revenue/cost parts (EUR); penalties excluded.
    pub global_reward: f64,
    /// The revenue/cost part of each agent's reward.
    pub revenue_parts: Vec<f64>,
    pub penalty_dr: Vec<f64>,
    pub penalty_ess: Vec<f64>,
    pub power_flow: PowerFlowSolution,
    pub violations: ViolationReport,
    pub observations: Vec<AgentObservation>,
    pub done: bool,
    pub applied: Vec<DevicePowers>,
    pub injections: InjectionProfile,
    pub clamped_coordinates: usize,
}

/// The global reward: the sum of local revenue/cost parts on applied powers.
pub fn global_reward(outcome: &StepOutcome) -> f64 {
    outcome.revenue_parts.iter().sum()
}

/// Environment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub horizon: usize,
    pub lookback: usize,
    pub dt_h: f64,
    pub initial_soc_frac: f64,
    pub slack_v_pu: f64,
    pub pf_tol: f64,
    pub pf_max_iter: usize,
    pub kappa_dr: f64,
    pub kappa_ess: f64,
    pub limits: VoltageLimits,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 24,
            lookback: 24,
            dt_h: 1.0,
            initial_soc_frac: 0.5,
            slack_v_pu: 1.0,
            pf_tol: 1e-8,
            pf_max_iter: 100,
            kappa_dr: 10.0,
            kappa_ess: 10.0,
            limits: VoltageLimits::default(),
        }
    }
}

/// The episodic environment. One instance is a single writer: `reset`, then
/// sequential `step` calls.
#[derive(Debug, Clone)]
pub struct Environment {
    net: NetworkModel,
    fleet: FleetSpec,
    prices: PriceSeries,
    profiles: ExogenousProfiles,
    cfg: EnvConfig,
    episode_start: usize,
    t: usize,
    ess: Vec<EssState>,
    ledgers: Vec<DrLedger>,
    prev_overshoot: Vec<f64>,
    clamp_warnings: u64,
}

impl Environment {
    pub fn new(
        net: NetworkModel,
        fleet: FleetSpec,
        prices: PriceSeries,
        profiles: ExogenousProfiles,
        cfg: EnvConfig,
    ) -> Result<Self, EnvError> {
        prices.validate()?;
        if profiles.is_empty() {
            return Err(EnvError::Empty);
        }
        if prices.len() != profiles.len() {
            return Err(EnvError::LengthMismatch { prices: prices.len(), loads: profiles.len() });
        }
        if profiles.n_buses() != net.n_buses() {
            return Err(EnvError::IncompleteHour {
                hour: 0,
                found: profiles.n_buses(),
                expected: net.n_buses(),
            });
        }
        if profiles.len() < cfg.horizon + 1 {
            return Err(EnvError::ProfileTooShort {
                available: profiles.len(),
                needed: cfg.horizon + 1,
            });
        }
        fleet.validate_against(net.n_buses(), net.slack_bus())?;
        validate_fleet_demand(&fleet, &profiles)?;
        let n = fleet.n_agents();
        let ess = fleet
            .agents
            .iter()
            .map(|a| EssState { energy_kwh: cfg.initial_soc_frac * a.ess.e_max_kwh })
            .collect();
        Ok(Self {
            net,
            fleet,
            prices,
            profiles,
            cfg,
            episode_start: 0,
            t: 0,
            ess,
            ledgers: vec![DrLedger::new(); n],
            prev_overshoot: vec![0.0; n],
            clamp_warnings: 0,
        })
    }

    pub fn net(&self) -> &NetworkModel {
        &self.net
    }

    pub fn fleet(&self) -> &FleetSpec {
        &self.fleet
    }

    pub fn agents(&self) -> &[AgentDevices] {
        &self.fleet.agents
    }

    pub fn n_agents(&self) -> usize {
        self.fleet.n_agents()
    }

    pub fn prices(&self) -> &PriceSeries {
        &self.prices
    }

    pub fn profiles(&self) -> &ExogenousProfiles {
        &self.profiles
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn soc(&self) -> &[EssState] {
        &self.ess
    }

    pub fn time_step(&self) -> usize {
        self.t
    }

    pub fn episode_start(&self) -> usize {
        self.episode_start
    }

    /// Data index of the hour about to be stepped.
    pub fn current_hour(&self) -> usize {
        self.episode_start + self.t
    }

    /// Clamp warnings accumulated over the environment's lifetime.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings
    }

    /// Largest admissible episode start (terminal observation included).
    pub fn max_episode_start(&self) -> usize {
        self.profiles.len() - self.cfg.horizon - 1
    }

    /// Start an episode at the given hour index of the data.
    pub fn reset(&mut self, episode_start: usize) -> Result<Vec<AgentObservation>, EnvError> {
        let max = self.max_episode_start();
        if episode_start > max {
            return Err(EnvError::BadEpisodeStart { start: episode_start, max });
        }
        self.episode_start = episode_start;
        self.t = 0;
        for (state, agent) in self.ess.iter_mut().zip(&self.fleet.agents) {
            state.energy_kwh = self.cfg.initial_soc_frac * agent.ess.e_max_kwh;
        }
        self.ledgers = vec![DrLedger::new(); self.n_agents()];
        self.prev_overshoot = vec![0.0; self.n_agents()];
        Ok(self.observations())
    }

    /// Observations at the current step.
    pub fn observations(&self) -> Vec<AgentObservation> {
        let hour = self.current_hour();
        self.fleet
            .agents
            .iter()
            .enumerate()
            .map(|(i, agent)| {
                let mut history = vec![0.0; self.cfg.lookback];
                for (k, slot) in history.iter_mut().enumerate() {
                    let offset = self.cfg.lookback - 1 - k;
                    if hour >= offset {
                        *slot = self.prices.lambda_flex[hour - offset];
                    }
                }
                AgentObservation {
                    soc_kwh: self.ess[i].energy_kwh,
                    demand_kw: self.profiles.demand_kw[hour][agent.bus],
                    reactive_kvar: self.profiles.reactive_kvar[hour][agent.bus],
                    price_history: history,
                    time_index: self.t,
                    dr_budget_remaining_kwh: der::dr_budget_remaining(
                        &self.ledgers[i],
                        &agent.building,
                        self.cfg.horizon,
                        self.cfg.dt_h,
                    ),
                }
            })
            .collect()
    }

    /// Net withdrawals at the current hour with all-zero actions.
    pub fn base_injections(&self) -> InjectionProfile {
        let hour = self.current_hour();
        InjectionProfile {
            active_kw: self.profiles.demand_kw[hour].clone(),
            reactive_kvar: self.profiles.reactive_kvar[hour].clone(),
        }
    }

    /// Advance one step with the given joint action.
    pub fn step(&mut self, actions: &ActionVector) -> Result<StepOutcome, EnvError> {
        if self.t >= self.cfg.horizon {
            return Err(EnvError::EpisodeOver);
        }
        assert_eq!(actions.n_agents(), self.n_agents(), "joint action width mismatch");
        let hour = self.current_hour();
        let dt = self.cfg.dt_h;
        let (actions, clamped_coordinates) = actions.clamped();
        self.clamp_warnings += clamped_coordinates as u64;

        let lambda_flex = self.prices.lambda_flex[hour];
        let lambda_buy = self.prices.lambda_buy[hour];
        let final_step = self.t + 1 == self.cfg.horizon;

        let mut injections = self.base_injections();
        let mut applied = Vec::with_capacity(self.n_agents());
        let mut revenue_parts = Vec::with_capacity(self.n_agents());
        let mut penalty_dr = Vec::with_capacity(self.n_agents());
        let mut penalty_ess = Vec::with_capacity(self.n_agents());
        let mut rewards = Vec::with_capacity(self.n_agents());

        for (i, agent) in self.fleet.agents.iter().enumerate() {
            let act = actions.0[i];
            let (powers, _) =
                der::denormalize_actions(act.alpha_dr, act.alpha_ess, &agent.building, &agent.ess);
            let (next_state, ap_ch, ap_dis) =
                der::step_ess(self.ess[i], powers.p_ch_kw, powers.p_dis_kw, dt, &agent.ess);
            self.ess[i] = next_state;
            let powers = DevicePowers { p_dr_kw: powers.p_dr_kw, p_ch_kw: ap_ch, p_dis_kw: ap_dis };
            self.ledgers[i].record(powers.p_dr_kw * dt);

            let demand = self.profiles.demand_kw[hour][agent.bus];
            injections.active_kw[agent.bus] =
                demand - powers.p_dr_kw + powers.p_ch_kw - powers.p_dis_kw;

            // Local part of the global reward, settled on applied powers.
            let lambda_dr_t = self.prices.lambda_dr[hour];
            let revenue = dt
                * (lambda_flex * (powers.p_dr_kw + powers.p_dis_kw)
                    - lambda_buy * (powers.p_ch_kw + demand - powers.p_dr_kw)
                    - lambda_dr_t * powers.p_dr_kw);

            // Budget overshoot is penalized on its increment, so the episode
            // total equals the horizon-level term.
            let budget = der::dr_budget_total(&agent.building, self.cfg.horizon, dt);
            let overshoot = (self.ledgers[i].cumulative_kwh() - budget).max(0.0);
            let pen_dr = self.cfg.kappa_dr * (overshoot - self.prev_overshoot[i]);
            self.prev_overshoot[i] = overshoot;

            let pen_ess = if final_step {
                self.cfg.kappa_ess * der::end_of_horizon_soc_deficit(self.ess[i], &agent.ess)
            } else {
                0.0
            };

            applied.push(powers);
            revenue_parts.push(revenue);
            penalty_dr.push(pen_dr);
            penalty_ess.push(pen_ess);
            rewards.push(revenue - pen_dr - pen_ess);
        }

        let power_flow = grid::solve_power_flow(
            &self.net,
            &injections,
            self.cfg.slack_v_pu,
            self.cfg.pf_tol,
            self.cfg.pf_max_iter,
        )
        .map_err(|source| EnvError::PowerFlow { step: self.t, source })?;
        let violations = grid::check_voltage_limits(&power_flow, &self.cfg.limits);

        self.t += 1;
        let observations = self.observations();
        Ok(StepOutcome {
            global_reward: revenue_parts.iter().sum(),
            rewards,
            revenue_parts,
            penalty_dr,
            penalty_ess,
            power_flow,
            violations,
            observations,
            done: self.t == self.cfg.horizon,
            applied,
            injections,
            clamped_coordinates,
        })
    }
}

/// Min-max normalization constants for observations, computed from the
/// dataset and stored alongside trained models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub soc_range: Vec<(f64, f64)>,
    pub demand_range: Vec<(f64, f64)>,
    pub reactive_range: Vec<(f64, f64)>,
    pub price_range: (f64, f64),
    pub budget_max: Vec<f64>,
    pub horizon: usize,
    pub lookback: usize,
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn scale01(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

impl NormStats {
    pub fn from_data(
        fleet: &FleetSpec,
        prices: &PriceSeries,
        profiles: &ExogenousProfiles,
        cfg: &EnvConfig,
    ) -> Self {
        let soc_range = fleet.agents.iter().map(|a| (a.ess.e_min_kwh, a.ess.e_max_kwh)).collect();
        let demand_range = fleet
            .agents
            .iter()
            .map(|a| span(profiles.demand_kw.iter().map(|row| row[a.bus])))
            .collect();
        let reactive_range = fleet
            .agents
            .iter()
            .map(|a| span(profiles.reactive_kvar.iter().map(|row| row[a.bus])))
            .collect();
        let budget_max = fleet
            .agents
            .iter()
            .map(|a| der::dr_budget_total(&a.building, cfg.horizon, cfg.dt_h).max(1e-9))
            .collect();
        Self {
            soc_range,
            demand_range,
            reactive_range,
            price_range: span(prices.lambda_flex.iter().copied()),
            budget_max,
            horizon: cfg.horizon,
            lookback: cfg.lookback,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.lookback + 5
    }

    /// Flatten and scale one observation to roughly [0, 1] per feature.
    pub fn normalize(&self, agent: usize, obs: &AgentObservation) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.obs_dim());
        out.push(scale01(obs.soc_kwh, self.soc_range[agent]));
        out.push(scale01(obs.demand_kw, self.demand_range[agent]));
        out.push(scale01(obs.reactive_kvar, self.reactive_range[agent]));
        for &p in &obs.price_history {
            out.push(scale01(p, self.price_range));
        }
        out.push(obs.time_index as f64 / self.horizon.max(1) as f64);
        out.push(obs.dr_budget_remaining_kwh / self.budget_max[agent]);
        out
    }

    /// Concatenation of all agents' normalized observations: the critics'
    /// global state.
    pub fn global_state(&self, observations: &[AgentObservation]) -> Vec<f64> {
        observations.iter().enumerate().flat_map(|(i, o)| self.normalize(i, o)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::der::{BuildingParams, EssParams};
    use approx::assert_abs_diff_eq;

    fn toy_fleet(bus: usize, p_dr_max: f64, p_dis_max: f64, h_frac: f64) -> FleetSpec {
        FleetSpec {
            agents: vec![AgentDevices {
                bus,
                ess: EssParams {
                    p_ch_max_kw: 5.0,
                    p_dis_max_kw: p_dis_max,
                    e_min_kwh: 0.0,
                    e_max_kwh: 25.0,
                    eta_ch: 0.9,
                    eta_dis: 0.9,
                },
                building: BuildingParams {
                    p_dr_max_kw: p_dr_max,
                    h_frac,
                    lambda_dr_eur_per_kwh: 0.01,
                },
            }],
        }
    }

    fn flat_series(len: usize, flex: f64, buy: f64, dr: f64) -> PriceSeries {
        PriceSeries {
            lambda_flex: vec![flex; len],
            lambda_buy: vec![buy; len],
            lambda_dr: vec![dr; len],
        }
    }

    fn flat_profiles(len: usize, demand: Vec<f64>, reactive: Vec<f64>) -> ExogenousProfiles {
        ExogenousProfiles { demand_kw: vec![demand; len], reactive_kvar: vec![reactive; len] }
    }

    fn toy_env(horizon: usize) -> Environment {
        let net = NetworkModel::from_pu_lines(1.0, 0, 2, &[(0, 1, 0.01, 0.01)]).unwrap();
        let cfg = EnvConfig { horizon, lookback: 4, ..Default::default() };
        Environment::new(
            net,
            toy_fleet(1, 2.0, 5.0, 1.0),
            flat_series(horizon + 8, 0.1, 0.15, 0.01),
            flat_profiles(horizon + 8, vec![0.0, 10.0], vec![0.0, 3.0]),
            cfg,
        )
        .unwrap()
    }

    #[test]
    fn reward_matches_hand_computed_value() {
        // lf = 0.1, lb = 0.15, ldr = 0.01, P_dr = 2, P_dis = 3, d = 10:
        // r = 0.1 * 5 - 0.15 * 8 - 0.01 * 2 = -0.72 EUR.
        let mut env = toy_env(24);
        env.reset(0).unwrap();
        let actions = ActionVector(vec![AgentAction { alpha_dr: 1.0, alpha_ess: -0.6 }]);
        let out = env.step(&actions).unwrap();
        assert_abs_diff_eq!(out.applied[0].p_dr_kw, 2.0);
        assert_abs_diff_eq!(out.applied[0].p_dis_kw, 3.0);
        assert_abs_diff_eq!(out.revenue_parts[0], -0.72, epsilon = 1e-12);
        assert_abs_diff_eq!(out.rewards[0], -0.72, epsilon = 1e-12);
        assert_abs_diff_eq!(out.global_reward, -0.72, epsilon = 1e-12);
    }

    #[test]
    fn zero_actions_zero_demand_give_zero_reward_and_flat_voltage() {
        let net = NetworkModel::from_pu_lines(1.0, 0, 2, &[(0, 1, 0.01, 0.01)]).unwrap();
        let cfg = EnvConfig { horizon: 4, lookback: 2, ..Default::default() };
        let mut env = Environment::new(
            net,
            toy_fleet(1, 0.0, 5.0, 0.5),
            flat_series(8, 0.1, 0.15, 0.01),
            flat_profiles(8, vec![0.0, 0.0], vec![0.0, 0.0]),
            cfg,
        )
        .unwrap();
        env.reset(0).unwrap();
        let out = env.step(&ActionVector::zeros(1)).unwrap();
        assert_abs_diff_eq!(out.rewards[0], 0.0);
        for &v in &out.power_flow.v_sq_pu {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn final_step_charges_soc_deficit() {
        // One-step horizon, idle battery at 10 kWh of 25 kWh, kappa = 10:
        // deficit 2.5 kWh costs 25 EUR on the final step.
        let net = NetworkModel::from_pu_lines(1.0, 0, 2, &[(0, 1, 0.01, 0.01)]).unwrap();
        let cfg = EnvConfig {
            horizon: 1,
            lookback: 2,
            initial_soc_frac: 0.4,
            kappa_ess: 10.0,
            ..Default::default()
        };
        let mut env = Environment::new(
            net,
            toy_fleet(1, 0.0, 5.0, 0.5),
            flat_series(4, 0.0, 0.0, 0.0),
            flat_profiles(4, vec![0.0, 0.0], vec![0.0, 0.0]),
            cfg,
        )
        .unwrap();
        env.reset(0).unwrap();
        let out = env.step(&ActionVector::zeros(1)).unwrap();
        assert!(out.done);
        assert_abs_diff_eq!(out.penalty_ess[0], 25.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.rewards[0], -25.0, epsilon = 1e-12);
        // Penalties are per-agent, not part of the global reward.
        assert_abs_diff_eq!(out.global_reward, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dr_budget_penalty_is_incremental_and_totals_the_overshoot() {
        // H = 0.25 over 4 steps with P_dr_max = 2: budget 2 kWh; running DR
        // at full power delivers 8 kWh, overshooting by 6.
        let net = NetworkModel::from_pu_lines(1.0, 0, 2, &[(0, 1, 0.01, 0.01)]).unwrap();
        let cfg = EnvConfig { horizon: 4, lookback: 2, kappa_dr: 10.0, ..Default::default() };
        let mut env = Environment::new(
            net,
            toy_fleet(1, 2.0, 5.0, 0.25),
            flat_series(8, 0.0, 0.0, 0.0),
            flat_profiles(8, vec![0.0, 10.0], vec![0.0, 0.0]),
            cfg,
        )
        .unwrap();
        env.reset(0).unwrap();
        let mut total_pen = 0.0;
        for _ in 0..4 {
            let out = env
                .step(&ActionVector(vec![AgentAction { alpha_dr: 1.0, alpha_ess: 0.0 }]))
                .unwrap();
            total_pen += out.penalty_dr[0];
        }
        assert_abs_diff_eq!(total_pen, 10.0 * 6.0, epsilon = 1e-9);
    }

    #[test]
    fn reset_is_deterministic_and_seeds_budget_and_soc() {
        let mut env = toy_env(24);
        let a = env.reset(5).unwrap();
        let b = env.reset(5).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a[0].soc_kwh, 12.5);
        // Budget = H * T * P_dr_max = 1.0 * 24 * 2.
        assert_abs_diff_eq!(a[0].dr_budget_remaining_kwh, 48.0);
        assert_eq!(a[0].time_index, 0);
    }

    #[test]
    fn price_history_is_zero_padded_then_backfilled() {
        let net = NetworkModel::from_pu_lines(1.0, 0, 2, &[(0, 1, 0.01, 0.01)]).unwrap();
        let cfg = EnvConfig { horizon: 2, lookback: 3, ..Default::default() };
        let prices = PriceSeries {
            lambda_flex: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            lambda_buy: vec![0.0; 5],
            lambda_dr: vec![0.0; 5],
        };
        let mut env = Environment::new(
            net,
            toy_fleet(1, 0.0, 5.0, 0.5),
            prices,
            flat_profiles(5, vec![0.0, 1.0], vec![0.0, 0.0]),
            cfg,
        )
        .unwrap();
        let obs = env.reset(0).unwrap();
        assert_eq!(obs[0].price_history, vec![0.0, 0.0, 1.0]);
        let obs = env.reset(2).unwrap();
        assert_eq!(obs[0].price_history, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn replicated_agents_sum_in_global_reward() {
        // Five identical agents on a star network, each replicating the
        // hand-computed -0.72 EUR case.
        let lines: Vec<(usize, usize, f64, f64)> =
            (1..=5).map(|b| (0usize, b, 0.01, 0.01)).collect();
        let net = NetworkModel::from_pu_lines(1.0, 0, 6, &lines).unwrap();
        let fleet = FleetSpec {
            agents: (1..=5)
                .map(|bus| AgentDevices {
                    bus,
                    ess: EssParams {
                        p_ch_max_kw: 5.0,
                        p_dis_max_kw: 5.0,
                        e_min_kwh: 0.0,
                        e_max_kwh: 25.0,
                        eta_ch: 0.9,
                        eta_dis: 0.9,
                    },
                    building: BuildingParams {
                        p_dr_max_kw: 2.0,
                        h_frac: 1.0,
                        lambda_dr_eur_per_kwh: 0.01,
                    },
                })
                .collect(),
        };
        let mut demand = vec![10.0; 6];
        demand[0] = 0.0;
        let cfg = EnvConfig { horizon: 4, lookback: 2, ..Default::default() };
        let mut env = Environment::new(
            net,
            fleet,
            flat_series(8, 0.1, 0.15, 0.01),
            flat_profiles(8, demand, vec![0.0; 6]),
            cfg,
        )
        .unwrap();
        env.reset(0).unwrap();
        let actions = ActionVector(vec![AgentAction { alpha_dr: 1.0, alpha_ess: -0.6 }; 5]);
        let out = env.step(&actions).unwrap();
        assert_abs_diff_eq!(out.global_reward, -3.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out.global_reward, global_reward(&out), epsilon = 0.0);
    }

    #[test]
    fn injections_follow_applied_powers() {
        let mut env = toy_env(24);
        env.reset(0).unwrap();
        let out =
            env.step(&ActionVector(vec![AgentAction { alpha_dr: 0.5, alpha_ess: 1.0 }])).unwrap();
        // d - P_dr + P_ch = 10 - 1 + 5.
        assert_abs_diff_eq!(out.injections.active_kw[1], 14.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let fleet = toy_fleet(1, 2.0, 5.0, 0.5);
        let prices_csv = "timestamp,lambda_flex,lambda_buy\n2024-01-01T00:00:00Z,0.1,0.2\n2024-01-01T01:00:00Z,0.3,0.2\n";
        let loads_csv = "timestamp,bus_id,active_kw,reactive_kvar\n\
            2024-01-01T00:00:00Z,0,0.0,0.0\n2024-01-01T00:00:00Z,1,9.0,3.0\n\
            2024-01-01T01:00:00Z,0,0.0,0.0\n2024-01-01T01:00:00Z,1,8.0,2.5\n";
        let (prices, profiles) = load_profiles(prices_csv, loads_csv, &fleet, 0.01).unwrap();
        assert_eq!(prices.len(), 2);
        assert_abs_diff_eq!(prices.lambda_dr[0], 0.01);
        assert_abs_diff_eq!(profiles.demand_kw[1][1], 8.0);

        // Demand at or below the DR capacity is rejected.
        let bad_loads = loads_csv.replace("1,9.0,3.0", "1,2.0,3.0");
        let err = load_profiles(prices_csv, &bad_loads, &fleet, 0.01).unwrap_err();
        assert!(matches!(err, EnvError::DemandBelowDrCap { bus: 1, hour: 0, .. }), "{err}");

        let err = load_profiles("timestamp,lambda_flex,lambda_buy\n", loads_csv, &fleet, 0.01)
            .unwrap_err();
        assert!(matches!(err, EnvError::Empty | EnvError::LengthMismatch { .. }), "{err}");

        let nan_prices = prices_csv.replace("0.3", "nan");
        let err = load_profiles(&nan_prices, loads_csv, &fleet, 0.01).unwrap_err();
        assert!(matches!(err, EnvError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn normalization_spans_dataset() {
        let env = toy_env(24);
        let stats = NormStats::from_data(env.fleet(), env.prices(), env.profiles(), env.config());
        let obs = env.observations();
        let v = stats.normalize(0, &obs[0]);
        assert_eq!(v.len(), stats.obs_dim());
        assert!(v.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(v[0], 0.5); // SOC at half capacity
        let global = stats.global_state(&obs);
        assert_eq!(global.len(), stats.obs_dim());
    }

    #[test]
    fn episode_terminates_and_refuses_extra_steps() {
        let mut env = toy_env(2);
        env.reset(0).unwrap();
        let a = ActionVector::zeros(1);
        assert!(!env.step(&a).unwrap().done);
        assert!(env.step(&a).unwrap().done);
        assert!(matches!(env.step(&a), Err(EnvError::EpisodeOver)));
    }
}
