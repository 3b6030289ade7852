//! Device models: battery storage dynamics and building demand response.
//!
//! Normalized agent actions map onto physical powers so that the per-step box
//! constraints hold by construction; the storage state update clamps to the
//! energy bounds by scaling the applied power, so the reward always reflects
//! energy actually delivered.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DerError {
    #[error("fleet file parse error: {0}")]
    Parse(String),
    #[error("ESS parameters invalid: {0}")]
    BadEssParams(String),
    #[error("building parameters invalid: {0}")]
    BadBuildingParams(String),
    #[error("agent at bus {0} duplicated in fleet")]
    DuplicateBus(usize),
    #[error("agent bus {bus} out of range for a {n_buses}-bus network")]
    BusOutOfRange { bus: usize, n_buses: usize },
    #[error("agents may not sit at the slack bus {0}")]
    AgentAtSlack(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Battery ratings and efficiencies.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EssParams {
    pub p_ch_max_kw: f64,
    pub p_dis_max_kw: f64,
    pub e_min_kwh: f64,
    pub e_max_kwh: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
}

impl EssParams {
    pub fn validate(&self) -> Result<(), DerError> {
        let bad = |msg: String| Err(DerError::BadEssParams(msg));
        if !(0.0 <= self.e_min_kwh && self.e_min_kwh < self.e_max_kwh) {
            return bad(format!("energy bounds [{}, {}]", self.e_min_kwh, self.e_max_kwh));
        }
        if self.p_ch_max_kw <= 0.0 || self.p_dis_max_kw <= 0.0 {
            return bad(format!(
                "rated powers ch {} / dis {}",
                self.p_ch_max_kw, self.p_dis_max_kw
            ));
        }
        for (name, eta) in [("eta_ch", self.eta_ch), ("eta_dis", self.eta_dis)] {
            if !(eta > 0.0 && eta <= 1.0) {
                return bad(format!("{name} = {eta} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Current stored energy of one battery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssState {
    pub energy_kwh: f64,
}

/// Demand-response contract terms of one building.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BuildingParams {
    pub p_dr_max_kw: f64,
    /// Fraction of the theoretical horizon-long reduction capacity that may
    /// actually be used.
    pub h_frac: f64,
    pub lambda_dr_eur_per_kwh: f64,
}

impl BuildingParams {
    pub fn validate(&self) -> Result<(), DerError> {
        if self.p_dr_max_kw < 0.0 {
            return Err(DerError::BadBuildingParams(format!(
                "p_dr_max_kw = {}",
                self.p_dr_max_kw
            )));
        }
        if !(0.0..=1.0).contains(&self.h_frac) {
            return Err(DerError::BadBuildingParams(format!("h_frac = {}", self.h_frac)));
        }
        Ok(())
    }
}

/// Running sum of delivered demand reduction within an episode (kWh).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct DrLedger {
    cumulative_reduction_kwh: f64,
}

impl DrLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, reduction_kwh: f64) {
        debug_assert!(reduction_kwh >= 0.0);
        self.cumulative_reduction_kwh += reduction_kwh;
    }

    pub fn cumulative_kwh(&self) -> f64 {
        self.cumulative_reduction_kwh
    }
}

/// Physical powers decoded from one agent's normalized action.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DevicePowers {
    pub p_dr_kw: f64,
    pub p_ch_kw: f64,
    pub p_dis_kw: f64,
}

/// Map normalized actions to device powers. `alpha_dr` is clamped to [0, 1]
/// and `alpha_ess` to [-1, 1]; the returned flag reports whether clamping
/// happened. A positive `alpha_ess` charges, a negative one discharges, so
/// charge and discharge are never simultaneous.
pub fn denormalize_actions(
    alpha_dr: f64,
    alpha_ess: f64,
    building: &BuildingParams,
    ess: &EssParams,
) -> (DevicePowers, bool) {
    let a_dr = alpha_dr.clamp(0.0, 1.0);
    let a_ess = alpha_ess.clamp(-1.0, 1.0);
    let clamped = a_dr != alpha_dr || a_ess != alpha_ess;
    let mut powers = DevicePowers { p_dr_kw: a_dr * building.p_dr_max_kw, ..Default::default() };
    if a_ess > 0.0 {
        powers.p_ch_kw = a_ess * ess.p_ch_max_kw;
    } else if a_ess < 0.0 {
        powers.p_dis_kw = -a_ess * ess.p_dis_max_kw;
    }
    (powers, clamped)
}

/// Advance the stored-energy dynamics by one step of `dt_h` hours.
///
/// If the raw update would leave the energy bounds, the commanded power is
/// scaled so the state lands exactly on the bound; the scaled power is
/// returned as the applied power. Returns `(next_state, applied_p_ch_kw,
/// applied_p_dis_kw)`.
pub fn step_ess(
    state: EssState,
    p_ch_kw: f64,
    p_dis_kw: f64,
    dt_h: f64,
    params: &EssParams,
) -> (EssState, f64, f64) {
    debug_assert!(dt_h > 0.0);
    debug_assert!(
        p_ch_kw <= 0.0 || p_dis_kw <= 0.0,
        "charge and discharge must not both be positive"
    );
    let mut p_ch = p_ch_kw.max(0.0);
    let mut p_dis = p_dis_kw.max(0.0);
    let raw = state.energy_kwh + dt_h * (params.eta_ch * p_ch - p_dis / params.eta_dis);
    let next = if raw > params.e_max_kwh {
        p_ch = (params.e_max_kwh - state.energy_kwh) / (dt_h * params.eta_ch);
        p_ch = p_ch.max(0.0);
        params.e_max_kwh
    } else if raw < params.e_min_kwh {
        p_dis = (state.energy_kwh - params.e_min_kwh) * params.eta_dis / dt_h;
        p_dis = p_dis.max(0.0);
        params.e_min_kwh
    } else {
        raw
    };
    (EssState { energy_kwh: next }, p_ch, p_dis)
}

/// Remaining cumulative-reduction budget of a building, in kWh.
pub fn dr_budget_remaining(
    ledger: &DrLedger,
    building: &BuildingParams,
    horizon_len: usize,
    dt_h: f64,
) -> f64 {
    (dr_budget_total(building, horizon_len, dt_h) - ledger.cumulative_reduction_kwh).max(0.0)
}

/// Total horizon budget `H_b * |T| * P_dr_max` (kWh).
pub fn dr_budget_total(building: &BuildingParams, horizon_len: usize, dt_h: f64) -> f64 {
    building.h_frac * horizon_len as f64 * building.p_dr_max_kw * dt_h
}

/// How far the battery falls short of the required half-capacity level at the
/// end of the horizon (kWh, zero when satisfied).
pub fn end_of_horizon_soc_deficit(state: EssState, params: &EssParams) -> f64 {
    (0.5 * params.e_max_kwh - state.energy_kwh).max(0.0)
}

/// One controllable node: a building with a demand-response contract plus a
/// battery behind the same connection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentDevices {
    pub bus: usize,
    pub ess: EssParams,
    pub building: BuildingParams,
}

/// The controllable fleet, in bus order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FleetSpec {
    pub agents: Vec<AgentDevices>,
}

impl FleetSpec {
    /// Parse from JSON or TOML.
    pub fn from_str(text: &str) -> Result<Self, DerError> {
        let mut fleet: FleetSpec = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| DerError::Parse(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| DerError::Parse(e.to_string()))?
        };
        fleet.agents.sort_by_key(|a| a.bus);
        for a in &fleet.agents {
            a.ess.validate()?;
            a.building.validate()?;
        }
        Ok(fleet)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DerError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Default fleet for the bundled 33-bus feeder: five buildings with
    /// batteries at buses 5, 10, 15, 20 and 25.
    pub fn ieee33_default() -> Self {
        Self::from_str(include_str!("../assets/fleet33.toml")).expect("bundled fleet is valid")
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn validate_against(&self, n_buses: usize, slack_bus: usize) -> Result<(), DerError> {
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.agents {
            if a.bus >= n_buses {
                return Err(DerError::BusOutOfRange { bus: a.bus, n_buses });
            }
            if a.bus == slack_bus {
                return Err(DerError::AgentAtSlack(a.bus));
            }
            if !seen.insert(a.bus) {
                return Err(DerError::DuplicateBus(a.bus));
            }
            a.ess.validate()?;
            a.building.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ess() -> EssParams {
        EssParams {
            p_ch_max_kw: 5.0,
            p_dis_max_kw: 5.0,
            e_min_kwh: 0.0,
            e_max_kwh: 25.0,
            eta_ch: 0.9,
            eta_dis: 0.9,
        }
    }

    fn building() -> BuildingParams {
        BuildingParams { p_dr_max_kw: 5.0, h_frac: 0.5, lambda_dr_eur_per_kwh: 0.01 }
    }

    #[test]
    fn denormalize_zero_is_zero() {
        let (p, clamped) = denormalize_actions(0.0, 0.0, &building(), &ess());
        assert_eq!(p, DevicePowers::default());
        assert!(!clamped);
    }

    #[test]
    fn denormalize_full_charge() {
        let (p, _) = denormalize_actions(1.0, 1.0, &building(), &ess());
        assert_abs_diff_eq!(p.p_dr_kw, 5.0);
        assert_abs_diff_eq!(p.p_ch_kw, 5.0);
        assert_abs_diff_eq!(p.p_dis_kw, 0.0);
    }

    #[test]
    fn denormalize_partial_discharge() {
        let (p, _) = denormalize_actions(0.5, -0.4, &building(), &ess());
        assert_abs_diff_eq!(p.p_dr_kw, 2.5);
        assert_abs_diff_eq!(p.p_ch_kw, 0.0);
        assert_abs_diff_eq!(p.p_dis_kw, 2.0);
    }

    #[test]
    fn denormalize_clamps_out_of_range() {
        let (p, clamped) = denormalize_actions(1.5, -2.0, &building(), &ess());
        assert!(clamped);
        assert_abs_diff_eq!(p.p_dr_kw, 5.0);
        assert_abs_diff_eq!(p.p_dis_kw, 5.0);
    }

    #[test]
    fn ess_step_charges_with_efficiency() {
        let (next, ap_ch, ap_dis) = step_ess(EssState { energy_kwh: 10.0 }, 5.0, 0.0, 1.0, &ess());
        assert_abs_diff_eq!(next.energy_kwh, 14.5);
        assert_abs_diff_eq!(ap_ch, 5.0);
        assert_abs_diff_eq!(ap_dis, 0.0);
    }

    #[test]
    fn ess_step_idle_holds_energy() {
        let (next, ..) = step_ess(EssState { energy_kwh: 10.0 }, 0.0, 0.0, 1.0, &ess());
        assert_abs_diff_eq!(next.energy_kwh, 10.0);
    }

    #[test]
    fn ess_step_scales_power_at_upper_bound() {
        let (next, ap_ch, _) = step_ess(EssState { energy_kwh: 24.8 }, 5.0, 0.0, 1.0, &ess());
        assert_abs_diff_eq!(next.energy_kwh, 25.0);
        assert_abs_diff_eq!(ap_ch, 0.2 / 0.9, epsilon = 1e-12);
    }

    #[test]
    fn ess_step_scales_power_at_lower_bound() {
        let (next, _, ap_dis) = step_ess(EssState { energy_kwh: 1.0 }, 0.0, 5.0, 1.0, &ess());
        assert_abs_diff_eq!(next.energy_kwh, 0.0);
        assert_abs_diff_eq!(ap_dis, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn round_trip_at_low_efficiency_loses_energy() {
        let p = ess();
        let start = EssState { energy_kwh: 10.0 };
        let (charged, ap_ch, _) = step_ess(start, 5.0, 0.0, 1.0, &p);
        let (ended, _, ap_dis) = step_ess(charged, 0.0, 4.05, 1.0, &p);
        // Delivered + stored must fall short of the lossless equivalent.
        let lossless = start.energy_kwh + ap_ch - ap_dis;
        assert!(ended.energy_kwh < lossless);
    }

    #[test]
    fn budget_arithmetic() {
        let b = building();
        let mut ledger = DrLedger::new();
        assert_abs_diff_eq!(dr_budget_remaining(&ledger, &b, 24, 1.0), 60.0);
        ledger.record(60.0);
        assert_abs_diff_eq!(dr_budget_remaining(&ledger, &b, 24, 1.0), 0.0);
        let zero_h = BuildingParams { h_frac: 0.0, ..b };
        assert_abs_diff_eq!(dr_budget_remaining(&DrLedger::new(), &zero_h, 24, 1.0), 0.0);
    }

    #[test]
    fn soc_deficit_boundary_cases() {
        let p = ess();
        assert_abs_diff_eq!(end_of_horizon_soc_deficit(EssState { energy_kwh: 12.5 }, &p), 0.0);
        assert_abs_diff_eq!(end_of_horizon_soc_deficit(EssState { energy_kwh: 10.0 }, &p), 2.5);
        assert_abs_diff_eq!(end_of_horizon_soc_deficit(EssState { energy_kwh: 25.0 }, &p), 0.0);
    }

    #[test]
    fn bundled_fleet_parses() {
        let fleet = FleetSpec::ieee33_default();
        assert_eq!(fleet.n_agents(), 5);
        assert_eq!(
            fleet.agents.iter().map(|a| a.bus).collect::<Vec<_>>(),
            vec![5, 10, 15, 20, 25]
        );
        fleet.validate_against(33, 0).unwrap();
    }
}
