//! Deterministic synthetic price and load profiles.
//!
//! Hourly series built from a daily demand shape, a 52-week seasonal cycle, a
//! weekend factor, a midday solar dip at building buses, and seeded Gaussian
//! noise. With zero noise the output is exactly periodic with a 364-day
//! period. Generated demand always strictly exceeds each building's DR
//! capacity, which the environment validates at load time.

use crate::der::FleetSpec;
use crate::env::{ExogenousProfiles, PriceSeries};
use crate::grid::NetworkModel;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Shape and noise parameters of the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfileSpec {
    pub years: usize,
    /// Load level (fraction of nominal bus load) at the quietest hour.
    pub load_level_min: f64,
    /// Load level at the evening peak of a winter weekday.
    pub load_level_peak: f64,
    pub weekend_factor: f64,
    pub seasonal_amp: f64,
    /// Relative standard deviation of per-bus load noise, clamped at 2.5 sigma.
    pub load_noise: f64,
    /// Midday net-demand dip at building buses (rooftop generation).
    pub solar_dip: f64,
    pub price_base: f64,
    /// Absolute standard deviation of flexibility-price noise (EUR/kWh).
    pub price_noise: f64,
    pub tou_offpeak: f64,
    pub tou_shoulder: f64,
    pub tou_peak: f64,
    pub lambda_dr: f64,
}

impl Default for SyntheticProfileSpec {
    fn default() -> Self {
        Self {
            years: 2,
            load_level_min: 0.22,
            load_level_peak: 0.55,
            weekend_factor: 0.85,
            seasonal_amp: 0.12,
            load_noise: 0.04,
            solar_dip: 0.25,
            price_base: 0.12,
            price_noise: 0.025,
            tou_offpeak: 0.10,
            tou_shoulder: 0.15,
            tou_peak: 0.25,
            lambda_dr: 0.01,
        }
    }
}

impl SyntheticProfileSpec {
    pub fn n_hours(&self) -> usize {
        self.years * 365 * 24
    }
}

/// Normalized daily demand shape, one entry per hour.
const DAILY_SHAPE: [f64; 24] = [
    0.18, 0.12, 0.08, 0.06, 0.06, 0.10, 0.22, 0.38, 0.50, 0.55, 0.58, 0.60, 0.58, 0.54, 0.50,
    0.52, 0.62, 0.80, 0.95, 1.00, 0.92, 0.70, 0.45, 0.28,
];

fn seasonal(day: usize, amp: f64) -> f64 {
    // 52-week cycle so the weekday pattern repeats exactly each cycle.
    let cyc = (day % 364) as f64 / 364.0;
    1.0 + amp * (2.0 * std::f64::consts::PI * cyc).cos()
}

fn solar_bell(hour: usize) -> f64 {
    let x = (hour as f64 - 13.0) / 3.5;
    (-0.5 * x * x).exp()
}

fn tou(hour: usize, spec: &SyntheticProfileSpec) -> f64 {
    match hour {
        0..=6 | 23 => spec.tou_offpeak,
        17..=20 => spec.tou_peak,
        _ => spec.tou_shoulder,
    }
}

/// Generate hourly prices and per-bus loads for the given network and fleet.
/// Deterministic in `seed`; the draw order is fixed (per hour: system noise,
/// per-bus load noise, per-bus reactive noise, price noise).
pub fn generate_profiles(
    net: &NetworkModel,
    fleet: &FleetSpec,
    spec: &SyntheticProfileSpec,
    seed: u64,
) -> (PriceSeries, ExogenousProfiles) {
    let n_hours = spec.n_hours();
    let n_buses = net.n_buses();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |sd: f64, rng: &mut ChaCha12Rng| -> f64 {
        if sd == 0.0 {
            0.0
        } else {
            (noise.sample(rng) * sd).clamp(-2.5 * sd, 2.5 * sd)
        }
    };
    let is_building: Vec<bool> = {
        let mut v = vec![false; n_buses];
        for a in &fleet.agents {
            v[a.bus] = true;
        }
        v
    };
    let dr_floor: Vec<f64> = {
        let mut v = vec![0.0; n_buses];
        for a in &fleet.agents {
            v[a.bus] = 1.08 * a.building.p_dr_max_kw;
        }
        v
    };

    let mut prices =
        PriceSeries { lambda_flex: Vec::new(), lambda_buy: Vec::new(), lambda_dr: Vec::new() };
    let mut profiles = ExogenousProfiles {
        demand_kw: Vec::with_capacity(n_hours),
        reactive_kvar: Vec::with_capacity(n_hours),
    };

    for t in 0..n_hours {
        let day = t / 24;
        let hour = t % 24;
        let dow = day % 7;
        let weekly = if dow >= 5 { spec.weekend_factor } else { 1.0 };
        let season = seasonal(day, spec.seasonal_amp);
        let sys_noise = draw(spec.load_noise * 0.5, &mut rng);
        let raw = DAILY_SHAPE[hour] * weekly * season * (1.0 + sys_noise);
        let level = (spec.load_level_min + (spec.load_level_peak - spec.load_level_min) * raw)
            .clamp(0.9 * spec.load_level_min, 1.05 * spec.load_level_peak);

        let mut demand = Vec::with_capacity(n_buses);
        let mut reactive = Vec::with_capacity(n_buses);
        for bus in net.buses() {
            let p_noise = draw(spec.load_noise, &mut rng);
            let q_noise = draw(spec.load_noise, &mut rng);
            let mut p = bus.nominal_p_kw * level * (1.0 + p_noise);
            if is_building[bus.id] {
                p *= 1.0 - spec.solar_dip * solar_bell(hour);
                p = p.max(dr_floor[bus.id]);
            }
            demand.push(p.max(0.0));
            reactive.push((bus.nominal_q_kvar * level * (1.0 + q_noise)).max(0.0));
        }
        profiles.demand_kw.push(demand);
        profiles.reactive_kvar.push(reactive);

        let sys = DAILY_SHAPE[hour] * season * if dow >= 5 { 0.9 } else { 1.0 };
        let flex = (spec.price_base * (0.35 + 1.3 * sys) + draw(spec.price_noise, &mut rng))
            .clamp(0.005, 0.48);
        prices.lambda_flex.push(flex);
        prices.lambda_buy.push(tou(hour, spec));
        prices.lambda_dr.push(spec.lambda_dr);
    }
    (prices, profiles)
}
