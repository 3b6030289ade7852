//! Safety layer: minimal Euclidean adjustment of a proposed joint action so
//! that predicted squared voltages stay inside limits.
//!
//! The predictor is affine in the joint action once each battery is pinned to
//! the sign branch of its proposed action, so the projection is a strictly
//! convex QP over the action box intersected with the voltage polytope:
//!
//! ```text
//!     min  || a' - a ||^2
//!     s.t. v_lo <= A a' + b <= v_hi      (per bus, squared voltages)
//!          a' in box                      (branch-restricted action ranges)
//! ```
//!
//! If the polytope is empty the layer falls back to minimizing the largest
//! voltage-bound violation and reports it, so a (least-unsafe) action is
//! always emitted.

use crate::der::FleetSpec;
use crate::env::ActionVector;
use crate::grid::{InjectionProfile, VoltageLimits};
use crate::qp::{self, QpError, RowMatrix};
use crate::regressor::{LinearVoltageModel, RegressorError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error("projection solver failed: {0}")]
    Solver(#[from] QpError),
}

/// A fully assembled projection instance in action space.
#[derive(Debug, Clone)]
pub struct ProjectionProblem {
    /// Proposed joint action, flattened `[dr_0, ess_0, dr_1, ess_1, ...]`.
    pub proposed: Vec<f64>,
    /// Affine voltage map: predicted squared voltages = `v_map . a + v_base`.
    pub v_map: RowMatrix,
    pub v_base: Vec<f64>,
    /// Effective squared-voltage bounds (margin already applied).
    pub v_lo_sq: f64,
    pub v_hi_sq: f64,
    /// Per-coordinate action bounds (battery coordinates are restricted to
    /// the sign branch of the proposed action).
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionStatus {
    /// Proposal already satisfied every constraint; returned unchanged.
    Unchanged,
    /// Proposal was moved onto the constraint polytope.
    Projected,
    /// The polytope is empty; the action minimizes the largest violation,
    /// reported here in squared-voltage units.
    InfeasibleRelaxed { max_violation: f64 },
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub action: Vec<f64>,
    pub status: ProjectionStatus,
    /// Indices into the assembled constraint rows (see [`assemble_rows`]).
    pub active_set: Vec<usize>,
    /// One multiplier per assembled row.
    pub multipliers: Vec<f64>,
    /// Squared distance moved.
    pub objective: f64,
    /// Predicted squared voltages at the returned action.
    pub predicted_v_sq: Vec<f64>,
}

impl ProjectionResult {
    pub fn action_vector(&self) -> ActionVector {
        ActionVector::from_flat(&self.action)
    }

    /// One-line JSON diagnostic for projection logging.
    pub fn diagnostic_json(&self, problem: &ProjectionProblem) -> String {
        let delta: f64 = self
            .action
            .iter()
            .zip(&problem.proposed)
            .map(|(a, p)| (a - p) * (a - p))
            .sum::<f64>()
            .sqrt();
        let slack = self
            .predicted_v_sq
            .iter()
            .map(|&v| (v - problem.v_lo_sq).min(problem.v_hi_sq - v))
            .fold(f64::INFINITY, f64::min);
        serde_json::json!({
            "status": self.status,
            "delta_norm": delta,
            "active_set_size": self.active_set.len(),
            "min_predicted_slack_sq": slack,
        })
        .to_string()
    }
}

/// Bind the trained voltage model to the current operating point.
///
/// `base_injections` are the net withdrawals with all-zero actions. Each
/// battery coordinate is linearized on the sign branch of its proposed value
/// (charge slope for `alpha_ess >= 0`, discharge slope otherwise) and its box
/// is restricted to that branch, which makes the voltage map exactly affine
/// over the feasible box.
pub fn build_problem(
    model: &LinearVoltageModel,
    base_injections: &InjectionProfile,
    fleet: &FleetSpec,
    proposed: &ActionVector,
    limits: &VoltageLimits,
    margin_pu: f64,
) -> Result<ProjectionProblem, SafetyError> {
    assert!(margin_pu >= 0.0, "safety margin must be nonnegative");
    assert_eq!(proposed.n_agents(), fleet.n_agents(), "fleet/action width mismatch");
    let spec = &model.spec;
    let base_features = spec.features_of(base_injections);
    let flat = proposed.to_flat();

    let mut columns = Vec::with_capacity(flat.len());
    let mut box_lo = Vec::with_capacity(flat.len());
    let mut box_hi = Vec::with_capacity(flat.len());
    for (agent, act) in fleet.agents.iter().zip(&proposed.0) {
        let feat = spec.active_feature(agent.bus);
        // DR reduces the bus withdrawal.
        columns.push(vec![(feat, -agent.building.p_dr_max_kw)]);
        box_lo.push(0.0);
        box_hi.push(1.0);
        if act.alpha_ess >= 0.0 {
            columns.push(vec![(feat, agent.ess.p_ch_max_kw)]);
            box_lo.push(0.0);
            box_hi.push(1.0);
        } else {
            columns.push(vec![(feat, agent.ess.p_dis_max_kw)]);
            box_lo.push(-1.0);
            box_hi.push(0.0);
        }
    }
    let (v_map, v_base) = model.action_affine_map(&base_features, &columns)?;
    let lo = limits.v_min_pu + margin_pu;
    let hi = limits.v_max_pu - margin_pu;
    assert!(lo < hi, "margin leaves an empty voltage band");
    Ok(ProjectionProblem {
        proposed: flat,
        v_map,
        v_base,
        v_lo_sq: lo * lo,
        v_hi_sq: hi * hi,
        box_lo,
        box_hi,
    })
}

/// Assemble the inequality rows `G a <= h` of a projection problem, in a
/// fixed order: per bus an upper then a lower voltage row (rows with
/// negligible action sensitivity are kept as all-zero placeholders so indices
/// stay stable), then per coordinate an upper then a lower box row.
pub fn assemble_rows(problem: &ProjectionProblem) -> (RowMatrix, Vec<f64>) {
    let n_act = problem.proposed.len();
    let n_bus = problem.v_base.len();
    let mut g = RowMatrix::new(n_act);
    let mut h = Vec::new();
    let zero = vec![0.0; n_act];
    for bus in 0..n_bus {
        let row = problem.v_map.row(bus);
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>();
        if norm > 1e-26 {
            g.push_row(row);
            h.push(problem.v_hi_sq - problem.v_base[bus]);
            let neg: Vec<f64> = row.iter().map(|v| -v).collect();
            g.push_row(&neg);
            h.push(problem.v_base[bus] - problem.v_lo_sq);
        } else {
            // Action-insensitive bus: keep placeholders so row indices are
            // stable; the bounds are +inf-like and never activate.
            g.push_row(&zero);
            h.push(f64::MAX);
            g.push_row(&zero);
            h.push(f64::MAX);
        }
    }
    for j in 0..n_act {
        let mut row = zero.clone();
        row[j] = 1.0;
        g.push_row(&row);
        h.push(problem.box_hi[j]);
        row[j] = -1.0;
        g.push_row(&row);
        h.push(-problem.box_lo[j]);
    }
    (g, h)
}

fn max_violation(g: &RowMatrix, h: &[f64], x: &[f64]) -> f64 {
    (0..g.n_rows())
        .map(|i| g.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - h[i])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Project the proposed action onto the predicted-safe polytope.
///
/// Exact pass-through when the proposal is already feasible; otherwise the
/// unique Euclidean projection with KKT residuals at the solver tolerance;
/// least-violation fallback when the polytope is empty.
pub fn project(problem: &ProjectionProblem, tol: f64) -> Result<ProjectionResult, SafetyError> {
    let (g, h) = assemble_rows(problem);
    let n_act = problem.proposed.len();
    let predicted = |a: &[f64]| -> Vec<f64> {
        (0..problem.v_base.len())
            .map(|bus| {
                problem.v_base[bus]
                    + problem.v_map.row(bus).iter().zip(a).map(|(m, x)| m * x).sum::<f64>()
            })
            .collect()
    };

    if max_violation(&g, &h, &problem.proposed) <= tol {
        return Ok(ProjectionResult {
            action: problem.proposed.clone(),
            status: ProjectionStatus::Unchanged,
            active_set: Vec::new(),
            multipliers: vec![0.0; g.n_rows()],
            objective: 0.0,
            predicted_v_sq: predicted(&problem.proposed),
        });
    }

    let h_diag = vec![1.0; n_act];
    let c: Vec<f64> = problem.proposed.iter().map(|v| -v).collect();
    match qp::solve_qp_diag(&h_diag, &c, &g, &h, tol) {
        Ok(sol) => {
            let objective: f64 = sol
                .x
                .iter()
                .zip(&problem.proposed)
                .map(|(a, p)| (a - p) * (a - p))
                .sum();
            Ok(ProjectionResult {
                predicted_v_sq: predicted(&sol.x),
                action: sol.x,
                status: ProjectionStatus::Projected,
                active_set: sol.active,
                multipliers: sol.multipliers,
                objective,
            })
        }
        Err(QpError::Infeasible) => least_violation_fallback(problem, &g, &h, predicted),
        Err(e) => Err(SafetyError::Solver(e)),
    }
}

/// Minimize the largest voltage-bound violation over the box (the box stays
/// hard). Solved as a slightly regularized LP in `(a, s)`.
fn least_violation_fallback(
    problem: &ProjectionProblem,
    g: &RowMatrix,
    h: &[f64],
    predicted: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<ProjectionResult, SafetyError> {
    let n_act = problem.proposed.len();
    let n_bus = problem.v_base.len();
    let eps = 1e-4;
    let mut h_diag = vec![eps; n_act + 1];
    h_diag[n_act] = eps;
    let mut c: Vec<f64> = problem.proposed.iter().map(|v| -eps * v).collect();
    c.push(1.0);

    let mut g_ext = RowMatrix::new(n_act + 1);
    let mut h_ext = Vec::new();
    for i in 0..2 * n_bus {
        if h[i] == f64::MAX {
            continue;
        }
        let mut row = g.row(i).to_vec();
        row.push(-1.0); // voltage rows get the slack
        g_ext.push_row(&row);
        h_ext.push(h[i]);
    }
    for i in 2 * n_bus..g.n_rows() {
        let mut row = g.row(i).to_vec();
        row.push(0.0); // box rows stay hard
        g_ext.push_row(&row);
        h_ext.push(h[i]);
    }
    let mut s_row = vec![0.0; n_act + 1];
    s_row[n_act] = -1.0;
    g_ext.push_row(&s_row);
    h_ext.push(0.0);

    let sol = qp::solve_qp_diag(&h_diag, &c, &g_ext, &h_ext, 1e-10)?;
    let s = sol.x[n_act].max(0.0);
    let action = sol.x[..n_act].to_vec();
    let objective: f64 =
        action.iter().zip(&problem.proposed).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok(ProjectionResult {
        predicted_v_sq: predicted(&action),
        action,
        status: ProjectionStatus::InfeasibleRelaxed { max_violation: s },
        active_set: Vec::new(),
        multipliers: vec![0.0; g.n_rows()],
        objective,
    })
}

/// Independent KKT verification of a projection result.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktReport {
    pub ok: bool,
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

/// Check stationarity, primal/dual feasibility and complementary slackness of
/// a `Projected` or `Unchanged` result against the problem data. Not defined
/// for relaxed results.
pub fn verify_kkt(problem: &ProjectionProblem, result: &ProjectionResult, tol: f64) -> KktReport {
    assert!(
        !matches!(result.status, ProjectionStatus::InfeasibleRelaxed { .. }),
        "KKT verification applies to feasible projections only"
    );
    let (g, h) = assemble_rows(problem);
    // Finite placeholder bounds keep the residual arithmetic meaningful.
    let h: Vec<f64> = h.iter().map(|&v| if v == f64::MAX { 1e30 } else { v }).collect();
    let n = problem.proposed.len();
    let h_diag = vec![1.0; n];
    let c: Vec<f64> = problem.proposed.iter().map(|v| -v).collect();
    let res = qp::kkt_residuals(&h_diag, &c, &g, &h, &result.action, &result.multipliers);
    KktReport {
        ok: res.max() <= tol,
        stationarity: res.stationarity,
        primal: res.primal,
        dual: res.dual,
        complementarity: res.complementarity,
    }
}
