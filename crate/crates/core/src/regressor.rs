//! Data-driven multi-output linear voltage predictor.
//!
//! Maps per-bus net injections (active kW, reactive kvar) to per-bus squared
//! voltages. The model is affine in the feature vector, and device powers are
//! affine in the normalized actions on each battery sign branch, so the
//! prediction is affine in the joint action — the property the safety layer's
//! projection needs to stay an exact QP.
//!
//! Training data comes from exact power-flow solves over perturbed operating
//! points with random joint actions; fitting is ridge-regularized least
//! squares via SVD; evaluation reports MAE and R^2 on voltage magnitudes with
//! k-fold cross-validation.

use crate::der::{self, FleetSpec};
use crate::env::ExogenousProfiles;
use crate::grid::{self, InjectionProfile, NetworkModel};
use crate::qp::RowMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("need at least {needed} scenarios for {features} features, got {got}")]
    TooFewScenarios { needed: usize, got: usize, features: usize },
    #[error("all {0} scenarios failed to converge")]
    NoConvergedScenarios(usize),
    #[error("singular normal system; increase ridge_lambda")]
    Singular,
    #[error("feature vector has {found} entries, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("fold count {k} invalid for {rows} rows")]
    BadFoldCount { k: usize, rows: usize },
    #[error("model file parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed feature layout: active injection per bus (kW), then reactive per bus
/// (kvar), in bus order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub n_buses: usize,
    pub intercept: bool,
}

impl FeatureSpec {
    pub fn len(&self) -> usize {
        2 * self.n_buses
    }

    pub fn is_empty(&self) -> bool {
        self.n_buses == 0
    }

    pub fn active_feature(&self, bus: usize) -> usize {
        bus
    }

    pub fn reactive_feature(&self, bus: usize) -> usize {
        self.n_buses + bus
    }

    pub fn features_of(&self, inj: &InjectionProfile) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.len());
        f.extend_from_slice(&inj.active_kw);
        f.extend_from_slice(&inj.reactive_kvar);
        f
    }
}

/// Per-feature standardization constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_feat = rows.first().map(|r| r.len()).unwrap_or(0);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; n_feat];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; n_feat];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var.iter().map(|s| (s / n).sqrt().max(1e-9)).collect();
        Self { mean, scale }
    }
}

/// Rows of features and squared-voltage targets from exact power flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub spec: FeatureSpec,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub dropped_scenarios: usize,
}

impl RegressionDataset {
    pub fn n_rows(&self) -> usize {
        self.features.len()
    }
}

/// Metadata stored with a trained model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub n_scenarios: usize,
    pub ridge_lambda: f64,
    pub dropped_scenarios: usize,
    pub cv: Option<CvReport>,
}

/// The trained multi-output linear model, affine in the features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearVoltageModel {
    pub spec: FeatureSpec,
    /// `weights[output][feature]`, applied to standardized features.
    pub weights: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    pub norm: FeatureNorm,
    pub meta: TrainingMeta,
}

pub const MODEL_FILE_VERSION: u32 = 1;

/// Cross-validation metrics on voltage magnitudes (pu).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub fold_mae: Vec<f64>,
    pub fold_r2: Vec<f64>,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub r2_mean: f64,
    pub r2_sd: f64,
    /// Output indices whose targets had (near-)zero variance in some fold and
    /// were excluded from the R^2 average.
    pub degenerate_outputs: Vec<usize>,
}

/// Build a dataset of `n_scenarios` rows. Each scenario takes a random hour
/// of the profile data, perturbs every bus load by an independent factor in
/// [0.6, 1.4], draws a random joint action, and solves exact power flow.
/// Scenarios that fail to converge are dropped and counted.
pub fn generate_dataset(
    net: &NetworkModel,
    fleet: &FleetSpec,
    profiles: &ExogenousProfiles,
    n_scenarios: usize,
    seed: u64,
) -> Result<RegressionDataset, RegressorError> {
    let spec = FeatureSpec { n_buses: net.n_buses(), intercept: true };
    let needed = spec.len() + 1;
    if n_scenarios < needed {
        return Err(RegressorError::TooFewScenarios {
            needed,
            got: n_scenarios,
            features: spec.len(),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n_scenarios);
    let mut targets = Vec::with_capacity(n_scenarios);
    let mut dropped = 0usize;
    for _ in 0..n_scenarios {
        let hour = rng.gen_range(0..profiles.len());
        let mut inj = InjectionProfile {
            active_kw: profiles.demand_kw[hour].clone(),
            reactive_kvar: profiles.reactive_kvar[hour].clone(),
        };
        for bus in 0..net.n_buses() {
            inj.active_kw[bus] *= rng.gen_range(0.6..1.4);
            inj.reactive_kvar[bus] *= rng.gen_range(0.6..1.4);
        }
        for agent in &fleet.agents {
            let alpha_dr: f64 = rng.gen_range(0.0..=1.0);
            let alpha_ess: f64 = rng.gen_range(-1.0..=1.0);
            let (p, _) =
                der::denormalize_actions(alpha_dr, alpha_ess, &agent.building, &agent.ess);
            inj.active_kw[agent.bus] += p.p_ch_kw - p.p_dis_kw - p.p_dr_kw;
        }
        match grid::solve_power_flow(net, &inj, 1.0, 1e-8, 100) {
            Ok(sol) => {
                features.push(spec.features_of(&inj));
                targets.push(sol.v_sq_pu);
            }
            Err(e) => {
                dropped += 1;
                log::warn!("dropping non-converged scenario: {e}");
            }
        }
    }
    if features.is_empty() {
        return Err(RegressorError::NoConvergedScenarios(n_scenarios));
    }
    Ok(RegressionDataset { spec, features, targets, dropped_scenarios: dropped })
}

/// Ridge least squares per output over standardized features, solved with an
/// SVD of the augmented design matrix. `ridge_lambda = 0` requires the
/// design to have full column rank.
pub fn fit(
    dataset: &RegressionDataset,
    ridge_lambda: f64,
) -> Result<LinearVoltageModel, RegressorError> {
    let rows = dataset.n_rows();
    let n_feat = dataset.spec.len();
    let needed = n_feat + 1;
    if rows < needed {
        return Err(RegressorError::TooFewScenarios { needed, got: rows, features: n_feat });
    }
    let n_out = dataset.targets[0].len();
    let norm = FeatureNorm::from_rows(&dataset.features);

    // Design matrix: standardized features plus an intercept column, with
    // sqrt(lambda) ridge rows on the non-intercept coefficients.
    let n_cols = n_feat + 1;
    let aug_rows = rows + n_feat;
    let mut design = DMatrix::zeros(aug_rows, n_cols);
    for (r, row) in dataset.features.iter().enumerate() {
        for (c, (&v, (m, s))) in row.iter().zip(norm.mean.iter().zip(&norm.scale)).enumerate() {
            design[(r, c)] = (v - m) / s;
        }
        design[(r, n_feat)] = 1.0;
    }
    let sqrt_l = ridge_lambda.max(0.0).sqrt();
    for c in 0..n_feat {
        design[(rows + c, c)] = sqrt_l;
    }
    let mut rhs = DMatrix::zeros(aug_rows, n_out);
    for (r, t) in dataset.targets.iter().enumerate() {
        for (c, &v) in t.iter().enumerate() {
            rhs[(r, c)] = v;
        }
    }
    let svd = design.svd(true, true);
    let rank_tol = 1e-12;
    if ridge_lambda == 0.0 {
        let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        if min_sv <= rank_tol * max_sv.max(1.0) {
            return Err(RegressorError::Singular);
        }
    }
    let beta = svd.solve(&rhs, rank_tol).map_err(|_| RegressorError::Singular)?;

    let mut weights = vec![vec![0.0; n_feat]; n_out];
    let mut intercept = vec![0.0; n_out];
    for out in 0..n_out {
        for f in 0..n_feat {
            weights[out][f] = beta[(f, out)];
        }
        intercept[out] = beta[(n_feat, out)];
    }
    Ok(LinearVoltageModel {
        spec: dataset.spec.clone(),
        weights,
        intercept,
        norm,
        meta: TrainingMeta {
            ridge_lambda,
            n_scenarios: rows,
            dropped_scenarios: dataset.dropped_scenarios,
            ..Default::default()
        },
    })
}

/// Deterministic k-fold cross-validation; metrics are computed on voltage
/// magnitudes (pu). Zero-variance outputs are flagged and skipped in R^2.
pub fn cross_validate(
    dataset: &RegressionDataset,
    k: usize,
    ridge_lambda: f64,
    seed: u64,
) -> Result<CvReport, RegressorError> {
    let rows = dataset.n_rows();
    if k < 2 || k > rows {
        return Err(RegressorError::BadFoldCount { k, rows });
    }
    let mut order: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Fisher-Yates shuffle for deterministic fold assignment.
    for i in (1..rows).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut fold_mae = Vec::with_capacity(k);
    let mut fold_r2 = Vec::with_capacity(k);
    let mut degenerate = std::collections::BTreeSet::new();
    let n_out = dataset.targets[0].len();
    for fold in 0..k {
        let lo = fold * rows / k;
        let hi = (fold + 1) * rows / k;
        let test_idx = &order[lo..hi];
        let train_idx: Vec<usize> =
            order[..lo].iter().chain(&order[hi..]).copied().collect();
        let train = RegressionDataset {
            spec: dataset.spec.clone(),
            features: train_idx.iter().map(|&i| dataset.features[i].clone()).collect(),
            targets: train_idx.iter().map(|&i| dataset.targets[i].clone()).collect(),
            dropped_scenarios: 0,
        };
        let model = fit(&train, ridge_lambda)?;

        // Residuals on magnitudes, R^2 averaged over non-degenerate outputs.
        let mut abs_err_sum = 0.0;
        let mut n_pred = 0usize;
        let mut mean_mag = vec![0.0; n_out];
        for &i in test_idx {
            for (out, &t) in dataset.targets[i].iter().enumerate() {
                mean_mag[out] += t.max(0.0).sqrt();
            }
        }
        for m in mean_mag.iter_mut() {
            *m /= test_idx.len() as f64;
        }
        let mut ss_res = vec![0.0; n_out];
        let mut ss_tot = vec![0.0; n_out];
        for &i in test_idx {
            let pred = model.predict(&dataset.features[i]).expect("dims match");
            for out in 0..n_out {
                let actual = dataset.targets[i][out].max(0.0).sqrt();
                let predicted = pred[out].max(0.0).sqrt();
                abs_err_sum += (predicted - actual).abs();
                n_pred += 1;
                ss_res[out] += (predicted - actual) * (predicted - actual);
                ss_tot[out] += (actual - mean_mag[out]) * (actual - mean_mag[out]);
            }
        }
        fold_mae.push(abs_err_sum / n_pred as f64);
        let mut r2_sum = 0.0;
        let mut r2_n = 0usize;
        for out in 0..n_out {
            if ss_tot[out] <= 1e-18 {
                degenerate.insert(out);
            } else {
                r2_sum += 1.0 - ss_res[out] / ss_tot[out];
                r2_n += 1;
            }
        }
        fold_r2.push(if r2_n > 0 { r2_sum / r2_n as f64 } else { f64::NAN });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64], m: f64| {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let mae_mean = mean(&fold_mae);
    let r2_mean = mean(&fold_r2);
    Ok(CvReport {
        mae_sd: sd(&fold_mae, mae_mean),
        r2_sd: sd(&fold_r2, r2_mean),
        fold_mae,
        fold_r2,
        mae_mean,
        r2_mean,
        degenerate_outputs: degenerate.into_iter().collect(),
    })
}

impl LinearVoltageModel {
    /// Predicted squared voltages for a raw feature vector.
    pub fn predict(&self, features_raw: &[f64]) -> Result<Vec<f64>, RegressorError> {
        if features_raw.len() != self.spec.len() {
            return Err(RegressorError::DimensionMismatch {
                expected: self.spec.len(),
                found: features_raw.len(),
            });
        }
        let std: Vec<f64> = features_raw
            .iter()
            .zip(self.norm.mean.iter().zip(&self.norm.scale))
            .map(|(&v, (m, s))| (v - m) / s)
            .collect();
        Ok(self
            .weights
            .iter()
            .zip(&self.intercept)
            .map(|(w, b)| b + w.iter().zip(&std).map(|(wi, xi)| wi * xi).sum::<f64>())
            .collect())
    }

    /// Predicted squared voltage at one bus.
    pub fn predict_bus(&self, features_raw: &[f64], bus: usize) -> Result<f64, RegressorError> {
        Ok(self.predict(features_raw)?[bus])
    }

    pub fn n_outputs(&self) -> usize {
        self.weights.len()
    }

    /// Expose the affine map `v_hat = A a + b` for a base feature vector and
    /// per-action feature slopes (`columns[j]` lists `(feature, d feature /
    /// d a_j)` pairs). Consumed by the safety layer.
    pub fn action_affine_map(
        &self,
        base_features: &[f64],
        columns: &[Vec<(usize, f64)>],
    ) -> Result<(RowMatrix, Vec<f64>), RegressorError> {
        let b = self.predict(base_features)?;
        let mut a = RowMatrix::new(columns.len());
        for out in 0..self.n_outputs() {
            let row: Vec<f64> = columns
                .iter()
                .map(|col| {
                    col.iter()
                        .map(|&(f, slope)| self.weights[out][f] * slope / self.norm.scale[f])
                        .sum()
                })
                .collect();
            a.push_row(&row);
        }
        Ok((a, b))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            format: &'static str,
            version: u32,
            model: &'a LinearVoltageModel,
        }
        serde_json::to_string(&File { format: "voltage-regressor", version: MODEL_FILE_VERSION, model: self })
            .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RegressorError> {
        #[derive(Deserialize)]
        struct File {
            #[serde(default)]
            #[allow(dead_code)]
            format: String,
            version: u32,
            model: LinearVoltageModel,
        }
        let f: File = serde_json::from_str(text).map_err(|e| RegressorError::Parse(e.to_string()))?;
        if f.version != MODEL_FILE_VERSION {
            return Err(RegressorError::Parse(format!("unsupported version {}", f.version)));
        }
        Ok(f.model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), RegressorError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RegressorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
