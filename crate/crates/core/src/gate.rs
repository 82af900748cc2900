//! The mixture-of-experts gate: a logistic choice between the kernel and
//! DQN experts, fitted by gradient ascent directly on the weighted
//! doubly-robust value of the mixture policy.
//!
//! The gate reads nine per-state features (seven clinical channels from the
//! current preprocessed observation, the history length, and the distance to
//! the k-th nearest neighbor), standardized by training statistics. For each
//! step the mixture assigns the logged action probability
//! `e = p_k * pi_k + (1 - p_k) * pi_d`, and the WDR objective is
//! differentiated through the cumulative importance ratios built from `e`.
//! Optimization restarts from many random points plus two saturated corner
//! points (b = +/-20, w = 0) that pin the pure kernel and pure DQN policies
//! as candidate solutions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::feature_index;
use crate::nn::sigmoid;

pub const GATING_FEATURE_COUNT: usize = 9;

/// Names of the gating features, in vector order.
pub const GATING_FEATURE_NAMES: [&str; GATING_FEATURE_COUNT] = [
    "age",
    "Elixhauser",
    "SOFA",
    "FiO2_1",
    "BUN",
    "GCS",
    "Albumin",
    "trajectory_length",
    "max_neighbor_distance",
];

/// Raw (unstandardized) gating features for one step: seven clinical
/// channels from the current observation, the number of observed steps, and
/// the k-th neighbor distance of the encoded state.
pub fn extract_gating_features(
    obs: &[f64],
    steps_so_far: usize,
    max_neighbor_distance: f64,
) -> [f64; GATING_FEATURE_COUNT] {
    let idx = |name: &str| feature_index(name).expect("gating feature missing from schema");
    [
        obs[idx("age")],
        obs[idx("Elixhauser")],
        obs[idx("SOFA")],
        obs[idx("FiO2_1")],
        obs[idx("BUN")],
        obs[idx("GCS")],
        obs[idx("Albumin")],
        steps_so_far as f64,
        max_neighbor_distance,
    ]
}

/// Per-feature affine standardization fitted on the training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStandardizer {
    pub mean: [f64; GATING_FEATURE_COUNT],
    pub sd: [f64; GATING_FEATURE_COUNT],
}

impl FeatureStandardizer {
    pub fn fit(rows: &[[f64; GATING_FEATURE_COUNT]]) -> Result<FeatureStandardizer> {
        if rows.is_empty() {
            return Err(Error::Data("no gating feature rows to standardize".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; GATING_FEATURE_COUNT];
        let mut sd = [0.0; GATING_FEATURE_COUNT];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        for row in rows {
            for j in 0..GATING_FEATURE_COUNT {
                sd[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut sd {
            *s = s.sqrt();
            // Constant features stay centered at zero with unit scale.
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(FeatureStandardizer { mean, sd })
    }

    pub fn apply(&self, row: &[f64; GATING_FEATURE_COUNT]) -> [f64; GATING_FEATURE_COUNT] {
        let mut out = [0.0; GATING_FEATURE_COUNT];
        for j in 0..GATING_FEATURE_COUNT {
            out[j] = (row[j] - self.mean[j]) / self.sd[j];
        }
        out
    }
}

/// The gate's parameters: one logistic unit over the gating features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatingParams {
    pub w: [f64; GATING_FEATURE_COUNT],
    pub b: f64,
}

impl GatingParams {
    /// (p_kernel, p_dqn) for a standardized feature vector.
    pub fn probability(&self, x: &[f64; GATING_FEATURE_COUNT]) -> (f64, f64) {
        let z = self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b;
        let p = sigmoid(z);
        (p, 1.0 - p)
    }
}

/// Convex combination of the two experts under the gate probability.
pub fn mixture_policy(p_kernel: f64, kernel: &[f64], dqn_restricted: &[f64]) -> Vec<f64> {
    assert_eq!(kernel.len(), dqn_restricted.len());
    kernel
        .iter()
        .zip(dqn_restricted)
        .map(|(&k, &d)| p_kernel * k + (1.0 - p_kernel) * d)
        .collect()
}

/// One logged step with everything the gate objective needs, precomputed
/// and frozen: standardized features, each expert's probability of the
/// logged action, the smoothed behavior probability, the reward, and the
/// control variates.
#[derive(Debug, Clone)]
pub struct GateStep {
    pub features: [f64; GATING_FEATURE_COUNT],
    pub pi_kernel: f64,
    pub pi_dqn: f64,
    pub pi_behavior: f64,
    pub reward: f64,
    pub q_hat: f64,
    pub v_hat: f64,
}

#[derive(Debug, Clone)]
pub struct GateTrajectory {
    pub steps: Vec<GateStep>,
}

#[derive(Debug, Clone)]
pub struct GateDataset {
    pub trajectories: Vec<GateTrajectory>,
    pub discount: f64,
}

impl GateDataset {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Data("gate dataset has no trajectories".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.discount)));
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.steps.is_empty() {
                return Err(Error::Data(format!("gate trajectory {i} has no steps")));
            }
            for (t, s) in traj.steps.iter().enumerate() {
                let finite = s.features.iter().all(|v| v.is_finite())
                    && s.pi_kernel.is_finite()
                    && s.pi_dqn.is_finite()
                    && s.reward.is_finite()
                    && s.q_hat.is_finite()
                    && s.v_hat.is_finite();
                if !finite || !(s.pi_behavior > 0.0) {
                    return Err(Error::Data(format!(
                        "invalid gate inputs at trajectory {i} step {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateConfig {
    pub minibatch: usize,
    pub restarts: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { minibatch: 256, restarts: 1000, learning_rate: 1e-4, epochs: 50, seed: 0 }
    }
}

/// Result of the restart search.
#[derive(Debug, Clone)]
pub struct GateFit {
    pub params: GatingParams,
    pub objective: f64,
    pub best_restart_index: usize,
    /// Full-training-set WDR of the saturated pure-kernel corner (b = +20).
    pub corner_kernel_objective: f64,
    /// Full-training-set WDR of the saturated pure-DQN corner (b = -20).
    pub corner_dqn_objective: f64,
    /// (restart index, best objective seen in that restart); non-finite
    /// restarts are absent.
    pub trace: Vec<(usize, f64)>,
    /// Discarded-restart log entries.
    pub log: Vec<String>,
}

/// WDR objective of the mixture policy and its gradient wrt (w, b),
/// computed over the given trajectory indices.
fn objective_and_grad(
    dataset: &GateDataset,
    params: &GatingParams,
    indices: &[usize],
    want_grad: bool,
) -> (f64, [f64; GATING_FEATURE_COUNT], f64) {
    let n = indices.len();
    let gamma = dataset.discount;
    let t_max = indices.iter().map(|&i| dataset.trajectories[i].steps.len()).max().unwrap();

    // Forward: mixture probabilities, cumulative ratios (frozen past each
    // trajectory's end), per-step normalized weights.
    let mut p_k: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut e: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &i in indices {
        let traj = &dataset.trajectories[i];
        let mut pk_row = Vec::with_capacity(traj.steps.len());
        let mut e_row = Vec::with_capacity(traj.steps.len());
        for s in &traj.steps {
            let (pk, pd) = params.probability(&s.features);
            pk_row.push(pk);
            e_row.push(pk * s.pi_kernel + pd * s.pi_dqn);
        }
        p_k.push(pk_row);
        e.push(e_row);
    }

    let mut rho = vec![1.0f64; n];
    let mut w = vec![vec![0.0; t_max + 1]; n];
    for t in 0..=t_max {
        for (row, &i) in indices.iter().enumerate() {
            let steps = &dataset.trajectories[i].steps;
            if t < steps.len() {
                rho[row] *= e[row][t] / steps[t].pi_behavior;
            }
            w[row][t] = rho[row];
        }
        let total: f64 = (0..n).map(|r| w[r][t]).sum();
        if total <= 0.0 || !total.is_finite() {
            return (f64::NAN, [0.0; GATING_FEATURE_COUNT], 0.0);
        }
        for r in 0..n {
            w[r][t] /= total;
        }
    }

    // u[row][t] couples w_t to the objective:
    // gamma^t (r_t - Qhat_t) + gamma^{t+1} Vhat_{t+1}, zero past the end.
    let mut u = vec![vec![0.0; t_max + 1]; n];
    let mut objective = 0.0;
    for (row, &i) in indices.iter().enumerate() {
        let steps = &dataset.trajectories[i].steps;
        let mut g = 1.0;
        for t in 0..steps.len() {
            u[row][t] = g * (steps[t].reward - steps[t].q_hat);
            if t + 1 < steps.len() {
                u[row][t] += g * gamma * steps[t + 1].v_hat;
            }
            g *= gamma;
        }
        // The w_{-1} = 1/I term is constant in the parameters.
        objective += steps[0].v_hat / n as f64;
    }
    let mut u_bar = vec![0.0; t_max + 1];
    for t in 0..=t_max {
        for row in 0..n {
            u_bar[t] += u[row][t] * w[row][t];
        }
        objective += u_bar[t];
    }

    let mut grad_w = [0.0; GATING_FEATURE_COUNT];
    let mut grad_b = 0.0;
    if want_grad {
        for (row, &i) in indices.iter().enumerate() {
            let steps = &dataset.trajectories[i].steps;
            // suffix[s] = sum_{t >= s} w_t (u_t - u_bar_t).
            let mut suffix = 0.0;
            for s in (0..steps.len()).rev() {
                if s == steps.len() - 1 {
                    // Include frozen tail weights once.
                    for t in s..=t_max {
                        suffix += w[row][t] * (u[row][t] - u_bar[t]);
                    }
                } else {
                    suffix += w[row][s] * (u[row][s] - u_bar[s]);
                }
                let es = e[row][s];
                if es > 0.0 {
                    let st = &steps[s];
                    let d_e = suffix / es;
                    let pk = p_k[row][s];
                    let scale = d_e * (st.pi_kernel - st.pi_dqn) * pk * (1.0 - pk);
                    for (gw, xv) in grad_w.iter_mut().zip(&st.features) {
                        *gw += scale * xv;
                    }
                    grad_b += scale;
                }
            }
        }
    }
    (objective, grad_w, grad_b)
}

/// Full-training-set WDR of the mixture policy under fixed gate parameters.
pub fn gate_objective(dataset: &GateDataset, params: &GatingParams) -> Result<f64> {
    dataset.validate()?;
    let indices: Vec<usize> = (0..dataset.trajectories.len()).collect();
    let (obj, _, _) = objective_and_grad(dataset, params, &indices, false);
    if !obj.is_finite() {
        return Err(Error::Numerical(
            "gate objective is degenerate (all importance mass vanished)".into(),
        ));
    }
    Ok(obj)
}

/// Analytic gradient of the full-set objective (exposed for verification).
pub fn gate_gradient(
    dataset: &GateDataset,
    params: &GatingParams,
) -> Result<([f64; GATING_FEATURE_COUNT], f64)> {
    dataset.validate()?;
    let indices: Vec<usize> = (0..dataset.trajectories.len()).collect();
    let (obj, gw, gb) = objective_and_grad(dataset, params, &indices, true);
    if !obj.is_finite() {
        return Err(Error::Numerical(
            "gate objective is degenerate (all importance mass vanished)".into(),
        ));
    }
    Ok((gw, gb))
}

fn corner(b: f64) -> GatingParams {
    GatingParams { w: [0.0; GATING_FEATURE_COUNT], b }
}

/// Maximize the mixture WDR over (w, b) by minibatch gradient ascent with
/// random restarts plus the two saturated corners. Returns the restart whose
/// parameters score highest on the full training set; restarts whose
/// objective goes non-finite are discarded and logged.
pub fn optimize_gate(dataset: &GateDataset, config: &GateConfig) -> Result<GateFit> {
    dataset.validate()?;
    if config.restarts == 0 {
        return Err(Error::Config("gate optimization needs at least one restart".into()));
    }
    if config.minibatch == 0 {
        return Err(Error::Config("gate minibatch size must be positive".into()));
    }
    let n = dataset.trajectories.len();
    let all: Vec<usize> = (0..n).collect();
    let total_restarts = config.restarts + 2;

    let corner_kernel_objective = gate_objective(dataset, &corner(20.0))?;
    let corner_dqn_objective = gate_objective(dataset, &corner(-20.0))?;

    let results: Vec<(usize, Option<(GatingParams, f64)>, Option<String>)> = (0..total_restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            rng.set_stream(restart as u64 + 1);
            // Restarts 0 and 1 are the saturated corners; the rest random.
            let mut params = match restart {
                0 => corner(20.0),
                1 => corner(-20.0),
                _ => {
                    let mut w = [0.0; GATING_FEATURE_COUNT];
                    for v in &mut w {
                        *v = rng.random_range(-1.0..1.0);
                    }
                    GatingParams { w, b: rng.random_range(-2.0..2.0) }
                }
            };
            // The initialization itself is a candidate, so a restart can
            // never end below its own starting point.
            let (init_obj, _, _) = objective_and_grad(dataset, &params, &all, false);
            let mut best: Option<(GatingParams, f64)> = if init_obj.is_finite() {
                Some((params.clone(), init_obj))
            } else {
                None
            };

            let mut order: Vec<usize> = (0..n).collect();
            let mut diverged = false;
            for _ in 0..config.epochs {
                // Fisher-Yates over trajectory order, then minibatch ascent.
                for i in (1..n).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                for chunk in order.chunks(config.minibatch) {
                    let (obj, gw, gb) = objective_and_grad(dataset, &params, chunk, true);
                    if !obj.is_finite() {
                        diverged = true;
                        break;
                    }
                    for (w, g) in params.w.iter_mut().zip(&gw) {
                        *w += config.learning_rate * g;
                    }
                    params.b += config.learning_rate * gb;
                }
                if diverged || params.w.iter().any(|v| !v.is_finite()) || !params.b.is_finite() {
                    diverged = true;
                    break;
                }
            }
            if !diverged {
                let (final_obj, _, _) = objective_and_grad(dataset, &params, &all, false);
                if final_obj.is_finite() {
                    if best.as_ref().map(|(_, o)| final_obj > *o).unwrap_or(true) {
                        best = Some((params, final_obj));
                    }
                }
            }
            match best {
                Some(b) => (restart, Some(b), None),
                None => (
                    restart,
                    None,
                    Some(format!("restart {restart}: non-finite objective, discarded")),
                ),
            }
        })
        .collect();

    let mut trace = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(usize, GatingParams, f64)> = None;
    for (restart, outcome, note) in results {
        if let Some(msg) = note {
            log.push(msg);
        }
        if let Some((params, obj)) = outcome {
            trace.push((restart, obj));
            let better = best.as_ref().map(|(_, _, b)| obj > *b).unwrap_or(true);
            if better {
                best = Some((restart, params, obj));
            }
        }
    }
    let (best_restart_index, params, objective) = best.ok_or_else(|| {
        Error::Numerical("every gate restart produced a non-finite objective".into())
    })?;
    Ok(GateFit {
        params,
        objective,
        best_restart_index,
        corner_kernel_objective,
        corner_dqn_objective,
        trace,
        log,
    })
}

/// Serialized gate artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub feature_stats: FeatureStandardizer,
    pub seed: u64,
    pub best_restart_index: usize,
    pub objective: f64,
}

impl GateModel {
    pub fn new(fit: &GateFit, stats: FeatureStandardizer, seed: u64) -> GateModel {
        GateModel {
            w: fit.params.w.to_vec(),
            b: fit.params.b,
            feature_stats: stats,
            seed,
            best_restart_index: fit.best_restart_index,
            objective: fit.objective,
        }
    }

    pub fn params(&self) -> GatingParams {
        let mut w = [0.0; GATING_FEATURE_COUNT];
        w.copy_from_slice(&self.w);
        GatingParams { w, b: self.b }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("gate serialization: {e}")))?;
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        std::fs::write(&tmp, json.as_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<GateModel> {
        let text = std::fs::read_to_string(path)?;
        let model: GateModel = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if model.w.len() != GATING_FEATURE_COUNT {
            return Err(Error::Schema(format!(
                "{}: gate has {} weights, expected {GATING_FEATURE_COUNT}",
                path.display(),
                model.w.len()
            )));
        }
        Ok(model)
    }
}
