//! Weighted doubly-robust (WDR) off-policy evaluation with control
//! variates, importance-weight diagnostics, and bootstrap comparison of two
//! policies on the same logged cohort.
//!
//! Per-step importance ratios are cumulative products of
//! `pi_e(a_t|s_t) / pi_b(a_t|s_t)`, frozen at their final value once a
//! trajectory terminates (absorbing convention, with reward and both
//! variates treated as zero past termination). Weights are the ratios
//! normalized per time step across patients, with the step before time zero
//! carrying weight 1/I. The estimate is
//!
//! `sum_i sum_{t=0..T} gamma^t [ w_t^i r_t - w_t^i Qhat(s_t,a_t) + w_{t-1}^i Vhat(s_t) ]`
//!
//! where `T` is the longest trajectory length. With zero variates this
//! reduces to weighted importance sampling; with exact variates the
//! correction terms cancel most of the sampling variance.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::QNetwork;
use crate::pipeline::percentile;

/// One logged step under evaluation: its reward and the probabilities the
/// evaluated and behavior policies assign to the logged action.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStep {
    pub reward: f64,
    pub pi_e: f64,
    pub pi_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrajectory {
    pub steps: Vec<EvalStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationDataset {
    pub trajectories: Vec<EvalTrajectory>,
    pub discount: f64,
}

/// Control variates per patient per step: `q[i][t] = Qhat(s_t, a_t)` and
/// `v[i][t] = Vhat(s_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Variates {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl EvaluationDataset {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::Data("evaluation dataset has no trajectories".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.discount)));
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.steps.is_empty() {
                return Err(Error::Data(format!("trajectory {i} has no steps")));
            }
            for (t, s) in traj.steps.iter().enumerate() {
                if !(s.pi_b > 0.0) {
                    return Err(Error::Data(format!(
                        "behavior probability {} at trajectory {i} step {t} is not positive \
                         (the behavior estimate must be smoothed)",
                        s.pi_b
                    )));
                }
                if !(s.pi_e >= 0.0) || !s.pi_e.is_finite() || !s.reward.is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite or negative evaluation inputs at trajectory {i} step {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Longest trajectory length.
    pub fn horizon(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).max().unwrap_or(0)
    }

    /// Empirical mean discounted return of the logged trajectories.
    pub fn mean_discounted_return(&self) -> f64 {
        let total: f64 = self
            .trajectories
            .iter()
            .map(|traj| {
                traj.steps
                    .iter()
                    .enumerate()
                    .map(|(t, s)| self.discount.powi(t as i32) * s.reward)
                    .sum::<f64>()
            })
            .sum();
        total / self.trajectories.len() as f64
    }
}

impl Variates {
    /// Explicit zero variates (reduces WDR to weighted importance sampling).
    pub fn zeros(dataset: &EvaluationDataset) -> Variates {
        let q: Vec<Vec<f64>> =
            dataset.trajectories.iter().map(|t| vec![0.0; t.steps.len()]).collect();
        Variates { v: q.clone(), q }
    }

    fn validate_against(&self, dataset: &EvaluationDataset) -> Result<()> {
        if self.q.len() != dataset.trajectories.len() || self.v.len() != dataset.trajectories.len()
        {
            return Err(Error::Schema(format!(
                "variates cover {} trajectories, dataset has {}",
                self.q.len().min(self.v.len()),
                dataset.trajectories.len()
            )));
        }
        for (i, traj) in dataset.trajectories.iter().enumerate() {
            if self.q[i].len() != traj.steps.len() || self.v[i].len() != traj.steps.len() {
                return Err(Error::Schema(format!(
                    "variates for trajectory {i} cover {} steps, trajectory has {}",
                    self.q[i].len().min(self.v[i].len()),
                    traj.steps.len()
                )));
            }
        }
        Ok(())
    }

    /// Shift every Q-hat and V-hat by a constant (used by identity checks).
    pub fn shifted(&self, c: f64) -> Variates {
        Variates {
            q: self.q.iter().map(|row| row.iter().map(|x| x + c).collect()).collect(),
            v: self.v.iter().map(|row| row.iter().map(|x| x + c).collect()).collect(),
        }
    }
}

/// Per-timestep normalized importance weights: `w[i][t]` for t in `0..=t_max`
/// with `t_max` the longest trajectory length, frozen-ratio convention past
/// each trajectory's end.
#[derive(Debug, Clone)]
pub struct ImportanceWeights {
    pub w: Vec<Vec<f64>>,
    pub t_max: usize,
}

impl ImportanceWeights {
    /// w_{t-1}^i with the convention w_{-1}^i = 1/I.
    pub fn prev(&self, i: usize, t: usize) -> f64 {
        if t == 0 {
            1.0 / self.w.len() as f64
        } else {
            self.w[i][t - 1]
        }
    }
}

fn weights_for(dataset: &EvaluationDataset, indices: &[usize]) -> Result<ImportanceWeights> {
    let t_max = indices.iter().map(|&i| dataset.trajectories[i].steps.len()).max().unwrap();
    let n = indices.len();
    // Cumulative ratios, frozen once a trajectory ends.
    let mut rho = vec![1.0f64; n];
    let mut w = vec![vec![0.0; t_max + 1]; n];
    for t in 0..=t_max {
        for (row, &i) in indices.iter().enumerate() {
            let steps = &dataset.trajectories[i].steps;
            if t < steps.len() {
                let s = &steps[t];
                rho[row] *= s.pi_e / s.pi_b;
            }
            w[row][t] = rho[row];
        }
        let total: f64 = (0..n).map(|row| w[row][t]).sum();
        if total <= 0.0 {
            return Err(Error::Numerical(format!(
                "importance weights degenerate at t = {t}: every trajectory has zero \
                 probability under the evaluated policy"
            )));
        }
        for row in 0..n {
            w[row][t] /= total;
        }
    }
    Ok(ImportanceWeights { w, t_max })
}

/// Per-timestep normalized importance weights for the whole dataset.
pub fn importance_weights(dataset: &EvaluationDataset) -> Result<ImportanceWeights> {
    dataset.validate()?;
    let indices: Vec<usize> = (0..dataset.trajectories.len()).collect();
    weights_for(dataset, &indices)
}

fn wdr_for(
    dataset: &EvaluationDataset,
    variates: &Variates,
    indices: &[usize],
) -> Result<f64> {
    let weights = weights_for(dataset, indices)?;
    let gamma = dataset.discount;
    let mut total = 0.0;
    for (row, &i) in indices.iter().enumerate() {
        let steps = &dataset.trajectories[i].steps;
        let mut g = 1.0;
        for t in 0..=weights.t_max {
            if t < steps.len() {
                let wt = weights.w[row][t];
                total += g * (wt * steps[t].reward - wt * variates.q[i][t]
                    + weights.prev(row, t) * variates.v[i][t]);
            }
            // Past termination reward and both variates are zero; the term
            // vanishes regardless of the frozen weight.
            g *= gamma;
        }
    }
    Ok(total)
}

/// The weighted doubly-robust estimate. Control variates must be explicit;
/// pass `Variates::zeros` for the plain weighted-importance-sampling form.
pub fn wdr_estimate(dataset: &EvaluationDataset, variates: Option<&Variates>) -> Result<f64> {
    let variates = variates.ok_or_else(|| {
        Error::Usage(
            "control variates are required; pass Variates::zeros(..) explicitly for the \
             IS-only estimator"
                .into(),
        )
    })?;
    dataset.validate()?;
    variates.validate_against(dataset)?;
    let indices: Vec<usize> = (0..dataset.trajectories.len()).collect();
    wdr_for(dataset, variates, &indices)
}

/// How the state value V-hat is derived from a Q-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariateMode {
    /// V-hat = max_a Q(s, a): the value of the greedy DQN policy.
    DqnValue,
    /// V-hat = mean_a Q(s, a): a behavior-like average over actions.
    BehaviorValue,
}

/// Q-hat/V-hat rows for a sequence of (state, logged action) pairs.
pub fn control_variates(
    qnet: &QNetwork,
    mode: VariateMode,
    states: &[Vec<f64>],
    actions: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(states.len(), actions.len());
    let mut q_hat = Vec::with_capacity(states.len());
    let mut v_hat = Vec::with_capacity(states.len());
    for (s, &a) in states.iter().zip(actions) {
        let q = qnet.q_values(s);
        q_hat.push(q[a]);
        v_hat.push(match mode {
            VariateMode::DqnValue => q.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            VariateMode::BehaviorValue => q.iter().sum::<f64>() / q.len() as f64,
        });
    }
    (q_hat, v_hat)
}

/// Importance-weight health metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    /// Fraction of nonzero `w[i][t]` over all (i, t) cells.
    pub fraction_nonzero: f64,
    /// Fraction of patients whose frozen final weight is nonzero.
    pub fraction_nonzero_final: f64,
    /// Count of exactly-zero weights.
    pub zero_count: usize,
    /// (decade, count): nonzero weights bucketed by floor(log10 w).
    pub decade_histogram: Vec<(i32, usize)>,
    /// Total cells = I * (T + 1); the zero count plus decade counts.
    pub total_cells: usize,
}

/// Diagnostics over a weight matrix; `lengths[i]` is trajectory i's length.
pub fn weight_diagnostics(weights: &ImportanceWeights, lengths: &[usize]) -> WeightDiagnostics {
    assert_eq!(weights.w.len(), lengths.len());
    let mut zero_count = 0usize;
    let mut total_cells = 0usize;
    let mut decades: std::collections::BTreeMap<i32, usize> = std::collections::BTreeMap::new();
    for row in &weights.w {
        for &v in row {
            total_cells += 1;
            if v == 0.0 {
                zero_count += 1;
            } else {
                *decades.entry(v.log10().floor() as i32).or_insert(0) += 1;
            }
        }
    }
    let nonzero_final = weights
        .w
        .iter()
        .zip(lengths)
        .filter(|(row, &len)| row[len.min(weights.t_max)] != 0.0)
        .count();
    WeightDiagnostics {
        fraction_nonzero: 1.0 - zero_count as f64 / total_cells as f64,
        fraction_nonzero_final: nonzero_final as f64 / weights.w.len() as f64,
        zero_count,
        decade_histogram: decades.into_iter().collect(),
        total_cells,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// WDR(A) - WDR(B) per successful resample, in resample order.
    pub differences: Vec<f64>,
    pub mean: f64,
    pub percentile_2_5: f64,
    pub percentile_97_5: f64,
    /// The difference on the original (un-resampled) dataset.
    pub original: f64,
    /// Resamples dropped because their weights were degenerate.
    pub skipped: usize,
}

/// Bootstrap the difference WDR(A) − WDR(B) over patient resamples.
///
/// Both datasets must describe the same logged cohort (same trajectories,
/// rewards, and behavior probabilities) and differ only in the evaluated
/// policy; each resample draws patients with replacement and re-solves both
/// estimates on the resampled cohort.
pub fn bootstrap_difference(
    dataset_a: &EvaluationDataset,
    variates_a: &Variates,
    dataset_b: &EvaluationDataset,
    variates_b: &Variates,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    dataset_a.validate()?;
    dataset_b.validate()?;
    variates_a.validate_against(dataset_a)?;
    variates_b.validate_against(dataset_b)?;
    if dataset_a.trajectories.len() != dataset_b.trajectories.len() {
        return Err(Error::Schema(format!(
            "policy A evaluates {} trajectories, policy B {}",
            dataset_a.trajectories.len(),
            dataset_b.trajectories.len()
        )));
    }
    let same_logs = dataset_a
        .trajectories
        .iter()
        .zip(&dataset_b.trajectories)
        .all(|(a, b)| {
            a.steps.len() == b.steps.len()
                && a.steps
                    .iter()
                    .zip(&b.steps)
                    .all(|(x, y)| x.reward == y.reward && x.pi_b == y.pi_b)
        });
    if !same_logs {
        return Err(Error::Schema(
            "bootstrap requires both policies to be evaluated on the same logged cohort \
             (rewards and behavior probabilities must match)"
                .into(),
        ));
    }
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }

    let n = dataset_a.trajectories.len();
    let all: Vec<usize> = (0..n).collect();
    let original = wdr_for(dataset_a, variates_a, &all)? - wdr_for(dataset_b, variates_b, &all)?;

    let mut differences = Vec::with_capacity(resamples);
    let mut skipped = 0usize;
    for r in 0..resamples {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(r as u64 + 1);
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let a = wdr_for(dataset_a, variates_a, &indices);
        let b = wdr_for(dataset_b, variates_b, &indices);
        match (a, b) {
            (Ok(a), Ok(b)) => differences.push(a - b),
            _ => skipped += 1,
        }
    }
    if differences.is_empty() {
        return Err(Error::Numerical(format!(
            "all {resamples} bootstrap resamples were degenerate"
        )));
    }
    let mut sorted = differences.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BootstrapResult {
        mean: differences.iter().sum::<f64>() / differences.len() as f64,
        percentile_2_5: percentile(&sorted, 0.025),
        percentile_97_5: percentile(&sorted, 0.975),
        original,
        skipped,
        differences,
    })
}
