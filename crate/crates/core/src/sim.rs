//! Synthetic sepsis-like cohort simulator.
//!
//! Patients follow a small latent Markov chain with two absorbing states
//! (discharge and death). Each transient latent state emits a noisy 45-feature
//! observation, a behavior policy picks one of 25 treatment actions, and the
//! chosen action tilts the transition probabilities. Because the chain is
//! tiny, everything downstream can be checked against exact
//! dynamic-programming oracles computed here: policy values, Q tables, and
//! absorption probabilities.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FEATURES, FEATURE_COUNT};

pub const ACTION_COUNT: usize = 25;

/// Raw dose ranges the simulator draws from, one `(lo, hi)` interval per bin.
/// The ranges leave deliberate gaps around the canonical edges so that
/// discretizing a generated dose always recovers the intended bin.
pub const IV_BIN_RANGES: [(f64, f64); 5] =
    [(0.0, 0.0), (10.0, 90.0), (110.0, 290.0), (310.0, 690.0), (710.0, 1490.0)];
pub const VASO_BIN_RANGES: [(f64, f64); 5] =
    [(0.0, 0.0), (0.01, 0.09), (0.11, 0.29), (0.31, 0.69), (0.71, 1.49)];

/// Bin edges that sit inside the gaps of the ranges above (mL/4h and
/// mcg/kg/min). Written to the ground-truth sidecar for round-trip tests.
pub const CANONICAL_IV_EDGES: [f64; 4] = [100.0, 300.0, 700.0, 1500.0];
pub const CANONICAL_VASO_EDGES: [f64; 4] = [0.1, 0.3, 0.7, 1.5];

/// How the simulator assigns per-transition rewards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RewardSpec {
    /// r(z, a, z') = logit(z) − logit(z'): the drop in latent mortality
    /// log-odds, mirroring the learned reward downstream.
    LogOddsDelta,
    /// Explicit dense table indexed `[z][a][z']`, mostly for oracle fixtures.
    Table(Vec<f64>),
}

/// A fully specified latent MDP plus its emission model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimMdp {
    /// Total latent states, absorbing ones included.
    pub latent_states: usize,
    pub discharge_state: usize,
    pub death_state: usize,
    pub action_count: usize,
    /// Transition probabilities, flattened `[z][a][z']`.
    pub transition: Vec<f64>,
    /// Per-state emission mean, `[z][feature]` (absorbing rows unused).
    pub emission_mean: Vec<Vec<f64>>,
    /// Per-state emission standard deviation, `[z][feature]`.
    pub emission_sd: Vec<Vec<f64>>,
    /// Physiological clamp applied after adding noise.
    pub emission_lo: Vec<f64>,
    pub emission_hi: Vec<f64>,
    /// Features drawn once per patient and held constant (demographics).
    pub static_mask: Vec<bool>,
    /// Latent mortality log-odds per state; drives `RewardSpec::LogOddsDelta`.
    pub mortality_logit: Vec<f64>,
    /// Clinician (behavior) policy, flattened `[z][a]`.
    pub behavior: Vec<f64>,
    /// Initial state distribution (must be zero on absorbing states).
    pub start: Vec<f64>,
    pub horizon_max: usize,
    pub discount: f64,
    pub reward: RewardSpec,
}

/// One 4-hour window of a generated or ingested trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStep {
    pub features: Vec<f64>,
    pub iv_dose: f64,
    pub vaso_dose: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Survivor,
    NonSurvivor,
}

/// A patient trajectory in raw (pre-pipeline) units. `latent_trace` and
/// `intended_actions` are populated by the simulator only, as ground truth
/// for oracle tests: the trace has one extra entry (the state reached after
/// the final step).
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub patient_id: String,
    pub steps: Vec<RawStep>,
    pub outcome: Outcome,
    pub latent_trace: Option<Vec<usize>>,
    pub intended_actions: Option<Vec<u8>>,
}

/// Ground-truth sidecar written next to a simulated cohort CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortTruth {
    pub seed: u64,
    pub canonical_iv_edges: [f64; 4],
    pub canonical_vaso_edges: [f64; 4],
    /// Exact discounted value of the behavior policy from the start
    /// distribution.
    pub behavior_value: f64,
    /// Exact probability of dying within the horizon under behavior.
    pub death_probability: f64,
    pub latent_traces: Vec<Vec<usize>>,
    pub intended_actions: Vec<Vec<u8>>,
}

/// Exact state and action values of a policy on the latent chain.
#[derive(Debug, Clone)]
pub struct ExactValues {
    /// V(z) per latent state.
    pub v: Vec<f64>,
    /// Q(z, a), flattened `[z][a]`.
    pub q: Vec<f64>,
    /// Expected value from the start distribution.
    pub start_value: f64,
}

impl SimMdp {
    #[inline]
    pub fn trans(&self, z: usize, a: usize, z2: usize) -> f64 {
        self.transition[(z * self.action_count + a) * self.latent_states + z2]
    }

    #[inline]
    pub fn reward(&self, z: usize, a: usize, z2: usize) -> f64 {
        match &self.reward {
            RewardSpec::LogOddsDelta => self.mortality_logit[z] - self.mortality_logit[z2],
            RewardSpec::Table(t) => t[(z * self.action_count + a) * self.latent_states + z2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.latent_states;
        let a = self.action_count;
        if self.discharge_state >= s || self.death_state >= s {
            return Err(Error::Config("absorbing state index out of range".into()));
        }
        if self.transition.len() != s * a * s {
            return Err(Error::Config(format!(
                "transition tensor has {} entries, expected {}",
                self.transition.len(),
                s * a * s
            )));
        }
        if self.behavior.len() != s * a {
            return Err(Error::Config("behavior table size mismatch".into()));
        }
        for z in 0..s {
            for act in 0..a {
                let row = &self.transition[(z * a + act) * s..(z * a + act + 1) * s];
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Config(format!(
                        "transition row (state {z}, action {act}) has a negative entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "transition row (state {z}, action {act}) sums to {sum:.15}, expected 1"
                    )));
                }
            }
            let brow = &self.behavior[z * a..(z + 1) * a];
            let bsum: f64 = brow.iter().sum();
            if brow.iter().any(|&p| p < 0.0) || (bsum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "behavior row (state {z}) sums to {bsum:.15}, expected 1"
                )));
            }
        }
        if self.start.len() != s {
            return Err(Error::Config("start distribution size mismatch".into()));
        }
        let ssum: f64 = self.start.iter().sum();
        if self.start.iter().any(|&p| p < 0.0) || (ssum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "start distribution sums to {ssum:.15}, expected 1"
            )));
        }
        if self.start[self.discharge_state] != 0.0 || self.start[self.death_state] != 0.0 {
            return Err(Error::Config("start distribution puts mass on an absorbing state".into()));
        }
        if self.horizon_max == 0 {
            return Err(Error::Config("horizon_max must be at least 1".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.discount)));
        }
        if let RewardSpec::Table(t) = &self.reward {
            if t.len() != s * a * s {
                return Err(Error::Config("reward table size mismatch".into()));
            }
        }
        Ok(())
    }

    /// Marginal state-to-state transition matrix under a policy, `[z][z']`.
    pub fn marginal_transition(&self, policy: &[f64]) -> Vec<f64> {
        let s = self.latent_states;
        let a = self.action_count;
        let mut m = vec![0.0; s * s];
        for z in 0..s {
            for act in 0..a {
                let p = policy[z * a + act];
                if p == 0.0 {
                    continue;
                }
                for z2 in 0..s {
                    m[z * s + z2] += p * self.trans(z, act, z2);
                }
            }
        }
        m
    }
}

fn validate_policy(mdp: &SimMdp, policy: &[f64]) -> Result<()> {
    let s = mdp.latent_states;
    let a = mdp.action_count;
    if policy.len() != s * a {
        return Err(Error::Config(format!(
            "policy table has {} entries, expected {}",
            policy.len(),
            s * a
        )));
    }
    for z in 0..s {
        let row = &policy[z * a..(z + 1) * a];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "policy row (state {z}) sums to {sum:.15}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Draw an index from a normalized categorical distribution.
fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generate a cohort of `n_patients` trajectories under the MDP's behavior
/// policy. Patient `i` uses RNG stream `i` of `seed`, so generation is
/// reproducible and embarrassingly parallel.
pub fn generate_cohort(mdp: &SimMdp, n_patients: usize, seed: u64) -> Result<Vec<RawTrajectory>> {
    mdp.validate()?;
    if n_patients == 0 {
        return Err(Error::Config("n_patients must be at least 1".into()));
    }
    let trajectories: Vec<RawTrajectory> = (0..n_patients)
        .into_par_iter()
        .map(|idx| generate_patient(mdp, idx, seed))
        .collect();
    Ok(trajectories)
}

fn generate_patient(mdp: &SimMdp, idx: usize, seed: u64) -> RawTrajectory {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(idx as u64);
    let nf = mdp.emission_lo.len();
    let a_n = mdp.action_count;

    let mut z = sample_categorical(&mut rng, &mdp.start);
    // Demographics are drawn once against the admission state and then held.
    let mut static_vals = vec![0.0; nf];
    for j in 0..nf {
        if mdp.static_mask[j] {
            let n: f64 = rng.sample(StandardNormal);
            static_vals[j] = (mdp.emission_mean[z][j] + mdp.emission_sd[z][j] * n)
                .clamp(mdp.emission_lo[j], mdp.emission_hi[j]);
        }
    }

    let mut steps = Vec::new();
    let mut trace = vec![z];
    let mut actions = Vec::new();
    let mut outcome = Outcome::Survivor;
    for _ in 0..mdp.horizon_max {
        let mut features = vec![0.0; nf];
        for j in 0..nf {
            if mdp.static_mask[j] {
                features[j] = static_vals[j];
            } else {
                let n: f64 = rng.sample(StandardNormal);
                features[j] = (mdp.emission_mean[z][j] + mdp.emission_sd[z][j] * n)
                    .clamp(mdp.emission_lo[j], mdp.emission_hi[j]);
            }
        }
        let action = sample_categorical(&mut rng, &mdp.behavior[z * a_n..(z + 1) * a_n]);
        let iv_bin = action / 5;
        let vaso_bin = action % 5;
        let iv_dose = draw_dose(&mut rng, IV_BIN_RANGES[iv_bin]);
        let vaso_dose = draw_dose(&mut rng, VASO_BIN_RANGES[vaso_bin]);
        steps.push(RawStep { features, iv_dose, vaso_dose });
        actions.push(action as u8);

        let row = &mdp.transition[(z * a_n + action) * mdp.latent_states
            ..(z * a_n + action + 1) * mdp.latent_states];
        z = sample_categorical(&mut rng, row);
        trace.push(z);
        if z == mdp.death_state {
            outcome = Outcome::NonSurvivor;
            break;
        }
        if z == mdp.discharge_state {
            break;
        }
    }
    RawTrajectory {
        patient_id: format!("p{idx:06}"),
        steps,
        outcome,
        latent_trace: Some(trace),
        intended_actions: Some(actions),
    }
}

fn draw_dose<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Exact discounted value of `policy` from the start distribution, by
/// iterating the Bellman expectation operator to a sup-norm fixed point.
pub fn exact_policy_value(mdp: &SimMdp, policy: &[f64], discount: f64) -> Result<f64> {
    Ok(exact_values(mdp, policy, discount)?.start_value)
}

/// Exact V and Q tables for `policy` on the latent chain.
pub fn exact_values(mdp: &SimMdp, policy: &[f64], discount: f64) -> Result<ExactValues> {
    mdp.validate()?;
    validate_policy(mdp, policy)?;
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(Error::Config(format!("discount {discount} outside (0, 1]")));
    }
    let s = mdp.latent_states;
    let a = mdp.action_count;
    let mut v = vec![0.0; s];
    let mut converged = false;
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; s];
        for z in 0..s {
            let mut acc = 0.0;
            for act in 0..a {
                let pa = policy[z * a + act];
                if pa == 0.0 {
                    continue;
                }
                let mut qa = 0.0;
                for z2 in 0..s {
                    let p = mdp.trans(z, act, z2);
                    if p > 0.0 {
                        qa += p * (mdp.reward(z, act, z2) + discount * v[z2]);
                    }
                }
                acc += pa * qa;
            }
            next[z] = acc;
        }
        let residual =
            v.iter().zip(&next).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        v = next;
        if residual < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(
            "policy evaluation did not reach a 1e-12 fixed point within 1e6 sweeps".into(),
        ));
    }
    let mut q = vec![0.0; s * a];
    for z in 0..s {
        for act in 0..a {
            let mut qa = 0.0;
            for z2 in 0..s {
                let p = mdp.trans(z, act, z2);
                if p > 0.0 {
                    qa += p * (mdp.reward(z, act, z2) + discount * v[z2]);
                }
            }
            q[z * a + act] = qa;
        }
    }
    let start_value = mdp.start.iter().zip(&v).map(|(p, val)| p * val).sum();
    Ok(ExactValues { v, q, start_value })
}

/// Exact probability of reaching the death state within `horizon_max`
/// transitions under `policy`, from the start distribution.
pub fn death_probability(mdp: &SimMdp, policy: &[f64]) -> Result<f64> {
    mdp.validate()?;
    validate_policy(mdp, policy)?;
    let dist = push_forward(mdp, policy, mdp.horizon_max);
    Ok(dist[mdp.death_state])
}

/// State distribution after `steps` transitions under `policy`.
pub fn push_forward(mdp: &SimMdp, policy: &[f64], steps: usize) -> Vec<f64> {
    let s = mdp.latent_states;
    let m = mdp.marginal_transition(policy);
    let mut dist = mdp.start.clone();
    for _ in 0..steps {
        let mut next = vec![0.0; s];
        for z in 0..s {
            let pz = dist[z];
            if pz == 0.0 {
                continue;
            }
            for z2 in 0..s {
                next[z2] += pz * m[z * s + z2];
            }
        }
        dist = next;
    }
    dist
}

/// Discounted return of one latent trace (length T+1, actions length T)
/// under the MDP's reward specification.
pub fn latent_return(mdp: &SimMdp, trace: &[usize], actions: &[u8], discount: f64) -> f64 {
    assert_eq!(trace.len(), actions.len() + 1, "trace must include the final state");
    let mut total = 0.0;
    let mut disc = 1.0;
    for (t, &a) in actions.iter().enumerate() {
        total += disc * mdp.reward(trace[t], a as usize, trace[t + 1]);
        disc *= discount;
    }
    total
}

// ----------------------------------------------------------------------
// Default sepsis-like chain
// ----------------------------------------------------------------------

/// Severity of a transient latent state, in [0, 1].
fn severity(z: usize) -> f64 {
    z as f64 / 5.0
}

/// Mismatch between the treatment implied by action `a` and the treatment a
/// state of severity `s` calls for. Zero means clinically ideal. Vasopressors
/// given to near-healthy patients are penalized on top of the intensity gap.
fn treatment_mismatch(a: usize, s: f64) -> f64 {
    let iv = (a / 5) as f64;
    let vaso = (a % 5) as f64;
    let intensity = (iv + vaso) / 8.0;
    ((intensity - s).abs() + 0.15 * (vaso / 4.0) * (1.0 - s)).min(1.0)
}

/// The default 8-state simulator: severities 0-5 plus absorbing discharge (6)
/// and death (7). Treatments matching severity speed recovery; mismatched
/// treatments raise deterioration and death hazards, so better policies have
/// genuinely higher value. Mortality under the built-in behavior policy is
/// roughly 19%, and exact dosing is worth about 0.66 in discounted value
/// over that policy.
pub fn sepsis_default() -> SimMdp {
    const S: usize = 8;
    const DISCHARGE: usize = 6;
    const DEATH: usize = 7;
    // Mortality log-odds per state; rewards are differences of these, which
    // keeps every realizable transition reward inside [-3, 3].
    let mortality_logit =
        vec![-2.6, -2.1, -0.95, -0.3, 0.45, 1.0, -3.2, 2.0];
    let discharge_base = [0.32, 0.17, 0.08, 0.03, 0.0, 0.0];
    let death_base = [0.0, 0.0, 0.003, 0.025, 0.075, 0.18];
    // Severe states are sticky: recovery from them is slow even under ideal
    // care, so patients accumulate several steps of treatment-dependent
    // death hazard before they stabilize.
    let improve_scale = [0.0, 1.0, 1.0, 0.9, 0.55, 0.45];

    let mut transition = vec![0.0; S * ACTION_COUNT * S];
    for z in 0..6 {
        let s = severity(z);
        for a in 0..ACTION_COUNT {
            let m = treatment_mismatch(a, s);
            let p_disc = discharge_base[z] * (1.0 - 0.7 * m);
            let p_death = death_base[z] * (0.08 + 2.8 * m);
            let p_improve = (0.07 + 0.40 * (1.0 - m)) * improve_scale[z];
            let p_worsen = if z < 5 { 0.03 + 0.40 * m } else { 0.0 };
            let p_stay = 1.0 - p_disc - p_death - p_improve - p_worsen;
            debug_assert!(p_stay >= 0.0, "stay probability negative at z={z} a={a}");
            let row = &mut transition[(z * ACTION_COUNT + a) * S..(z * ACTION_COUNT + a + 1) * S];
            row[DISCHARGE] = p_disc;
            row[DEATH] = p_death;
            if z > 0 {
                row[z - 1] = p_improve;
            }
            if z < 5 {
                row[z + 1] = p_worsen;
            }
            row[z] += p_stay;
        }
    }
    for z in [DISCHARGE, DEATH] {
        for a in 0..ACTION_COUNT {
            transition[(z * ACTION_COUNT + a) * S + z] = 1.0;
        }
    }

    // Clinicians dose the mildly ill close to ideal but systematically
    // under-dose the sickest, and their dosing spread widens with severity;
    // a 15% habit of acting uniformly at random covers the rest of the
    // grid, so logged data includes the ideal doses while leaving learners
    // a real bias to correct exactly where treatment matters most.
    let mut behavior = vec![0.0; S * ACTION_COUNT];
    for z in 0..6 {
        let s = severity(z);
        let mu = 0.2 + 2.9 * s;
        let sigma = 1.2 + 1.2 * s;
        let mut row = vec![0.0; ACTION_COUNT];
        let mut total = 0.0;
        for (a, slot) in row.iter_mut().enumerate() {
            let iv = (a / 5) as f64;
            let vaso = (a % 5) as f64;
            let d2 = (iv - mu).powi(2) + (vaso - mu).powi(2);
            *slot = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *slot;
        }
        for (a, &w) in row.iter().enumerate() {
            behavior[z * ACTION_COUNT + a] =
                0.85 * w / total + 0.15 / ACTION_COUNT as f64;
        }
    }
    for z in [DISCHARGE, DEATH] {
        behavior[z * ACTION_COUNT] = 1.0;
    }

    let mut emission_mean = vec![vec![0.0; FEATURE_COUNT]; S];
    let mut emission_sd = vec![vec![0.0; FEATURE_COUNT]; S];
    for z in 0..6 {
        let s = severity(z);
        for (j, def) in FEATURES.iter().enumerate() {
            emission_mean[z][j] = def.healthy + s * (def.sick - def.healthy);
            emission_sd[z][j] = def.noise_sd;
        }
    }

    SimMdp {
        latent_states: S,
        discharge_state: DISCHARGE,
        death_state: DEATH,
        action_count: ACTION_COUNT,
        transition,
        emission_mean,
        emission_sd,
        emission_lo: FEATURES.iter().map(|d| d.lo).collect(),
        emission_hi: FEATURES.iter().map(|d| d.hi).collect(),
        static_mask: FEATURES.iter().map(|d| d.per_patient).collect(),
        mortality_logit,
        behavior,
        start: vec![0.15, 0.21, 0.25, 0.21, 0.12, 0.06, 0.0, 0.0],
        horizon_max: 100,
        discount: 0.99,
        reward: RewardSpec::LogOddsDelta,
    }
}
