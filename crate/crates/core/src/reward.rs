//! Learned reward: a feedforward mortality predictor whose output logit
//! defines per-step rewards as drops in mortality log-odds.
//!
//! The predictor maps one observation to a pre-sigmoid logit. Training uses
//! class-balanced batches (survivors and non-survivors drawn 50/50 with
//! replacement) and adds an L1 penalty on the input gradient of the logit,
//! which keeps the learned surface flat in directions the data does not
//! constrain. The reward for a transition `o -> o'` is
//! `logit(f(o)) - logit(f(o'))`, with probabilities clamped away from 0 and 1
//! before taking log-odds; undiscounted rewards therefore telescope to the
//! difference between the first and last observation's log-odds.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, BlockInfo, CheckpointHeader};
use crate::nn::{bce_with_logit, sigmoid, Activation, Adam, LayerSpec, Network, NetworkSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardModelConfig {
    pub hidden: (usize, usize),
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the L1 input-gradient penalty.
    pub l1_weight: f64,
    pub seed: u64,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        RewardModelConfig {
            hidden: (64, 32),
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            l1_weight: 1e-3,
            seed: 0,
        }
    }
}

/// A trained mortality predictor.
#[derive(Debug, Clone)]
pub struct MortalityModel {
    pub network: Network,
    pub input_dim: usize,
    /// Mean training loss per epoch (BCE plus penalty).
    pub epoch_loss: Vec<f64>,
}

/// Clamp a logit to the range corresponding to probabilities in
/// `[1e-12, 1 - 1e-12]`.
pub fn clamp_logit(z: f64) -> f64 {
    let m = ((1.0 - 1e-12) / 1e-12_f64).ln();
    z.clamp(-m, m)
}

/// Loss and parameter gradients for one balanced batch.
fn batch_grad(
    network: &Network,
    batch: &[(&Vec<f64>, bool)],
    l1_weight: f64,
) -> (f64, Vec<f64>) {
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; network.params.len()];
    let mut scratch = vec![0.0; network.params.len()];
    for &(x, died) in batch {
        let y = if died { 1.0 } else { 0.0 };
        let (z, cache) = network.forward_vec_cached(x);
        let (l, dz) = bce_with_logit(z[0], y);
        loss += l * inv;
        scratch.iter_mut().for_each(|v| *v = 0.0);
        network.backward_vec_into(&cache, &[dz * inv], &mut scratch);
        for (g, s) in grads.iter_mut().zip(&scratch) {
            *g += s;
        }
        if l1_weight != 0.0 {
            let (penalty, pgrads) = network.input_grad_penalty(x);
            loss += l1_weight * penalty * inv;
            for (g, p) in grads.iter_mut().zip(&pgrads) {
                *g += l1_weight * p * inv;
            }
        }
    }
    (loss, grads)
}

/// Train the mortality predictor on per-step observations labeled with the
/// patient's outcome (`true` = non-survivor).
pub fn train_mortality_model(
    observations: &[Vec<f64>],
    died: &[bool],
    config: &RewardModelConfig,
) -> Result<MortalityModel> {
    if observations.len() != died.len() {
        return Err(Error::Schema(format!(
            "{} observations but {} labels",
            observations.len(),
            died.len()
        )));
    }
    if observations.is_empty() {
        return Err(Error::Data("no training observations".into()));
    }
    let input_dim = observations[0].len();
    if observations.iter().any(|o| o.len() != input_dim) {
        return Err(Error::Schema("training observations mix widths".into()));
    }
    if config.batch_size < 2 || config.batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "reward batch size {} is not an even number >= 2",
            config.batch_size
        )));
    }
    let survivors: Vec<usize> = (0..died.len()).filter(|&i| !died[i]).collect();
    let deaths: Vec<usize> = (0..died.len()).filter(|&i| died[i]).collect();
    if survivors.is_empty() || deaths.is_empty() {
        return Err(Error::Data(
            "mortality labels contain a single class; cannot fit a predictor".into(),
        ));
    }

    let (h1, h2) = config.hidden;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut network = Network::init(
        NetworkSpec::new(vec![
            LayerSpec::Dense { input: input_dim, output: h1, act: Activation::Tanh },
            LayerSpec::Dense { input: h1, output: h2, act: Activation::Tanh },
            LayerSpec::Dense { input: h2, output: 1, act: Activation::Linear },
        ]),
        &mut rng,
    );
    let mut adam = Adam::new(network.params.len(), config.learning_rate);

    let batches_per_epoch = observations.len().div_ceil(config.batch_size);
    let half = config.batch_size / 2;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for _ in 0..batches_per_epoch {
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..half {
                let i = survivors[rng.random_range(0..survivors.len())];
                batch.push((&observations[i], false));
            }
            for _ in 0..half {
                let i = deaths[rng.random_range(0..deaths.len())];
                batch.push((&observations[i], true));
            }
            let (loss, grads) = batch_grad(&network, &batch, config.l1_weight);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "mortality model loss became non-finite at epoch {epoch}"
                )));
            }
            adam.step(&mut network.params, &grads);
            total += loss;
        }
        epoch_loss.push(total / batches_per_epoch as f64);
    }
    Ok(MortalityModel { network, input_dim, epoch_loss })
}

impl MortalityModel {
    /// Pre-sigmoid mortality logit of one observation.
    pub fn logit(&self, obs: &[f64]) -> f64 {
        self.network.forward_vec(obs)[0]
    }

    /// Mortality probability of one observation.
    pub fn predict(&self, obs: &[f64]) -> f64 {
        sigmoid(self.logit(obs))
    }

    /// Reward for the transition `obs -> next`: the drop in mortality
    /// log-odds, with probabilities clamped to `[1e-12, 1 - 1e-12]`.
    pub fn reward(&self, obs: &[f64], next: &[f64]) -> f64 {
        clamp_logit(self.logit(obs)) - clamp_logit(self.logit(next))
    }

    /// Fraction of observations whose predicted class matches the label.
    pub fn accuracy(&self, observations: &[Vec<f64>], died: &[bool]) -> f64 {
        let hits = observations
            .iter()
            .zip(died)
            .filter(|(o, &d)| (self.predict(o) > 0.5) == d)
            .count();
        hits as f64 / observations.len() as f64
    }

    /// Mean absolute input gradient of the logit per feature: which
    /// observation channels drive the mortality prediction.
    pub fn feature_saliency(&self, observations: &[Vec<f64>]) -> Vec<f64> {
        let mut acc = vec![0.0; self.input_dim];
        for obs in observations {
            let g = self.network.input_gradient(obs);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v.abs();
            }
        }
        let n = observations.len().max(1) as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            kind: "mortality_model".into(),
            seed,
            blocks: vec![BlockInfo { name: "network".into(), network: self.network.spec.clone() }],
            meta: json!({ "input_dim": self.input_dim, "epoch_loss": self.epoch_loss }),
        };
        checkpoint::save(path, &header, &[&self.network.params])
    }

    pub fn load(path: &std::path::Path) -> Result<MortalityModel> {
        let (header, mut blocks) = checkpoint::load(path)?;
        if header.kind != "mortality_model" {
            return Err(Error::Schema(format!(
                "{}: checkpoint kind '{}', expected 'mortality_model'",
                path.display(),
                header.kind
            )));
        }
        let spec = header.blocks[0].network.clone();
        let input_dim = spec.input_dim();
        let epoch_loss =
            serde_json::from_value(header.meta["epoch_loss"].clone()).unwrap_or_default();
        Ok(MortalityModel {
            network: Network { spec, params: blocks.pop().unwrap() },
            input_dim,
            epoch_loss,
        })
    }
}

/// Histogram of rewards over `[lo, hi]` with equal-width bins, plus counts
/// falling below and above the range.
pub fn reward_histogram(rewards: &[f64], lo: f64, hi: f64, bins: usize) -> (Vec<usize>, usize, usize) {
    let mut counts = vec![0usize; bins];
    let (mut below, mut above) = (0usize, 0usize);
    let width = (hi - lo) / bins as f64;
    for &r in rewards {
        if r < lo {
            below += 1;
        } else if r > hi {
            above += 1;
        } else {
            let b = (((r - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    (counts, below, above)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Linearly separable synthetic data: died iff x0 + x1 > 1, with a
    /// margin so a small model can stay clean.
    fn separable(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut obs = Vec::with_capacity(n);
        let mut died = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = x[0] + x[1];
            if (s - 1.0).abs() < 0.15 {
                // Push points off the boundary.
                let shift = if s > 1.0 { 0.1 } else { -0.1 };
                x[0] = (x[0] + shift).clamp(0.0, 1.0);
                x[1] = (x[1] + shift).clamp(0.0, 1.0);
            }
            died.push(x[0] + x[1] > 1.0);
            obs.push(x);
        }
        (obs, died)
    }

    fn quick_config(seed: u64) -> RewardModelConfig {
        RewardModelConfig {
            hidden: (16, 8),
            epochs: 30,
            batch_size: 32,
            learning_rate: 3e-3,
            l1_weight: 1e-3,
            seed,
        }
    }

    #[test]
    fn rewards_telescope_and_are_antisymmetric() {
        let (obs, died) = separable(60, 5, 1);
        let model = train_mortality_model(&obs, &died, &quick_config(2)).unwrap();
        // Telescoping over an arbitrary "trajectory" of observations.
        let seq = &obs[..7];
        let total: f64 = seq.windows(2).map(|w| model.reward(&w[0], &w[1])).sum();
        let direct = clamp_logit(model.logit(&seq[0])) - clamp_logit(model.logit(&seq[6]));
        assert!((total - direct).abs() < 1e-10, "telescoping broke: {total} vs {direct}");
        // Antisymmetry.
        for w in seq.windows(2) {
            let fwd = model.reward(&w[0], &w[1]);
            let back = model.reward(&w[1], &w[0]);
            assert!((fwd + back).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_penalty_gradients_match_plain_bce() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let net = Network::init(
            NetworkSpec::new(vec![
                LayerSpec::Dense { input: 4, output: 6, act: Activation::Tanh },
                LayerSpec::Dense { input: 6, output: 1, act: Activation::Linear },
            ]),
            &mut rng,
        );
        let xs: Vec<Vec<f64>> =
            (0..8).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let batch: Vec<(&Vec<f64>, bool)> =
            xs.iter().enumerate().map(|(i, x)| (x, i % 2 == 0)).collect();
        let (loss, grads) = batch_grad(&net, &batch, 0.0);

        // Hand-accumulated BCE-only gradients.
        let mut want = vec![0.0; net.params.len()];
        let mut want_loss = 0.0;
        let inv = 1.0 / batch.len() as f64;
        for &(x, d) in &batch {
            let y = if d { 1.0 } else { 0.0 };
            let (z, cache) = net.forward_vec_cached(x);
            let (l, dz) = bce_with_logit(z[0], y);
            want_loss += l * inv;
            let (g, _) = net.backward_vec(&cache, &[dz * inv]);
            for (w, v) in want.iter_mut().zip(&g) {
                *w += v;
            }
        }
        assert!((loss - want_loss).abs() < 1e-14);
        for (a, b) in grads.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn penalized_batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let net = Network::init(
            NetworkSpec::new(vec![
                LayerSpec::Dense { input: 3, output: 5, act: Activation::Tanh },
                LayerSpec::Dense { input: 5, output: 1, act: Activation::Linear },
            ]),
            &mut rng,
        );
        let xs: Vec<Vec<f64>> =
            (0..4).map(|_| (0..3).map(|_| rng.random_range(0.1..0.9)).collect()).collect();
        let batch: Vec<(&Vec<f64>, bool)> =
            xs.iter().enumerate().map(|(i, x)| (x, i % 2 == 0)).collect();
        let (_, grads) = batch_grad(&net, &batch, 0.5);

        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..net.params.len() {
            let mut hi = net.clone();
            let mut lo = net.clone();
            hi.params[i] += eps;
            lo.params[i] -= eps;
            let num =
                (batch_grad(&hi, &batch, 0.5).0 - batch_grad(&lo, &batch, 0.5).0) / (2.0 * eps);
            let rel = (grads[i] - num).abs() / grads[i].abs().max(num.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn separable_data_reaches_high_held_out_accuracy() {
        let (train_obs, train_died) = separable(400, 4, 10);
        let (test_obs, test_died) = separable(200, 4, 11);
        let model = train_mortality_model(&train_obs, &train_died, &quick_config(12)).unwrap();
        let acc = model.accuracy(&test_obs, &test_died);
        assert!(acc >= 0.9, "held-out accuracy {acc}");
    }

    #[test]
    fn balanced_batches_cope_with_class_imbalance() {
        // 95/5 imbalance: plain sampling would collapse to the majority.
        let (mut obs, mut died) = separable(600, 4, 20);
        let keep: Vec<usize> = (0..obs.len())
            .filter(|&i| !died[i] || i % 8 == 0)
            .collect();
        obs = keep.iter().map(|&i| obs[i].clone()).collect();
        died = keep.iter().map(|&i| died[i]).collect();
        let minority = died.iter().filter(|&&d| d).count();
        assert!(minority * 5 < died.len(), "fixture is not imbalanced");

        let model = train_mortality_model(&obs, &died, &quick_config(21)).unwrap();
        let (test_obs, test_died) = separable(200, 4, 22);
        let deaths: Vec<usize> = (0..200).filter(|&i| test_died[i]).collect();
        let recall = deaths.iter().filter(|&&i| model.predict(&test_obs[i]) > 0.5).count() as f64
            / deaths.len() as f64;
        assert!(recall >= 0.7, "minority recall {recall}");
    }

    #[test]
    fn shuffled_labels_stay_near_chance_on_held_out_data() {
        let (obs, _) = separable(300, 4, 30);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let died: Vec<bool> = (0..300).map(|_| rng.random_range(0..2) == 1).collect();
        let model = train_mortality_model(&obs, &died, &quick_config(32)).unwrap();
        let (test_obs, _) = separable(200, 4, 33);
        let fresh: Vec<bool> = (0..200).map(|_| rng.random_range(0..2) == 1).collect();
        let acc = model.accuracy(&test_obs, &fresh);
        assert!((0.35..=0.65).contains(&acc), "chance-level check failed: {acc}");
    }

    #[test]
    fn saliency_concentrates_on_the_informative_features() {
        let (obs, died) = separable(400, 6, 40);
        let model = train_mortality_model(&obs, &died, &quick_config(41)).unwrap();
        let sal = model.feature_saliency(&obs);
        let informative = sal[0].min(sal[1]);
        let noise = sal[2..].iter().cloned().fold(f64::MIN, f64::max);
        assert!(
            informative > 2.0 * noise,
            "saliency did not separate signal from noise: {sal:?}"
        );
    }

    #[test]
    fn single_class_labels_are_a_data_error() {
        let (obs, _) = separable(50, 4, 50);
        let died = vec![false; 50];
        let err = train_mortality_model(&obs, &died, &quick_config(51)).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");
        assert!(err.to_string().contains("single class"));
    }

    #[test]
    fn histogram_counts_and_tails_add_up() {
        let rewards = [-4.0, -2.9, -0.1, 0.0, 0.1, 2.9, 3.0, 5.0];
        let (counts, below, above) = reward_histogram(&rewards, -3.0, 3.0, 6);
        assert_eq!(below, 1);
        assert_eq!(above, 1);
        assert_eq!(counts.iter().sum::<usize>(), rewards.len() - 2);
        // Exact boundary value 3.0 lands in the top bin, not the overflow.
        assert!(counts[5] >= 2);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (obs, died) = separable(80, 4, 60);
        let mut cfg = quick_config(61);
        cfg.epochs = 3;
        let model = train_mortality_model(&obs, &died, &cfg).unwrap();
        let path = dir.path().join("mortality.ckpt");
        model.save(&path, 61).unwrap();
        let back = MortalityModel::load(&path).unwrap();
        assert_eq!(back.network.params, model.network.params);
        assert_eq!(back.logit(&obs[0]), model.logit(&obs[0]));
    }
}
