//! Dueling double-DQN trained on offline transitions with prioritized
//! replay.
//!
//! The online network picks the argmax action at the next state and the
//! target network evaluates it (the double-DQN decoupling); the loss adds a
//! penalty on Q-values whose magnitude exceeds the largest plausible return
//! `r_max`, which keeps the critic inside the reward scale the data
//! supports.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::experts::replay::{ReplayBuffer, Transition};
use crate::nn::checkpoint::{self, BlockInfo, CheckpointHeader};
use crate::nn::{softmax, Activation, Adam, LayerSpec, Network, NetworkSpec, VecCache};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DqnConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Weight of the over-scale Q penalty.
    pub lambda: f64,
    /// Penalty-free magnitude bound on Q-values.
    pub r_max: f64,
    pub target_sync: usize,
    pub per_alpha: f64,
    pub per_beta_start: f64,
    pub priority_floor: f64,
    pub seed: u64,
    /// Size of the action space; `None` infers it from the largest logged
    /// action. Set it explicitly when some actions never occur in the data.
    pub action_count: Option<usize>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            steps: 200_000,
            batch_size: 30,
            learning_rate: 1e-3,
            gamma: 0.99,
            lambda: 1.0,
            r_max: 3.0,
            target_sync: 1000,
            per_alpha: 0.6,
            per_beta_start: 0.4,
            priority_floor: 1e-6,
            seed: 0,
            action_count: None,
        }
    }
}

/// Dueling Q-network: shared trunk, separate value and advantage heads,
/// combined as Q = V + (A - mean A).
#[derive(Debug, Clone)]
pub struct QNetwork {
    pub trunk: Network,
    pub value: Network,
    pub advantage: Network,
    pub input_dim: usize,
    pub action_count: usize,
}

pub struct QCache {
    trunk: VecCache,
    value: VecCache,
    advantage: VecCache,
    pub q: Vec<f64>,
}

impl QNetwork {
    pub fn new<R: rand::Rng>(input_dim: usize, action_count: usize, rng: &mut R) -> QNetwork {
        let trunk = Network::init(
            NetworkSpec::new(vec![
                LayerSpec::Dense { input: input_dim, output: 128, act: Activation::Tanh },
                LayerSpec::Dense { input: 128, output: 128, act: Activation::Tanh },
            ]),
            rng,
        );
        let value = Network::init(
            NetworkSpec::new(vec![
                LayerSpec::Dense { input: 128, output: 64, act: Activation::Tanh },
                LayerSpec::Dense { input: 64, output: 1, act: Activation::Linear },
            ]),
            rng,
        );
        let advantage = Network::init(
            NetworkSpec::new(vec![
                LayerSpec::Dense { input: 128, output: 64, act: Activation::Tanh },
                LayerSpec::Dense { input: 64, output: action_count, act: Activation::Linear },
            ]),
            rng,
        );
        QNetwork { trunk, value, advantage, input_dim, action_count }
    }

    pub fn forward_cached(&self, state: &[f64]) -> QCache {
        let (h, trunk) = self.trunk.forward_vec_cached(state);
        let (v, value) = self.value.forward_vec_cached(&h);
        let (a, advantage) = self.advantage.forward_vec_cached(&h);
        let mean_a = a.iter().sum::<f64>() / a.len() as f64;
        let q = a.iter().map(|&ai| v[0] + ai - mean_a).collect();
        QCache { trunk, value, advantage, q }
    }

    /// Q(s, ·) over all actions.
    pub fn q_values(&self, state: &[f64]) -> Vec<f64> {
        self.forward_cached(state).q
    }

    /// Advantage stream A(s, ·).
    pub fn advantages(&self, state: &[f64]) -> Vec<f64> {
        let h = self.trunk.forward_vec(state);
        self.advantage.forward_vec(&h)
    }

    /// Backpropagate a gradient on the Q outputs into parameter-gradient
    /// accumulators (one per sub-network).
    pub fn backward_into(
        &self,
        cache: &QCache,
        d_q: &[f64],
        trunk_g: &mut [f64],
        value_g: &mut [f64],
        advantage_g: &mut [f64],
    ) {
        let n = d_q.len() as f64;
        let mean_dq = d_q.iter().sum::<f64>() / n;
        let d_a: Vec<f64> = d_q.iter().map(|&g| g - mean_dq).collect();
        let d_v = [d_q.iter().sum::<f64>()];
        let d_h_value = self.value.backward_vec_into(&cache.value, &d_v, value_g);
        let d_h_adv = self.advantage.backward_vec_into(&cache.advantage, &d_a, advantage_g);
        let d_h: Vec<f64> = d_h_value.iter().zip(&d_h_adv).map(|(a, b)| a + b).collect();
        self.trunk.backward_vec_into(&cache.trunk, &d_h, trunk_g);
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            kind: "q_network".into(),
            seed,
            blocks: vec![
                BlockInfo { name: "trunk".into(), network: self.trunk.spec.clone() },
                BlockInfo { name: "value".into(), network: self.value.spec.clone() },
                BlockInfo { name: "advantage".into(), network: self.advantage.spec.clone() },
            ],
            meta: json!({ "input_dim": self.input_dim, "action_count": self.action_count }),
        };
        checkpoint::save(
            path,
            &header,
            &[&self.trunk.params, &self.value.params, &self.advantage.params],
        )
    }

    pub fn load(path: &std::path::Path) -> Result<QNetwork> {
        let (header, blocks) = checkpoint::load(path)?;
        if header.kind != "q_network" {
            return Err(Error::Schema(format!(
                "{}: checkpoint kind '{}', expected 'q_network'",
                path.display(),
                header.kind
            )));
        }
        let mut blocks = blocks.into_iter();
        let trunk_spec = header.blocks[0].network.clone();
        let input_dim = trunk_spec.input_dim();
        let advantage_spec = header.blocks[2].network.clone();
        let action_count = advantage_spec.output_dim();
        Ok(QNetwork {
            trunk: Network { spec: trunk_spec, params: blocks.next().unwrap() },
            value: Network { spec: header.blocks[1].network.clone(), params: blocks.next().unwrap() },
            advantage: Network { spec: advantage_spec, params: blocks.next().unwrap() },
            input_dim,
            action_count,
        })
    }
}

/// Double-DQN regression target for one transition: the online network
/// chooses the next action, the target network prices it.
pub fn double_target(
    online: &QNetwork,
    target: &QNetwork,
    reward: f64,
    gamma: f64,
    next_state: &[f64],
    terminal: bool,
) -> f64 {
    if terminal {
        return reward;
    }
    let online_q = online.q_values(next_state);
    let a_star = online_q
        .iter()
        .enumerate()
        .fold(0usize, |best, (i, &v)| if v > online_q[best] { i } else { best });
    reward + gamma * target.q_values(next_state)[a_star]
}

/// A trained DQN plus its loss trace (mean batch loss per 100-step window).
#[derive(Debug, Clone)]
pub struct TrainedDqn {
    pub network: QNetwork,
    pub loss_log: Vec<f64>,
}

/// Train a dueling double-DQN on a fixed offline transition set.
pub fn train_ddqn(transitions: Vec<Transition>, config: &DqnConfig) -> Result<TrainedDqn> {
    if transitions.is_empty() {
        return Err(Error::Data("no transitions to train on".into()));
    }
    let input_dim = transitions[0].state.len();
    let observed = required_action_count(&transitions);
    let action_count = match config.action_count {
        Some(n) if n < observed => {
            return Err(Error::Config(format!(
                "action_count {n} is smaller than the largest logged action ({})",
                observed - 1
            )));
        }
        Some(n) => n,
        None => observed,
    };
    for t in &transitions {
        if t.state.len() != input_dim || t.next_state.len() != input_dim {
            return Err(Error::Schema("transition state widths are inconsistent".into()));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut online = QNetwork::new(input_dim, action_count, &mut rng);
    let mut target = online.clone();
    let mut buffer = ReplayBuffer::new(transitions, config.per_alpha, config.priority_floor)?;

    let mut adam_trunk = Adam::new(online.trunk.params.len(), config.learning_rate);
    let mut adam_value = Adam::new(online.value.params.len(), config.learning_rate);
    let mut adam_adv = Adam::new(online.advantage.params.len(), config.learning_rate);
    let mut trunk_g = vec![0.0; online.trunk.params.len()];
    let mut value_g = vec![0.0; online.value.params.len()];
    let mut adv_g = vec![0.0; online.advantage.params.len()];

    let mut loss_log = Vec::new();
    let mut window_sum = 0.0;
    let mut window_n = 0usize;

    for step in 1..=config.steps {
        let beta = if config.steps > 1 {
            config.per_beta_start
                + (1.0 - config.per_beta_start) * (step - 1) as f64 / (config.steps - 1) as f64
        } else {
            1.0
        };
        let (indices, weights) = buffer.sample(config.batch_size, beta, &mut rng);

        trunk_g.iter_mut().for_each(|v| *v = 0.0);
        value_g.iter_mut().for_each(|v| *v = 0.0);
        adv_g.iter_mut().for_each(|v| *v = 0.0);
        let mut batch_loss = 0.0;
        let mut td_errors = Vec::with_capacity(indices.len());
        let inv = 1.0 / indices.len() as f64;

        for (&i, &w) in indices.iter().zip(&weights) {
            let tr = buffer.transition(i);
            let y = double_target(&online, &target, tr.reward, config.gamma, &tr.next_state, tr.terminal);
            let cache = online.forward_cached(&tr.state);
            let q_sa = cache.q[tr.action];
            let td = y - q_sa;
            td_errors.push(td);

            let overshoot = (q_sa.abs() - config.r_max).max(0.0);
            batch_loss += w * (td * td + config.lambda * overshoot) * inv;

            let mut d_q = vec![0.0; action_count];
            let mut g = -2.0 * td;
            if overshoot > 0.0 {
                g += config.lambda * q_sa.signum();
            }
            d_q[tr.action] = w * g * inv;
            online.backward_into(&cache, &d_q, &mut trunk_g, &mut value_g, &mut adv_g);
        }

        if !batch_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "DQN loss became non-finite at step {step}"
            )));
        }
        adam_trunk.step(&mut online.trunk.params, &trunk_g);
        adam_value.step(&mut online.value.params, &value_g);
        adam_adv.step(&mut online.advantage.params, &adv_g);
        buffer.update_priorities(&indices, &td_errors);

        if step % config.target_sync == 0 {
            target = online.clone();
        }
        window_sum += batch_loss;
        window_n += 1;
        if window_n == 100 || step == config.steps {
            loss_log.push(window_sum / window_n as f64);
            window_sum = 0.0;
            window_n = 0;
        }
    }
    Ok(TrainedDqn { network: online, loss_log })
}

/// Smallest action count covering every transition, with a floor of 2.
fn required_action_count(transitions: &[Transition]) -> usize {
    (transitions.iter().map(|t| t.action).max().unwrap() + 1).max(2)
}

/// Softmax over the advantage stream at the given temperature.
pub fn dqn_policy(qnet: &QNetwork, state: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let adv = qnet.advantages(state);
    let scaled: Vec<f64> = adv.iter().map(|a| a / temperature).collect();
    softmax(&scaled)
}
