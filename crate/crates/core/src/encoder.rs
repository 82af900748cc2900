//! State construction: a recurrent autoencoder that compresses a patient's
//! observation history into a fixed-width state, plus a sparse feedforward
//! autoencoder over single observations as a cheaper alternative.
//!
//! The recurrent model reads the observation sequence with an LSTM and keeps
//! the final hidden state as the encoding. The decoder is a second LSTM whose
//! initial hidden state is the encoding (cell state zero) and whose inputs
//! are zeros; a linear projection of its hidden states must reproduce the
//! original sequence in forward order, under mean squared error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, BlockInfo, CheckpointHeader};
use crate::nn::{mse, Activation, Adam, LayerSpec, Network, NetworkSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEncoderConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SequenceEncoderConfig {
    fn default() -> Self {
        SequenceEncoderConfig {
            hidden_dim: 128,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseEncoderConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Target mean activation of each hidden unit.
    pub sparsity_target: f64,
    /// Weight of the KL sparsity penalty in the loss.
    pub sparsity_weight: f64,
    pub seed: u64,
}

impl Default for SparseEncoderConfig {
    fn default() -> Self {
        SparseEncoderConfig {
            hidden_dim: 128,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            sparsity_target: 0.05,
            sparsity_weight: 1e-3,
            seed: 0,
        }
    }
}

/// A trained recurrent autoencoder. `encode*` methods only use the encoder
/// half; the decoder is retained for reconstruction checks and checkpoints.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub encoder: Network,
    pub decoder: Network,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Mean reconstruction MSE per epoch, in training order.
    pub epoch_mse: Vec<f64>,
}

/// A trained sparse feedforward autoencoder.
#[derive(Debug, Clone)]
pub struct SparseAutoencoder {
    pub encoder: Network,
    pub decoder: Network,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub epoch_mse: Vec<f64>,
}

fn validate_sequences(sequences: &[Vec<Vec<f64>>]) -> Result<usize> {
    if sequences.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    let dim = sequences
        .iter()
        .flat_map(|s| s.iter())
        .map(|o| o.len())
        .next()
        .ok_or_else(|| Error::Data("all training sequences are empty".into()))?;
    for (i, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Data(format!("training sequence {i} is empty")));
        }
        if seq.iter().any(|o| o.len() != dim) {
            return Err(Error::Schema(format!(
                "training sequence {i} mixes observation widths (expected {dim})"
            )));
        }
    }
    Ok(dim)
}

/// Per-trajectory loss and gradients for the recurrent autoencoder: MSE over
/// all (step, feature) entries of the reconstruction.
fn sequence_grad(
    encoder: &Network,
    decoder: &Network,
    seq: &[Vec<f64>],
    hidden_dim: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let steps = seq.len();
    let (enc_out, enc_cache) = encoder.forward_seq(seq, None);
    let encoding = enc_out.last().unwrap().clone();

    let zeros = vec![vec![0.0]; steps];
    let init = [(encoding, vec![0.0; hidden_dim])];
    let (recon, dec_cache) = decoder.forward_seq(&zeros, Some(&init));

    let mut loss = 0.0;
    let mut d_recon = Vec::with_capacity(steps);
    let scale = 1.0 / steps as f64;
    for (r, x) in recon.iter().zip(seq) {
        let (l, mut g) = mse(r, x);
        loss += l * scale;
        for v in &mut g {
            *v *= scale;
        }
        d_recon.push(g);
    }

    let dec_grads = decoder.backward_seq(&dec_cache, &d_recon);
    // The cell state is pinned to zero, so only the h0 adjoint flows back
    // into the encoder, at its final step.
    let d_encoding = dec_grads.d_init[0].0.clone();
    let mut d_enc_out = vec![vec![0.0; hidden_dim]; steps];
    *d_enc_out.last_mut().unwrap() = d_encoding;
    let enc_grads = encoder.backward_seq(&enc_cache, &d_enc_out);

    (loss, enc_grads.params, dec_grads.params)
}

/// Train the recurrent autoencoder on observation sequences.
pub fn train_sequence_autoencoder(
    sequences: &[Vec<Vec<f64>>],
    config: &SequenceEncoderConfig,
) -> Result<SequenceEncoder> {
    let input_dim = validate_sequences(sequences)?;
    let hidden = config.hidden_dim;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut encoder = Network::init(
        NetworkSpec::new(vec![LayerSpec::Lstm { input: input_dim, hidden }]),
        &mut rng,
    );
    let mut decoder = Network::init(
        NetworkSpec::new(vec![
            LayerSpec::Lstm { input: 1, hidden },
            LayerSpec::Dense { input: hidden, output: input_dim, act: Activation::Linear },
        ]),
        &mut rng,
    );
    let mut adam_enc = Adam::new(encoder.params.len(), config.learning_rate);
    let mut adam_dec = Adam::new(decoder.params.len(), config.learning_rate);

    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let inv = 1.0 / chunk.len() as f64;
            let mut enc_g = vec![0.0; encoder.params.len()];
            let mut dec_g = vec![0.0; decoder.params.len()];
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (loss, eg, dg) = sequence_grad(&encoder, &decoder, &sequences[i], hidden);
                batch_loss += loss * inv;
                for (a, b) in enc_g.iter_mut().zip(&eg) {
                    *a += b * inv;
                }
                for (a, b) in dec_g.iter_mut().zip(&dg) {
                    *a += b * inv;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "autoencoder loss became non-finite at epoch {epoch}"
                )));
            }
            adam_enc.step(&mut encoder.params, &enc_g);
            adam_dec.step(&mut decoder.params, &dec_g);
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        epoch_mse.push(epoch_loss / sequences.len() as f64);
    }
    Ok(SequenceEncoder { encoder, decoder, input_dim, hidden_dim: hidden, epoch_mse })
}

impl SequenceEncoder {
    /// Encode a full observation history into the final LSTM hidden state.
    pub fn encode(&self, seq: &[Vec<f64>]) -> Vec<f64> {
        self.encoder.forward_seq(seq, None).0.pop().unwrap()
    }

    /// Encodings of every prefix `seq[0..=t]`, from one forward pass.
    pub fn encode_prefixes(&self, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.encoder.forward_seq(seq, None).0
    }

    /// Reconstruction MSE of one sequence (the training objective).
    pub fn reconstruction_mse(&self, seq: &[Vec<f64>]) -> f64 {
        sequence_grad(&self.encoder, &self.decoder, seq, self.hidden_dim).0
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            kind: "sequence_autoencoder".into(),
            seed,
            blocks: vec![
                BlockInfo { name: "encoder".into(), network: self.encoder.spec.clone() },
                BlockInfo { name: "decoder".into(), network: self.decoder.spec.clone() },
            ],
            meta: json!({
                "input_dim": self.input_dim,
                "hidden_dim": self.hidden_dim,
                "epoch_mse": self.epoch_mse,
            }),
        };
        checkpoint::save(path, &header, &[&self.encoder.params, &self.decoder.params])
    }

    pub fn load(path: &std::path::Path) -> Result<SequenceEncoder> {
        let (header, mut blocks) = checkpoint::load(path)?;
        if header.kind != "sequence_autoencoder" {
            return Err(Error::Schema(format!(
                "{}: checkpoint kind '{}', expected 'sequence_autoencoder'",
                path.display(),
                header.kind
            )));
        }
        let decoder_params = blocks.pop().unwrap();
        let encoder_params = blocks.pop().unwrap();
        let enc_spec = header.blocks[0].network.clone();
        let dec_spec = header.blocks[1].network.clone();
        let input_dim = enc_spec.input_dim();
        let hidden_dim = enc_spec.output_dim();
        let epoch_mse = serde_json::from_value(header.meta["epoch_mse"].clone()).unwrap_or_default();
        Ok(SequenceEncoder {
            encoder: Network { spec: enc_spec, params: encoder_params },
            decoder: Network { spec: dec_spec, params: decoder_params },
            input_dim,
            hidden_dim,
            epoch_mse,
        })
    }
}

/// Loss and gradients for one sparse-autoencoder batch. The KL penalty
/// couples samples through the batch-mean hidden activation, so the whole
/// batch is differentiated together.
fn sparse_batch_grad(
    encoder: &Network,
    decoder: &Network,
    batch: &[&Vec<f64>],
    target: f64,
    weight: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let b = batch.len() as f64;
    let hidden_dim = encoder.spec.output_dim();
    let mut hidden = Vec::with_capacity(batch.len());
    let mut enc_caches = Vec::with_capacity(batch.len());
    let mut mean_act = vec![0.0; hidden_dim];
    for &x in batch {
        let (h, cache) = encoder.forward_vec_cached(x);
        for (m, v) in mean_act.iter_mut().zip(&h) {
            *m += v / b;
        }
        hidden.push(h);
        enc_caches.push(cache);
    }

    // KL(target || mean activation), summed over hidden units.
    let mut kl = 0.0;
    let mut d_mean = vec![0.0; hidden_dim];
    for (j, &m) in mean_act.iter().enumerate() {
        let m = m.clamp(1e-12, 1.0 - 1e-12);
        kl += target * (target / m).ln() + (1.0 - target) * ((1.0 - target) / (1.0 - m)).ln();
        d_mean[j] = weight * (-target / m + (1.0 - target) / (1.0 - m));
    }

    let mut loss = weight * kl;
    let mut enc_g = vec![0.0; encoder.params.len()];
    let mut dec_g = vec![0.0; decoder.params.len()];
    for (i, &x) in batch.iter().enumerate() {
        let (y, dec_cache) = decoder.forward_vec_cached(&hidden[i]);
        let (l, mut d_y) = mse(&y, x);
        loss += l / b;
        for v in &mut d_y {
            *v /= b;
        }
        let (dg, mut d_h) = decoder.backward_vec(&dec_cache, &d_y);
        for (a, g) in dec_g.iter_mut().zip(&dg) {
            *a += g;
        }
        // Each sample contributes 1/B to every unit's mean activation.
        for (dh, dm) in d_h.iter_mut().zip(&d_mean) {
            *dh += dm / b;
        }
        let (eg, _) = encoder.backward_vec(&enc_caches[i], &d_h);
        for (a, g) in enc_g.iter_mut().zip(&eg) {
            *a += g;
        }
    }
    (loss, enc_g, dec_g)
}

/// Train the sparse feedforward autoencoder on single observations.
pub fn train_sparse_autoencoder(
    observations: &[Vec<f64>],
    config: &SparseEncoderConfig,
) -> Result<SparseAutoencoder> {
    if observations.is_empty() {
        return Err(Error::Data("no training observations".into()));
    }
    let input_dim = observations[0].len();
    if observations.iter().any(|o| o.len() != input_dim) {
        return Err(Error::Schema("training observations mix widths".into()));
    }
    let hidden = config.hidden_dim;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut encoder = Network::init(
        NetworkSpec::new(vec![LayerSpec::Dense {
            input: input_dim,
            output: hidden,
            act: Activation::Sigmoid,
        }]),
        &mut rng,
    );
    let mut decoder = Network::init(
        NetworkSpec::new(vec![LayerSpec::Dense {
            input: hidden,
            output: input_dim,
            act: Activation::Linear,
        }]),
        &mut rng,
    );
    let mut adam_enc = Adam::new(encoder.params.len(), config.learning_rate);
    let mut adam_dec = Adam::new(decoder.params.len(), config.learning_rate);

    let mut order: Vec<usize> = (0..observations.len()).collect();
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Vec<f64>> = chunk.iter().map(|&i| &observations[i]).collect();
            let (loss, enc_g, dec_g) = sparse_batch_grad(
                &encoder,
                &decoder,
                &batch,
                config.sparsity_target,
                config.sparsity_weight,
            );
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "sparse autoencoder loss became non-finite at epoch {epoch}"
                )));
            }
            adam_enc.step(&mut encoder.params, &enc_g);
            adam_dec.step(&mut decoder.params, &dec_g);
            epoch_loss += loss * chunk.len() as f64;
        }
        epoch_mse.push(epoch_loss / observations.len() as f64);
    }
    Ok(SparseAutoencoder { encoder, decoder, input_dim, hidden_dim: hidden, epoch_mse })
}

impl SparseAutoencoder {
    pub fn encode(&self, obs: &[f64]) -> Vec<f64> {
        self.encoder.forward_vec(obs)
    }

    /// Mean hidden activation over a set of observations.
    pub fn mean_activation(&self, observations: &[Vec<f64>]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for obs in observations {
            let h = self.encode(obs);
            n += h.len();
            sum += h.iter().sum::<f64>();
        }
        sum / n as f64
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            kind: "sparse_autoencoder".into(),
            seed,
            blocks: vec![
                BlockInfo { name: "encoder".into(), network: self.encoder.spec.clone() },
                BlockInfo { name: "decoder".into(), network: self.decoder.spec.clone() },
            ],
            meta: json!({
                "input_dim": self.input_dim,
                "hidden_dim": self.hidden_dim,
                "epoch_mse": self.epoch_mse,
            }),
        };
        checkpoint::save(path, &header, &[&self.encoder.params, &self.decoder.params])
    }

    pub fn load(path: &std::path::Path) -> Result<SparseAutoencoder> {
        let (header, mut blocks) = checkpoint::load(path)?;
        if header.kind != "sparse_autoencoder" {
            return Err(Error::Schema(format!(
                "{}: checkpoint kind '{}', expected 'sparse_autoencoder'",
                path.display(),
                header.kind
            )));
        }
        let decoder_params = blocks.pop().unwrap();
        let encoder_params = blocks.pop().unwrap();
        let enc_spec = header.blocks[0].network.clone();
        let dec_spec = header.blocks[1].network.clone();
        let input_dim = enc_spec.input_dim();
        let hidden_dim = enc_spec.output_dim();
        let epoch_mse = serde_json::from_value(header.meta["epoch_mse"].clone()).unwrap_or_default();
        Ok(SparseAutoencoder {
            encoder: Network { spec: enc_spec, params: encoder_params },
            decoder: Network { spec: dec_spec, params: decoder_params },
            input_dim,
            hidden_dim,
            epoch_mse,
        })
    }
}
