//! Minimal neural-network engine: dense and LSTM layers over a flat parameter
//! vector, reverse-mode gradients, Adam, and a finite-difference checker.
//!
//! Every model keeps its parameters in one contiguous `Vec<f64>` so
//! optimizers, checkpoints and gradient checks treat all networks uniformly.
//! Layout per layer:
//!
//! * dense: row-major weights `W[out][in]`, then bias `[out]`;
//! * lstm: fused input weights `Wx[4h][in]`, recurrent weights `Wh[4h][h]`,
//!   bias `[4h]`, with gate rows stacked input/forget/candidate/output.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// First derivative, given both pre-activation `z` and activation `a`.
    #[inline]
    pub fn deriv(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    /// Second derivative in terms of the activation value; needed when
    /// differentiating through a first-order gradient.
    #[inline]
    pub fn second_deriv(self, a: f64) -> f64 {
        match self {
            Activation::Linear | Activation::Relu => 0.0,
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Sigmoid => a * (1.0 - a) * (1.0 - 2.0 * a),
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, output: usize, act: Activation },
    Lstm { input: usize, hidden: usize },
}

impl LayerSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } | LayerSpec::Lstm { input, .. } => input,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { output, .. } => output,
            LayerSpec::Lstm { hidden, .. } => hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output, .. } => output * (input + 1),
            LayerSpec::Lstm { input, hidden } => 4 * hidden * (input + hidden + 1),
        }
    }
}

/// An ordered stack of layers. Dense layers in a sequence network apply
/// independently at every timestep; LSTM layers carry state across steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        let spec = NetworkSpec { layers };
        spec.validate().expect("invalid network spec");
        spec
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layers.is_empty() {
            return Err("network has no layers".into());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.input_dim() == 0 || layer.output_dim() == 0 {
                return Err(format!("layer {l} has a zero dimension"));
            }
            if l > 0 && self.layers[l - 1].output_dim() != layer.input_dim() {
                return Err(format!(
                    "layer {l} expects input {} but layer {} outputs {}",
                    layer.input_dim(),
                    l - 1,
                    self.layers[l - 1].output_dim()
                ));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Starting offset of each layer's block in the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offs.push(acc);
            acc += l.param_count();
        }
        offs
    }

    /// True when every layer is dense, i.e. the network maps vectors.
    pub fn is_feedforward(&self) -> bool {
        self.layers.iter().all(|l| matches!(l, LayerSpec::Dense { .. }))
    }

    pub fn lstm_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Lstm { .. })).count()
    }
}

/// A network specification together with its flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
}

impl Network {
    /// Glorot-uniform weights (bound `sqrt(6 / (fan_in + fan_out))`, per gate
    /// for LSTM blocks), zero biases.
    pub fn init<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Network {
        let mut params = vec![0.0; spec.param_count()];
        let offsets = spec.layer_offsets();
        for (l, layer) in spec.layers.iter().enumerate() {
            let off = offsets[l];
            match *layer {
                LayerSpec::Dense { input, output, .. } => {
                    let s = (6.0 / (input + output) as f64).sqrt();
                    for w in &mut params[off..off + output * input] {
                        *w = rng.random_range(-s..s);
                    }
                }
                LayerSpec::Lstm { input, hidden } => {
                    let sx = (6.0 / (input + hidden) as f64).sqrt();
                    let sh = (6.0 / (2 * hidden) as f64).sqrt();
                    let nx = 4 * hidden * input;
                    for w in &mut params[off..off + nx] {
                        *w = rng.random_range(-sx..sx);
                    }
                    for w in &mut params[off + nx..off + nx + 4 * hidden * hidden] {
                        *w = rng.random_range(-sh..sh);
                    }
                }
            }
        }
        Network { spec, params }
    }

    // ------------------------------------------------------------------
    // Feedforward passes
    // ------------------------------------------------------------------

    /// Forward pass of a dense-only network.
    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        self.forward_vec_cached(x).0
    }

    /// Forward pass keeping the per-layer cache needed by `backward_vec`.
    pub fn forward_vec_cached(&self, x: &[f64]) -> (Vec<f64>, VecCache) {
        assert!(self.spec.is_feedforward(), "vector forward requires a dense-only network");
        assert_eq!(x.len(), self.spec.input_dim(), "input width mismatch");
        let offsets = self.spec.layer_offsets();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.spec.layers.len());
        acts.push(x.to_vec());
        for (l, layer) in self.spec.layers.iter().enumerate() {
            let LayerSpec::Dense { input, output, act } = *layer else { unreachable!() };
            let off = offsets[l];
            let w = &self.params[off..off + output * input];
            let b = &self.params[off + output * input..off + output * (input + 1)];
            let xin = &acts[l];
            let mut z = vec![0.0; output];
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = b[j] + dot(&w[j * input..(j + 1) * input], xin);
            }
            let a = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(z);
            acts.push(a);
        }
        let out = acts[acts.len() - 1].clone();
        (out, VecCache { acts, pre })
    }

    /// Reverse pass of a dense-only network. `d_out` is the loss gradient at
    /// the output; returns parameter gradients and the input gradient.
    pub fn backward_vec(&self, cache: &VecCache, d_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let d_in = self.backward_vec_into(cache, d_out, &mut grads);
        (grads, d_in)
    }

    /// Same as `backward_vec` but accumulates into an existing gradient
    /// buffer, so batches avoid reallocating.
    pub fn backward_vec_into(
        &self,
        cache: &VecCache,
        d_out: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len());
        let offsets = self.spec.layer_offsets();
        let mut delta = d_out.to_vec();
        for (l, layer) in self.spec.layers.iter().enumerate().rev() {
            let LayerSpec::Dense { input, output, act } = *layer else { unreachable!() };
            let off = offsets[l];
            let z = &cache.pre[l];
            let a = &cache.acts[l + 1];
            let xin = &cache.acts[l];
            let mut dz = vec![0.0; output];
            for j in 0..output {
                dz[j] = delta[j] * act.deriv(z[j], a[j]);
            }
            for (j, &dzj) in dz.iter().enumerate() {
                let row = &mut grads[off + j * input..off + (j + 1) * input];
                axpy(dzj, xin, row);
                grads[off + output * input + j] += dzj;
            }
            let w = &self.params[off..off + output * input];
            let mut dx = vec![0.0; input];
            for (j, &dzj) in dz.iter().enumerate() {
                axpy(dzj, &w[j * input..(j + 1) * input], &mut dx);
            }
            delta = dx;
        }
        delta
    }

    /// Gradient of a scalar-output dense network's output with respect to its
    /// input.
    pub fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.spec.output_dim(), 1, "input_gradient needs a scalar output");
        let (_, cache) = self.forward_vec_cached(x);
        let (_, dx) = self.backward_vec(&cache, &[1.0]);
        dx
    }

    /// L1 norm of the input gradient of a scalar-output dense network,
    /// together with its gradient with respect to the parameters.
    ///
    /// Writing `g = d out / d x`, the penalty is `P = sum_j |g_j|`. With the
    /// signs of `g` held fixed, `P` equals the forward-mode directional
    /// derivative of the output along `u = sign(g)`, so its parameter
    /// gradient comes from one reverse sweep over the tangent-augmented
    /// computation. That sweep carries two adjoint streams — one for the
    /// primal activations and one for the tangents — and needs the second
    /// derivative of each activation.
    pub fn input_grad_penalty(&self, x: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(self.spec.output_dim(), 1, "penalty needs a scalar output");
        let (_, cache) = self.forward_vec_cached(x);
        let (_, g) = self.backward_vec(&cache, &[1.0]);
        let u: Vec<f64> = g.iter().map(|&v| v.signum() * f64::from(v != 0.0)).collect();
        let penalty: f64 = g.iter().map(|v| v.abs()).sum();

        let offsets = self.spec.layer_offsets();
        let nl = self.spec.layers.len();

        // Forward tangent stream: xdot through every layer.
        let mut xdots: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
        let mut zdots: Vec<Vec<f64>> = Vec::with_capacity(nl);
        xdots.push(u);
        for (l, layer) in self.spec.layers.iter().enumerate() {
            let LayerSpec::Dense { input, output, act } = *layer else { unreachable!() };
            let off = offsets[l];
            let w = &self.params[off..off + output * input];
            let xd = &xdots[l];
            let mut zd = vec![0.0; output];
            for (j, zdj) in zd.iter_mut().enumerate() {
                *zdj = dot(&w[j * input..(j + 1) * input], xd);
            }
            let z = &cache.pre[l];
            let a = &cache.acts[l + 1];
            let ad: Vec<f64> =
                (0..output).map(|j| act.deriv(z[j], a[j]) * zd[j]).collect();
            zdots.push(zd);
            xdots.push(ad);
        }
        debug_assert!((xdots[nl][0] - penalty).abs() <= 1e-9 * (1.0 + penalty.abs()));

        // Reverse sweep with dual adjoints: `s` against activations,
        // `r` against their tangents.
        let mut grads = vec![0.0; self.params.len()];
        let mut s = vec![0.0; 1];
        let mut r = vec![1.0; 1];
        for (l, layer) in self.spec.layers.iter().enumerate().rev() {
            let LayerSpec::Dense { input, output, act } = *layer else { unreachable!() };
            let off = offsets[l];
            let z = &cache.pre[l];
            let a = &cache.acts[l + 1];
            let zd = &zdots[l];
            let xin = &cache.acts[l];
            let xd = &xdots[l];
            // Through the activation and its tangent equation.
            let mut rz = vec![0.0; output];
            let mut sz = vec![0.0; output];
            for j in 0..output {
                let d1 = act.deriv(z[j], a[j]);
                rz[j] = r[j] * d1;
                sz[j] = r[j] * act.second_deriv(a[j]) * zd[j] + s[j] * d1;
            }
            // Through the affine map and its tangent equation.
            let w = &self.params[off..off + output * input];
            let mut s_prev = vec![0.0; input];
            let mut r_prev = vec![0.0; input];
            for j in 0..output {
                let row = &mut grads[off + j * input..off + (j + 1) * input];
                axpy(sz[j], xin, row);
                axpy(rz[j], xd, row);
                grads[off + output * input + j] += sz[j];
                let wj = &w[j * input..(j + 1) * input];
                axpy(sz[j], wj, &mut s_prev);
                axpy(rz[j], wj, &mut r_prev);
            }
            s = s_prev;
            r = r_prev;
        }
        (penalty, grads)
    }

    // ------------------------------------------------------------------
    // Sequence passes
    // ------------------------------------------------------------------

    /// Run a sequence through the network. Dense layers map each step
    /// independently; LSTM layers carry hidden state forward. `init` supplies
    /// an `(h0, c0)` pair per LSTM layer in order (zeros when `None`).
    /// Returns the per-step outputs of the last layer.
    pub fn forward_seq(
        &self,
        inputs: &[Vec<f64>],
        init: Option<&[(Vec<f64>, Vec<f64>)]>,
    ) -> (Vec<Vec<f64>>, SeqCache) {
        assert!(!inputs.is_empty(), "empty sequence");
        assert_eq!(inputs[0].len(), self.spec.input_dim(), "input width mismatch");
        if let Some(init) = init {
            assert_eq!(init.len(), self.spec.lstm_layer_count(), "one (h0, c0) per LSTM layer");
        }
        let steps = inputs.len();
        let offsets = self.spec.layer_offsets();
        let mut stream: Vec<Vec<f64>> = inputs.to_vec();
        let mut layers: Vec<LayerSeqCache> = Vec::with_capacity(self.spec.layers.len());
        let mut lstm_seen = 0;
        for (l, layer) in self.spec.layers.iter().enumerate() {
            let off = offsets[l];
            match *layer {
                LayerSpec::Dense { input, output, act } => {
                    let w = &self.params[off..off + output * input];
                    let b = &self.params[off + output * input..off + output * (input + 1)];
                    let mut pre = Vec::with_capacity(steps);
                    let mut post = Vec::with_capacity(steps);
                    for x in &stream {
                        let mut z = vec![0.0; output];
                        for (j, zj) in z.iter_mut().enumerate() {
                            *zj = b[j] + dot(&w[j * input..(j + 1) * input], x);
                        }
                        let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
                        pre.push(z);
                        post.push(a);
                    }
                    layers.push(LayerSeqCache::Dense { xs: stream, pre });
                    stream = post;
                }
                LayerSpec::Lstm { input, hidden } => {
                    let n = input;
                    let h = hidden;
                    let wx = &self.params[off..off + 4 * h * n];
                    let wh = &self.params[off + 4 * h * n..off + 4 * h * (n + h)];
                    let b = &self.params[off + 4 * h * (n + h)..off + 4 * h * (n + h + 1)];
                    let (h0, c0) = match init {
                        Some(init) => {
                            let (h0, c0) = &init[lstm_seen];
                            assert_eq!(h0.len(), h, "h0 width mismatch");
                            assert_eq!(c0.len(), h, "c0 width mismatch");
                            (h0.clone(), c0.clone())
                        }
                        None => (vec![0.0; h], vec![0.0; h]),
                    };
                    lstm_seen += 1;
                    let mut cache = LstmSeqCache {
                        xs: stream,
                        h0,
                        c0,
                        gi: Vec::with_capacity(steps),
                        gf: Vec::with_capacity(steps),
                        gg: Vec::with_capacity(steps),
                        go: Vec::with_capacity(steps),
                        c: Vec::with_capacity(steps),
                        tc: Vec::with_capacity(steps),
                        h: Vec::with_capacity(steps),
                    };
                    let mut hprev = cache.h0.clone();
                    let mut cprev = cache.c0.clone();
                    for t in 0..steps {
                        let x = &cache.xs[t];
                        let mut z = b.to_vec();
                        for (rix, zr) in z.iter_mut().enumerate() {
                            *zr += dot(&wx[rix * n..(rix + 1) * n], x)
                                + dot(&wh[rix * h..(rix + 1) * h], &hprev);
                        }
                        let mut gi = vec![0.0; h];
                        let mut gf = vec![0.0; h];
                        let mut gg = vec![0.0; h];
                        let mut go = vec![0.0; h];
                        let mut ct = vec![0.0; h];
                        let mut tct = vec![0.0; h];
                        let mut ht = vec![0.0; h];
                        for j in 0..h {
                            gi[j] = sigmoid(z[j]);
                            gf[j] = sigmoid(z[h + j]);
                            gg[j] = z[2 * h + j].tanh();
                            go[j] = sigmoid(z[3 * h + j]);
                            ct[j] = gf[j] * cprev[j] + gi[j] * gg[j];
                            tct[j] = ct[j].tanh();
                            ht[j] = go[j] * tct[j];
                        }
                        hprev = ht.clone();
                        cprev = ct.clone();
                        cache.gi.push(gi);
                        cache.gf.push(gf);
                        cache.gg.push(gg);
                        cache.go.push(go);
                        cache.c.push(ct);
                        cache.tc.push(tct);
                        cache.h.push(ht);
                    }
                    stream = cache.h.clone();
                    layers.push(LayerSeqCache::Lstm(Box::new(cache)));
                }
            }
        }
        (stream, SeqCache { layers })
    }

    /// Reverse pass for a sequence network. `d_out[t]` is the loss gradient
    /// at the last layer's step-`t` output (zero vectors are fine). Returns
    /// parameter gradients, per-step input gradients, and `(dh0, dc0)` per
    /// LSTM layer in order.
    pub fn backward_seq(&self, cache: &SeqCache, d_out: &[Vec<f64>]) -> SeqGrads {
        let steps = d_out.len();
        let offsets = self.spec.layer_offsets();
        let mut grads = vec![0.0; self.params.len()];
        let mut d_stream: Vec<Vec<f64>> = d_out.to_vec();
        let mut d_init_rev: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for (l, layer) in self.spec.layers.iter().enumerate().rev() {
            let off = offsets[l];
            match (*layer, &cache.layers[l]) {
                (LayerSpec::Dense { input, output, act }, LayerSeqCache::Dense { xs, pre }) => {
                    let w = &self.params[off..off + output * input];
                    let mut d_prev = vec![vec![0.0; input]; steps];
                    for t in 0..steps {
                        let z = &pre[t];
                        let mut dz = vec![0.0; output];
                        for j in 0..output {
                            dz[j] = d_stream[t][j] * act.deriv(z[j], act.apply(z[j]));
                        }
                        for (j, &dzj) in dz.iter().enumerate() {
                            let row = &mut grads[off + j * input..off + (j + 1) * input];
                            axpy(dzj, &xs[t], row);
                            grads[off + output * input + j] += dzj;
                            axpy(dzj, &w[j * input..(j + 1) * input], &mut d_prev[t]);
                        }
                    }
                    d_stream = d_prev;
                }
                (LayerSpec::Lstm { input, hidden }, LayerSeqCache::Lstm(lc)) => {
                    let n = input;
                    let h = hidden;
                    let wx = &self.params[off..off + 4 * h * n];
                    let wh = &self.params[off + 4 * h * n..off + 4 * h * (n + h)];
                    let (gwx, rest) = grads[off..off + 4 * h * (n + h + 1)].split_at_mut(4 * h * n);
                    let (gwh, gb) = rest.split_at_mut(4 * h * h);
                    let mut d_prev = vec![vec![0.0; n]; steps];
                    let mut dh_next = vec![0.0; h];
                    let mut dc_next = vec![0.0; h];
                    for t in (0..steps).rev() {
                        let cprev = if t == 0 { &lc.c0 } else { &lc.c[t - 1] };
                        let hprev = if t == 0 { &lc.h0 } else { &lc.h[t - 1] };
                        let mut dz = vec![0.0; 4 * h];
                        let mut dc_prev = vec![0.0; h];
                        for j in 0..h {
                            let dh = d_stream[t][j] + dh_next[j];
                            let go = lc.go[t][j];
                            let tc = lc.tc[t][j];
                            let d_o = dh * tc;
                            let dc = dc_next[j] + dh * go * (1.0 - tc * tc);
                            let gi = lc.gi[t][j];
                            let gf = lc.gf[t][j];
                            let gg = lc.gg[t][j];
                            dz[j] = dc * gg * gi * (1.0 - gi);
                            dz[h + j] = dc * cprev[j] * gf * (1.0 - gf);
                            dz[2 * h + j] = dc * gi * (1.0 - gg * gg);
                            dz[3 * h + j] = d_o * go * (1.0 - go);
                            dc_prev[j] = dc * gf;
                        }
                        for (rix, &dzr) in dz.iter().enumerate() {
                            if dzr == 0.0 {
                                continue;
                            }
                            axpy(dzr, &lc.xs[t], &mut gwx[rix * n..(rix + 1) * n]);
                            axpy(dzr, hprev, &mut gwh[rix * h..(rix + 1) * h]);
                            gb[rix] += dzr;
                            axpy(dzr, &wx[rix * n..(rix + 1) * n], &mut d_prev[t]);
                        }
                        let mut dh_prev = vec![0.0; h];
                        for (rix, &dzr) in dz.iter().enumerate() {
                            if dzr != 0.0 {
                                axpy(dzr, &wh[rix * h..(rix + 1) * h], &mut dh_prev);
                            }
                        }
                        dh_next = dh_prev;
                        dc_next = dc_prev;
                    }
                    d_init_rev.push((dh_next, dc_next));
                    d_stream = d_prev;
                }
                _ => unreachable!("cache does not match spec"),
            }
        }
        d_init_rev.reverse();
        SeqGrads { params: grads, d_inputs: d_stream, d_init: d_init_rev }
    }
}

/// Cache for `backward_vec`: `acts[0]` is the input, `acts[l + 1]` the
/// activation of layer `l`, `pre[l]` its pre-activation.
pub struct VecCache {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl VecCache {
    pub fn output(&self) -> &[f64] {
        &self.acts[self.acts.len() - 1]
    }
}

struct LstmSeqCache {
    xs: Vec<Vec<f64>>,
    h0: Vec<f64>,
    c0: Vec<f64>,
    gi: Vec<Vec<f64>>,
    gf: Vec<Vec<f64>>,
    gg: Vec<Vec<f64>>,
    go: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    tc: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

enum LayerSeqCache {
    Dense { xs: Vec<Vec<f64>>, pre: Vec<Vec<f64>> },
    Lstm(Box<LstmSeqCache>),
}

/// Per-layer caches from `forward_seq`.
pub struct SeqCache {
    layers: Vec<LayerSeqCache>,
}

impl SeqCache {
    /// Hidden states of the `k`-th LSTM layer at every step. With a single
    /// unidirectional LSTM layer, step `t` is the encoding of the prefix
    /// `0..=t`, so one pass yields every prefix encoding.
    pub fn lstm_hidden_states(&self, k: usize) -> &[Vec<f64>] {
        let mut seen = 0;
        for layer in &self.layers {
            if let LayerSeqCache::Lstm(lc) = layer {
                if seen == k {
                    return &lc.h;
                }
                seen += 1;
            }
        }
        panic!("no LSTM layer {k}");
    }
}

/// Result of `backward_seq`.
pub struct SeqGrads {
    pub params: Vec<f64>,
    pub d_inputs: Vec<Vec<f64>>,
    /// `(dh0, dc0)` per LSTM layer, in layer order.
    pub d_init: Vec<(Vec<f64>, Vec<f64>)>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

// ----------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ----------------------------------------------------------------------
// Losses and related helpers
// ----------------------------------------------------------------------

/// Mean squared error over all elements; returns the loss and its gradient
/// with respect to `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    (loss / n, grad)
}

/// Binary cross-entropy on a logit, stable for large |z|; returns the loss
/// and d loss / d z.
pub fn bce_with_logit(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

/// Softmax with max subtraction.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

// ----------------------------------------------------------------------
// Finite-difference checking
// ----------------------------------------------------------------------

/// Compare an analytic gradient against central differences of `loss_fn`.
/// Returns the worst relative error
/// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)` over all coordinates.
pub fn grad_check<F>(params: &mut [f64], analytic: &[f64], eps: f64, mut loss_fn: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let saved = params[i];
        params[i] = saved + eps;
        let up = loss_fn(params);
        params[i] = saved - eps;
        let down = loss_fn(params);
        params[i] = saved;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn dense(input: usize, output: usize, act: Activation) -> LayerSpec {
        LayerSpec::Dense { input, output, act }
    }

    #[test]
    fn dense_forward_matches_hand_computation() {
        // 2 -> 2 (tanh) -> 1 (linear), weights set by hand.
        // z1 = (0.4*1 + -0.3*2 + 0.1, 0.4*-1 + -0.3*0.5 - 0.2) = (-0.1, -0.75)
        // y  = 0.3*tanh(-0.1) - 0.7*tanh(-0.75) + 0.05
        let spec = NetworkSpec::new(vec![
            dense(2, 2, Activation::Tanh),
            dense(2, 1, Activation::Linear),
        ]);
        let params = vec![
            1.0, 2.0, -1.0, 0.5, // W1 rows
            0.1, -0.2, // b1
            0.3, -0.7, // W2
            0.05, // b2
        ];
        let net = Network { spec, params };
        let y = net.forward_vec(&[0.4, -0.3]);
        assert_eq!(y.len(), 1);
        assert!((y[0] - 0.464_703_868_283_614_4).abs() < 1e-12, "got {}", y[0]);
    }

    #[test]
    fn lstm_single_step_matches_scalar_recurrence() {
        // One unit, one input, one step from zero state; the engine's matrix
        // plumbing must reproduce the scalar LSTM equations exactly.
        let spec = NetworkSpec::new(vec![LayerSpec::Lstm { input: 1, hidden: 1 }]);
        // Layout: Wx rows i,f,g,o then Wh rows then biases.
        let params = vec![0.6, 0.4, 1.0, 0.8, 0.5, 0.5, 0.5, 0.5, 0.1, 0.2, -0.1, 0.0];
        let net = Network { spec, params };
        let (out, _) = net.forward_seq(&[vec![0.5]], None);

        let zi = 0.6 * 0.5 + 0.1;
        let zf = 0.4 * 0.5 + 0.2;
        let zg: f64 = 1.0 * 0.5 - 0.1;
        let zo = 0.8 * 0.5;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = sig(zf) * 0.0 + sig(zi) * zg.tanh();
        let expected = sig(zo) * c.tanh();
        assert!((out[0][0] - expected).abs() < 1e-14, "got {} want {expected}", out[0][0]);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let spec = NetworkSpec::new(vec![
            dense(3, 5, Activation::Tanh),
            dense(5, 4, Activation::Sigmoid),
            dense(4, 2, Activation::Linear),
        ]);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut net = Network::init(spec.clone(), &mut rng);
        let x = [0.3, -0.8, 0.5];
        let target = [0.25, -0.5];

        let (out, cache) = net.forward_vec_cached(&x);
        let (_, d_out) = mse(&out, &target);
        let (grads, _) = net.backward_vec(&cache, &d_out);

        let mut params = net.params.clone();
        let worst = grad_check(&mut params, &grads, 1e-5, |p| {
            net.params.copy_from_slice(p);
            let out = net.forward_vec(&x);
            mse(&out, &target).0
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn dense_input_gradient_matches_finite_differences() {
        let spec = NetworkSpec::new(vec![
            dense(4, 6, Activation::Tanh),
            dense(6, 1, Activation::Linear),
        ]);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let net = Network::init(spec, &mut rng);
        let x = vec![0.2, -0.4, 0.9, 0.1];
        let g = net.input_gradient(&x);
        let eps = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += eps;
            let up = net.forward_vec(&xp)[0];
            xp[j] -= 2.0 * eps;
            let down = net.forward_vec(&xp)[0];
            let numeric = (up - down) / (2.0 * eps);
            assert!((g[j] - numeric).abs() < 1e-7, "coord {j}: {} vs {numeric}", g[j]);
        }
    }

    #[test]
    fn lstm_sequence_gradients_match_finite_differences() {
        let spec = NetworkSpec::new(vec![
            LayerSpec::Lstm { input: 3, hidden: 4 },
            dense(4, 2, Activation::Linear),
        ]);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut net = Network::init(spec, &mut rng);
        let inputs: Vec<Vec<f64>> =
            (0..5).map(|t| (0..3).map(|j| ((t * 3 + j) as f64 * 0.37).sin()).collect()).collect();
        let targets: Vec<Vec<f64>> =
            (0..5).map(|t| vec![0.2 * t as f64 - 0.3, 0.1]).collect();

        let seq_loss = |net: &Network| {
            let (outs, _) = net.forward_seq(&inputs, None);
            let mut total = 0.0;
            for (o, t) in outs.iter().zip(&targets) {
                total += mse(o, t).0;
            }
            total
        };

        let (outs, cache) = net.forward_seq(&inputs, None);
        let d_out: Vec<Vec<f64>> =
            outs.iter().zip(&targets).map(|(o, t)| mse(o, t).1).collect();
        let grads = net.backward_seq(&cache, &d_out).params;

        let mut params = net.params.clone();
        let worst = grad_check(&mut params, &grads, 1e-5, |p| {
            net.params.copy_from_slice(p);
            seq_loss(&net)
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn initial_state_gradients_match_finite_differences() {
        let spec = NetworkSpec::new(vec![
            LayerSpec::Lstm { input: 2, hidden: 3 },
            dense(3, 2, Activation::Tanh),
        ]);
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let net = Network::init(spec, &mut rng);
        let inputs: Vec<Vec<f64>> =
            (0..4).map(|t| vec![(t as f64 * 0.61).cos(), 0.25 * t as f64 - 0.4]).collect();
        let h0 = vec![0.3, -0.2, 0.5];
        let c0 = vec![-0.1, 0.4, 0.2];
        let target = vec![0.1, -0.6];

        // Loss reads only the final step, mirroring how a downstream decoder
        // feeds gradient back into an encoder's final hidden state.
        let loss_with = |h0: &[f64], c0: &[f64]| {
            let init = [(h0.to_vec(), c0.to_vec())];
            let (outs, _) = net.forward_seq(&inputs, Some(&init));
            mse(outs.last().unwrap(), &target).0
        };

        let init = [(h0.clone(), c0.clone())];
        let (outs, cache) = net.forward_seq(&inputs, Some(&init));
        let mut d_out = vec![vec![0.0; 2]; inputs.len()];
        *d_out.last_mut().unwrap() = mse(outs.last().unwrap(), &target).1;
        let grads = net.backward_seq(&cache, &d_out);
        let (dh0, dc0) = &grads.d_init[0];

        let eps = 1e-6;
        for j in 0..3 {
            for (vecref, analytic) in [(&h0, dh0), (&c0, dc0)] {
                let mut up = vecref.clone();
                up[j] += eps;
                let mut down = vecref.clone();
                down[j] -= eps;
                let (lu, ld) = if std::ptr::eq(vecref, &h0) {
                    (loss_with(&up, &c0), loss_with(&down, &c0))
                } else {
                    (loss_with(&h0, &up), loss_with(&h0, &down))
                };
                let numeric = (lu - ld) / (2.0 * eps);
                assert!(
                    (analytic[j] - numeric).abs() < 1e-7,
                    "coord {j}: {} vs {numeric}",
                    analytic[j]
                );
            }
        }
    }

    #[test]
    fn prefix_hidden_states_equal_separate_prefix_passes() {
        let spec = NetworkSpec::new(vec![LayerSpec::Lstm { input: 3, hidden: 5 }]);
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let net = Network::init(spec, &mut rng);
        let inputs: Vec<Vec<f64>> =
            (0..6).map(|t| (0..3).map(|j| ((t + j) as f64).sin()).collect()).collect();
        let (full, cache) = net.forward_seq(&inputs, None);
        let hs = cache.lstm_hidden_states(0);
        for t in 0..inputs.len() {
            let (prefix, _) = net.forward_seq(&inputs[..=t], None);
            let last = prefix.last().unwrap();
            for j in 0..5 {
                assert!((hs[t][j] - last[j]).abs() < 1e-15);
                assert!((full[t][j] - last[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn input_grad_penalty_gradients_match_finite_differences() {
        let spec = NetworkSpec::new(vec![
            dense(3, 5, Activation::Tanh),
            dense(5, 4, Activation::Sigmoid),
            dense(4, 1, Activation::Linear),
        ]);
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut net = Network::init(spec, &mut rng);
        let x = vec![0.45, -0.7, 0.2];

        // The penalty is differentiable only where no input-gradient
        // coordinate crosses zero, so pin that precondition first.
        let g = net.input_gradient(&x);
        let min_abs = g.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        assert!(min_abs > 1e-3, "test point too close to a kink: {min_abs}");

        let (penalty, grads) = net.input_grad_penalty(&x);
        let direct: f64 = g.iter().map(|v| v.abs()).sum();
        assert!((penalty - direct).abs() < 1e-12);

        let mut params = net.params.clone();
        let worst = grad_check(&mut params, &grads, 1e-5, |p| {
            net.params.copy_from_slice(p);
            net.input_gradient(&x).iter().map(|v| v.abs()).sum()
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut opt = Adam::new(1, 0.1);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]);
        let mhat = 0.1 / (1.0 - 0.9);
        let vhat: f64 = 0.001 / (1.0 - 0.999);
        let expected = -0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "got {} want {expected}", p[0]);
    }

    #[test]
    fn bce_with_logit_matches_frozen_values() {
        let (l, g) = bce_with_logit(2.0, 1.0);
        assert!((l - 0.126_928_011_042_972_6).abs() < 1e-14);
        assert!((g - (-0.119_202_922_022_117_58)).abs() < 1e-14);
        let (l, g) = bce_with_logit(-3.0, 0.0);
        assert!((l - 0.048_587_351_573_742_08).abs() < 1e-14);
        assert!((g - 0.047_425_873_177_566_78).abs() < 1e-14);
        // Stability at extreme logits.
        let (l, _) = bce_with_logit(800.0, 0.0);
        assert!(l.is_finite() && (l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_stable_and_shift_invariant() {
        let p = softmax(&[1000.0, 1000.0, 999.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[100.3, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = NetworkSpec::new(vec![
            dense(4, 3, Activation::Tanh),
            LayerSpec::Lstm { input: 3, hidden: 2 },
        ]);
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let a = Network::init(spec.clone(), &mut r1);
        let b = Network::init(spec.clone(), &mut r2);
        assert_eq!(a.params, b.params);

        let offsets = a.spec.layer_offsets();
        // Dense layer: weights bounded by sqrt(6/7), bias zero.
        let s = (6.0f64 / 7.0).sqrt();
        for &w in &a.params[offsets[0]..offsets[0] + 12] {
            assert!(w.abs() < s);
        }
        for &bv in &a.params[offsets[0] + 12..offsets[0] + 15] {
            assert_eq!(bv, 0.0);
        }
        // LSTM biases zero.
        let off = offsets[1];
        let bias_start = off + 4 * 2 * (3 + 2);
        for &bv in &a.params[bias_start..bias_start + 8] {
            assert_eq!(bv, 0.0);
        }
    }

    #[test]
    fn spec_validation_rejects_dimension_mismatch() {
        let spec = NetworkSpec {
            layers: vec![dense(3, 4, Activation::Tanh), dense(5, 2, Activation::Linear)],
        };
        assert!(spec.validate().is_err());
    }
}
