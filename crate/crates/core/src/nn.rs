//! Minimal dense neural network with analytic backpropagation.
//!
//! An [`MlpNet`] is a stack of affine layers with tanh hidden activations and
//! a configurable output head (identity, softmax, or sigmoid). Everything is
//! `f64` and hand-differentiated; gradients are accumulated into a
//! [`GradientTape`] and applied with Adam via [`optimizer_step`].
//!
//! Weights are row-major with shape `(out_dim, in_dim)` per layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Hidden-layer activation. Only tanh is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HiddenActivation {
    Tanh,
}

/// Output-head activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Softmax,
    Sigmoid,
}

/// Cached intermediates from a forward pass, needed by `backward`.
#[derive(Debug, Clone)]
struct ForwardCache {
    /// Post-activation values per layer, index 0 is the input itself.
    post: Vec<Vec<f64>>,
    /// Output of the network after the output activation.
    output: Vec<f64>,
}

/// Dense feed-forward network: tanh hidden layers plus an output head.
#[derive(Debug, Clone)]
pub struct MlpNet {
    layer_dims: Vec<usize>,
    /// weights[l] has shape (layer_dims[l+1], layer_dims[l]), row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
    cache: Option<ForwardCache>,
}

fn xavier_limit(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl MlpNet {
    /// Builds a network with scaled-uniform init.
    ///
    /// `output_gain` scales the output layer's init limit; policy heads use a
    /// small gain (0.01) so initial action distributions stay near uniform.
    pub fn new(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        output_gain: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(
                "network needs at least an input and an output layer".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("layer dims must be positive".into()));
        }
        let n_layers = layer_dims.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let gain = if l == n_layers - 1 { output_gain } else { 1.0 };
            let limit = xavier_limit(fan_in, fan_out, gain);
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpNet {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation: HiddenActivation::Tanh,
            output_activation,
            cache: None,
        })
    }

    /// Builds a network with all parameters zero. Used in tests and as a
    /// deterministic placeholder.
    pub fn zeros(layer_dims: &[usize], output_activation: OutputActivation) -> Result<Self> {
        let mut rng = crate::rng::stream(0);
        let mut net = Self::new(layer_dims, output_activation, 0.0, &mut rng)?;
        for w in &mut net.weights {
            w.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Mutable access for tests that need hand-crafted parameters.
    pub fn params_mut(&mut self) -> (&mut Vec<Vec<f64>>, &mut Vec<Vec<f64>>) {
        (&mut self.weights, &mut self.biases)
    }

    pub fn params(&self) -> (&Vec<Vec<f64>>, &Vec<Vec<f64>>) {
        (&self.weights, &self.biases)
    }

    /// FNV-1a fingerprint over the exact bit patterns of all parameters.
    /// Two nets compare equal iff their parameters are bit-identical.
    pub fn param_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for (w, b) in self.weights.iter().zip(&self.biases) {
            w.iter().for_each(|&x| eat(x));
            b.iter().for_each(|&x| eat(x));
        }
        h
    }

    fn apply_output_activation(&self, z: &[f64]) -> Vec<f64> {
        match self.output_activation {
            OutputActivation::Identity => z.to_vec(),
            OutputActivation::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
            OutputActivation::Softmax => softmax(z),
        }
    }

    fn forward_inner(&self, input: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let n_layers = self.n_layers();
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        post.push(input.to_vec());
        let mut x = input.to_vec();
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.weights[l];
            let b = &self.biases[l];
            let mut z = vec![0.0; fan_out];
            for (j, zj) in z.iter_mut().enumerate() {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let mut s = b[j];
                for (wi, xi) in row.iter().zip(&x) {
                    s += wi * xi;
                }
                *zj = s;
            }
            let a = if l == n_layers - 1 {
                self.apply_output_activation(&z)
            } else {
                z.iter().map(|&v| v.tanh()).collect()
            };
            post.push(a.clone());
            x = a;
        }
        let output = post.last().unwrap().clone();
        Ok((post, output))
    }

    /// Forward pass without caching; safe to call from shared references.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_inner(input).map(|(_, out)| out)
    }

    /// Forward pass that caches activations for a subsequent [`MlpNet::backward`].
    pub fn forward_cached(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        let (post, output) = self.forward_inner(input)?;
        self.cache = Some(ForwardCache {
            post,
            output: output.clone(),
        });
        Ok(output)
    }

    /// Backpropagates `upstream` = dLoss/d(output) through the cached forward
    /// pass, accumulating parameter gradients into `tape`.
    ///
    /// The cache is consumed: a second call without a fresh `forward_cached`
    /// returns [`Error::MissingForwardCache`].
    pub fn backward(&mut self, upstream: &[f64], tape: &mut GradientTape) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::MissingForwardCache)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        tape.check_shapes(self)?;
        let n_layers = self.n_layers();

        // Gradient w.r.t. the output-layer pre-activation.
        let mut delta: Vec<f64> = match self.output_activation {
            OutputActivation::Identity => upstream.to_vec(),
            OutputActivation::Sigmoid => {
                let y = &cache.output;
                upstream
                    .iter()
                    .zip(y)
                    .map(|(&u, &yi)| u * yi * (1.0 - yi))
                    .collect()
            }
            OutputActivation::Softmax => {
                // dz_i = p_i * (u_i - sum_j u_j p_j)
                let p = &cache.output;
                let dot: f64 = upstream.iter().zip(p).map(|(&u, &pi)| u * pi).sum();
                upstream
                    .iter()
                    .zip(p)
                    .map(|(&u, &pi)| pi * (u - dot))
                    .collect()
            }
        };

        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            if l < n_layers - 1 {
                // Hidden tanh: post[l+1] holds tanh(z).
                let a = &cache.post[l + 1];
                for (d, &ai) in delta.iter_mut().zip(a) {
                    *d *= 1.0 - ai * ai;
                }
            }
            let a_prev = &cache.post[l];
            let dw = &mut tape.d_weights[l];
            let db = &mut tape.d_biases[l];
            for j in 0..fan_out {
                db[j] += delta[j];
                let row = &mut dw[j * fan_in..(j + 1) * fan_in];
                for (g, &ai) in row.iter_mut().zip(a_prev) {
                    *g += delta[j] * ai;
                }
            }
            if l > 0 {
                let w = &self.weights[l];
                let mut prev = vec![0.0; fan_in];
                for j in 0..fan_out {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    for (p, &wi) in prev.iter_mut().zip(row) {
                        *p += delta[j] * wi;
                    }
                }
                delta = prev;
            }
        }
        tape.accum_count += 1;
        Ok(())
    }

    /// Serializes the network to a versioned JSON checkpoint.
    ///
    /// JSON `f64` round-trips are exact, so save/load is bit-exact.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let blob = Checkpoint {
            version: CHECKPOINT_VERSION,
            layer_dims: self.layer_dims.clone(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        };
        let json = serde_json::to_string(&blob)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let blob: Checkpoint = serde_json::from_str(&json)?;
        if blob.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                blob.version
            )));
        }
        let n_layers = blob.layer_dims.len().saturating_sub(1);
        if blob.weights.len() != n_layers || blob.biases.len() != n_layers {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        for l in 0..n_layers {
            let (fan_in, fan_out) = (blob.layer_dims[l], blob.layer_dims[l + 1]);
            if blob.weights[l].len() != fan_in * fan_out || blob.biases[l].len() != fan_out {
                return Err(Error::Checkpoint(format!("bad shapes in layer {l}")));
            }
        }
        Ok(MlpNet {
            layer_dims: blob.layer_dims,
            weights: blob.weights,
            biases: blob.biases,
            hidden_activation: blob.hidden_activation,
            output_activation: blob.output_activation,
            cache: None,
        })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    layer_dims: Vec<usize>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Per-parameter gradient buffers mirroring an [`MlpNet`]'s shapes.
#[derive(Debug, Clone)]
pub struct GradientTape {
    d_weights: Vec<Vec<f64>>,
    d_biases: Vec<Vec<f64>>,
    accum_count: usize,
}

impl GradientTape {
    pub fn for_net(net: &MlpNet) -> Self {
        GradientTape {
            d_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            accum_count: 0,
        }
    }

    fn check_shapes(&self, net: &MlpNet) -> Result<()> {
        let ok = self.d_weights.len() == net.weights.len()
            && self
                .d_weights
                .iter()
                .zip(&net.weights)
                .all(|(g, w)| g.len() == w.len())
            && self
                .d_biases
                .iter()
                .zip(&net.biases)
                .all(|(g, b)| g.len() == b.len());
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: net.weights.len(),
                got: self.d_weights.len(),
            })
        }
    }

    pub fn zero(&mut self) {
        for g in self.d_weights.iter_mut().chain(self.d_biases.iter_mut()) {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        self.accum_count = 0;
    }

    pub fn accumulation_count(&self) -> usize {
        self.accum_count
    }

    /// Scales all accumulated gradients, e.g. by 1/batch_size.
    pub fn scale(&mut self, factor: f64) {
        for g in self.d_weights.iter_mut().chain(self.d_biases.iter_mut()) {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn gradients(&self) -> (&Vec<Vec<f64>>, &Vec<Vec<f64>>) {
        (&self.d_weights, &self.d_biases)
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_num: f64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    step_count: u64,
}

impl OptimizerState {
    pub fn adam(net: &MlpNet, learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps_num: 1e-8,
            m_w: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_w: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_b: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step using `tape`'s accumulated gradients, then zeroes
/// the tape and increments the step counter.
///
/// Rejects non-finite gradients (naming the layer) before touching any
/// parameter, and verifies parameters stay finite afterwards.
pub fn optimizer_step(
    net: &mut MlpNet,
    tape: &mut GradientTape,
    opt: &mut OptimizerState,
) -> Result<()> {
    tape.check_shapes(net)?;
    for (l, (dw, db)) in tape.d_weights.iter().zip(&tape.d_biases).enumerate() {
        if dw.iter().chain(db.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: l });
        }
    }
    opt.step_count += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step_count as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step_count as i32);
    for l in 0..net.weights.len() {
        adam_update(
            &mut net.weights[l],
            &tape.d_weights[l],
            &mut opt.m_w[l],
            &mut opt.v_w[l],
            opt.learning_rate,
            opt.beta1,
            opt.beta2,
            opt.eps_num,
            bc1,
            bc2,
        );
        adam_update(
            &mut net.biases[l],
            &tape.d_biases[l],
            &mut opt.m_b[l],
            &mut opt.v_b[l],
            opt.learning_rate,
            opt.beta1,
            opt.beta2,
            opt.eps_num,
            bc1,
            bc2,
        );
    }
    for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
        if w.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteParameter { layer: l });
        }
    }
    tape.zero();
    Ok(())
}
