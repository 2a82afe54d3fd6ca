//! A small fully connected ε-prediction network with hand-written backprop.
//!
//! Hidden layers use `tanh`; the output layer is linear. Parameters are laid
//! out layer by layer, each layer as its row-major `out × in` weight matrix
//! followed by its bias vector. The checkpoint format relies on this order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{score_from_eps, ScoreField};
use crate::error::{check_dim, Error, Result};
use crate::exec::SimRng;
use crate::mixture::{ConditionLabel, ConditionedMixtureFamily};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Layer activations from a forward pass; `activations[0]` is the input and
/// the last entry is the network output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache has an input layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl MlpGradients {
    /// Parameter gradients in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// Gaussian init scaled by `1/√fan_in`; biases start at zero.
    pub fn new(widths: &[usize], rng: &mut SimRng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_params(widths: &[usize], params: &[f64]) -> Result<Self> {
        let mut m = Self {
            widths: widths.to_vec(),
            weights: widths.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect(),
            biases: widths.windows(2).map(|p| vec![0.0; p[1]]).collect(),
        };
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        m.set_params(params)?;
        Ok(m)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.n_params(), params.len())?;
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&params[off..off + nw]);
            off += nw;
            b.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.n_layers() - 1;
        self.weights[last].iter_mut().for_each(|w| *w = 0.0);
        self.biases[last].iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Result<MlpCache> {
        check_dim(self.input_dim(), input.len())?;
        let mut activations = Vec::with_capacity(self.n_layers() + 1);
        activations.push(input.to_vec());
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let a = &activations[l];
            let w = &self.weights[l];
            let hidden = l + 1 < self.n_layers();
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let pre = self.biases[l][o] + crate::linalg::dot(row, a);
                    if hidden {
                        pre.tanh()
                    } else {
                        pre
                    }
                })
                .collect();
            activations.push(z);
        }
        Ok(MlpCache { activations })
    }

    /// Backpropagates `d_out = ∂loss/∂output` through a cached forward pass.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64]) -> Result<MlpGradients> {
        check_dim(self.output_dim(), d_out.len())?;
        let n = self.n_layers();
        let mut d_weights = vec![Vec::new(); n];
        let mut d_biases = vec![Vec::new(); n];
        // gradient w.r.t. the pre-activation of layer l
        let mut delta = d_out.to_vec();
        for l in (0..n).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let a_in = &cache.activations[l];
            let mut dw = vec![0.0; fan_in * fan_out];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    dw[o * fan_in + i] = delta[o] * a_in[i];
                }
            }
            let mut d_in = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                for (di, w) in d_in.iter_mut().zip(row) {
                    *di += d * w;
                }
            }
            d_weights[l] = dw;
            d_biases[l] = delta;
            if l > 0 {
                // tanh'(z) = 1 − a²
                for (di, a) in d_in.iter_mut().zip(a_in) {
                    *di *= 1.0 - a * a;
                }
            }
            delta = d_in;
        }
        Ok(MlpGradients {
            weights: d_weights,
            biases: d_biases,
            input: delta,
        })
    }
}

/// Sinusoidal embedding of the step index over normalized time `τ = t/T`,
/// with geometric frequencies from 1 to 100 rad per unit `τ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub frequencies: usize,
    pub steps: usize,
}

impl TimeEmbedding {
    pub const DEFAULT_FREQUENCIES: usize = 16;

    pub fn width(&self) -> usize {
        2 * self.frequencies
    }

    pub fn encode_into(&self, t: usize, out: &mut Vec<f64>) {
        let tau = t as f64 / self.steps as f64;
        let denom = (self.frequencies.max(2) - 1) as f64;
        for k in 0..self.frequencies {
            let w = 100f64.powf(k as f64 / denom);
            out.push((w * tau).sin());
            out.push((w * tau).cos());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub p_uncond: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            p_uncond: 0.1,
            hidden: vec![32, 32],
        }
    }
}

/// One ε-regression target: `x_t = √ᾱ_t·x_0 + √β̄_t·ε` under condition `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub condition: ConditionLabel,
    pub eps: Vec<f64>,
}

/// Conditional ε-predictor `ε_θ(x, t, c)` with an explicit `∅` input slot.
///
/// Input encoding: `x ‖ embed(t) ‖ one_hot(c)` where the one-hot has
/// `n_classes + 1` slots and the last one stands for `∅`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreModel {
    mlp: Mlp,
    data_dim: usize,
    n_classes: usize,
    embedding: TimeEmbedding,
    seed: u64,
    p_uncond: f64,
    velocity: Vec<f64>,
}

impl MlpScoreModel {
    /// Fresh model; the output layer starts at zero so the initial prediction is 0.
    pub fn new(
        data_dim: usize,
        n_classes: usize,
        hidden: &[usize],
        steps: usize,
        seed: u64,
        p_uncond: f64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        if !(0.0..=1.0).contains(&p_uncond) {
            return Err(Error::InvalidArgument(format!("p_uncond must lie in [0, 1], got {p_uncond}")));
        }
        let embedding = TimeEmbedding {
            frequencies: TimeEmbedding::DEFAULT_FREQUENCIES,
            steps,
        };
        let mut widths = vec![data_dim + embedding.width() + n_classes + 1];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let mut rng = SimRng::seed_from_u64(crate::exec::derive_seed(seed, crate::exec::Stream::Init, 0));
        let mut mlp = Mlp::new(&widths, &mut rng)?;
        mlp.zero_output_layer();
        Self::from_parts(mlp, data_dim, n_classes, embedding, seed, p_uncond)
    }

    pub fn from_parts(
        mlp: Mlp,
        data_dim: usize,
        n_classes: usize,
        embedding: TimeEmbedding,
        seed: u64,
        p_uncond: f64,
    ) -> Result<Self> {
        let want_in = data_dim + embedding.width() + n_classes + 1;
        if mlp.input_dim() != want_in || mlp.output_dim() != data_dim {
            return Err(Error::InvalidArgument(format!(
                "network widths {:?} do not fit data_dim={data_dim}, n_classes={n_classes}",
                mlp.widths()
            )));
        }
        let velocity = vec![0.0; mlp.n_params()];
        Ok(Self {
            mlp,
            data_dim,
            n_classes,
            embedding,
            seed,
            p_uncond,
            velocity,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn embedding(&self) -> TimeEmbedding {
        self.embedding
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p_uncond(&self) -> f64 {
        self.p_uncond
    }

    pub fn encode(&self, x: &[f64], t: usize, c: ConditionLabel) -> Result<Vec<f64>> {
        check_dim(self.data_dim, x.len())?;
        let mut input = Vec::with_capacity(self.mlp.input_dim());
        input.extend_from_slice(x);
        self.embedding.encode_into(t, &mut input);
        let slot = match c {
            ConditionLabel::Class(k) if k < self.n_classes => k,
            ConditionLabel::Class(k) => {
                return Err(Error::InvalidArgument(format!(
                    "class {k} out of range for a {}-class model",
                    self.n_classes
                )))
            }
            ConditionLabel::Null => self.n_classes,
        };
        input.extend((0..=self.n_classes).map(|i| if i == slot { 1.0 } else { 0.0 }));
        Ok(input)
    }

    /// Forward pass returning the ε prediction and the cached activations.
    pub fn forward(&self, x: &[f64], t: usize, c: ConditionLabel) -> Result<(Vec<f64>, MlpCache)> {
        let cache = self.mlp.forward(&self.encode(x, t, c)?)?;
        Ok((cache.output().to_vec(), cache))
    }

    pub fn predict_eps(&self, x: &[f64], t: usize, c: ConditionLabel) -> Result<Vec<f64>> {
        Ok(self.forward(x, t, c)?.0)
    }

    /// Draws `(t, ε, condition dropout)` for each `(x_0, class)` pair.
    pub fn make_examples(
        &self,
        batch: &[(Vec<f64>, usize)],
        s: &NoiseSchedule,
        rng: &mut SimRng,
    ) -> Result<Vec<TrainingExample>> {
        batch
            .iter()
            .map(|(x0, class)| {
                let t = rng.random_range(1..=s.steps());
                let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
                let condition = if rng.random::<f64>() < self.p_uncond {
                    ConditionLabel::Null
                } else {
                    ConditionLabel::Class(*class)
                };
                Ok(TrainingExample {
                    x_t: s.forward_marginal(x0, t, &eps)?,
                    t,
                    condition,
                    eps,
                })
            })
            .collect()
    }

    /// Mean over examples of `‖ε_θ(x_t, t, c) − ε‖²` and its parameter gradient.
    pub fn loss_and_gradient(&self, examples: &[TrainingExample]) -> Result<(f64, Vec<f64>)> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let scale = 1.0 / examples.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.mlp.n_params()];
        for ex in examples {
            let (pred, cache) = self.forward(&ex.x_t, ex.t, ex.condition)?;
            let resid = crate::linalg::sub(&pred, &ex.eps);
            loss += scale * crate::linalg::norm_sq(&resid);
            let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
            let g = self.mlp.backward(&cache, &d_out)?.flatten();
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss, grad))
    }

    /// One momentum-SGD step on a fresh noising of `batch`. Returns the batch loss.
    pub fn train_step(
        &mut self,
        batch: &[(Vec<f64>, usize)],
        s: &NoiseSchedule,
        rng: &mut SimRng,
        lr: f64,
        momentum: f64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        let examples = self.make_examples(batch, s, rng)?;
        let (loss, grad) = self.loss_and_gradient(&examples)?;
        if !loss.is_finite() || !crate::linalg::all_finite(&grad) {
            return Err(Error::NonFinite {
                context: format!("training loss (loss = {loss}, lr = {lr}); lower the learning rate"),
            });
        }
        let mut params = self.mlp.params();
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(&grad) {
            *v = momentum * *v - lr * g;
            *p += *v;
        }
        self.mlp.set_params(&params)?;
        Ok(loss)
    }

    /// Trains on fresh draws from `family` and returns the per-step losses.
    pub fn train(
        &mut self,
        family: &ConditionedMixtureFamily,
        s: &NoiseSchedule,
        cfg: &TrainConfig,
        rng: &mut SimRng,
    ) -> Result<Vec<f64>> {
        check_dim(self.data_dim, family.dim())?;
        (0..cfg.steps)
            .map(|_| {
                let batch: Vec<(Vec<f64>, usize)> =
                    (0..cfg.batch_size).map(|_| family.sample_labeled(rng)).collect();
                self.train_step(&batch, s, rng, cfg.lr, cfg.momentum)
            })
            .collect()
    }
}

/// A trained model exposed as a score field through `s = −ε/√β̄_t`.
#[derive(Debug, Clone)]
pub struct MlpField {
    model: MlpScoreModel,
    schedule: NoiseSchedule,
}

impl MlpField {
    pub fn new(model: MlpScoreModel, schedule: NoiseSchedule) -> Self {
        Self { model, schedule }
    }

    pub fn model(&self) -> &MlpScoreModel {
        &self.model
    }
}

impl ScoreField for MlpField {
    fn dim(&self) -> usize {
        self.model.data_dim
    }

    fn has_null_condition(&self) -> bool {
        true
    }

    fn score_at(&self, x: &[f64], t: usize, c: ConditionLabel) -> Result<Vec<f64>> {
        score_from_eps(&self.model.predict_eps(x, t, c)?, &self.schedule, t)
    }
}
