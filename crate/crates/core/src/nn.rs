//! Tiny multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector; layer `l` stores its `out × in`
//! weight matrix row-major followed by its `out` biases. Hidden layers use
//! `tanh` so input gradients are smooth everywhere, which matters because
//! guidance differentiates through these networks.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Probability output, used for reward models.
    Sigmoid,
    /// Unbounded output, used for error (score) networks.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths including input (data dim, +1 with a time feature) and output.
    pub widths: Vec<usize>,
    pub head: Head,
    #[serde(default)]
    pub activation: Activation,
    /// Whether `t / horizon` is appended to the input.
    pub time_input: bool,
    pub horizon: f64,
    pub params: Vec<f64>,
    pub seed: u64,
}

/// One training record. `target` is `[y]` for reward heads and the noise
/// vector for error networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub t: Option<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Loss {
    /// `-α y log p - (1-y) log(1-p)`, evaluated from the logit.
    WeightedBce { alpha: f64 },
    /// `‖output - target‖²`
    SquaredError,
}

/// Default clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weighted binary cross entropy on a probability.
pub fn bce_alpha(p: f64, y: u8, alpha: f64) -> Result<f64> {
    bce_alpha_clamped(p, y, alpha, PROB_CLAMP)
}

pub fn bce_alpha_clamped(p: f64, y: u8, alpha: f64, clamp: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain("bce probability", format!("p={p} not in (0,1)")));
    }
    let p = p.clamp(clamp, 1.0 - clamp);
    let y = f64::from(y.min(1));
    Ok(-alpha * y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)`
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

struct Trace {
    /// `acts[0]` is the input; hidden entries are post-activation; the last
    /// entry is the pre-head output.
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(
        data_dim: usize,
        hidden: &[usize],
        outputs: usize,
        head: Head,
        time_input: bool,
        horizon: f64,
        seed: u64,
    ) -> Self {
        let mut widths = vec![data_dim + usize::from(time_input)];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        let mut net = Self {
            widths,
            head,
            activation: Activation::Tanh,
            time_input,
            horizon,
            params: Vec::new(),
            seed,
        };
        net.params = vec![0.0; net.param_count()];
        let mut rng = seeded(seed);
        for (w_off, _, n_in, n_out) in net.layout() {
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for p in &mut net.params[w_off..w_off + n_in * n_out] {
                *p = dist.sample(&mut rng);
            }
        }
        net
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(mut self) -> Self {
        self.params.iter_mut().for_each(|p| *p = 0.0);
        self
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn data_dim(&self) -> usize {
        self.widths[0] - usize::from(self.time_input)
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    /// `(weight offset, bias offset, n_in, n_out)` per layer.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let entry = (off, off + n_in * n_out, n_in, n_out);
                off += (n_in + 1) * n_out;
                entry
            })
            .collect()
    }

    fn input(&self, x: &[f64], t: Option<f64>) -> Result<Vec<f64>> {
        check_len("network input", self.data_dim(), x.len())?;
        let mut input = x.to_vec();
        if self.time_input {
            let t = t.ok_or_else(|| Error::Config("time-conditioned network needs t".into()))?;
            input.push(t / self.horizon);
        }
        Ok(input)
    }

    fn trace(&self, input: Vec<f64>) -> Trace {
        let layout = self.layout();
        let last = layout.len() - 1;
        let mut acts = Vec::with_capacity(layout.len() + 1);
        acts.push(input);
        for (l, &(w_off, b_off, n_in, n_out)) in layout.iter().enumerate() {
            let a = &acts[l];
            let w = &self.params[w_off..w_off + n_in * n_out];
            let b = &self.params[b_off..b_off + n_out];
            let mut z: Vec<f64> = w
                .chunks_exact(n_in)
                .zip(b)
                .map(|(row, bias)| row.iter().zip(a).map(|(w, a)| w * a).sum::<f64>() + bias)
                .collect();
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        Trace { acts }
    }

    fn apply_head(&self, z: &[f64]) -> Vec<f64> {
        match self.head {
            Head::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
            Head::Linear => z.to_vec(),
        }
    }

    /// Pre-head output (the logit for sigmoid heads).
    pub fn logits(&self, x: &[f64], t: Option<f64>) -> Result<Vec<f64>> {
        let input = self.input(x, t)?;
        Ok(self.trace(input).acts.pop().expect("non-empty"))
    }

    pub fn forward(&self, x: &[f64], t: Option<f64>) -> Result<Vec<f64>> {
        Ok(self.apply_head(&self.logits(x, t)?))
    }

    /// Backpropagates `g = ∂L/∂z_out` through the trace. Accumulates
    /// parameter gradients into `param_grad` when given and returns `∂L/∂input`.
    fn backward(&self, trace: &Trace, mut g: Vec<f64>, mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let layout = self.layout();
        for (l, &(w_off, b_off, n_in, n_out)) in layout.iter().enumerate().rev() {
            let a = &trace.acts[l];
            if let Some(pg) = param_grad.as_deref_mut() {
                for (o, &go) in g.iter().enumerate() {
                    let row = &mut pg[w_off + o * n_in..w_off + (o + 1) * n_in];
                    row.iter_mut().zip(a).for_each(|(p, a)| *p += go * a);
                    pg[b_off + o] += go;
                }
            }
            let w = &self.params[w_off..w_off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (row, &go) in w.chunks_exact(n_in).zip(&g) {
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * go);
            }
            if l > 0 {
                // a = tanh(z) ⇒ da/dz = 1 - a²
                prev.iter_mut().zip(a).for_each(|(p, a)| *p *= 1.0 - a * a);
            }
            g = prev;
        }
        g
    }

    fn check_reward_head(&self) -> Result<()> {
        if self.head != Head::Sigmoid || self.output_dim() != 1 {
            return Err(Error::Config("operation needs a scalar sigmoid reward head".into()));
        }
        Ok(())
    }

    /// `log r(x, t)` for a scalar sigmoid head.
    pub fn log_reward(&self, x: &[f64], t: Option<f64>) -> Result<f64> {
        self.check_reward_head()?;
        Ok(log_sigmoid(self.logits(x, t)?[0]))
    }

    /// `∇ₓ log r(x, t)` for a scalar sigmoid head, via `(1 - σ(z)) ∇ₓ z`.
    pub fn grad_input(&self, x: &[f64], t: Option<f64>) -> Result<Vec<f64>> {
        Ok(self.log_reward_and_grad(x, t)?.1)
    }

    pub fn log_reward_and_grad(&self, x: &[f64], t: Option<f64>) -> Result<(f64, Vec<f64>)> {
        self.check_reward_head()?;
        let trace = self.trace(self.input(x, t)?);
        let z = trace.acts.last().expect("non-empty")[0];
        let mut g = self.backward(&trace, vec![sigmoid(-z)], None);
        g.truncate(x.len());
        Ok((log_sigmoid(z), g))
    }

    /// `vᵀ ∂output/∂x` (the time feature is not differentiated).
    pub fn vjp_input(&self, x: &[f64], t: Option<f64>, v: &[f64]) -> Result<Vec<f64>> {
        check_len("vjp cotangent", self.output_dim(), v.len())?;
        let trace = self.trace(self.input(x, t)?);
        let z = trace.acts.last().expect("non-empty");
        let g = match self.head {
            Head::Linear => v.to_vec(),
            Head::Sigmoid => z
                .iter()
                .zip(v)
                .map(|(&z, v)| {
                    let s = sigmoid(z);
                    v * s * (1.0 - s)
                })
                .collect(),
        };
        let mut out = self.backward(&trace, g, None);
        out.truncate(x.len());
        Ok(out)
    }

    /// Per-example loss and `∂loss/∂logits`.
    fn loss_and_seed(&self, z: &[f64], target: &[f64], loss: Loss) -> Result<(f64, Vec<f64>)> {
        match loss {
            Loss::WeightedBce { alpha } => {
                if self.head != Head::Sigmoid || z.len() != 1 {
                    return Err(Error::Config("weighted BCE needs a scalar sigmoid head".into()));
                }
                let y = target[0];
                let z = z[0];
                let value = alpha * y * softplus(-z) + (1.0 - y) * softplus(z);
                let dz = -alpha * y * sigmoid(-z) + (1.0 - y) * sigmoid(z);
                Ok((value, vec![dz]))
            }
            Loss::SquaredError => {
                check_len("regression target", z.len(), target.len())?;
                let out = self.apply_head(z);
                let mut value = 0.0;
                let seed = out
                    .iter()
                    .zip(target)
                    .zip(z)
                    .map(|((o, y), &z)| {
                        let r = o - y;
                        value += r * r;
                        let dout = 2.0 * r;
                        match self.head {
                            Head::Linear => dout,
                            Head::Sigmoid => {
                                let s = sigmoid(z);
                                dout * s * (1.0 - s)
                            }
                        }
                    })
                    .collect();
                Ok((value, seed))
            }
        }
    }

    /// Mean loss over `batch` and its gradient with respect to the parameters.
    pub fn grad_params(&self, batch: &[Example], loss: Loss) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::domain("batch", "gradient needs a non-empty batch"));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for ex in batch {
            let trace = self.trace(self.input(&ex.x, ex.t)?);
            let (value, seed) = self.loss_and_seed(trace.acts.last().expect("non-empty"), &ex.target, loss)?;
            total += value;
            self.backward(&trace, seed, Some(&mut grad));
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, grad))
    }

    pub fn mean_loss(&self, batch: &[Example], loss: Loss) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            let z = self.logits(&ex.x, ex.t)?;
            total += self.loss_and_seed(&z, &ex.target, loss)?.0;
        }
        Ok(total / batch.len().max(1) as f64)
    }
}

/// AdamW hyperparameters and the iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Weight on the benign term of the BCE loss.
    pub alpha: f64,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Exponential moving average of parameters; `None` disables it.
    #[serde(default)]
    pub ema: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.05,
            iterations: 1000,
            batch_size: 128,
            alpha: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            ema: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if let Some(rate) = self.ema {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("ema rate {rate} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        const EPS: f64 = 1e-8;
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *p -= cfg.learning_rate * cfg.weight_decay * *p;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub net: Mlp,
    /// Mean minibatch loss at every iteration.
    pub losses: Vec<f64>,
}

/// Trains on minibatches produced by `next_batch`.
pub fn train_with(
    mut net: Mlp,
    config: &TrainConfig,
    loss: Loss,
    mut next_batch: impl FnMut(&mut Rng) -> Vec<Example>,
) -> Result<Trained> {
    config.validate()?;
    let mut rng = seeded(config.seed);
    let mut opt = AdamW::new(net.params.len());
    let mut shadow = config.ema.map(|_| net.params.clone());
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = next_batch(&mut rng);
        let (value, grad) = net.grad_params(&batch, loss)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("training loss at iteration {it}: {value}")));
        }
        losses.push(value);
        opt.update(&mut net.params, &grad, config);
        if let (Some(rate), Some(shadow)) = (config.ema, shadow.as_mut()) {
            shadow
                .iter_mut()
                .zip(&net.params)
                .for_each(|(s, p)| *s = rate * *s + (1.0 - rate) * p);
        }
    }
    if let Some(shadow) = shadow {
        net.params = shadow;
    }
    Ok(Trained { net, losses })
}

/// Trains on a fixed dataset, cycling through seeded permutations.
pub fn train(net: Mlp, dataset: &[Example], config: &TrainConfig, loss: Loss) -> Result<Trained> {
    if dataset.is_empty() {
        return Err(Error::domain("dataset", "training needs at least one example"));
    }
    let batch = config.batch_size.min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    train_with(net, config, loss, |rng| {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if cursor == order.len() {
                shuffle(&mut order, rng);
                cursor = 0;
            }
            out.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        out
    })
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Trains an error network `ε_θ(x_t, t)` by denoising: each iteration draws
/// data points, times uniform on `(0, T]` and fresh noise, and regresses the
/// network output onto the noise.
pub fn train_score(
    net: Mlp,
    data: &[Vec<f64>],
    schedule: &crate::schedule::NoiseSchedule,
    config: &TrainConfig,
) -> Result<Trained> {
    if data.len() < 1000 {
        return Err(Error::domain("score training data", format!("{} < 1000 samples", data.len())));
    }
    if !net.time_input || net.head != Head::Linear || net.output_dim() != net.data_dim() {
        return Err(Error::Config("error network needs time input and a linear d-dim head".into()));
    }
    let horizon = schedule.horizon;
    train_with(net, config, Loss::SquaredError, |rng| {
        (0..config.batch_size)
            .map(|_| {
                let x0 = &data[rng.random_range(0..data.len())];
                let t = horizon * (1.0 - rng.random::<f64>());
                let eps = crate::schedule::standard_normal(x0.len(), rng);
                let alpha = schedule.alpha_bar_unchecked(t);
                Example {
                    x: crate::schedule::noise_with_alpha(x0, alpha, &eps),
                    t: Some(t),
                    target: eps,
                }
            })
            .collect()
    })
}

/// Portable checkpoint: the network plus the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(flatten)]
    pub net: Mlp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        check_len("checkpoint parameters", ck.net.param_count(), ck.net.params.len())?;
        Ok(ck)
    }
}
