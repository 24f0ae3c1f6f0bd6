//! Reverse-time samplers.
//!
//! All samplers use the ancestral discretization of the reverse VP SDE on a
//! [`DiffusionGrid`]: from step `k` to `k-1`,
//!
//! ```text
//! x_{k-1} = (x_k - β̃_k / √(1-ᾱ_k) · ε̂) / √(1-β̃_k) + √β̃_k · z
//! ```
//!
//! with the noise omitted on the final step. Guidance only changes `ε̂`:
//! time-dependent rewards subtract `ω√(1-ᾱ)∇log r_t(x)`, time-independent
//! rewards subtract `ω√(1-ᾱ)∇ₓ log r(x̂₀(x))`. Backward guidance and
//! recurrence wrap a single reverse step.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::LabeledMixture;
use crate::nn::{Head, Mlp};
use crate::reward::{RewardModel, ScaledGrad};
use crate::rng::{derive, seeded};
use crate::schedule::{standard_normal, DiffusionGrid, Level};

/// An error network `ε(x, t)` with input vector-Jacobian products.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;
    fn eps(&self, x: &[f64], level: Level) -> Vec<f64>;
    /// `vᵀ ∂ε/∂x`
    fn eps_vjp(&self, x: &[f64], level: Level, v: &[f64]) -> Vec<f64>;
}

/// `ε(x, t) = -√(1-ᾱ_t) ∇log p_t(x)` from a world's exact score.
#[derive(Debug, Clone)]
pub struct AnalyticEps {
    pub world: LabeledMixture,
}

impl AnalyticEps {
    pub fn new(world: LabeledMixture) -> Self {
        Self { world }
    }
}

impl NoisePredictor for AnalyticEps {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn eps(&self, x: &[f64], level: Level) -> Vec<f64> {
        let s = (1.0 - level.alpha_bar).sqrt();
        self.world
            .eval_alpha(x, level.alpha_bar)
            .score
            .into_iter()
            .map(|v| -s * v)
            .collect()
    }

    fn eps_vjp(&self, x: &[f64], level: Level, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let s = (1.0 - level.alpha_bar).sqrt();
        let h = self.world.score_jacobian_alpha(x, level.alpha_bar);
        // H is symmetric, so vᵀJ = -s H v.
        (0..d)
            .map(|j| -s * (0..d).map(|i| v[i] * h[i * d + j]).sum::<f64>())
            .collect()
    }
}

/// A trained error network.
#[derive(Debug, Clone)]
pub struct LearnedEps {
    pub net: Mlp,
}

impl LearnedEps {
    pub fn new(net: Mlp) -> Result<Self> {
        if !net.time_input || net.head != Head::Linear || net.output_dim() != net.data_dim() {
            return Err(Error::Config("error network needs time input and a linear d-dim head".into()));
        }
        Ok(Self { net })
    }
}

impl NoisePredictor for LearnedEps {
    fn dim(&self) -> usize {
        self.net.data_dim()
    }

    fn eps(&self, x: &[f64], level: Level) -> Vec<f64> {
        self.net.forward(x, Some(level.t)).expect("dimension checked by sampler")
    }

    fn eps_vjp(&self, x: &[f64], level: Level, v: &[f64]) -> Vec<f64> {
        self.net.vjp_input(x, Some(level.t), v).expect("dimension checked by sampler")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    None,
    TimeDependent,
    TimeIndependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Differentiate through `ε` inside `x̂₀`.
    #[default]
    ExactVjp,
    /// Treat `ε` as constant: `∇ₓ x̂₀ = I/√ᾱ`.
    FrozenEps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    #[serde(default)]
    pub mode: GuidanceMode,
    /// Guidance weight ω.
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub backward_steps: usize,
    #[serde(default = "default_backward_step")]
    pub backward_step_size: f64,
    #[serde(default = "one_usize")]
    pub recurrence: usize,
    #[serde(default)]
    pub jacobian: JacobianMode,
    /// Re-run backward guidance on every recurrence repeat (otherwise only
    /// the last one).
    #[serde(default = "yes")]
    pub backward_every_repeat: bool,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_backward_step() -> f64 {
    2e-4
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::None,
            weight: 1.0,
            backward_steps: 0,
            backward_step_size: default_backward_step(),
            recurrence: 1,
            jacobian: JacobianMode::ExactVjp,
            backward_every_repeat: true,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        Self::default()
    }

    pub fn time_dependent(weight: f64) -> Self {
        Self {
            mode: GuidanceMode::TimeDependent,
            weight,
            ..Self::default()
        }
    }

    pub fn time_independent(weight: f64) -> Self {
        Self {
            mode: GuidanceMode::TimeIndependent,
            weight,
            ..Self::default()
        }
    }

    /// Adds backward guidance (`steps` ascent steps of size `step_size`) and
    /// `recurrence` repeats per reverse step.
    pub fn with_universal(mut self, steps: usize, step_size: f64, recurrence: usize) -> Self {
        self.backward_steps = steps;
        self.backward_step_size = step_size;
        self.recurrence = recurrence;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::Config(format!("guidance weight {} must be ≥ 0", self.weight)));
        }
        if self.recurrence == 0 {
            return Err(Error::Config("recurrence must be ≥ 1".into()));
        }
        if !(self.backward_step_size >= 0.0 && self.backward_step_size.is_finite()) {
            return Err(Error::Config("backward step size must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Accepted/presented counts of a rejection run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub accepted: usize,
    pub presented: usize,
}

impl RejectionStats {
    pub fn ratio(&self) -> f64 {
        if self.presented == 0 {
            0.0
        } else {
            self.accepted as f64 / self.presented as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub samples: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    /// Reverse steps taken per sample, counting recurrence repeats.
    pub steps: Vec<usize>,
    pub rejection: Option<RejectionStats>,
}

/// `ε - ω√(1-ᾱ)·g` with `g = scale·direction`; identity when `ω = 0`.
fn apply_guidance(eps: Vec<f64>, grad: &ScaledGrad, weight: f64, level: Level) -> Vec<f64> {
    if weight == 0.0 {
        return eps;
    }
    let c = weight * grad.scale * (1.0 - level.alpha_bar).sqrt();
    eps.iter().zip(&grad.direction).map(|(e, g)| e - c * g).collect()
}

/// Time-dependent guidance: `ε̂ = ε - ω√(1-ᾱ_t)∇log r_t(x)`.
pub fn guided_eps_timedep(
    eps: Vec<f64>,
    x: &[f64],
    level: Level,
    reward: &dyn RewardModel,
    weight: f64,
) -> Vec<f64> {
    if weight == 0.0 {
        return eps;
    }
    let grad = reward.grad_log_reward(x, level);
    apply_guidance(eps, &grad, weight, level)
}

/// Posterior-mean estimate `x̂₀ = (x - √(1-ᾱ) ε) / √ᾱ`.
pub fn xhat0(x: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if alpha_bar < 1e-8 {
        return Err(Error::domain("alpha_bar", format!("{alpha_bar:e} too small to invert for x̂₀")));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x.iter().zip(eps).map(|(x, e)| (x - s * e) / a).collect())
}

/// Time-independent guidance through `x̂₀`:
/// `ε̂ = ε - ω√(1-ᾱ)∇ₓ log r(x̂₀(x))`.
pub fn guided_eps_timeindep(
    model: &dyn NoisePredictor,
    eps: Vec<f64>,
    x: &[f64],
    level: Level,
    reward: &dyn RewardModel,
    weight: f64,
    jacobian: JacobianMode,
) -> Result<Vec<f64>> {
    if weight == 0.0 {
        return Ok(eps);
    }
    let x0 = xhat0(x, &eps, level.alpha_bar)?;
    let grad_x0 = reward.grad_log_reward(&x0, Level::CLEAN);
    let sa = level.alpha_bar.sqrt();
    // ∇ₓ x̂₀ = (I - √(1-ᾱ) ∂ε/∂x) / √ᾱ, applied to the direction only.
    let direction: Vec<f64> = match jacobian {
        JacobianMode::FrozenEps => grad_x0.direction.iter().map(|g| g / sa).collect(),
        JacobianMode::ExactVjp => {
            let s = (1.0 - level.alpha_bar).sqrt();
            let vjp = model.eps_vjp(x, level, &grad_x0.direction);
            grad_x0
                .direction
                .iter()
                .zip(&vjp)
                .map(|(g, v)| (g - s * v) / sa)
                .collect()
        }
    };
    let grad = ScaledGrad {
        scale: grad_x0.scale,
        direction,
    };
    Ok(apply_guidance(eps, &grad, weight, level))
}

/// `B` fixed-size gradient-ascent steps on `log r` from `x̂₀`, then the error
/// vector that reproduces `x_t` from the refined estimate.
pub fn backward_refine(
    x_t: &[f64],
    xhat0_fwd: &[f64],
    level: Level,
    reward: &dyn RewardModel,
    steps: usize,
    step_size: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if steps == 0 {
        return Err(Error::domain("backward steps", "need B ≥ 1"));
    }
    let mut x0 = xhat0_fwd.to_vec();
    for b in 0..steps {
        if step_size != 0.0 {
            let g = reward.grad_log_reward(&x0, Level::CLEAN);
            let c = step_size * g.scale;
            x0.iter_mut().zip(&g.direction).for_each(|(x, g)| *x += c * g);
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("backward guidance step {b}")));
        }
    }
    let (a, s) = (level.alpha_bar.sqrt(), (1.0 - level.alpha_bar).sqrt());
    let eps = x_t.iter().zip(&x0).map(|(x, x0)| (x - a * x0) / s).collect();
    Ok((x0, eps))
}

/// One ancestral reverse step from grid index `k` to `k-1`. `noise` is
/// ignored on the final step (`k = 1`).
pub fn reverse_step(grid: &DiffusionGrid, k: usize, x: &[f64], eps_hat: &[f64], noise: &[f64]) -> Vec<f64> {
    let beta = grid.step_beta(k);
    let coef = beta / (1.0 - grid.alpha_bar(k)).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let sigma = if k > 1 { beta.sqrt() } else { 0.0 };
    x.iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((x, e), z)| inv * (x - coef * e) + sigma * z)
        .collect()
}

/// Discrete forward kernel from grid index `k-1` back to `k`.
pub fn renoise_step(grid: &DiffusionGrid, k: usize, x: &[f64], noise: &[f64]) -> Vec<f64> {
    let beta = grid.step_beta(k);
    let (a, s) = ((1.0 - beta).sqrt(), beta.sqrt());
    x.iter().zip(noise).map(|(x, z)| a * x + s * z).collect()
}

/// Reverse-SDE drift `β(t)(ε̂/√(1-ᾱ) - x/2)` in the sign convention of the
/// forward clock.
pub fn reverse_drift(eps_hat: &[f64], x: &[f64], level: Level, beta: f64) -> Vec<f64> {
    let s = (1.0 - level.alpha_bar).sqrt();
    eps_hat
        .iter()
        .zip(x)
        .map(|(e, x)| beta * (e / s - 0.5 * x))
        .collect()
}

/// Runs `step` (which draws its own noise) `repeats` times, re-noising the
/// result back to index `k` between repeats. Returns the last step's state.
pub fn recurrent_step<R: rand::Rng + ?Sized>(
    grid: &DiffusionGrid,
    k: usize,
    x: &[f64],
    repeats: usize,
    rng: &mut R,
    mut step: impl FnMut(&[f64], usize, &mut R) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if repeats == 0 {
        return Err(Error::domain("recurrence", "need R ≥ 1"));
    }
    let mut current = x.to_vec();
    let mut out = Vec::new();
    for r in 0..repeats {
        out = step(&current, r, rng)?;
        if r + 1 < repeats {
            let z = standard_normal(out.len(), rng);
            current = renoise_step(grid, k, &out, &z);
        }
    }
    Ok(out)
}

/// A configured reverse-time sampler.
pub struct Sampler<'a> {
    eps: &'a dyn NoisePredictor,
    grid: &'a DiffusionGrid,
    reward: Option<&'a dyn RewardModel>,
    guidance: GuidanceConfig,
}

impl<'a> Sampler<'a> {
    pub fn unguided(eps: &'a dyn NoisePredictor, grid: &'a DiffusionGrid) -> Self {
        Self {
            eps,
            grid,
            reward: None,
            guidance: GuidanceConfig::unguided(),
        }
    }

    pub fn guided(
        eps: &'a dyn NoisePredictor,
        grid: &'a DiffusionGrid,
        reward: &'a dyn RewardModel,
        guidance: GuidanceConfig,
    ) -> Result<Self> {
        guidance.validate()?;
        match guidance.mode {
            GuidanceMode::TimeDependent if !reward.time_dependent() => {
                return Err(Error::Config("time-dependent guidance needs a time-dependent reward".into()))
            }
            GuidanceMode::TimeIndependent if reward.time_dependent() => {
                return Err(Error::Config(
                    "time-independent guidance needs a time-independent reward".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            eps,
            grid,
            reward: Some(reward),
            guidance,
        })
    }

    pub fn grid(&self) -> &DiffusionGrid {
        self.grid
    }

    pub fn guidance(&self) -> &GuidanceConfig {
        &self.guidance
    }

    /// The guided error vector at `(x, k)`, before backward refinement.
    pub fn guided_eps(&self, x: &[f64], level: Level) -> Result<Vec<f64>> {
        let eps = self.eps.eps(x, level);
        let reward = match self.reward {
            Some(r) => r,
            None => return Ok(eps),
        };
        let g = &self.guidance;
        match g.mode {
            GuidanceMode::None => Ok(eps),
            GuidanceMode::TimeDependent => Ok(guided_eps_timedep(eps, x, level, reward, g.weight)),
            GuidanceMode::TimeIndependent => {
                guided_eps_timeindep(self.eps, eps, x, level, reward, g.weight, g.jacobian)
            }
        }
    }

    /// `ε̂` including backward refinement when enabled for this repeat.
    fn step_eps(&self, x: &[f64], level: Level, repeat: usize) -> Result<Vec<f64>> {
        let eps_hat = self.guided_eps(x, level)?;
        let g = &self.guidance;
        let refine = g.backward_steps > 0
            && self.reward.is_some()
            && (g.backward_every_repeat || repeat + 1 == g.recurrence);
        if !refine {
            return Ok(eps_hat);
        }
        let x0 = xhat0(x, &eps_hat, level.alpha_bar)?;
        let reward = self.reward.expect("checked above");
        let (_, eps_bwd) = backward_refine(x, &x0, level, reward, g.backward_steps, g.backward_step_size)?;
        Ok(eps_bwd)
    }

    /// One chain from `X_T ~ N(0, I)` down to `t = 0`.
    pub fn sample_chain(&self, seed: u64) -> Result<Vec<f64>> {
        let mut rng = seeded(seed);
        let d = self.eps.dim();
        let mut x = standard_normal(d, &mut rng);
        for k in (1..=self.grid.num_steps()).rev() {
            let level = self.grid.level(k);
            x = recurrent_step(self.grid, k, &x, self.guidance.recurrence, &mut rng, |x, r, rng| {
                let eps_hat = self.step_eps(x, level, r)?;
                let z = standard_normal(d, rng);
                Ok(reverse_step(self.grid, k, x, &eps_hat, &z))
            })?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sampler state at step {k} (t = {})", level.t)));
            }
        }
        Ok(x)
    }

    pub fn chain_seed(seed: u64, index: usize) -> u64 {
        derive(seed, index as u64)
    }

    /// `n` independent chains with seeds derived from `seed`; chains run in
    /// parallel and are returned in index order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SamplerOutput> {
        self.sample_range(0, n, seed)
    }

    /// Chains `start..start+n` of the stream keyed by `seed`.
    pub fn sample_range(&self, start: usize, n: usize, seed: u64) -> Result<SamplerOutput> {
        if n == 0 {
            return Err(Error::domain("n", "sample count must be ≥ 1"));
        }
        let seeds: Vec<u64> = (start..start + n).map(|i| Self::chain_seed(seed, i)).collect();
        let samples = seeds
            .par_iter()
            .map(|&s| self.sample_chain(s))
            .collect::<Result<Vec<_>>>()?;
        let per = self.grid.num_steps() * self.guidance.recurrence;
        Ok(SamplerOutput {
            samples,
            steps: vec![per; n],
            seeds,
            rejection: None,
        })
    }
}

/// Unguided ancestral sampling.
pub fn sample_unguided(
    eps: &dyn NoisePredictor,
    grid: &DiffusionGrid,
    n: usize,
    seed: u64,
) -> Result<SamplerOutput> {
    Sampler::unguided(eps, grid).sample(n, seed)
}

/// Guided sampling with the full set of options in `guidance`.
pub fn sample_censored(
    eps: &dyn NoisePredictor,
    reward: &dyn RewardModel,
    guidance: GuidanceConfig,
    grid: &DiffusionGrid,
    n: usize,
    seed: u64,
) -> Result<SamplerOutput> {
    Sampler::guided(eps, grid, reward, guidance)?.sample(n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionConfig {
    pub threshold: f64,
    pub target: usize,
    /// Maximum number of presented samples.
    pub presented_cap: usize,
    /// Acceptance ratios below this after hitting the cap produce a warning.
    pub floor: f64,
    /// Chains drawn per batch.
    pub batch: usize,
}

impl RejectionConfig {
    pub fn new(threshold: f64, target: usize) -> Self {
        Self {
            threshold,
            target,
            presented_cap: target.saturating_mul(100).max(1000),
            floor: 1e-3,
            batch: target.clamp(1, 1024),
        }
    }
}

/// Draws from `base` until `target` samples have
/// `reward.acceptance_score(x) ≥ threshold` or the presented cap is hit.
pub fn rejection_sample(
    base: &Sampler<'_>,
    reward: &dyn RewardModel,
    cfg: &RejectionConfig,
    seed: u64,
) -> Result<SamplerOutput> {
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::domain("acceptance threshold", format!("{} not in (0,1)", cfg.threshold)));
    }
    if cfg.target == 0 || cfg.batch == 0 {
        return Err(Error::domain("rejection target", "need target and batch ≥ 1"));
    }
    let mut accepted = SamplerOutput {
        samples: Vec::new(),
        seeds: Vec::new(),
        steps: Vec::new(),
        rejection: None,
    };
    let mut presented = 0;
    while accepted.samples.len() < cfg.target && presented < cfg.presented_cap {
        let n = cfg.batch.min(cfg.presented_cap - presented);
        let batch = base.sample_range(presented, n, seed)?;
        for ((x, s), steps) in batch.samples.into_iter().zip(batch.seeds).zip(batch.steps) {
            presented += 1;
            if reward.acceptance_score(&x) >= cfg.threshold {
                accepted.samples.push(x);
                accepted.seeds.push(s);
                accepted.steps.push(steps);
                if accepted.samples.len() == cfg.target {
                    break;
                }
            }
        }
    }
    let stats = RejectionStats {
        accepted: accepted.samples.len(),
        presented,
    };
    if stats.accepted < cfg.target && stats.ratio() < cfg.floor {
        warn!(
            "rejection sampling hit the cap: {} of {} accepted (ratio {:.2e})",
            stats.accepted,
            stats.presented,
            stats.ratio()
        );
    }
    accepted.rejection = Some(stats);
    Ok(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::presets;
    use crate::reward::{ExactReward, RewardEnsemble, RewardNet};
    use crate::rng::seeded;
    use crate::schedule::NoiseSchedule;
    use rand::Rng as _;

    fn grid(n: usize) -> DiffusionGrid {
        DiffusionGrid::new(NoiseSchedule::default(), n).unwrap()
    }

    /// `ε(x) = x`, so `x̂₀ = (1-√(1-ᾱ)) x / √ᾱ`.
    struct IdentityEps;
    impl NoisePredictor for IdentityEps {
        fn dim(&self) -> usize {
            2
        }
        fn eps(&self, x: &[f64], _: Level) -> Vec<f64> {
            x.to_vec()
        }
        fn eps_vjp(&self, _: &[f64], _: Level, v: &[f64]) -> Vec<f64> {
            v.to_vec()
        }
    }

    fn reward_net(time: bool, seed: u64) -> RewardNet {
        RewardNet::new(Mlp::new(2, &[8], 1, Head::Sigmoid, time, 1.0, seed)).unwrap()
    }

    #[test]
    fn timedep_guidance_substitution() {
        struct Fixed;
        impl RewardModel for Fixed {
            fn time_dependent(&self) -> bool {
                true
            }
            fn log_reward(&self, _: &[f64], _: Level) -> f64 {
                0.0
            }
            fn grad_log_reward(&self, _: &[f64], _: Level) -> ScaledGrad {
                ScaledGrad::unit(vec![2.0, 0.0])
            }
        }
        let level = Level {
            t: 0.3,
            alpha_bar: 0.75,
        };
        let out = guided_eps_timedep(vec![1.0, 0.0], &[0.0, 0.0], level, &Fixed, 1.0);
        assert!(out[0].abs() < 1e-15 && out[1] == 0.0);
        let same = guided_eps_timedep(vec![1.0, 0.5], &[0.0, 0.0], level, &Fixed, 0.0);
        assert_eq!(same, vec![1.0, 0.5]);
    }

    #[test]
    fn ensemble_of_copies_scales_gradient() {
        let net = reward_net(true, 3);
        let ens = RewardEnsemble::new(vec![net.clone(); 4]).unwrap();
        let level = Level {
            t: 0.4,
            alpha_bar: 0.3,
        };
        let x = [0.7, -0.2];
        let single = net.grad_log_reward(&x, level).to_vec();
        let multi = ens.grad_log_reward(&x, level).to_vec();
        for (s, m) in single.iter().zip(&multi) {
            assert!((4.0 * s - m).abs() <= 1e-15 * m.abs().max(1.0));
        }
    }

    #[test]
    fn xhat0_identities() {
        let s = NoiseSchedule::default();
        let x0 = [1.5, -0.5];
        let eps = [0.3, 0.8];
        let alpha = s.alpha_bar(0.4).unwrap();
        let xt = s.forward_noise(&x0, 0.4, &eps).unwrap();
        let back = xhat0(&xt, &eps, alpha).unwrap();
        assert!((back[0] - x0[0]).abs() < 1e-12 && (back[1] - x0[1]).abs() < 1e-12);
        assert_eq!(xhat0(&[2.0, 3.0], &[5.0, 5.0], 1.0).unwrap(), vec![2.0, 3.0]);
        assert!(xhat0(&[0.0, 0.0], &[0.0, 0.0], 1e-9).is_err());
    }

    #[test]
    fn xhat0_is_posterior_mean_for_gaussian_world() {
        // X₀ ~ N(μ, σ²I): E[X₀ | X_t = x] = μ + σ²√ᾱ (x - √ᾱ μ) / (ᾱσ² + 1 - ᾱ)
        let world = crate::mixture::LabeledMixture::new(vec![crate::mixture::Component::isotropic(
            1.0,
            vec![2.0, -1.0],
            0.7,
            crate::mixture::Label::Benign,
        )])
        .unwrap();
        let eps = AnalyticEps::new(world);
        let g = grid(1000);
        let level = g.level(500);
        let x = [0.4, 1.1];
        let got = xhat0(&x, &eps.eps(&x, level), level.alpha_bar).unwrap();
        let (a, v) = (level.alpha_bar, 0.49);
        let mu = [2.0, -1.0];
        for i in 0..2 {
            let want = mu[i] + v * a.sqrt() * (x[i] - a.sqrt() * mu[i]) / (a * v + 1.0 - a);
            assert!((got[i] - want).abs() <= 1e-6, "{got:?}");
        }
    }

    fn fd_log_r_xhat0(model: &dyn NoisePredictor, reward: &dyn RewardModel, x: &[f64], level: Level) -> Vec<f64> {
        let f = |p: &[f64]| {
            let x0 = xhat0(p, &model.eps(p, level), level.alpha_bar).unwrap();
            reward.log_reward(&x0, Level::CLEAN)
        };
        (0..2)
            .map(|i| {
                let h = 1e-6;
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn timeindep_exact_vjp_matches_finite_differences() {
        let reward = reward_net(false, 4);
        let level = Level {
            t: 0.2,
            alpha_bar: 0.6,
        };
        let mut rng = seeded(2);
        let models: [&dyn NoisePredictor; 2] = [&IdentityEps, &AnalyticEps::new(presets::symmetric_pair())];
        for model in models {
            for _ in 0..20 {
                let x = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let eps = model.eps(&x, level);
                let out = guided_eps_timeindep(model, eps.clone(), &x, level, &reward, 1.0, JacobianMode::ExactVjp)
                    .unwrap();
                // recover ∇ from ε̂ = ε - √(1-ᾱ)∇
                let s = (1.0 - level.alpha_bar).sqrt();
                let grad: Vec<f64> = eps.iter().zip(&out).map(|(e, o)| (e - o) / s).collect();
                let fd = fd_log_r_xhat0(model, &reward, &x, level);
                let scale = fd.iter().map(|v| v.abs()).fold(1e-3, f64::max);
                for (g, f) in grad.iter().zip(&fd) {
                    assert!((g - f).abs() / scale <= 1e-4, "{grad:?} vs {fd:?}");
                }
            }
        }
    }

    #[test]
    fn identity_eps_jacobian_modes_in_closed_form() {
        // ε = x ⇒ ∂x̂₀/∂x = (1 - √(1-ᾱ))/√ᾱ · I; frozen mode uses 1/√ᾱ.
        let reward = reward_net(false, 5);
        let level = Level {
            t: 0.5,
            alpha_bar: 0.36,
        };
        let x = [0.9, -0.4];
        let s = 0.8;
        let exact =
            guided_eps_timeindep(&IdentityEps, x.to_vec(), &x, level, &reward, 1.0, JacobianMode::ExactVjp).unwrap();
        let frozen =
            guided_eps_timeindep(&IdentityEps, x.to_vec(), &x, level, &reward, 1.0, JacobianMode::FrozenEps).unwrap();
        for i in 0..2 {
            let ratio = (x[i] - exact[i]) / (x[i] - frozen[i]);
            assert!((ratio - (1.0 - s)).abs() <= 1e-6);
        }
    }

    #[test]
    fn analytic_world_jacobian_ratio() {
        // Single isotropic Gaussian N(μ, v I): x̂₀ is affine in x with slope
        // √ᾱ v / (ᾱ v + 1 - ᾱ), so exact = frozen · √ᾱ · slope.
        let world = crate::mixture::LabeledMixture::new(vec![crate::mixture::Component::isotropic(
            1.0,
            vec![1.0, 0.5],
            0.6,
            crate::mixture::Label::Benign,
        )])
        .unwrap();
        let model = AnalyticEps::new(world);
        let reward = reward_net(false, 6);
        let level = Level {
            t: 0.3,
            alpha_bar: 0.45,
        };
        let x = [0.2, -0.7];
        let eps = model.eps(&x, level);
        let exact = guided_eps_timeindep(&model, eps.clone(), &x, level, &reward, 1.0, JacobianMode::ExactVjp).unwrap();
        let frozen = guided_eps_timeindep(&model, eps.clone(), &x, level, &reward, 1.0, JacobianMode::FrozenEps).unwrap();
        let (a, v) = (0.45f64, 0.36);
        let factor = a.sqrt() * a.sqrt() * v / (a * v + 1.0 - a);
        for i in 0..2 {
            let ratio = (eps[i] - exact[i]) / (eps[i] - frozen[i]);
            assert!((ratio - factor).abs() <= 1e-6, "{ratio} vs {factor}");
        }
    }

    #[test]
    fn zero_weight_is_bit_identical() {
        let world = presets::symmetric_pair();
        let model = AnalyticEps::new(world.clone());
        let g = grid(50);
        let td = ExactReward {
            world: world.clone(),
            time_dependent: true,
        };
        let ti = ExactReward {
            world,
            time_dependent: false,
        };
        let plain = Sampler::unguided(&model, &g);
        let a = Sampler::guided(&model, &g, &td, GuidanceConfig::time_dependent(0.0)).unwrap();
        let b = Sampler::guided(&model, &g, &ti, GuidanceConfig::time_independent(0.0)).unwrap();
        for k in [1, 10, 50] {
            let x = [0.3, -1.0];
            let e = plain.guided_eps(&x, g.level(k)).unwrap();
            assert_eq!(a.guided_eps(&x, g.level(k)).unwrap(), e);
            assert_eq!(b.guided_eps(&x, g.level(k)).unwrap(), e);
        }
        assert_eq!(plain.sample(3, 1).unwrap(), a.sample(3, 1).unwrap());
    }

    #[test]
    fn mismatched_reward_kind_is_rejected() {
        let world = presets::symmetric_pair();
        let model = AnalyticEps::new(world.clone());
        let g = grid(10);
        let ti = ExactReward {
            world,
            time_dependent: false,
        };
        assert!(Sampler::guided(&model, &g, &ti, GuidanceConfig::time_dependent(1.0)).is_err());
        let mut bad = GuidanceConfig::time_independent(1.0);
        bad.recurrence = 0;
        assert!(Sampler::guided(&model, &g, &ti, bad).is_err());
    }

    #[test]
    fn backward_refine_properties() {
        let reward = reward_net(false, 7);
        let level = Level {
            t: 0.4,
            alpha_bar: 0.5,
        };
        let x = [0.5, 0.1];
        let eps = [0.2, -0.3];
        let x0 = xhat0(&x, &eps, level.alpha_bar).unwrap();
        let (same, e) = backward_refine(&x, &x0, level, &reward, 5, 0.0).unwrap();
        assert_eq!(same, x0);
        for i in 0..2 {
            assert!((e[i] - eps[i]).abs() < 1e-12);
        }
        let mut rng = seeded(8);
        for _ in 0..100 {
            let xt = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let start = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (refined, eps_b) = backward_refine(&xt, &start, level, &reward, 5, 1e-4).unwrap();
            assert!(reward.log_reward(&refined, Level::CLEAN) >= reward.log_reward(&start, Level::CLEAN));
            for i in 0..2 {
                let rebuilt = level.alpha_bar.sqrt() * refined[i] + (1.0 - level.alpha_bar).sqrt() * eps_b[i];
                assert!((rebuilt - xt[i]).abs() <= 1e-10);
            }
        }
        assert!(backward_refine(&x, &x0, level, &reward, 0, 1e-3).is_err());
    }

    #[test]
    fn recurrence_of_one_is_a_plain_step() {
        let world = presets::symmetric_pair();
        let model = AnalyticEps::new(world);
        let g = grid(20);
        let x = vec![0.4, 0.2];
        let k = 12;
        let mut rng_a = seeded(3);
        let plain = {
            let e = model.eps(&x, g.level(k));
            let z = standard_normal(2, &mut rng_a);
            reverse_step(&g, k, &x, &e, &z)
        };
        let mut rng_b = seeded(3);
        let rec = recurrent_step(&g, k, &x, 1, &mut rng_b, |x, _, rng| {
            let e = model.eps(x, g.level(k));
            let z = standard_normal(2, rng);
            Ok(reverse_step(&g, k, x, &e, &z))
        })
        .unwrap();
        assert_eq!(plain, rec);
    }

    #[test]
    fn chains_are_deterministic_and_order_stable() {
        let world = presets::benign_dominant();
        let model = AnalyticEps::new(world);
        let g = grid(100);
        let s = Sampler::unguided(&model, &g);
        let a = s.sample(6, 11).unwrap();
        let b = s.sample(6, 11).unwrap();
        assert_eq!(a, b);
        let tail = s.sample_range(3, 3, 11).unwrap();
        assert_eq!(&a.samples[3..], &tail.samples[..]);
        assert_eq!(a.steps, vec![100; 6]);
        assert!(s.sample(0, 1).is_err());
    }

    #[test]
    fn rejection_accepts_everything_at_tiny_threshold() {
        let world = presets::benign_dominant();
        let model = AnalyticEps::new(world.clone());
        let g = grid(50);
        let base = Sampler::unguided(&model, &g);
        let reward = ExactReward {
            world,
            time_dependent: false,
        };
        let out = rejection_sample(&base, &reward, &RejectionConfig::new(1e-300, 40), 2).unwrap();
        let st = out.rejection.unwrap();
        assert_eq!((st.accepted, st.presented), (40, 40));
        assert_eq!(st.ratio(), 1.0);
        assert!(rejection_sample(&base, &reward, &RejectionConfig::new(1.0, 4), 2).is_err());
    }

    #[test]
    fn rejection_cap_returns_partial_output() {
        let world = presets::benign_dominant();
        let model = AnalyticEps::new(world.clone());
        let g = grid(20);
        let base = Sampler::unguided(&model, &g);
        let reward = ExactReward {
            world,
            time_dependent: false,
        };
        let mut cfg = RejectionConfig::new(0.5, 100);
        cfg.presented_cap = 30;
        let out = rejection_sample(&base, &reward, &cfg, 2).unwrap();
        let st = out.rejection.unwrap();
        assert_eq!(st.presented, 30);
        assert!(st.accepted < 100 && st.accepted <= st.presented);
        assert_eq!(out.samples.len(), st.accepted);
    }

    #[test]
    fn learned_eps_wrapper_checks_head() {
        assert!(LearnedEps::new(Mlp::new(2, &[4], 1, Head::Sigmoid, true, 1.0, 0)).is_err());
        let e = LearnedEps::new(Mlp::new(2, &[4], 2, Head::Linear, true, 1.0, 0)).unwrap();
        assert_eq!(e.dim(), 2);
    }
}
