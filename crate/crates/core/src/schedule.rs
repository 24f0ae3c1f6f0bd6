//! Variance-preserving forward diffusion.
//!
//! The forward SDE is `dX = -β(t)/2 X dt + √β(t) dW` with a linear rate
//! `β(t)`, so the marginal at time `t` is `√ᾱ(t) X₀ + √(1-ᾱ(t)) ε` with
//! `ᾱ(t) = exp(-∫₀ᵗ β)`. [`DiffusionGrid`] discretizes this onto a uniform
//! time grid shared by every sampler.

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

fn default_horizon() -> f64 {
    1.0
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
            kind: ScheduleKind::Linear,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        let schedule = Self {
            beta_min,
            beta_max,
            horizon,
            kind: ScheduleKind::Linear,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::domain("horizon", format!("{} must be > 0", self.horizon)));
        }
        // Linear β is positive on [0, T] iff it is positive at both ends.
        if !(self.beta_min > 0.0 && self.beta_max > 0.0)
            || !(self.beta_min.is_finite() && self.beta_max.is_finite())
        {
            return Err(Error::domain(
                "beta",
                format!(
                    "beta_min={} beta_max={} must both be finite and > 0",
                    self.beta_min, self.beta_max
                ),
            ));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::domain("time", format!("t={t} not in [0, {}]", self.horizon)))
        }
    }

    /// Instantaneous rate β(t).
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_unchecked(t))
    }

    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + (t / self.horizon) * (self.beta_max - self.beta_min)
    }

    /// ∫₀ᵗ β(s) ds in closed form.
    pub fn integrated_beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.integrated_beta_unchecked(t))
    }

    fn integrated_beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.horizon)
    }

    /// Signal coefficient ᾱ(t) = exp(-∫₀ᵗ β).
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.alpha_bar_unchecked(t))
    }

    pub(crate) fn alpha_bar_unchecked(&self, t: f64) -> f64 {
        (-self.integrated_beta_unchecked(t)).exp()
    }

    /// `√ᾱ x0 + √(1-ᾱ) eps` at time `t`.
    pub fn forward_noise(&self, x0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
        check_len("forward_noise eps", x0.len(), eps.len())?;
        let alpha = self.alpha_bar(t)?;
        Ok(noise_with_alpha(x0, alpha, eps))
    }

    /// [`forward_noise`](Self::forward_noise) with ε drawn from `rng`.
    pub fn forward_noise_rng<R: rand::Rng + ?Sized>(
        &self,
        x0: &[f64],
        t: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let eps = standard_normal(x0.len(), rng);
        self.forward_noise(x0, t, &eps)
    }
}

pub(crate) fn noise_with_alpha(x0: &[f64], alpha: f64, eps: &[f64]) -> Vec<f64> {
    let (a, s) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

pub fn standard_normal<R: rand::Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A point on the diffusion clock: the time and its signal coefficient ᾱ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub t: f64,
    pub alpha_bar: f64,
}

impl Level {
    /// `t = 0`, `ᾱ = 1`.
    pub const CLEAN: Level = Level {
        t: 0.0,
        alpha_bar: 1.0,
    };

    pub fn at(schedule: &NoiseSchedule, t: f64) -> Result<Level> {
        Ok(Level {
            t,
            alpha_bar: schedule.alpha_bar(t)?,
        })
    }
}

/// Uniform discretization of a [`NoiseSchedule`].
///
/// Index `k` runs over `0..=N`; `times[0] = 0`, `times[N] = T`. Step rates
/// are taken from consecutive ratios, `β̃_k = 1 - ᾱ(t_k)/ᾱ(t_{k-1})`, and
/// the stored `alpha_bars` are the running products of `1 - β̃_k`, so the
/// discrete product identity holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionGrid {
    schedule: NoiseSchedule,
    times: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// `step_betas[k]` for k ≥ 1; entry 0 is unused and set to 0.
    step_betas: Vec<f64>,
}

pub const DEFAULT_NUM_STEPS: usize = 1000;

impl DiffusionGrid {
    pub fn new(schedule: NoiseSchedule, num_steps: usize) -> Result<Self> {
        schedule.validate()?;
        if num_steps == 0 {
            return Err(Error::domain("num_steps", "grid needs at least one step"));
        }
        let n = num_steps;
        let times: Vec<f64> = (0..=n)
            .map(|k| schedule.horizon * k as f64 / n as f64)
            .collect();
        let continuous: Vec<f64> = times
            .iter()
            .map(|&t| schedule.alpha_bar_unchecked(t))
            .collect();
        let mut step_betas = vec![0.0; n + 1];
        let mut alpha_bars = vec![1.0; n + 1];
        for k in 1..=n {
            let beta = 1.0 - continuous[k] / continuous[k - 1];
            debug_assert!(beta > 0.0 && beta < 1.0);
            step_betas[k] = beta;
            alpha_bars[k] = alpha_bars[k - 1] * (1.0 - beta);
        }
        Ok(Self {
            schedule,
            times,
            alpha_bars,
            step_betas,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn level(&self, k: usize) -> Level {
        Level {
            t: self.times[k],
            alpha_bar: self.alpha_bars[k],
        }
    }

    /// β̃_k for `k` in `1..=N`.
    pub fn step_beta(&self, k: usize) -> f64 {
        assert!(k >= 1, "step betas are indexed from 1");
        self.step_betas[k]
    }
}
