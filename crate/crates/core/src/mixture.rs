//! Labeled Gaussian-mixture worlds.
//!
//! A [`LabeledMixture`] plays the role of the pre-trained generator's data
//! distribution. Because the forward VP process maps a Gaussian component
//! `N(μ, Σ)` to `N(√ᾱ μ, ᾱΣ + (1-ᾱ)I)`, every time-t marginal is again a
//! mixture, and its score, Hessian and the time-dependent reward
//! `P(benign | X_t = x)` are available in closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schedule::{standard_normal as normal_draws, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Malign,
}

impl Label {
    /// Feedback encoding: benign = 1, malign = 0.
    pub fn as_bit(self) -> u8 {
        match self {
            Label::Benign => 1,
            Label::Malign => 0,
        }
    }

    pub fn from_bit(y: u8) -> Self {
        if y == 0 {
            Label::Malign
        } else {
            Label::Benign
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `σ² I`
    Isotropic(f64),
    Full(DMatrix<f64>),
}

/// Serialized form: `{weight, mean, sigma, label}` or `{weight, mean, cov, label}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComponentRecord {
    weight: f64,
    mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov: Option<Vec<Vec<f64>>>,
    label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ComponentRecord", into = "ComponentRecord")]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Covariance,
    pub label: Label,
}

impl Component {
    pub fn isotropic(weight: f64, mean: Vec<f64>, sigma: f64, label: Label) -> Self {
        Self {
            weight,
            mean,
            covariance: Covariance::Isotropic(sigma * sigma),
            label,
        }
    }

    /// Largest marginal standard deviation.
    pub fn max_std(&self) -> f64 {
        match &self.covariance {
            Covariance::Isotropic(v) => v.sqrt(),
            Covariance::Full(m) => (0..m.nrows()).map(|i| m[(i, i)]).fold(0.0, f64::max).sqrt(),
        }
    }

    fn marginal_var(&self, axis: usize) -> f64 {
        match &self.covariance {
            Covariance::Isotropic(v) => *v,
            Covariance::Full(m) => m[(axis, axis)],
        }
    }
}

impl TryFrom<ComponentRecord> for Component {
    type Error = String;

    fn try_from(r: ComponentRecord) -> Result<Self, String> {
        let covariance = match (r.sigma, r.cov) {
            (Some(s), None) => Covariance::Isotropic(s * s),
            (None, Some(rows)) => {
                let d = rows.len();
                if rows.iter().any(|row| row.len() != d) {
                    return Err("cov must be a square matrix".into());
                }
                Covariance::Full(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
            _ => return Err("component needs exactly one of `sigma` or `cov`".into()),
        };
        Ok(Component {
            weight: r.weight,
            mean: r.mean,
            covariance,
            label: r.label,
        })
    }
}

impl From<Component> for ComponentRecord {
    fn from(c: Component) -> Self {
        let (sigma, cov) = match c.covariance {
            Covariance::Isotropic(v) => (Some(v.sqrt()), None),
            Covariance::Full(m) => (
                None,
                Some(
                    (0..m.nrows())
                        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                        .collect(),
                ),
            ),
        };
        ComponentRecord {
            weight: c.weight,
            mean: c.mean,
            sigma,
            cov,
            label: c.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct LabeledMixture {
    components: Vec<Component>,
    dim: usize,
    /// Cholesky factors of Σ_i, for sampling.
    chol: Vec<Option<DMatrix<f64>>>,
}

impl TryFrom<Vec<Component>> for LabeledMixture {
    type Error = String;
    fn try_from(components: Vec<Component>) -> Result<Self, String> {
        LabeledMixture::new(components).map_err(|e| e.to_string())
    }
}

impl From<LabeledMixture> for Vec<Component> {
    fn from(m: LabeledMixture) -> Self {
        m.components
    }
}

/// One sample together with the component that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub point: Vec<f64>,
    pub component: usize,
}

/// Per-component quantities of the time-t marginal at a point.
struct Term {
    /// `ln w_i + ln N(x; m_i, C_i)`
    log_wn: f64,
    /// `-C_i⁻¹ (x - m_i)`
    score: Vec<f64>,
    precision: Precision,
}

enum Precision {
    Scaled(f64),
    Full(DMatrix<f64>),
}

/// Everything derived from the time-t mixture at one point.
#[derive(Debug, Clone)]
pub struct MarginalEval {
    pub log_density: f64,
    pub responsibilities: Vec<f64>,
    pub score: Vec<f64>,
    /// `log P(benign | X_t = x)`
    pub log_reward: f64,
    /// `log P(malign | X_t = x)`
    pub log_malign: f64,
    pub grad_log_reward: Vec<f64>,
}

fn log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl LabeledMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("mixture dimension must be ≥ 1".into()));
        }
        let mut chol = Vec::with_capacity(components.len());
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            check_len("component mean", dim, c.mean.len())?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Config(format!("component {i}: weight {} must be > 0", c.weight)));
            }
            total += c.weight;
            match &c.covariance {
                Covariance::Isotropic(v) => {
                    if !(*v > 0.0 && v.is_finite()) {
                        return Err(Error::Config(format!("component {i}: sigma must be > 0")));
                    }
                    chol.push(None);
                }
                Covariance::Full(m) => {
                    check_len("component covariance", dim, m.nrows())?;
                    check_len("component covariance", dim, m.ncols())?;
                    if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
                        return Err(Error::Config(format!("component {i}: covariance not symmetric")));
                    }
                    let l = m.clone().cholesky().ok_or_else(|| {
                        Error::Config(format!("component {i}: covariance not positive definite"))
                    })?;
                    chol.push(Some(l.l()));
                }
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights sum to {total}, expected 1")));
        }
        if !components.iter().any(|c| c.label == Label::Benign) {
            return Err(Error::Config("mixture needs at least one benign component".into()));
        }
        Ok(Self {
            components,
            dim,
            chol,
        })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn benign_mass(&self) -> f64 {
        self.components
            .iter()
            .filter(|c| c.label == Label::Benign)
            .fold(0.0, |acc, c| acc + c.weight)
    }

    pub fn malign_mass(&self) -> f64 {
        self.components
            .iter()
            .filter(|c| c.label == Label::Malign)
            .fold(0.0, |acc, c| acc + c.weight)
    }

    pub fn benign_indices(&self) -> Vec<usize> {
        (0..self.components.len())
            .filter(|&i| self.components[i].label == Label::Benign)
            .collect()
    }

    /// i.i.d. draws with their generating component.
    pub fn sample<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Draw>> {
        if n == 0 {
            return Err(Error::domain("n", "sample count must be ≥ 1"));
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }

    pub fn sample_one<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut component = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                component = i;
                break;
            }
        }
        let c = &self.components[component];
        let z = normal_draws(self.dim, rng);
        let point = match (&c.covariance, &self.chol[component]) {
            (Covariance::Isotropic(v), _) => {
                let s = v.sqrt();
                c.mean.iter().zip(&z).map(|(m, z)| m + s * z).collect()
            }
            (Covariance::Full(_), Some(l)) => {
                let lz = l * DVector::from_vec(z);
                c.mean.iter().zip(lz.iter()).map(|(m, v)| m + v).collect()
            }
            (Covariance::Full(_), None) => unreachable!("full covariance always has a factor"),
        };
        Draw { point, component }
    }

    fn terms(&self, x: &[f64], alpha: f64) -> Vec<Term> {
        let sa = alpha.sqrt();
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(x, m)| x - sa * m).collect();
                match &c.covariance {
                    Covariance::Isotropic(v) => {
                        let var = alpha * v + (1.0 - alpha);
                        let sq: f64 = diff.iter().map(|v| v * v).sum();
                        Term {
                            log_wn: c.weight.ln() - 0.5 * d * (LOG_2PI + var.ln()) - 0.5 * sq / var,
                            score: diff.iter().map(|v| -v / var).collect(),
                            precision: Precision::Scaled(1.0 / var),
                        }
                    }
                    Covariance::Full(cov) => {
                        let n = self.dim;
                        let cov_t = cov * alpha + DMatrix::<f64>::identity(n, n) * (1.0 - alpha);
                        let chol = cov_t
                            .cholesky()
                            .expect("αΣ + (1-α)I is SPD for SPD Σ and α ∈ [0,1]");
                        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                        let precision = chol.inverse();
                        let pd = &precision * DVector::from_column_slice(&diff);
                        let quad: f64 = pd.iter().zip(&diff).map(|(a, b)| a * b).sum();
                        Term {
                            log_wn: c.weight.ln() - 0.5 * (d * LOG_2PI + logdet) - 0.5 * quad,
                            score: pd.iter().map(|v| -v).collect(),
                            precision: Precision::Full(precision),
                        }
                    }
                }
            })
            .collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_len("mixture point", self.dim, x.len())
    }

    /// All closed-form quantities of the time-t marginal at signal level `alpha`.
    pub fn eval_alpha(&self, x: &[f64], alpha: f64) -> MarginalEval {
        let terms = self.terms(x, alpha);
        self.summarize(&terms)
    }

    fn summarize(&self, terms: &[Term]) -> MarginalEval {
        let log_density = log_sum_exp(terms.iter().map(|t| t.log_wn));
        let responsibilities: Vec<f64> =
            terms.iter().map(|t| (t.log_wn - log_density).exp()).collect();
        let mut score = vec![0.0; self.dim];
        for (t, g) in terms.iter().zip(&responsibilities) {
            for (s, v) in score.iter_mut().zip(&t.score) {
                *s += g * v;
            }
        }

        let by_label = |label: Label| {
            terms
                .iter()
                .zip(&self.components)
                .filter(move |(_, c)| c.label == label)
                .map(|(t, _)| t)
        };
        let lse_benign = log_sum_exp(by_label(Label::Benign).map(|t| t.log_wn));
        let lse_malign = log_sum_exp(by_label(Label::Malign).map(|t| t.log_wn));
        let (log_reward, log_malign) = if lse_malign == f64::NEG_INFINITY {
            (0.0, f64::NEG_INFINITY)
        } else {
            let logit = lse_benign - lse_malign;
            (log_sigmoid(logit), log_sigmoid(-logit))
        };

        // ∇ log r = (1 - r)(s_B - s_M), with s_B, s_M the scores of the benign
        // and malign sub-mixtures.
        let sub_score = |label: Label, lse: f64| {
            let mut s = vec![0.0; self.dim];
            if lse == f64::NEG_INFINITY {
                return s;
            }
            for t in by_label(label) {
                let g = (t.log_wn - lse).exp();
                for (acc, v) in s.iter_mut().zip(&t.score) {
                    *acc += g * v;
                }
            }
            s
        };
        let grad_log_reward = if lse_malign == f64::NEG_INFINITY {
            vec![0.0; self.dim]
        } else {
            let sb = sub_score(Label::Benign, lse_benign);
            let sm = sub_score(Label::Malign, lse_malign);
            let one_minus_r = log_malign.exp();
            sb.iter().zip(&sm).map(|(b, m)| one_minus_r * (b - m)).collect()
        };

        MarginalEval {
            log_density,
            responsibilities,
            score,
            log_reward,
            log_malign,
            grad_log_reward,
        }
    }

    pub fn log_density_t(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.eval_alpha(x, schedule.alpha_bar(t)?).log_density)
    }

    /// `∇ log p_t(x)`.
    pub fn score_t(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.eval_alpha(x, schedule.alpha_bar(t)?).score)
    }

    /// Hessian of `log p_t` at `x`, row-major `d × d`.
    pub fn score_jacobian_t(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.score_jacobian_alpha(x, schedule.alpha_bar(t)?))
    }

    /// `Σ γ_i (s_i s_iᵀ - P_i) - s sᵀ`
    pub fn score_jacobian_alpha(&self, x: &[f64], alpha: f64) -> Vec<f64> {
        let d = self.dim;
        let terms = self.terms(x, alpha);
        let eval = self.summarize(&terms);
        let mut h = vec![0.0; d * d];
        for (t, g) in terms.iter().zip(&eval.responsibilities) {
            for i in 0..d {
                for j in 0..d {
                    let p = match &t.precision {
                        Precision::Scaled(p) => {
                            if i == j {
                                *p
                            } else {
                                0.0
                            }
                        }
                        Precision::Full(m) => m[(i, j)],
                    };
                    h[i * d + j] += g * (t.score[i] * t.score[j] - p);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                h[i * d + j] -= eval.score[i] * eval.score[j];
            }
        }
        // Symmetrize away rounding so callers can rely on H = Hᵀ.
        for i in 0..d {
            for j in (i + 1)..d {
                let m = 0.5 * (h[i * d + j] + h[j * d + i]);
                h[i * d + j] = m;
                h[j * d + i] = m;
            }
        }
        h
    }

    /// `P(benign | X_t = x)`.
    pub fn reward_exact_t(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<f64> {
        Ok(self.log_reward_exact_t(x, t, schedule)?.exp())
    }

    pub fn log_reward_exact_t(&self, x: &[f64], t: f64, schedule: &NoiseSchedule) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.eval_alpha(x, schedule.alpha_bar(t)?).log_reward)
    }

    /// Time-independent reward `P(benign | X = x)`.
    pub fn reward_exact(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.eval_alpha(x, 1.0).log_reward.exp())
    }

    /// Ground-truth labeler: benign iff `P(benign | x) ≥ ½`, ties benign.
    pub fn oracle_label(&self, x: &[f64]) -> Label {
        let terms = self.terms(x, 1.0);
        let lse = |label: Label| {
            log_sum_exp(
                terms
                    .iter()
                    .zip(&self.components)
                    .filter(|(_, c)| c.label == label)
                    .map(|(t, _)| t.log_wn),
            )
        };
        if lse(Label::Benign) >= lse(Label::Malign) {
            Label::Benign
        } else {
            Label::Malign
        }
    }

    pub fn oracle_annotate(&self, points: &[Vec<f64>]) -> Result<Vec<u8>> {
        points
            .iter()
            .map(|p| {
                self.check_point(p)?;
                Ok(self.oracle_label(p).as_bit())
            })
            .collect()
    }

    /// Index of the component with the largest posterior at t = 0.
    pub fn assign(&self, x: &[f64]) -> usize {
        let terms = self.terms(x, 1.0);
        terms
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, t)| {
                if t.log_wn > best.1 {
                    (i, t.log_wn)
                } else {
                    best
                }
            })
            .0
    }

    /// Posterior over components at t = 0.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        self.eval_alpha(x, 1.0).responsibilities
    }

    /// The censored target `p ∝ p_data · r`: the benign sub-mixture, renormalized.
    pub fn censored_reference(&self) -> LabeledMixture {
        let b = self.benign_mass();
        let components = self
            .components
            .iter()
            .filter(|c| c.label == Label::Benign)
            .map(|c| Component {
                weight: c.weight / b,
                ..c.clone()
            })
            .collect();
        LabeledMixture::new(components).expect("benign sub-mixture of a valid world is valid")
    }

    /// Smallest distance between two component means in units of the
    /// larger component standard deviation.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.components.len() {
            for j in (i + 1)..self.components.len() {
                let (a, b) = (&self.components[i], &self.components[j]);
                let dist = a
                    .mean
                    .iter()
                    .zip(&b.mean)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(dist / a.max_std().max(b.max_std()));
            }
        }
        best
    }
}

/// Axis-aligned box with a midpoint-rule integrator over a 2-D mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOracle {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub resolution: usize,
}

/// Upper bound on the mixture mass allowed outside the box.
pub const GRID_MASS_TOLERANCE: f64 = 1e-6;

impl GridOracle {
    pub fn new(world: &LabeledMixture, lower: [f64; 2], upper: [f64; 2], resolution: usize) -> Result<Self> {
        if world.dim() != 2 {
            return Err(Error::Shape {
                what: "grid oracle dimension",
                expected: 2,
                got: world.dim(),
            });
        }
        if resolution == 0 || lower[0] >= upper[0] || lower[1] >= upper[1] {
            return Err(Error::Config("grid oracle needs a non-empty box and resolution ≥ 1".into()));
        }
        let oracle = Self {
            lower,
            upper,
            resolution,
        };
        let outside = oracle.mass_outside_bound(world);
        if outside > GRID_MASS_TOLERANCE {
            return Err(Error::Config(format!(
                "box leaves up to {outside:e} of the mixture mass outside"
            )));
        }
        Ok(oracle)
    }

    /// Box spanning every component mean ± 6 marginal standard deviations.
    pub fn covering(world: &LabeledMixture, resolution: usize) -> Result<Self> {
        let mut lower = [f64::INFINITY; 2];
        let mut upper = [f64::NEG_INFINITY; 2];
        for c in world.components() {
            for axis in 0..2.min(c.mean.len()) {
                let s = c.marginal_var(axis).sqrt();
                lower[axis] = lower[axis].min(c.mean[axis] - 6.0 * s);
                upper[axis] = upper[axis].max(c.mean[axis] + 6.0 * s);
            }
        }
        Self::new(world, lower, upper, resolution)
    }

    /// Union bound on the mass outside the box, per component and axis.
    pub fn mass_outside_bound(&self, world: &LabeledMixture) -> f64 {
        use statrs::function::erf::erfc;
        let tail = |z: f64| 0.5 * erfc(z / std::f64::consts::SQRT_2);
        world
            .components()
            .iter()
            .map(|c| {
                let per_axis: f64 = (0..2)
                    .map(|axis| {
                        let s = c.marginal_var(axis).sqrt();
                        tail((c.mean[axis] - self.lower[axis]) / s)
                            + tail((self.upper[axis] - c.mean[axis]) / s)
                    })
                    .sum();
                c.weight * per_axis
            })
            .sum()
    }

    /// Midpoint-rule integral of `f` over the box.
    pub fn expectation(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let n = self.resolution;
        let hx = (self.upper[0] - self.lower[0]) / n as f64;
        let hy = (self.upper[1] - self.lower[1]) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = self.lower[0] + (i as f64 + 0.5) * hx;
            let mut row = 0.0;
            for j in 0..n {
                let y = self.lower[1] + (j as f64 + 0.5) * hy;
                row += f(&[x, y]);
            }
            total += row;
        }
        total * hx * hy
    }
}

/// Named benchmark worlds. Modes sit on a ring of radius 6 with σ = 0.5.
pub mod presets {
    use super::*;

    pub const RING_RADIUS: f64 = 6.0;
    pub const RING_SIGMA: f64 = 0.5;

    pub const NAMES: [&str; 5] = [
        "benign_dominant",
        "malign_dominant",
        "bedroom_like",
        "symmetric_pair",
        "standard_normal",
    ];

    fn ring(labels_and_weights: &[(Label, f64)]) -> LabeledMixture {
        LabeledMixture::new(ring_components(labels_and_weights)).expect("preset weights sum to one")
    }

    fn ring_components(labels_and_weights: &[(Label, f64)]) -> Vec<Component> {
        let n = labels_and_weights.len();
        labels_and_weights
            .iter()
            .enumerate()
            .map(|(i, &(label, w))| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                Component::isotropic(
                    w,
                    vec![RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin()],
                    RING_SIGMA,
                    label,
                )
            })
            .collect()
    }

    /// Malign mass 0.119 on one of five ring modes.
    pub fn benign_dominant() -> LabeledMixture {
        let b = 0.881 / 4.0;
        ring(&[
            (Label::Benign, b),
            (Label::Benign, b),
            (Label::Malign, 0.119),
            (Label::Benign, b),
            (Label::Benign, b),
        ])
    }

    /// Malign mass 0.686: three large malign modes alternating with three
    /// benign modes on the ring, plus a small malign satellite (weight 0.05)
    /// just outside the benign mode at angle 0. Ten labels from uncensored
    /// samples rarely include the satellite, so a first-round reward leaks it.
    pub fn malign_dominant() -> LabeledMixture {
        let (b, m) = (0.314 / 3.0, (0.686 - SATELLITE_WEIGHT) / 3.0);
        let mut components = ring_components(&[
            (Label::Benign, b),
            (Label::Malign, m),
            (Label::Benign, b),
            (Label::Malign, m),
            (Label::Benign, b),
            (Label::Malign, m),
        ]);
        components.push(Component::isotropic(
            SATELLITE_WEIGHT,
            vec![RING_RADIUS + 4.0 * RING_SIGMA, 0.0],
            RING_SIGMA,
            Label::Malign,
        ));
        LabeledMixture::new(components).expect("preset weights sum to one")
    }

    pub const SATELLITE_WEIGHT: f64 = 0.05;

    /// Malign mass 0.126 on one of six ring modes.
    pub fn bedroom_like() -> LabeledMixture {
        let b = 0.874 / 5.0;
        ring(&[
            (Label::Benign, b),
            (Label::Benign, b),
            (Label::Benign, b),
            (Label::Malign, 0.126),
            (Label::Benign, b),
            (Label::Benign, b),
        ])
    }

    /// Benign `N((3,0), ¼I)` and malign `N((-3,0), ¼I)`, equal weights.
    pub fn symmetric_pair() -> LabeledMixture {
        LabeledMixture::new(vec![
            Component::isotropic(0.5, vec![3.0, 0.0], 0.5, Label::Benign),
            Component::isotropic(0.5, vec![-3.0, 0.0], 0.5, Label::Malign),
        ])
        .expect("valid")
    }

    /// Single benign `N(0, I)` in two dimensions.
    pub fn standard_normal() -> LabeledMixture {
        LabeledMixture::new(vec![Component::isotropic(1.0, vec![0.0, 0.0], 1.0, Label::Benign)])
            .expect("valid")
    }

    pub fn by_name(name: &str) -> Option<LabeledMixture> {
        Some(match name {
            "benign_dominant" => benign_dominant(),
            "malign_dominant" => malign_dominant(),
            "bedroom_like" => bedroom_like(),
            "symmetric_pair" => symmetric_pair(),
            "standard_normal" => standard_normal(),
            _ => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn fd_score(world: &LabeledMixture, x: &[f64], alpha: f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (world.eval_alpha(&p, alpha).log_density - world.eval_alpha(&m, alpha).log_density)
                    / (2.0 * h)
            })
            .collect()
    }

    fn anisotropic() -> LabeledMixture {
        let cov = |a: f64, b: f64, c: f64| Covariance::Full(DMatrix::from_row_slice(2, 2, &[a, b, b, c]));
        LabeledMixture::new(vec![
            Component {
                weight: 0.3,
                mean: vec![1.0, -0.5],
                covariance: cov(0.8, 0.3, 0.5),
                label: Label::Benign,
            },
            Component {
                weight: 0.45,
                mean: vec![-1.5, 1.0],
                covariance: cov(0.4, -0.1, 1.2),
                label: Label::Malign,
            },
            Component::isotropic(0.25, vec![0.5, 2.0], 0.7, Label::Benign),
        ])
        .unwrap()
    }

    #[test]
    fn validation() {
        let c = |w| Component::isotropic(w, vec![0.0, 0.0], 1.0, Label::Benign);
        assert!(LabeledMixture::new(vec![]).is_err());
        assert!(LabeledMixture::new(vec![c(0.5), c(0.4)]).is_err());
        assert!(LabeledMixture::new(vec![c(1.0), c(0.0)]).is_err());
        assert!(LabeledMixture::new(vec![Component::isotropic(1.0, vec![0.0], 1.0, Label::Malign)]).is_err());
        let not_spd = Component {
            weight: 1.0,
            mean: vec![0.0, 0.0],
            covariance: Covariance::Full(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
            label: Label::Benign,
        };
        assert!(LabeledMixture::new(vec![not_spd]).is_err());
    }

    #[test]
    fn preset_masses() {
        assert!((benign_dominant().malign_mass() - 0.119).abs() < 1e-12);
        assert!((malign_dominant().malign_mass() - 0.686).abs() < 1e-12);
        assert!((bedroom_like().malign_mass() - 0.126).abs() < 1e-12);
        for name in NAMES {
            assert!(by_name(name).is_some());
        }
        assert!(benign_dominant().min_separation() >= 4.0);
    }

    #[test]
    fn serde_record_shape() {
        let w = symmetric_pair();
        let json = serde_json::to_string(&w).unwrap();
        assert!(json.contains("\"sigma\":0.5") && json.contains("\"label\":\"malign\""));
        let back: LabeledMixture = serde_json::from_str(&json).unwrap();
        assert_eq!(back, w);
        let aniso = anisotropic();
        let back: LabeledMixture = serde_json::from_str(&serde_json::to_string(&aniso).unwrap()).unwrap();
        assert_eq!(back, aniso);
    }

    #[test]
    fn sampling_single_component_and_weights() {
        let mut rng = seeded(1);
        let draws = standard_normal().sample(100, &mut rng).unwrap();
        assert!(draws.iter().all(|d| d.component == 0));
        assert!(standard_normal().sample(0, &mut rng).is_err());

        let w = symmetric_pair();
        let n = 10_000;
        let draws = w.sample(n, &mut rng).unwrap();
        let zero = draws.iter().filter(|d| d.component == 0).count() as f64 / n as f64;
        assert!((zero - 0.5).abs() <= 3.0 * (0.25f64 / n as f64).sqrt());
        // component means within 3 standard errors per axis
        for comp in 0..2 {
            let pts: Vec<_> = draws.iter().filter(|d| d.component == comp).collect();
            let m = pts.len() as f64;
            for axis in 0..2 {
                let mean = pts.iter().map(|d| d.point[axis]).sum::<f64>() / m;
                let se = 0.5 / m.sqrt();
                assert!((mean - w.components()[comp].mean[axis]).abs() <= 3.0 * se);
            }
        }
    }

    #[test]
    fn full_covariance_sampling_moments() {
        let w = anisotropic();
        let mut rng = seeded(9);
        let draws = w.sample(40_000, &mut rng).unwrap();
        let pts: Vec<_> = draws.iter().filter(|d| d.component == 0).map(|d| &d.point).collect();
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / m;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / m;
        let cxy = pts.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / m;
        assert!((mx - 1.0).abs() < 4.0 * (0.8 / m).sqrt());
        assert!((cxy - 0.3).abs() < 0.03);
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let w = standard_normal();
        let s = NoiseSchedule::default();
        for &t in &[0.0, 0.1, 0.5, 1.0] {
            let x = [0.7, -2.1];
            let score = w.score_t(&x, t, &s).unwrap();
            assert!((score[0] + 0.7).abs() < 1e-14 && (score[1] - 2.1).abs() < 1e-14);
            let h = w.score_jacobian_t(&x, t, &s).unwrap();
            for (got, want) in h.iter().zip([-1.0, 0.0, 0.0, -1.0]) {
                assert!((got - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_pair_symmetries() {
        let w = symmetric_pair();
        let s = NoiseSchedule::default();
        for &t in &[0.0, 0.2, 0.7, 1.0] {
            let score = w.score_t(&[0.0, 1.3], t, &s).unwrap();
            assert_eq!(score[0], 0.0);
            let r = w.reward_exact_t(&[0.0, 0.0], t, &s).unwrap();
            assert!((r - 0.5).abs() < 1e-15);
        }
        assert_eq!(w.oracle_label(&[0.0, 0.4]), Label::Benign);
    }

    #[test]
    fn reward_at_benign_mean() {
        let w = symmetric_pair();
        let s = NoiseSchedule::default();
        // log-odds = 36 / (2 · 0.25) = 72
        let log_r = w.log_reward_exact_t(&[3.0, 0.0], 0.0, &s).unwrap();
        let expected = -(-72f64).exp().ln_1p();
        assert!((log_r - expected).abs() < 1e-40);
        assert!(log_r < 0.0);
        let r = w.reward_exact_t(&[3.0, 0.0], 0.0, &s).unwrap();
        assert!((r - 1.0 / (1.0 + (-72f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn reward_tends_to_benign_mass() {
        let s = NoiseSchedule::default();
        for w in [benign_dominant(), malign_dominant(), symmetric_pair()] {
            for x in [[0.0, 0.0], [0.2, -0.1], [-0.05, 0.3]] {
                let r = w.reward_exact_t(&x, 1.0, &s).unwrap();
                assert!((r - w.benign_mass()).abs() < 1e-2, "{r} vs {}", w.benign_mass());
            }
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(3);
        for w in [benign_dominant(), anisotropic()] {
            for _ in 0..50 {
                let t: f64 = rng.random::<f64>() * 0.9;
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
                let alpha = s.alpha_bar(t).unwrap();
                let score = w.eval_alpha(&x, alpha).score;
                let fd = fd_score(&w, &x, alpha, 1e-4);
                let norm = score.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                for (a, b) in score.iter().zip(&fd) {
                    assert!((a - b).abs() / norm <= 1e-5, "{score:?} vs {fd:?}");
                }
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(4);
        let h = 1e-5;
        for w in [benign_dominant(), anisotropic(), symmetric_pair()] {
            for _ in 0..50 {
                let t: f64 = rng.random::<f64>() * 0.9;
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
                let alpha = s.alpha_bar(t).unwrap();
                let hess = w.score_jacobian_alpha(&x, alpha);
                assert_eq!(hess[1], hess[2]);
                let scale = hess.iter().map(|v| v.abs()).fold(1e-3, f64::max);
                for j in 0..2 {
                    let mut p = x.clone();
                    let mut m = x.clone();
                    p[j] += h;
                    m[j] -= h;
                    let (sp, sm) = (w.eval_alpha(&p, alpha).score, w.eval_alpha(&m, alpha).score);
                    for i in 0..2 {
                        let fd = (sp[i] - sm[i]) / (2.0 * h);
                        assert!((hess[i * 2 + j] - fd).abs() / scale <= 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn grad_log_reward_matches_finite_differences() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(5);
        let w = anisotropic();
        for _ in 0..50 {
            let t: f64 = rng.random::<f64>() * 0.9;
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let alpha = s.alpha_bar(t).unwrap();
            let g = w.eval_alpha(&x, alpha).grad_log_reward;
            for i in 0..2 {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += 1e-5;
                m[i] -= 1e-5;
                let fd = (w.eval_alpha(&p, alpha).log_reward - w.eval_alpha(&m, alpha).log_reward) / 2e-5;
                assert!((g[i] - fd).abs() <= 1e-6 * g[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn censoring_identity_pointwise() {
        // p_t · r_t equals b · p_t^benign, so log p_t + log r_t - log b = log p_t^benign.
        let s = NoiseSchedule::default();
        let mut rng = seeded(6);
        for w in [benign_dominant(), malign_dominant(), anisotropic()] {
            let reference = w.censored_reference();
            let log_b = w.benign_mass().ln();
            for _ in 0..100 {
                let t: f64 = rng.random();
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-8.0..8.0)).collect();
                let alpha = s.alpha_bar(t).unwrap();
                let e = w.eval_alpha(&x, alpha);
                let lhs = e.log_density + e.log_reward - log_b;
                let rhs = reference.eval_alpha(&x, alpha).log_density;
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn invariant_under_component_permutation() {
        let w = benign_dominant();
        let mut comps = w.components().to_vec();
        comps.reverse();
        let perm = LabeledMixture::new(comps).unwrap();
        let s = NoiseSchedule::default();
        for x in [[1.0, 2.0], [-5.0, 0.5], [0.0, -6.0]] {
            let (a, b) = (w.score_t(&x, 0.3, &s).unwrap(), perm.score_t(&x, 0.3, &s).unwrap());
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            let (ra, rb) = (
                w.log_reward_exact_t(&x, 0.3, &s).unwrap(),
                perm.log_reward_exact_t(&x, 0.3, &s).unwrap(),
            );
            assert!((ra - rb).abs() < 1e-12);
        }
    }

    #[test]
    fn censored_reference_weights() {
        let all_benign = standard_normal();
        assert_eq!(all_benign.censored_reference(), all_benign);

        let one = LabeledMixture::new(vec![
            Component::isotropic(0.88, vec![0.0, 0.0], 1.0, Label::Benign),
            Component::isotropic(0.12, vec![5.0, 0.0], 1.0, Label::Malign),
        ])
        .unwrap();
        assert_eq!(one.censored_reference().components()[0].weight, 1.0);

        let two = LabeledMixture::new(vec![
            Component::isotropic(0.4, vec![0.0, 0.0], 1.0, Label::Benign),
            Component::isotropic(0.48, vec![0.0, 5.0], 1.0, Label::Benign),
            Component::isotropic(0.12, vec![5.0, 0.0], 1.0, Label::Malign),
        ])
        .unwrap();
        let r = two.censored_reference();
        assert!((r.components()[0].weight - 0.4 / 0.88).abs() < 1e-15);
        assert!((r.components()[1].weight - 0.48 / 0.88).abs() < 1e-15);
        assert!((r.components()[0].weight - 0.454_545).abs() < 1e-6);
    }

    #[test]
    fn oracle_annotator() {
        let w = benign_dominant();
        let means: Vec<Vec<f64>> = w.components().iter().map(|c| c.mean.clone()).collect();
        let labels = w.oracle_annotate(&means).unwrap();
        assert_eq!(labels, vec![1, 1, 0, 1, 1]);

        // modes ≥ 10σ apart: annotator agrees with the generating component
        let mut rng = seeded(8);
        let n = 20_000;
        let agree = w
            .sample(n, &mut rng)
            .unwrap()
            .iter()
            .filter(|d| w.oracle_label(&d.point) == w.components()[d.component].label)
            .count();
        assert!(agree as f64 / n as f64 >= 0.999);
    }

    #[test]
    fn grid_oracle_integrals() {
        let w = benign_dominant();
        let oracle = GridOracle::covering(&w, 512).unwrap();
        let s = NoiseSchedule::default();
        let mass = oracle.expectation(|x| w.log_density_t(x, 0.0, &s).unwrap().exp());
        assert!((mass - 1.0).abs() <= 1e-4, "{mass}");
        let benign = oracle.expectation(|x| {
            if w.oracle_label(x) == Label::Benign {
                w.log_density_t(x, 0.0, &s).unwrap().exp()
            } else {
                0.0
            }
        });
        assert!((benign - 0.88).abs() <= 0.005, "{benign}");
        assert_eq!(oracle.expectation(|_| 0.0), 0.0);
        assert!(GridOracle::new(&w, [-1.0, -1.0], [1.0, 1.0], 16).is_err());
    }
}
