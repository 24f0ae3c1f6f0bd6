//! Run configuration, read from and written to TOML.

use censorlab::mixture::{presets, Component, LabeledMixture};
use censorlab::nn::TrainConfig;
use censorlab::reward::{AugmentConfig, ImitationConfig, RewardTraining, AUGMENT_VARIATIONS};
use censorlab::rng::derive;
use censorlab::sampler::{GuidanceConfig, GuidanceMode, JacobianMode};
use censorlab::schedule::{DiffusionGrid, NoiseSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub feedback: FeedbackSpec,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub rejection: RejectionSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

/// A named preset or an inline list of labeled components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<Component>>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            preset: Some("benign_dominant".into()),
            components: None,
        }
    }
}

impl WorldSpec {
    pub fn build(&self) -> Result<LabeledMixture> {
        match (&self.preset, &self.components) {
            (Some(name), None) => {
                presets::by_name(name).ok_or_else(|| Error::Config(vec![format!("world.preset: unknown preset {name:?}")]))
            }
            (None, Some(components)) => LabeledMixture::new(components.clone())
                .map_err(|e| Error::Config(vec![format!("world.components: {e}")])),
            _ => Err(Error::Config(vec![
                "world: give exactly one of `preset` or `components`".into(),
            ])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
    pub num_steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            horizon: s.horizon,
            num_steps: censorlab::schedule::DEFAULT_NUM_STEPS,
        }
    }
}

impl ScheduleSpec {
    pub fn grid(&self) -> Result<DiffusionGrid> {
        let s = NoiseSchedule::new(self.beta_min, self.beta_max, self.horizon)?;
        Ok(DiffusionGrid::new(s, self.num_steps)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    TimeDependent,
    TimeIndependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub hidden: Vec<usize>,
    pub noisy_copies: usize,
    pub augment: bool,
    pub variations: usize,
    pub jitter_sigma: f64,
    pub max_rotation_deg: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema: Option<f64>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = AugmentConfig::default();
        Self {
            kind: RewardKind::TimeDependent,
            hidden: vec![32, 32],
            noisy_copies: 16,
            augment: true,
            variations: a.variations,
            jitter_sigma: a.jitter_sigma,
            max_rotation_deg: a.max_rotation_deg,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            iterations: t.iterations,
            batch_size: t.batch_size,
            alpha: t.alpha,
            ema: None,
        }
    }
}

impl RewardSpec {
    pub fn training(&self) -> RewardTraining {
        RewardTraining {
            hidden: self.hidden.clone(),
            time_dependent: self.kind == RewardKind::TimeDependent,
            noisy_copies: self.noisy_copies,
            augment: self.augment.then_some(AugmentConfig {
                variations: self.variations,
                jitter_sigma: self.jitter_sigma,
                max_rotation_deg: self.max_rotation_deg,
            }),
            train: TrainConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                iterations: self.iterations,
                batch_size: self.batch_size,
                alpha: self.alpha,
                ema: self.ema,
                ..TrainConfig::default()
            },
        }
    }
}

/// Bootstrap ensemble built from uncensored samples labeled until
/// `malign_labels` malign ones are found.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSpec {
    pub members: usize,
    pub malign_labels: usize,
    pub label_batch: usize,
    pub presented_cap: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: 5,
            malign_labels: 10,
            label_batch: 20,
            presented_cap: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    Oracle,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackSpec {
    pub annotator: AnnotatorKind,
    pub rounds: usize,
    pub malign_quota: usize,
    pub benign_quota: usize,
    pub label_batch: usize,
    pub presented_cap: usize,
    /// Training iterations for a buffer of one round's quota.
    pub base_iterations: usize,
}

impl Default for FeedbackSpec {
    fn default() -> Self {
        Self {
            annotator: AnnotatorKind::Oracle,
            rounds: 3,
            malign_quota: 10,
            benign_quota: 10,
            label_batch: 20,
            presented_cap: 2000,
            base_iterations: 500,
        }
    }
}

/// Guidance weight `ω` applies to ensembles and imitation models; single
/// models use `members · ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSpec {
    pub weight: f64,
    pub jacobian: JacobianMode,
    /// Backward guidance and recurrence used by the `*_universal` arms.
    pub backward_steps: usize,
    pub backward_step_size: f64,
    pub recurrence: usize,
    pub backward_every_repeat: bool,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            weight: 1.0,
            jacobian: JacobianMode::ExactVjp,
            backward_steps: 5,
            backward_step_size: 2e-4,
            recurrence: 4,
            backward_every_repeat: true,
        }
    }
}

impl GuidanceSpec {
    pub fn plain(&self, kind: RewardKind, weight: f64) -> GuidanceConfig {
        GuidanceConfig {
            mode: match kind {
                RewardKind::TimeDependent => GuidanceMode::TimeDependent,
                RewardKind::TimeIndependent => GuidanceMode::TimeIndependent,
            },
            weight,
            jacobian: self.jacobian,
            backward_steps: 0,
            recurrence: 1,
            backward_step_size: self.backward_step_size,
            backward_every_repeat: self.backward_every_repeat,
        }
    }

    pub fn universal(&self, kind: RewardKind, weight: f64) -> GuidanceConfig {
        GuidanceConfig {
            backward_steps: self.backward_steps,
            recurrence: self.recurrence,
            ..self.plain(kind, weight)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReward {
    /// The world's exact posterior.
    Oracle,
    /// The bootstrap ensemble, mean-combined.
    Ensemble,
    /// The final imitation model.
    Imitation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RejectionSpec {
    pub threshold: f64,
    pub reward: RejectionReward,
    /// Cap on presented samples per trial, as a multiple of the target.
    pub cap_factor: usize,
}

impl Default for RejectionSpec {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            reward: RejectionReward::Ensemble,
            cap_factor: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Single,
    Union,
    Ensemble,
    EnsembleUniversal,
    Rejection,
    Imitation,
    ImitationUniversal,
    NonImitation,
}

impl Arm {
    pub const ALL: [Arm; 9] = [
        Arm::Baseline,
        Arm::Single,
        Arm::Union,
        Arm::Ensemble,
        Arm::EnsembleUniversal,
        Arm::Rejection,
        Arm::Imitation,
        Arm::ImitationUniversal,
        Arm::NonImitation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Single => "single",
            Arm::Union => "union",
            Arm::Ensemble => "ensemble",
            Arm::EnsembleUniversal => "ensemble_universal",
            Arm::Rejection => "rejection",
            Arm::Imitation => "imitation",
            Arm::ImitationUniversal => "imitation_universal",
            Arm::NonImitation => "non_imitation",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub arms: Vec<Arm>,
    pub trials: usize,
    pub n: usize,
    /// Samples per trial for the `*_universal` arms, which cost about
    /// `R · (B + 1)` times more per sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub universal_n: Option<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            arms: vec![Arm::Baseline, Arm::Ensemble],
            trials: 5,
            n: 500,
            universal_n: None,
        }
    }
}

/// Seed streams derived from the run seed.
pub mod streams {
    pub const FEEDBACK: u64 = 1;
    pub const ENSEMBLE: u64 = 2;
    pub const UNION: u64 = 3;
    pub const IMITATION: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const SAMPLE: u64 = 6;
}

impl RunConfig {
    /// Defaults tuned per preset: ensemble guidance for the benign-dominant
    /// worlds, imitation with a pessimistic loss for the malign-dominant one,
    /// and a time-independent reward for `bedroom_like`.
    pub fn for_preset(name: &str, seed: u64) -> Result<Self> {
        let mut cfg = RunConfig {
            name: format!("{name}-{seed}"),
            seed,
            world: WorldSpec {
                preset: Some(name.into()),
                components: None,
            },
            schedule: ScheduleSpec::default(),
            reward: RewardSpec::default(),
            ensemble: EnsembleSpec::default(),
            feedback: FeedbackSpec::default(),
            guidance: GuidanceSpec::default(),
            rejection: RejectionSpec::default(),
            eval: EvalSpec::default(),
        };
        match name {
            "benign_dominant" | "symmetric_pair" | "standard_normal" => {
                cfg.eval.arms = vec![
                    Arm::Baseline,
                    Arm::Single,
                    Arm::Ensemble,
                    Arm::EnsembleUniversal,
                    Arm::Rejection,
                ];
                cfg.eval.universal_n = Some(50);
            }
            "malign_dominant" => {
                cfg.reward.alpha = 0.1;
                cfg.guidance.weight = 5.0;
                cfg.guidance.backward_step_size = 2e-3;
                cfg.rejection.reward = RejectionReward::Imitation;
                cfg.eval.arms = vec![Arm::Baseline, Arm::Imitation, Arm::NonImitation, Arm::Rejection];
                cfg.eval.n = 1000;
            }
            "bedroom_like" => {
                cfg.reward.kind = RewardKind::TimeIndependent;
                cfg.guidance.weight = 2.0;
                cfg.guidance.backward_step_size = 2e-3;
                cfg.eval.arms = vec![Arm::Baseline, Arm::Single, Arm::Ensemble, Arm::EnsembleUniversal];
                cfg.eval.universal_n = Some(50);
            }
            other => {
                return Err(Error::Config(vec![format!("world.preset: unknown preset {other:?}")]));
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is representable in TOML")
    }

    pub fn stream(&self, stream: u64) -> u64 {
        derive(self.seed, stream)
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        check(!self.name.trim().is_empty(), "name: must not be empty".into());
        check(
            !self.name.contains(['/', '\\']) && self.name != "." && self.name != "..",
            format!("name: {:?} is not a plain directory name", self.name),
        );
        if let Err(Error::Config(p)) = self.world.build() {
            problems.extend(p);
        }
        if let Err(e) = NoiseSchedule::new(self.schedule.beta_min, self.schedule.beta_max, self.schedule.horizon) {
            problems.push(format!("schedule: {e}"));
        }
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        check(self.schedule.num_steps >= 1, "schedule.num_steps: must be ≥ 1".into());
        let r = &self.reward;
        check(
            !r.hidden.is_empty() && r.hidden.iter().all(|&w| w > 0),
            "reward.hidden: need at least one positive width".into(),
        );
        check(r.noisy_copies >= 1, "reward.noisy_copies: must be ≥ 1".into());
        check(
            !r.augment || AUGMENT_VARIATIONS.contains(&r.variations),
            format!("reward.variations: {} outside 10..=20", r.variations),
        );
        check(r.jitter_sigma >= 0.0, "reward.jitter_sigma: must be ≥ 0".into());
        check(r.max_rotation_deg >= 0.0, "reward.max_rotation_deg: must be ≥ 0".into());
        check(r.learning_rate > 0.0, "reward.learning_rate: must be > 0".into());
        check(r.weight_decay >= 0.0, "reward.weight_decay: must be ≥ 0".into());
        check(r.batch_size >= 1, "reward.batch_size: must be ≥ 1".into());
        check(r.alpha > 0.0 && r.alpha <= 1.0, format!("reward.alpha: {} outside (0, 1]", r.alpha));
        check(
            r.ema.is_none_or(|e| (0.0..1.0).contains(&e)),
            "reward.ema: must lie in [0, 1)".into(),
        );
        let e = &self.ensemble;
        check(e.members >= 1, "ensemble.members: must be ≥ 1".into());
        check(e.malign_labels >= 1, "ensemble.malign_labels: must be ≥ 1".into());
        check(e.label_batch >= 1, "ensemble.label_batch: must be ≥ 1".into());
        check(e.presented_cap >= 1, "ensemble.presented_cap: must be ≥ 1".into());
        let f = &self.feedback;
        check(f.rounds >= 1, "feedback.rounds: must be ≥ 1".into());
        check(
            f.malign_quota + f.benign_quota >= 1,
            "feedback.malign_quota + feedback.benign_quota: must be ≥ 1".into(),
        );
        check(f.label_batch >= 1, "feedback.label_batch: must be ≥ 1".into());
        check(f.presented_cap >= 1, "feedback.presented_cap: must be ≥ 1".into());
        let g = &self.guidance;
        check(
            g.weight >= 0.0 && g.weight.is_finite(),
            format!("guidance.weight: {} must be ≥ 0", g.weight),
        );
        check(g.recurrence >= 1, "guidance.recurrence: must be ≥ 1".into());
        check(g.backward_step_size >= 0.0, "guidance.backward_step_size: must be ≥ 0".into());
        let j = &self.rejection;
        check(
            j.threshold > 0.0 && j.threshold < 1.0,
            format!("rejection.threshold: {} outside (0, 1)", j.threshold),
        );
        check(j.cap_factor >= 1, "rejection.cap_factor: must be ≥ 1".into());
        let v = &self.eval;
        check(!v.arms.is_empty(), "eval.arms: need at least one arm".into());
        check(v.trials >= 1, "eval.trials: must be ≥ 1".into());
        check(v.n >= 1, "eval.n: must be ≥ 1".into());
        check(v.universal_n != Some(0), "eval.universal_n: must be ≥ 1".into());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn world(&self) -> Result<LabeledMixture> {
        self.world.build()
    }

    pub fn grid(&self) -> Result<DiffusionGrid> {
        self.schedule.grid()
    }

    pub fn imitation(&self) -> ImitationConfig {
        let f = &self.feedback;
        ImitationConfig {
            rounds: f.rounds,
            malign_quota: f.malign_quota,
            benign_quota: f.benign_quota,
            label_batch: f.label_batch,
            presented_cap: f.presented_cap,
            reward: self.reward.training(),
            guidance: self.guidance.plain(self.reward.kind, self.guidance.weight),
            base_iterations: f.base_iterations,
            seed: self.stream(streams::IMITATION),
        }
    }
}
