//! Experiment arms: label collection, model training and evaluation over a
//! configured world.

use std::time::Instant;

use censorlab::metrics::{malign_fraction, mode_occupancy, ArmReport, TrialReport};
use censorlab::mixture::LabeledMixture;
use censorlab::reward::{
    build_ensemble, non_imitation_baseline, train_union_baseline, Annotator, ExactReward, FeedbackDataset,
    FeedbackRecord, Generator, ImitationLoop, OracleAnnotator, RewardEnsemble, RewardModel, RewardNet, Source,
};
use censorlab::rng::derive;
use censorlab::sampler::{rejection_sample, AnalyticEps, GuidanceConfig, RejectionConfig, Sampler, SamplerOutput};
use censorlab::schedule::DiffusionGrid;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{streams, Arm, EvalSpec, RejectionReward, RunConfig};
use crate::error::{Error, Result};

/// A configured world with its exact generator.
pub struct Lab {
    pub config: RunConfig,
    pub world: LabeledMixture,
    pub grid: DiffusionGrid,
    eps: AnalyticEps,
    exact: ExactReward,
}

/// Trained reward models available to the arms.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub ensemble: Option<RewardEnsemble>,
    pub union: Option<RewardNet>,
    /// One model per finished imitation round.
    pub imitation: Vec<RewardNet>,
    pub non_imitation: Option<RewardNet>,
}

/// Labeled data behind each model family, for label-cost accounting.
#[derive(Debug, Clone, Default)]
pub struct Feedback {
    pub initial: Option<FeedbackDataset>,
    pub imitation: Option<FeedbackDataset>,
    pub non_imitation: Option<FeedbackDataset>,
}

/// Samples of one arm and trial, kept for the run's sample dumps.
#[derive(Debug, Clone)]
pub struct Dump {
    pub arm: String,
    pub trial: usize,
    pub output: SamplerOutput,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reports: Vec<ArmReport>,
    pub dumps: Vec<Dump>,
}

/// One line of a sample dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLine {
    pub index: usize,
    pub seed: u64,
    pub x: Vec<f64>,
    /// Oracle label, 1 = benign.
    pub y: u8,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LabelCost {
    oracle: usize,
    human: usize,
    seconds: f64,
}

impl LabelCost {
    fn of(records: &[FeedbackRecord]) -> Self {
        records.iter().fold(Self::default(), |mut c, r| {
            match r.source {
                Source::Oracle => c.oracle += 1,
                Source::Human => c.human += 1,
            }
            c.seconds += r.elapsed_label_seconds;
            c
        })
    }

    fn of_dataset(data: Option<&FeedbackDataset>) -> Self {
        data.map(|d| Self::of(d.records())).unwrap_or_default()
    }
}

impl Lab {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let world = config.world.build()?;
        let grid = config.schedule.grid()?;
        let eps = AnalyticEps::new(world.clone());
        let exact = ExactReward {
            world: world.clone(),
            time_dependent: false,
        };
        Ok(Self {
            config,
            world,
            grid,
            eps,
            exact,
        })
    }

    pub fn generator(&self) -> Generator<'_> {
        Generator {
            eps: &self.eps,
            grid: &self.grid,
        }
    }

    pub fn oracle(&self) -> OracleAnnotator {
        OracleAnnotator {
            world: self.world.clone(),
        }
    }

    pub fn unguided(&self) -> Sampler<'_> {
        Sampler::unguided(&self.eps, &self.grid)
    }

    pub fn guided<'a>(&'a self, reward: &'a dyn RewardModel, guidance: GuidanceConfig) -> Result<Sampler<'a>> {
        Ok(Sampler::guided(&self.eps, &self.grid, reward, guidance)?)
    }

    /// Plain guidance at weight `ω`, or `K·ω` for a single model standing in
    /// for a `K`-member ensemble.
    pub fn plain_guidance(&self, single: bool) -> GuidanceConfig {
        let g = &self.config.guidance;
        self.config.guidance.plain(self.config.reward.kind, self.weight(single, g.weight))
    }

    pub fn universal_guidance(&self, single: bool) -> GuidanceConfig {
        let g = &self.config.guidance;
        self.config.guidance.universal(self.config.reward.kind, self.weight(single, g.weight))
    }

    fn weight(&self, single: bool, w: f64) -> f64 {
        if single {
            w * self.config.ensemble.members as f64
        } else {
            w
        }
    }

    /// Labels uncensored samples in batches until `malign_labels` malign
    /// points are found. Malign points past the quota are stored but not
    /// kept; every benign point joins the bootstrap pool.
    pub fn collect_initial(&self, annotator: &mut dyn Annotator) -> Result<FeedbackDataset> {
        let spec = &self.config.ensemble;
        let seed = self.config.stream(streams::FEEDBACK);
        let sampler = self.unguided();
        let mut data = FeedbackDataset::new();
        let mut malign = 0;
        let mut presented = 0;
        while malign < spec.malign_labels && presented < spec.presented_cap {
            let n = spec.label_batch.min(spec.presented_cap - presented);
            let points = sampler.sample_range(presented, n, seed)?.samples;
            let labels = annotator.label(&points)?;
            if labels.len() != points.len() {
                return Err(Error::Core(censorlab::Error::Annotator(format!(
                    "{} labels for {} points",
                    labels.len(),
                    points.len()
                ))));
            }
            for (x, a) in points.into_iter().zip(labels) {
                let kept = a.y == 1 || malign < spec.malign_labels;
                malign += usize::from(a.y == 0 && kept);
                data.push(FeedbackRecord {
                    x,
                    y: a.y.min(1),
                    round: 0,
                    source: annotator.source(),
                    elapsed_label_seconds: a.elapsed_seconds,
                    kept,
                });
            }
            presented += n;
        }
        if malign < spec.malign_labels {
            warn!(
                "found {malign} of {} malign labels in {presented} uncensored samples",
                spec.malign_labels
            );
        }
        Ok(data)
    }

    fn split(data: &FeedbackDataset) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut malign = Vec::new();
        let mut benign = Vec::new();
        for r in data.kept() {
            if r.y == 0 {
                malign.push(r.x.clone());
            } else {
                benign.push(r.x.clone());
            }
        }
        (malign, benign)
    }

    pub fn train_ensemble(&self, initial: &FeedbackDataset) -> Result<RewardEnsemble> {
        let (malign, benign) = Self::split(initial);
        Ok(build_ensemble(
            &malign,
            &benign,
            self.config.ensemble.members,
            &self.config.reward.training(),
            &self.grid,
            self.config.stream(streams::ENSEMBLE),
        )?)
    }

    pub fn train_union(&self, initial: &FeedbackDataset) -> Result<RewardNet> {
        let (malign, benign) = Self::split(initial);
        Ok(train_union_baseline(
            &malign,
            &benign,
            &self.config.reward.training(),
            &self.grid,
            self.config.stream(streams::UNION),
        )?)
    }

    pub fn new_imitation(&self) -> Result<ImitationLoop> {
        Ok(ImitationLoop::new(self.config.imitation())?)
    }

    pub fn replay_imitation(&self, records: &[FeedbackRecord], finished_rounds: usize) -> Result<ImitationLoop> {
        Ok(ImitationLoop::replay(
            self.config.imitation(),
            records,
            finished_rounds,
            &self.grid,
        )?)
    }

    /// One-shot baseline with the same label budget and cumulative training
    /// as the full imitation run.
    pub fn non_imitation(&self, annotator: &mut dyn Annotator) -> Result<ImitationLoop> {
        let cfg = self.config.imitation();
        let rounds = cfg.rounds;
        Ok(non_imitation_baseline(self.generator(), annotator, &cfg, rounds)?)
    }

    /// Seed of evaluation trial `trial`, shared by every arm.
    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive(self.config.stream(streams::EVAL), trial as u64)
    }

    /// Malign fraction of `n` censored samples from `model` at seed
    /// `derive(EVAL, 1000 + round)`; reported after each imitation round.
    pub fn round_malign_fraction(&self, model: &RewardNet, round: usize) -> Result<f64> {
        let seed = derive(self.config.stream(streams::EVAL), 1000 + round as u64);
        let out = self.guided(model, self.plain_guidance(false))?.sample(self.config.eval.n, seed)?;
        Ok(malign_fraction(&out.samples, &mut self.oracle())?.estimate)
    }

    pub fn dump_lines(&self, output: &SamplerOutput) -> Vec<SampleLine> {
        output
            .samples
            .iter()
            .zip(&output.seeds)
            .enumerate()
            .map(|(index, (x, &seed))| SampleLine {
                index,
                seed,
                x: x.clone(),
                y: self.world.oracle_label(x).as_bit(),
            })
            .collect()
    }

    /// Runs every arm of `spec` for `spec.trials` trials with common seeds.
    pub fn evaluate(&self, spec: &EvalSpec, models: &Models, feedback: &Feedback) -> Result<Evaluation> {
        let mut reports = Vec::new();
        let mut dumps = Vec::new();
        for &arm in &spec.arms {
            for plan in self.plan(arm, spec, models, feedback)? {
                info!("evaluating arm {}", plan.name);
                let mut trials = Vec::with_capacity(spec.trials);
                for trial in 0..spec.trials {
                    let start = Instant::now();
                    let seed = self.trial_seed(trial);
                    let output = match &plan.draw {
                        Draw::Sampler(reward, guidance) => match reward {
                            None => self.unguided().sample(plan.n, seed)?,
                            Some(r) => self.guided(*r, guidance.clone())?.sample(plan.n, seed)?,
                        },
                        Draw::Reject(reward) => {
                            let mut cfg = RejectionConfig::new(self.config.rejection.threshold, plan.n);
                            cfg.presented_cap = plan.n.saturating_mul(self.config.rejection.cap_factor);
                            rejection_sample(&self.unguided(), *reward, &cfg, seed)?
                        }
                    };
                    if output.samples.is_empty() {
                        warn!("arm {} trial {trial} produced no samples; skipped", plan.name);
                        continue;
                    }
                    let fraction = malign_fraction(&output.samples, &mut self.oracle())?;
                    let occupancy = mode_occupancy(&output.samples, &self.world).ok().map(|o| o.tv);
                    trials.push(TrialReport {
                        trial,
                        malign_fraction: fraction,
                        occupancy_tv: occupancy,
                        acceptance_ratio: output.rejection.map(|r| r.ratio()),
                        oracle_labels: plan.cost.oracle,
                        human_labels: plan.cost.human,
                        label_seconds: plan.cost.seconds,
                        wall_seconds: start.elapsed().as_secs_f64(),
                    });
                    dumps.push(Dump {
                        arm: plan.name.clone(),
                        trial,
                        output,
                    });
                }
                reports.push(ArmReport {
                    arm: plan.name,
                    trials,
                });
            }
        }
        Ok(Evaluation { reports, dumps })
    }

    fn plan<'m>(&'m self, arm: Arm, spec: &EvalSpec, models: &'m Models, feedback: &Feedback) -> Result<Vec<Plan<'m>>> {
        let missing = |what: &str| Error::Record(format!("arm {}: no {what} model in this run", arm.name()));
        let initial = LabelCost::of_dataset(feedback.initial.as_ref());
        let universal_n = spec.universal_n.unwrap_or(spec.n);
        let one = |draw, n, cost| {
            vec![Plan {
                name: arm.name().to_string(),
                draw,
                n,
                cost,
            }]
        };
        Ok(match arm {
            Arm::Baseline => one(Draw::Sampler(None, GuidanceConfig::unguided()), spec.n, LabelCost::default()),
            Arm::Single => {
                let e = models.ensemble.as_ref().ok_or_else(|| missing("ensemble"))?;
                one(Draw::Sampler(Some(&e.members[0]), self.plain_guidance(true)), spec.n, initial)
            }
            Arm::Union => {
                let u = models.union.as_ref().ok_or_else(|| missing("union"))?;
                one(Draw::Sampler(Some(u), self.plain_guidance(true)), spec.n, initial)
            }
            Arm::Ensemble => {
                let e = models.ensemble.as_ref().ok_or_else(|| missing("ensemble"))?;
                one(Draw::Sampler(Some(e), self.plain_guidance(false)), spec.n, initial)
            }
            Arm::EnsembleUniversal => {
                let e = models.ensemble.as_ref().ok_or_else(|| missing("ensemble"))?;
                one(Draw::Sampler(Some(e), self.universal_guidance(false)), universal_n, initial)
            }
            Arm::Rejection => {
                let (reward, cost): (&dyn RewardModel, LabelCost) = match self.config.rejection.reward {
                    RejectionReward::Oracle => (&self.exact, LabelCost::default()),
                    RejectionReward::Ensemble => (models.ensemble.as_ref().ok_or_else(|| missing("ensemble"))?, initial),
                    RejectionReward::Imitation => (
                        models.imitation.last().ok_or_else(|| missing("imitation"))?,
                        LabelCost::of_dataset(feedback.imitation.as_ref()),
                    ),
                };
                one(Draw::Reject(reward), spec.n, cost)
            }
            Arm::Imitation => {
                if models.imitation.is_empty() {
                    return Err(missing("imitation"));
                }
                let records = feedback.imitation.as_ref().map(|d| d.records()).unwrap_or(&[]);
                let last = models.imitation.len();
                models
                    .imitation
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        let round = i + 1;
                        let upto: Vec<FeedbackRecord> = records.iter().filter(|r| r.round <= round).cloned().collect();
                        Plan {
                            name: if round == last {
                                arm.name().to_string()
                            } else {
                                format!("imitation_round{round}")
                            },
                            draw: Draw::Sampler(Some(m), self.plain_guidance(false)),
                            n: spec.n,
                            cost: LabelCost::of(&upto),
                        }
                    })
                    .collect()
            }
            Arm::ImitationUniversal => {
                let m = models.imitation.last().ok_or_else(|| missing("imitation"))?;
                one(
                    Draw::Sampler(Some(m), self.universal_guidance(false)),
                    universal_n,
                    LabelCost::of_dataset(feedback.imitation.as_ref()),
                )
            }
            Arm::NonImitation => {
                let m = models.non_imitation.as_ref().ok_or_else(|| missing("non-imitation"))?;
                one(
                    Draw::Sampler(Some(m), self.plain_guidance(false)),
                    spec.n,
                    LabelCost::of_dataset(feedback.non_imitation.as_ref()),
                )
            }
        })
    }

    /// The world's exact posterior, used by oracle rejection.
    pub fn exact_reward(&self) -> &ExactReward {
        &self.exact
    }
}

enum Draw<'m> {
    Sampler(Option<&'m dyn RewardModel>, GuidanceConfig),
    Reject(&'m dyn RewardModel),
}

struct Plan<'m> {
    name: String,
    draw: Draw<'m>,
    n: usize,
    cost: LabelCost,
}
