//! Reward models built from binary feedback.
//!
//! Covers the feedback buffer, noisy-copy construction for time-dependent
//! rewards, one-shot augmentation, bootstrap ensembles for benign-dominant
//! worlds and the multi-round imitation loop for malign-dominant ones.

use std::io::{BufRead, Write};

use log::warn;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{Label, LabeledMixture};
use crate::nn::{self, Example, Head, Loss, Mlp, TrainConfig};
use crate::rng::{derive, stream, Rng};
use crate::sampler::{GuidanceConfig, NoisePredictor, Sampler};
use crate::schedule::{noise_with_alpha, standard_normal, DiffusionGrid, Level};

/// A reward log-gradient stored as `scale · direction`.
///
/// Ensembles report `K · mean_k ∇log r_k`, which equals the gradient of the
/// log of the product. Keeping the multiplicity separate lets a K-member
/// ensemble of identical models reproduce a single model at weight `Kω`
/// bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledGrad {
    pub scale: f64,
    pub direction: Vec<f64>,
}

impl ScaledGrad {
    pub fn unit(direction: Vec<f64>) -> Self {
        Self {
            scale: 1.0,
            direction,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.direction.iter().map(|d| self.scale * d).collect()
    }
}

/// Anything that scores how benign a point is.
pub trait RewardModel: Sync {
    /// Whether the model takes the noise level into account.
    fn time_dependent(&self) -> bool;

    /// `log r(x)` or `log r_t(x)`. Time-independent models ignore `level`.
    fn log_reward(&self, x: &[f64], level: Level) -> f64;

    /// `∇ₓ log r`.
    fn grad_log_reward(&self, x: &[f64], level: Level) -> ScaledGrad;

    /// Score compared against the acceptance threshold in rejection sampling.
    fn acceptance_score(&self, x: &[f64]) -> f64 {
        self.log_reward(x, Level::CLEAN).exp()
    }
}

/// The world's exact posterior `P(benign | X_t = x)`.
#[derive(Debug, Clone)]
pub struct ExactReward {
    pub world: LabeledMixture,
    pub time_dependent: bool,
}

impl ExactReward {
    fn alpha(&self, level: Level) -> f64 {
        if self.time_dependent {
            level.alpha_bar
        } else {
            1.0
        }
    }
}

impl RewardModel for ExactReward {
    fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    fn log_reward(&self, x: &[f64], level: Level) -> f64 {
        self.world.eval_alpha(x, self.alpha(level)).log_reward
    }

    fn grad_log_reward(&self, x: &[f64], level: Level) -> ScaledGrad {
        ScaledGrad::unit(self.world.eval_alpha(x, self.alpha(level)).grad_log_reward)
    }
}

/// A sigmoid-head MLP used as a reward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardNet {
    pub net: Mlp,
}

impl RewardNet {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.head != Head::Sigmoid || net.output_dim() != 1 {
            return Err(Error::Config("reward net needs a scalar sigmoid head".into()));
        }
        Ok(Self { net })
    }

    fn time(&self, level: Level) -> Option<f64> {
        self.net.time_input.then_some(level.t)
    }

    pub fn reward(&self, x: &[f64], level: Level) -> f64 {
        self.log_reward(x, level).exp()
    }
}

impl RewardModel for RewardNet {
    fn time_dependent(&self) -> bool {
        self.net.time_input
    }

    fn log_reward(&self, x: &[f64], level: Level) -> f64 {
        self.net
            .log_reward(x, self.time(level))
            .expect("reward net input validated at construction")
    }

    fn grad_log_reward(&self, x: &[f64], level: Level) -> ScaledGrad {
        ScaledGrad::unit(
            self.net
                .grad_input(x, self.time(level))
                .expect("reward net input validated at construction"),
        )
    }
}

/// `K` reward nets combined by product for guidance and by mean for rejection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEnsemble {
    pub members: Vec<RewardNet>,
}

impl RewardEnsemble {
    pub fn new(members: Vec<RewardNet>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        let td = members[0].time_dependent();
        if members.iter().any(|m| m.time_dependent() != td) {
            return Err(Error::Config("ensemble members disagree on time dependence".into()));
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `Π_k r_k(x)`
    pub fn product(&self, x: &[f64], level: Level) -> f64 {
        self.log_reward(x, level).exp()
    }

    /// `(1/K) Σ_k r_k(x)`
    pub fn mean(&self, x: &[f64], level: Level) -> f64 {
        self.members.iter().map(|m| m.reward(x, level)).sum::<f64>() / self.len() as f64
    }
}

impl RewardModel for RewardEnsemble {
    fn time_dependent(&self) -> bool {
        self.members[0].time_dependent()
    }

    fn log_reward(&self, x: &[f64], level: Level) -> f64 {
        self.members.iter().map(|m| m.log_reward(x, level)).sum()
    }

    fn grad_log_reward(&self, x: &[f64], level: Level) -> ScaledGrad {
        // Running mean: exact when all members agree.
        let mut mean = vec![0.0; x.len()];
        for (k, m) in self.members.iter().enumerate() {
            let g = m.grad_log_reward(x, level).to_vec();
            let n = (k + 1) as f64;
            mean.iter_mut().zip(&g).for_each(|(a, g)| *a += (g - *a) / n);
        }
        ScaledGrad {
            scale: self.len() as f64,
            direction: mean,
        }
    }

    fn acceptance_score(&self, x: &[f64]) -> f64 {
        self.mean(x, Level::CLEAN)
    }
}

impl<T: RewardModel + ?Sized> RewardModel for &T {
    fn time_dependent(&self) -> bool {
        (**self).time_dependent()
    }
    fn log_reward(&self, x: &[f64], level: Level) -> f64 {
        (**self).log_reward(x, level)
    }
    fn grad_log_reward(&self, x: &[f64], level: Level) -> ScaledGrad {
        (**self).grad_log_reward(x, level)
    }
    fn acceptance_score(&self, x: &[f64]) -> f64 {
        (**self).acceptance_score(x)
    }
}

// ---------------------------------------------------------------------------
// Feedback buffer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub x: Vec<f64>,
    /// 1 = benign, 0 = malign.
    pub y: u8,
    pub round: usize,
    pub source: Source,
    pub elapsed_label_seconds: f64,
    /// Whether the record counts toward its round's training quota.
    #[serde(default = "default_kept")]
    pub kept: bool,
}

fn default_kept() -> bool {
    true
}

/// Append-only labeled buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackDataset {
    records: Vec<FeedbackRecord>,
}

impl FeedbackDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: FeedbackRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[FeedbackRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(N_M, N_B)` over kept records.
    pub fn kept_counts(&self) -> (usize, usize) {
        self.kept().fold((0, 0), |(m, b), r| if r.y == 0 { (m + 1, b) } else { (m, b + 1) })
    }

    /// `(N_M, N_B)` over every labeled record.
    pub fn counts(&self) -> (usize, usize) {
        self.records
            .iter()
            .fold((0, 0), |(m, b), r| if r.y == 0 { (m + 1, b) } else { (m, b + 1) })
    }

    pub fn kept(&self) -> impl Iterator<Item = &FeedbackRecord> {
        self.records.iter().filter(|r| r.kept)
    }

    pub fn training_pairs(&self) -> Vec<(Vec<f64>, u8)> {
        self.kept().map(|r| (r.x.clone(), r.y)).collect()
    }

    pub fn total_label_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.elapsed_label_seconds).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }
}

/// One label from an annotator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub y: u8,
    pub elapsed_seconds: f64,
}

/// Source of binary feedback.
pub trait Annotator {
    fn source(&self) -> Source;
    fn label(&mut self, points: &[Vec<f64>]) -> Result<Vec<Annotation>>;
}

/// Labels with the world's exact posterior; free and deterministic.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    pub world: LabeledMixture,
}

impl Annotator for OracleAnnotator {
    fn source(&self) -> Source {
        Source::Oracle
    }

    fn label(&mut self, points: &[Vec<f64>]) -> Result<Vec<Annotation>> {
        Ok(self
            .world
            .oracle_annotate(points)?
            .into_iter()
            .map(|y| Annotation {
                y,
                elapsed_seconds: 0.0,
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Dataset construction

/// Time-tagged training examples: each `(x, y)` yields `copies` records
/// `(√ᾱ_k x + √(1-ᾱ_k) ε, t_k, y)` with `k` uniform on `0..=N`.
pub fn make_noisy_dataset(
    data: &[(Vec<f64>, u8)],
    grid: &DiffusionGrid,
    copies: usize,
    rng: &mut Rng,
) -> Result<Vec<Example>> {
    let n = grid.num_steps();
    noisy_copies(data, grid, copies, rng, |rng| rng.random_range(0..=n))
}

pub(crate) fn noisy_copies(
    data: &[(Vec<f64>, u8)],
    grid: &DiffusionGrid,
    copies: usize,
    rng: &mut Rng,
    mut pick: impl FnMut(&mut Rng) -> usize,
) -> Result<Vec<Example>> {
    if copies == 0 {
        return Err(Error::domain("copies", "need at least one noisy copy per example"));
    }
    let mut out = Vec::with_capacity(data.len() * copies);
    for (x, y) in data {
        for _ in 0..copies {
            let level = grid.level(pick(rng));
            let eps = standard_normal(x.len(), rng);
            out.push(Example {
                x: noise_with_alpha(x, level.alpha_bar, &eps),
                t: Some(level.t),
                target: vec![f64::from(*y)],
            });
        }
    }
    Ok(out)
}

/// Settings for one-shot augmentation: rotations about the data centroid
/// plus isotropic jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub variations: usize,
    pub jitter_sigma: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            variations: 10,
            jitter_sigma: 0.1,
            max_rotation_deg: 20.0,
        }
    }
}

pub const AUGMENT_VARIATIONS: std::ops::RangeInclusive<usize> = 10..=20;

/// Returns the originals followed by `variations` perturbed copies of each.
pub fn augment(data: &[(Vec<f64>, u8)], cfg: &AugmentConfig, rng: &mut Rng) -> Result<Vec<(Vec<f64>, u8)>> {
    if !AUGMENT_VARIATIONS.contains(&cfg.variations) {
        return Err(Error::domain(
            "augmentation variations",
            format!("{} not in [10, 20]", cfg.variations),
        ));
    }
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let d = data[0].0.len();
    let mut centroid = vec![0.0; d];
    for (x, _) in data {
        centroid.iter_mut().zip(x).for_each(|(c, x)| *c += x / data.len() as f64);
    }
    let mut out = data.to_vec();
    for (x, y) in data {
        for _ in 0..cfg.variations {
            let angle = (2.0 * rng.random::<f64>() - 1.0) * cfg.max_rotation_deg.to_radians();
            let mut v = x.clone();
            if d >= 2 {
                // rotate in the first coordinate plane
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x[0] - centroid[0], x[1] - centroid[1]);
                v[0] = centroid[0] + c * dx - s * dy;
                v[1] = centroid[1] + s * dx + c * dy;
            }
            let jitter = standard_normal(d, rng);
            v.iter_mut().zip(&jitter).for_each(|(v, j)| *v += cfg.jitter_sigma * j);
            out.push((v, *y));
        }
    }
    Ok(out)
}

/// Everything needed to turn labeled points into a reward net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTraining {
    pub hidden: Vec<usize>,
    pub time_dependent: bool,
    /// Noisy copies per (augmented) example for time-dependent rewards.
    pub noisy_copies: usize,
    pub augment: Option<AugmentConfig>,
    pub train: TrainConfig,
}

impl Default for RewardTraining {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            time_dependent: true,
            noisy_copies: 16,
            augment: Some(AugmentConfig::default()),
            train: TrainConfig::default(),
        }
    }
}

/// Trains one reward net on `data` (labels 1 = benign).
pub fn train_reward(
    data: &[(Vec<f64>, u8)],
    spec: &RewardTraining,
    grid: &DiffusionGrid,
    seed: u64,
) -> Result<RewardNet> {
    Ok(train_reward_traced(data, spec, grid, seed)?.0)
}

/// [`train_reward`] plus the loss trace.
pub fn train_reward_traced(
    data: &[(Vec<f64>, u8)],
    spec: &RewardTraining,
    grid: &DiffusionGrid,
    seed: u64,
) -> Result<(RewardNet, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Config("reward training needs labeled data".into()));
    }
    let dim = data[0].0.len();
    let augmented = match &spec.augment {
        Some(cfg) => augment(data, cfg, &mut stream(seed, 1))?,
        None => data.to_vec(),
    };
    let examples = if spec.time_dependent {
        make_noisy_dataset(&augmented, grid, spec.noisy_copies, &mut stream(seed, 2))?
    } else {
        augmented
            .into_iter()
            .map(|(x, y)| Example {
                x,
                t: None,
                target: vec![f64::from(y)],
            })
            .collect()
    };
    let net = Mlp::new(
        dim,
        &spec.hidden,
        1,
        Head::Sigmoid,
        spec.time_dependent,
        grid.schedule().horizon,
        derive(seed, 3),
    );
    let config = TrainConfig {
        seed: derive(seed, 4),
        ..spec.train
    };
    let trained = nn::train(net, &examples, &config, Loss::WeightedBce { alpha: spec.train.alpha })?;
    Ok((RewardNet::new(trained.net)?, trained.losses))
}

/// Bootstrap ensemble: every member sees all malign points plus `N_M`
/// benign points drawn with replacement from the pool.
pub fn build_ensemble(
    malign: &[Vec<f64>],
    benign_pool: &[Vec<f64>],
    members: usize,
    spec: &RewardTraining,
    grid: &DiffusionGrid,
    seed: u64,
) -> Result<RewardEnsemble> {
    if malign.is_empty() {
        return Err(Error::Config("ensemble needs at least one malign example".into()));
    }
    if benign_pool.len() < malign.len() {
        return Err(Error::Config(format!(
            "benign pool ({}) smaller than malign set ({})",
            benign_pool.len(),
            malign.len()
        )));
    }
    if members == 0 {
        return Err(Error::Config("ensemble needs K ≥ 1".into()));
    }
    let nets = (0..members as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, 100 + k);
            let mut data: Vec<(Vec<f64>, u8)> = malign.iter().map(|x| (x.clone(), 0)).collect();
            for _ in 0..malign.len() {
                let i = rng.random_range(0..benign_pool.len());
                data.push((benign_pool[i].clone(), 1));
            }
            train_reward(&data, spec, grid, derive(seed, 200 + k))
        })
        .collect::<Result<Vec<_>>>()?;
    RewardEnsemble::new(nets)
}

/// Training set and config of the union baseline: all malign plus the whole
/// benign pool, with `α` scaled by `N_M/N_B` and iterations scaled to keep
/// the epoch count of the balanced recipe.
pub fn union_recipe(
    malign: &[Vec<f64>],
    benign_pool: &[Vec<f64>],
    spec: &RewardTraining,
) -> Result<(Vec<(Vec<f64>, u8)>, RewardTraining)> {
    if malign.is_empty() || benign_pool.is_empty() {
        return Err(Error::Config("union baseline needs malign and benign data".into()));
    }
    let (nm, nb) = (malign.len() as f64, benign_pool.len() as f64);
    let mut spec = spec.clone();
    spec.train.alpha *= nm / nb;
    spec.train.iterations = (spec.train.iterations as f64 * (nm + nb) / (2.0 * nm)).round() as usize;
    let data = malign
        .iter()
        .map(|x| (x.clone(), 0))
        .chain(benign_pool.iter().map(|x| (x.clone(), 1)))
        .collect();
    Ok((data, spec))
}

pub fn train_union_baseline(
    malign: &[Vec<f64>],
    benign_pool: &[Vec<f64>],
    spec: &RewardTraining,
    grid: &DiffusionGrid,
    seed: u64,
) -> Result<RewardNet> {
    let (data, spec) = union_recipe(malign, benign_pool, spec)?;
    train_reward(&data, &spec, grid, seed)
}

// ---------------------------------------------------------------------------
// Imitation learning

/// A pre-trained generator: an error network on a time grid.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub eps: &'a dyn NoisePredictor,
    pub grid: &'a DiffusionGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationConfig {
    pub rounds: usize,
    pub malign_quota: usize,
    pub benign_quota: usize,
    /// Samples drawn per labeling batch.
    pub label_batch: usize,
    /// Per-round cap on presented samples before the round fails.
    pub presented_cap: usize,
    pub reward: RewardTraining,
    /// Guidance used to sample rounds ≥ 2.
    pub guidance: GuidanceConfig,
    /// Training iterations per unit of first-round buffer size; round `r`
    /// trains for `r` times this when quotas are constant.
    pub base_iterations: usize,
    pub seed: u64,
}

impl ImitationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("imitation needs at least one round".into()));
        }
        if self.malign_quota + self.benign_quota == 0 {
            return Err(Error::Config("per-round quota must be positive".into()));
        }
        if self.label_batch == 0 || self.presented_cap == 0 {
            return Err(Error::Config("label_batch and presented_cap must be positive".into()));
        }
        self.reward.train.validate()?;
        self.guidance.validate()
    }

    fn quota_total(&self) -> usize {
        self.malign_quota + self.benign_quota
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub presented: usize,
    pub labeled_malign: usize,
    pub labeled_benign: usize,
    pub kept_malign: usize,
    pub kept_benign: usize,
    pub buffer_kept: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub label_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct RoundProgress {
    presented: usize,
    batches: usize,
    kept_malign: usize,
    kept_benign: usize,
    labeled_malign: usize,
    labeled_benign: usize,
    label_seconds: f64,
}

/// Multi-round label → retrain → censor loop, driven either by an
/// [`Annotator`] ([`run_round`](Self::run_round)) or step by step by an
/// external caller that may wait arbitrarily long for labels.
#[derive(Debug, Clone)]
pub struct ImitationLoop {
    config: ImitationConfig,
    buffer: FeedbackDataset,
    models: Vec<RewardNet>,
    stats: Vec<RoundStats>,
    progress: RoundProgress,
}

impl ImitationLoop {
    pub fn new(config: ImitationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            buffer: FeedbackDataset::new(),
            models: Vec::new(),
            stats: Vec::new(),
            progress: RoundProgress::default(),
        })
    }

    /// Rebuilds a loop from a recorded buffer. Records are fed back batch by
    /// batch and the first `finished_rounds` rounds are retrained, so the
    /// result matches the loop that wrote the buffer.
    pub fn replay(
        config: ImitationConfig,
        records: &[FeedbackRecord],
        finished_rounds: usize,
        grid: &DiffusionGrid,
    ) -> Result<Self> {
        let mut lp = Self::new(config)?;
        if finished_rounds > lp.config.rounds {
            return Err(Error::Config(format!(
                "{finished_rounds} finished rounds but only {} configured",
                lp.config.rounds
            )));
        }
        let mut rest = records;
        loop {
            let round = lp.current_round();
            let n = rest.iter().take_while(|r| r.round == round).count();
            let (this, tail) = rest.split_at(n);
            if n > 0 && lp.is_finished() {
                return Err(Error::Config(format!("buffer has records for unconfigured round {round}")));
            }
            for batch in this.chunks(lp.config.label_batch) {
                let points: Vec<Vec<f64>> = batch.iter().map(|r| r.x.clone()).collect();
                let labels: Vec<Annotation> = batch
                    .iter()
                    .map(|r| Annotation {
                        y: r.y,
                        elapsed_seconds: r.elapsed_label_seconds,
                    })
                    .collect();
                let before = lp.buffer.len();
                lp.record(&points, &labels, batch[0].source)?;
                let mismatch = lp.buffer.records[before..]
                    .iter()
                    .zip(batch)
                    .any(|(a, b)| a.kept != b.kept || a.source != b.source);
                if mismatch {
                    return Err(Error::Config(format!("buffer round {round} does not replay consistently")));
                }
            }
            rest = tail;
            if round > finished_rounds {
                break;
            }
            lp.finish_round(grid)?;
        }
        if !rest.is_empty() {
            return Err(Error::Config(format!(
                "{} buffer records beyond round {}",
                rest.len(),
                lp.current_round()
            )));
        }
        Ok(lp)
    }

    pub fn config(&self) -> &ImitationConfig {
        &self.config
    }

    pub fn buffer(&self) -> &FeedbackDataset {
        &self.buffer
    }

    /// 1-based index of the round currently collecting labels.
    pub fn current_round(&self) -> usize {
        self.models.len() + 1
    }

    pub fn is_finished(&self) -> bool {
        self.models.len() >= self.config.rounds
    }

    pub fn models(&self) -> &[RewardNet] {
        &self.models
    }

    pub fn latest_model(&self) -> Option<&RewardNet> {
        self.models.last()
    }

    pub fn stats(&self) -> &[RoundStats] {
        &self.stats
    }

    pub fn quota_met(&self) -> bool {
        self.progress.kept_malign >= self.config.malign_quota
            && self.progress.kept_benign >= self.config.benign_quota
    }

    /// A round may close once its quota is met, or short of quota once the
    /// presented cap is exhausted (rare classes can become unobtainable
    /// once censoring works).
    pub fn can_finish(&self) -> bool {
        self.quota_met() || (self.progress.presented > 0 && self.progress.presented >= self.config.presented_cap)
    }

    /// `(malign still needed, benign still needed)` this round.
    pub fn remaining_quota(&self) -> (usize, usize) {
        (
            self.config.malign_quota.saturating_sub(self.progress.kept_malign),
            self.config.benign_quota.saturating_sub(self.progress.kept_benign),
        )
    }

    pub fn presented_this_round(&self) -> usize {
        self.progress.presented
    }

    /// `(kept malign, kept benign)` so far this round.
    pub fn kept_this_round(&self) -> (usize, usize) {
        (self.progress.kept_malign, self.progress.kept_benign)
    }

    /// Labeling batches recorded so far this round.
    pub fn batches_this_round(&self) -> usize {
        self.progress.batches
    }

    /// Seed of labeling batch `batch` in round `round`.
    fn batch_seed(&self, round: usize, batch: usize) -> u64 {
        derive(derive(self.config.seed, 10_000 + round as u64), batch as u64)
    }

    /// The next batch of candidate samples. Round 1 is uncensored; later
    /// rounds are censored by the latest model. Deterministic in
    /// `(seed, round, batch index)`.
    pub fn propose(&self, generator: Generator<'_>) -> Result<Vec<Vec<f64>>> {
        if self.is_finished() {
            return Err(Error::Config("all imitation rounds are complete".into()));
        }
        let seed = self.batch_seed(self.current_round(), self.progress.batches);
        let n = self.config.label_batch;
        let out = match self.latest_model() {
            None => Sampler::unguided(generator.eps, generator.grid).sample(n, seed)?,
            Some(model) => {
                Sampler::guided(generator.eps, generator.grid, model, self.config.guidance.clone())?
                    .sample(n, seed)?
            }
        };
        Ok(out.samples)
    }

    /// Appends a labeled batch to the buffer. Records beyond the per-class
    /// quota are stored but not kept for training.
    pub fn record(&mut self, points: &[Vec<f64>], labels: &[Annotation], source: Source) -> Result<()> {
        if points.len() != labels.len() {
            return Err(Error::Annotator(format!(
                "{} labels for {} points",
                labels.len(),
                points.len()
            )));
        }
        let round = self.current_round();
        for (x, a) in points.iter().zip(labels) {
            let kept = if a.y == 0 {
                self.progress.labeled_malign += 1;
                let keep = self.progress.kept_malign < self.config.malign_quota;
                self.progress.kept_malign += usize::from(keep);
                keep
            } else {
                self.progress.labeled_benign += 1;
                let keep = self.progress.kept_benign < self.config.benign_quota;
                self.progress.kept_benign += usize::from(keep);
                keep
            };
            self.progress.label_seconds += a.elapsed_seconds;
            self.buffer.push(FeedbackRecord {
                x: x.clone(),
                y: a.y.min(1),
                round,
                source,
                elapsed_label_seconds: a.elapsed_seconds,
                kept,
            });
        }
        self.progress.presented += points.len();
        self.progress.batches += 1;
        Ok(())
    }

    /// Trains this round's model on every kept record and advances the round.
    pub fn finish_round(&mut self, grid: &DiffusionGrid) -> Result<&RoundStats> {
        if !self.can_finish() {
            let (m, b) = self.remaining_quota();
            return Err(Error::Config(format!("quota unmet: {m} malign and {b} benign still needed")));
        }
        let round = self.current_round();
        if !self.quota_met() {
            let (m, b) = self.remaining_quota();
            warn!("round {round} closes short of quota ({m} malign, {b} benign missing)");
        }
        let data = self.buffer.training_pairs();
        let mut spec = self.config.reward.clone();
        spec.train.iterations =
            (self.config.base_iterations as f64 * data.len() as f64 / self.config.quota_total() as f64).round()
                as usize;
        let (model, losses) = train_reward_traced(&data, &spec, grid, derive(self.config.seed, round as u64))?;
        let p = std::mem::take(&mut self.progress);
        self.models.push(model);
        self.stats.push(RoundStats {
            round,
            presented: p.presented,
            labeled_malign: p.labeled_malign,
            labeled_benign: p.labeled_benign,
            kept_malign: p.kept_malign,
            kept_benign: p.kept_benign,
            buffer_kept: data.len(),
            iterations: spec.train.iterations,
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            label_seconds: p.label_seconds,
        });
        Ok(self.stats.last().expect("just pushed"))
    }

    /// Collects one round of labels from `annotator` and retrains.
    pub fn run_round(&mut self, generator: Generator<'_>, annotator: &mut dyn Annotator) -> Result<RoundStats> {
        while !self.can_finish() {
            let points = self.propose(generator)?;
            let labels = annotator.label(&points)?;
            self.record(&points, &labels, annotator.source())?;
        }
        Ok(self.finish_round(generator.grid)?.clone())
    }

    /// Runs every remaining round.
    pub fn run(&mut self, generator: Generator<'_>, annotator: &mut dyn Annotator) -> Result<()> {
        while !self.is_finished() {
            self.run_round(generator, annotator)?;
        }
        Ok(())
    }
}

/// Single-shot baseline: all labels come from uncensored sampling and one
/// model trains for the cumulative iteration count of `equivalent_rounds`
/// imitation rounds. Implemented as a one-round imitation loop so the code
/// path is shared.
pub fn non_imitation_baseline(
    generator: Generator<'_>,
    annotator: &mut dyn Annotator,
    config: &ImitationConfig,
    equivalent_rounds: usize,
) -> Result<ImitationLoop> {
    let r = equivalent_rounds.max(1);
    let per_round_total = config.quota_total();
    let total = per_round_total * r;
    let cumulative: usize = (1..=r).map(|k| k * config.base_iterations).sum();
    let mut single = ImitationConfig {
        rounds: 1,
        malign_quota: config.malign_quota * r,
        benign_quota: config.benign_quota * r,
        presented_cap: config.presented_cap * r,
        ..config.clone()
    };
    // finish_round scales by buffer/quota, which is 1 here
    single.base_iterations = cumulative;
    debug_assert_eq!(single.quota_total(), total);
    let mut lp = ImitationLoop::new(single)?;
    lp.run(generator, annotator)?;
    Ok(lp)
}

/// Points with the given label, in order.
pub fn split_by_label(points: &[Vec<f64>], world: &LabeledMixture) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    points
        .iter()
        .cloned()
        .partition(|p| world.oracle_label(p) == Label::Malign)
}
