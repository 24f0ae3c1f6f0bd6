//! Jobs over a run directory, shared by the CLI, the service and replay.
//!
//! Every job reads its inputs from the run directory when they exist and
//! produces them otherwise. In replay mode nothing is labeled: inputs must
//! already be recorded.

use std::fs;
use std::path::Path;
use std::time::Instant;

use censorlab::metrics::{compare_arms, malign_fraction, ArmTable, Proportion};
use censorlab::reward::{train_reward, FeedbackDataset, ImitationLoop, RewardEnsemble, RewardModel, RewardNet};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{streams, AnnotatorKind, Arm, EvalSpec, RejectionReward};
use crate::error::{Error, Result};
use crate::lab::{Evaluation, Feedback, Lab, Models};
use crate::record::{sha256_hex, Job, Ledger, RunDir, BUFFER, INITIAL, NON_IMITATION};

pub const ENSEMBLE_CKPT: &str = "checkpoints/ensemble.json";
pub const UNION_CKPT: &str = "checkpoints/union.json";
pub const REWARD_CKPT: &str = "checkpoints/reward.json";
pub const NON_IMITATION_CKPT: &str = "checkpoints/non_imitation.json";
pub const ROUNDS_CSV: &str = "metrics/imitation_rounds.csv";
pub const EVAL_CSV: &str = "metrics/eval.csv";
pub const REJECTION_CSV: &str = "metrics/rejection.csv";

pub fn imitation_ckpt(round: usize) -> String {
    format!("checkpoints/imitation_round{round}.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Live,
    Replay,
}

/// A trained model a guided `sample` can use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelRef {
    /// First ensemble member at `K·ω`.
    Single,
    Union,
    Ensemble,
    /// Latest imitation round.
    Imitation,
    NonImitation,
    /// The model from `train-reward`.
    Reward,
}

/// One row of `metrics/imitation_rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
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
    /// Oracle malign fraction of `eval.n` samples censored by this round's model.
    pub malign_fraction: f64,
}

fn live_oracle(lab: &Lab, mode: Mode, what: &str) -> Result<()> {
    if mode == Mode::Replay {
        return Err(Error::Record(format!("replay needs the recorded {what}")));
    }
    if lab.config.feedback.annotator == AnnotatorKind::Human {
        return Err(Error::Record(format!(
            "{what}: human feedback is collected through `censorlab serve`"
        )));
    }
    Ok(())
}

pub fn initial_feedback(dir: &mut RunDir, lab: &Lab, mode: Mode) -> Result<FeedbackDataset> {
    if let Some(data) = dir.read_feedback(INITIAL)? {
        return Ok(data);
    }
    live_oracle(lab, mode, "initial labels")?;
    let data = lab.collect_initial(&mut lab.oracle())?;
    dir.write_feedback(INITIAL, &data)?;
    Ok(data)
}

pub fn ensemble(dir: &mut RunDir, lab: &Lab, mode: Mode) -> Result<RewardEnsemble> {
    if dir.exists(ENSEMBLE_CKPT) {
        return dir.read_json(ENSEMBLE_CKPT);
    }
    let initial = initial_feedback(dir, lab, mode)?;
    info!("training a {}-member ensemble", lab.config.ensemble.members);
    let e = lab.train_ensemble(&initial)?;
    dir.write_json(ENSEMBLE_CKPT, &e)?;
    Ok(e)
}

pub fn union(dir: &mut RunDir, lab: &Lab, mode: Mode) -> Result<RewardNet> {
    if dir.exists(UNION_CKPT) {
        return dir.read_json(UNION_CKPT);
    }
    let initial = initial_feedback(dir, lab, mode)?;
    let u = lab.train_union(&initial)?;
    dir.write_json(UNION_CKPT, &u)?;
    Ok(u)
}

/// A single reward net on every kept label in the run: the initial pool
/// and the imitation buffer.
pub fn train_single_reward(dir: &mut RunDir, lab: &Lab, mode: Mode) -> Result<RewardNet> {
    let mut pairs = Vec::new();
    for rel in [INITIAL, BUFFER] {
        if let Some(d) = dir.read_feedback(rel)? {
            pairs.extend(d.training_pairs());
        }
    }
    if pairs.is_empty() {
        pairs = initial_feedback(dir, lab, mode)?.training_pairs();
    }
    let net = train_reward(&pairs, &lab.config.reward.training(), &lab.grid, lab.config.stream(streams::FEEDBACK))?;
    dir.write_json(REWARD_CKPT, &net)?;
    Ok(net)
}

/// Rebuilds the imitation loop from the recorded buffer.
pub fn resume_imitation(dir: &RunDir, lab: &Lab) -> Result<ImitationLoop> {
    let records = dir.read_feedback(BUFFER)?.unwrap_or_default();
    lab.replay_imitation(records.records(), dir.ledger.imitation_rounds)
}

/// Persists the state after a round closes: buffer, checkpoint, round
/// metrics and the ledger's round count.
pub fn save_round(dir: &mut RunDir, lab: &Lab, lp: &ImitationLoop) -> Result<RoundRow> {
    dir.write_feedback(BUFFER, lp.buffer())?;
    write_round(dir, lab, lp, lp.models().len())
}

fn write_round(dir: &mut RunDir, lab: &Lab, lp: &ImitationLoop, round: usize) -> Result<RoundRow> {
    let (Some(model), Some(stats)) = (lp.models().get(round.wrapping_sub(1)), lp.stats().get(round.wrapping_sub(1)))
    else {
        return Err(Error::Record(format!("round {round} has not been trained")));
    };
    dir.write_json(&imitation_ckpt(round), model)?;
    let mut rows: Vec<RoundRow> = if dir.exists(ROUNDS_CSV) {
        read_csv(&dir.read(ROUNDS_CSV)?)?
    } else {
        Vec::new()
    };
    rows.retain(|r| r.round < round);
    let row = RoundRow {
        round,
        presented: stats.presented,
        labeled_malign: stats.labeled_malign,
        labeled_benign: stats.labeled_benign,
        kept_malign: stats.kept_malign,
        kept_benign: stats.kept_benign,
        buffer_kept: stats.buffer_kept,
        iterations: stats.iterations,
        final_loss: stats.final_loss,
        label_seconds: stats.label_seconds,
        malign_fraction: lab.round_malign_fraction(model, round)?,
    };
    rows.push(row.clone());
    dir.write(ROUNDS_CSV, &write_csv(&rows)?)?;
    dir.ledger.imitation_rounds = round;
    dir.save_ledger()?;
    Ok(row)
}

/// Runs the remaining imitation rounds with the oracle. In replay mode the
/// loop is rebuilt from the recorded buffer up to `rounds` and its
/// checkpoints and round metrics are rewritten.
pub fn imitate(dir: &mut RunDir, lab: &Lab, mode: Mode, rounds: Option<usize>) -> Result<ImitationLoop> {
    match mode {
        Mode::Live => {
            let mut lp = resume_imitation(dir, lab)?;
            if !lp.is_finished() {
                live_oracle(lab, mode, "imitation labels")?;
            }
            let mut oracle = lab.oracle();
            while !lp.is_finished() {
                let stats = lp.run_round(lab.generator(), &mut oracle)?;
                info!(
                    "round {} closed: {} presented, buffer {} kept",
                    stats.round, stats.presented, stats.buffer_kept
                );
                save_round(dir, lab, &lp)?;
            }
            Ok(lp)
        }
        Mode::Replay => {
            let rounds = rounds.unwrap_or(lab.config.feedback.rounds);
            let records = dir.read_feedback(BUFFER)?.unwrap_or_default();
            // later rounds may have been recorded after this job ran
            let upto: Vec<_> = records.records().iter().filter(|r| r.round <= rounds).cloned().collect();
            let lp = lab.replay_imitation(&upto, rounds)?;
            for round in 1..=rounds {
                write_round(dir, lab, &lp, round)?;
            }
            Ok(lp)
        }
    }
}

/// Finishes the configured imitation rounds if a live run has not yet.
fn ensure_imitation(dir: &mut RunDir, lab: &Lab, mode: Mode) -> Result<()> {
    if mode == Mode::Live && dir.ledger.imitation_rounds < lab.config.feedback.rounds {
        let start = Instant::now();
        imitate(dir, lab, mode, None)?;
        let rounds = dir.ledger.imitation_rounds;
        dir.push_job(Job::Imitate { rounds }, start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

pub fn imitation_models(dir: &RunDir) -> Result<Vec<RewardNet>> {
    (1..=dir.ledger.imitation_rounds)
        .map(|r| dir.read_json(&imitation_ckpt(r)))
        .collect()
}

pub fn non_imitation(dir: &mut RunDir, lab: &Lab, mode: Mode) -> Result<RewardNet> {
    if dir.exists(NON_IMITATION_CKPT) {
        return dir.read_json(NON_IMITATION_CKPT);
    }
    live_oracle(lab, mode, "non-imitation labels")?;
    let lp = lab.non_imitation(&mut lab.oracle())?;
    let model = lp.latest_model().expect("baseline trains one round").clone();
    dir.write_feedback(NON_IMITATION, lp.buffer())?;
    dir.write_json(NON_IMITATION_CKPT, &model)?;
    Ok(model)
}

fn needs_imitation(arms: &[Arm], lab: &Lab) -> bool {
    arms.iter().any(|a| matches!(a, Arm::Imitation | Arm::ImitationUniversal))
        || (arms.contains(&Arm::Rejection) && lab.config.rejection.reward == RejectionReward::Imitation)
}

/// Trains or loads every model `arms` need.
pub fn models_for(dir: &mut RunDir, lab: &Lab, arms: &[Arm], mode: Mode) -> Result<(Models, Feedback)> {
    let mut models = Models::default();
    let needs_ensemble = arms
        .iter()
        .any(|a| matches!(a, Arm::Single | Arm::Ensemble | Arm::EnsembleUniversal))
        || (arms.contains(&Arm::Rejection) && lab.config.rejection.reward == RejectionReward::Ensemble);
    if needs_ensemble {
        models.ensemble = Some(ensemble(dir, lab, mode)?);
    }
    if arms.contains(&Arm::Union) {
        models.union = Some(union(dir, lab, mode)?);
    }
    if needs_imitation(arms, lab) {
        ensure_imitation(dir, lab, mode)?;
        models.imitation = imitation_models(dir)?;
    }
    if arms.contains(&Arm::NonImitation) {
        models.non_imitation = Some(non_imitation(dir, lab, mode)?);
    }
    let feedback = Feedback {
        initial: dir.read_feedback(INITIAL)?,
        imitation: dir.read_feedback(BUFFER)?,
        non_imitation: dir.read_feedback(NON_IMITATION)?,
    };
    Ok((models, feedback))
}

fn write_dumps(dir: &mut RunDir, lab: &Lab, prefix: &str, eval: &Evaluation) -> Result<()> {
    for d in &eval.dumps {
        let rel = format!("samples/{prefix}/{}_trial{}.jsonl", d.arm, d.trial);
        dir.write(&rel, &jsonl(&lab.dump_lines(&d.output))?)?;
    }
    Ok(())
}

/// Evaluates `spec.arms` and writes `metrics/eval.csv`.
pub fn eval(dir: &mut RunDir, lab: &Lab, spec: &EvalSpec, mode: Mode) -> Result<ArmTable> {
    let (models, feedback) = models_for(dir, lab, &spec.arms, mode)?;
    let evaluation = lab.evaluate(spec, &models, &feedback)?;
    let table = compare_arms(&evaluation.reports)?;
    write_dumps(dir, lab, "eval", &evaluation)?;
    dir.write(EVAL_CSV, table.to_csv()?.as_bytes())?;
    Ok(table)
}

/// Baseline against rejection sampling; writes `metrics/rejection.csv`.
pub fn reject(dir: &mut RunDir, lab: &Lab, trials: usize, n: usize, mode: Mode) -> Result<ArmTable> {
    let spec = EvalSpec {
        arms: vec![Arm::Baseline, Arm::Rejection],
        trials,
        n,
        universal_n: None,
    };
    let (models, feedback) = models_for(dir, lab, &spec.arms, mode)?;
    let evaluation = lab.evaluate(&spec, &models, &feedback)?;
    let table = compare_arms(&evaluation.reports)?;
    write_dumps(dir, lab, "reject", &evaluation)?;
    dir.write(REJECTION_CSV, table.to_csv()?.as_bytes())?;
    Ok(table)
}

pub fn sample_path(guided: Option<ModelRef>) -> String {
    match guided {
        None => "samples/sample.jsonl".into(),
        Some(m) => format!(
            "samples/sample_{}.jsonl",
            serde_json::to_value(m).expect("unit variant").as_str().expect("string")
        ),
    }
}

/// Draws `n` samples, unguided or censored by a trained model, and returns
/// their oracle malign fraction.
pub fn sample(dir: &mut RunDir, lab: &Lab, n: usize, guided: Option<ModelRef>, mode: Mode) -> Result<Proportion> {
    let seed = lab.config.stream(streams::SAMPLE);
    let output = match guided {
        None => lab.unguided().sample(n, seed)?,
        Some(which) => {
            let (model, single): (Box<dyn RewardModel>, bool) = match which {
                ModelRef::Single => (Box::new(ensemble(dir, lab, mode)?.members.swap_remove(0)), true),
                ModelRef::Ensemble => (Box::new(ensemble(dir, lab, mode)?), false),
                ModelRef::Union => (Box::new(union(dir, lab, mode)?), true),
                ModelRef::Imitation => {
                    ensure_imitation(dir, lab, mode)?;
                    let m = imitation_models(dir)?
                        .pop()
                        .ok_or_else(|| Error::Record("no imitation round has been trained".into()))?;
                    (Box::new(m), false)
                }
                ModelRef::NonImitation => (Box::new(non_imitation(dir, lab, mode)?), false),
                ModelRef::Reward => {
                    let m: RewardNet = if dir.exists(REWARD_CKPT) {
                        dir.read_json(REWARD_CKPT)?
                    } else {
                        train_single_reward(dir, lab, mode)?
                    };
                    (Box::new(m), false)
                }
            };
            lab.guided(model.as_ref(), lab.plain_guidance(single))?.sample(n, seed)?
        }
    };
    let p = malign_fraction(&output.samples, &mut lab.oracle())?;
    dir.write(&sample_path(guided), &jsonl(&lab.dump_lines(&output))?)?;
    Ok(p)
}

/// Runs `job`, recording it with its wall time in live mode.
pub fn execute(dir: &mut RunDir, lab: &Lab, job: &Job, mode: Mode) -> Result<()> {
    let start = Instant::now();
    match job {
        Job::Sample { n, guided } => {
            sample(dir, lab, *n, *guided, mode)?;
        }
        Job::Ensemble => {
            ensemble(dir, lab, mode)?;
        }
        Job::Union => {
            union(dir, lab, mode)?;
        }
        Job::TrainReward => {
            train_single_reward(dir, lab, mode)?;
        }
        Job::Imitate { rounds } => {
            imitate(dir, lab, mode, Some(*rounds))?;
        }
        Job::NonImitation => {
            non_imitation(dir, lab, mode)?;
        }
        Job::Reject { trials, n } => {
            reject(dir, lab, *trials, *n, mode)?;
        }
        Job::Eval { spec } => {
            eval(dir, lab, spec, mode)?;
        }
    }
    if mode == Mode::Live {
        let job = match job {
            Job::Imitate { .. } => Job::Imitate {
                rounds: dir.ledger.imitation_rounds,
            },
            other => other.clone(),
        };
        dir.push_job(job, start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

/// Outcome of re-executing a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    /// Metric CSVs and whether each matched byte-for-byte.
    pub metrics: Vec<(String, bool)>,
    /// Other regenerated artifacts that differ from the original.
    pub other_mismatches: Vec<String>,
    pub seconds: f64,
    pub original_seconds: f64,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        !self.metrics.is_empty() && self.metrics.iter().all(|(_, ok)| *ok) && self.other_mismatches.is_empty()
    }
}

/// Inputs a replay starts from: labeled pools and checkpoints.
fn is_input(rel: &str) -> bool {
    rel == BUFFER || rel.starts_with("feedback/") || rel.starts_with("checkpoints/")
}

/// Re-executes the jobs of the run at `original` inside `scratch`, starting
/// from its recorded labels and checkpoints, and compares the results.
pub fn replay(original: &Path, scratch: &Path) -> Result<ReplayReport> {
    let start = Instant::now();
    let orig = RunDir::open(original)?;
    if scratch.join(crate::record::CONFIG).exists() {
        return Err(Error::Record(format!("{} is not empty", scratch.display())));
    }
    fs::create_dir_all(scratch)?;
    fs::copy(orig.path(crate::record::CONFIG), scratch.join(crate::record::CONFIG))?;
    let mut dir = RunDir::open(scratch)?;
    dir.ledger = Ledger {
        config_sha256: orig.ledger.config_sha256.clone(),
        ..Ledger::default()
    };
    for rel in orig.ledger.artifacts.keys().filter(|k| is_input(k)) {
        let bytes = orig.read(rel)?;
        dir.write(rel, &bytes)?;
    }
    let lab = Lab::new(orig.config.clone())?;
    for run in &orig.ledger.jobs {
        execute(&mut dir, &lab, &run.job, Mode::Replay)?;
    }
    let mut metrics = Vec::new();
    let mut other = Vec::new();
    for (rel, hash) in &orig.ledger.artifacts {
        let same = dir.ledger.artifacts.get(rel) == Some(hash);
        if rel.starts_with("metrics/") {
            metrics.push((rel.clone(), same));
        } else if !same {
            other.push(rel.clone());
        }
    }
    Ok(ReplayReport {
        metrics,
        other_mismatches: other,
        seconds: start.elapsed().as_secs_f64(),
        original_seconds: orig.ledger.total_wall_seconds(),
    })
}

pub fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Hex digest of an artifact as stored on disk.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
