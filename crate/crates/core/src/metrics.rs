//! Precision and recall proxies for censored samples, with per-trial
//! confidence intervals and figure-ready CSV tables.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mixture::{Label, LabeledMixture};
use crate::reward::Annotator;

/// Below this separation (in σ) hard posterior assignment is unreliable.
pub const MIN_HARD_SEPARATION: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Two-sided normal quantile for the given confidence level.
pub fn z_value(confidence: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.inverse_cdf(0.5 + confidence / 2.0)
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson(k: usize, n: usize, confidence: f64) -> Result<Interval> {
    if n == 0 || k > n {
        return Err(Error::domain("wilson", format!("k = {k}, n = {n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::domain("confidence", format!("{confidence}")));
    }
    let z = z_value(confidence);
    let (nf, p) = (n as f64, k as f64 / n as f64);
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    Ok(Interval {
        lower: (center - half).max(0.0),
        upper: (center + half).min(1.0),
    })
}

/// An observed proportion with its 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub count: usize,
    pub n: usize,
    pub estimate: f64,
    pub ci: Interval,
}

impl Proportion {
    pub fn new(count: usize, n: usize) -> Result<Self> {
        Ok(Self {
            count,
            n,
            estimate: count as f64 / n.max(1) as f64,
            ci: wilson(count, n, 0.95)?,
        })
    }
}

/// Fraction of `samples` labeled malign by `annotator`.
pub fn malign_fraction(samples: &[Vec<f64>], annotator: &mut dyn Annotator) -> Result<Proportion> {
    if samples.is_empty() {
        return Err(Error::domain("samples", "need at least one sample"));
    }
    let labels = annotator.label(samples)?;
    let malign = labels.iter().filter(|a| a.y == Label::Malign.as_bit()).count();
    Proportion::new(malign, samples.len())
}

/// Mean and sample standard deviation over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub mean: f64,
    pub std: f64,
    pub trials: Vec<Proportion>,
}

pub fn summarize(trials: Vec<Proportion>) -> Result<TrialSummary> {
    if trials.is_empty() {
        return Err(Error::domain("trials", "need at least one trial"));
    }
    let (mean, std) = mean_std(trials.iter().map(|p| p.estimate));
    Ok(TrialSummary { mean, std, trials })
}

/// Mean and sample (n-1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `trials` independent draws of `n` samples each (trial `i` gets
/// index `i`) and summarizes their malign fractions.
pub fn malign_fraction_trials(
    trials: usize,
    n: usize,
    annotator: &mut dyn Annotator,
    mut draw: impl FnMut(usize, usize) -> Result<Vec<Vec<f64>>>,
) -> Result<TrialSummary> {
    if trials == 0 || n == 0 {
        return Err(Error::domain("trials", "need trials ≥ 1 and n ≥ 1"));
    }
    let mut out = Vec::with_capacity(trials);
    for i in 0..trials {
        let samples = draw(i, n)?;
        out.push(malign_fraction(&samples, annotator)?);
    }
    summarize(out)
}

/// Benign-mode coverage of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeOccupancy {
    /// World indices of the benign components, in order.
    pub benign_components: Vec<usize>,
    /// Fraction of all samples assigned to each benign component.
    pub occupancy: Vec<f64>,
    /// Fraction assigned to malign components.
    pub malign: f64,
    /// Renormalized benign weights.
    pub reference: Vec<f64>,
    /// Total variation to `reference`, with the malign mass as an extra
    /// bucket whose reference weight is zero.
    pub tv: f64,
    /// Whether soft (responsibility) assignment was used.
    pub soft: bool,
}

pub fn mode_occupancy(samples: &[Vec<f64>], world: &LabeledMixture) -> Result<ModeOccupancy> {
    if samples.is_empty() {
        return Err(Error::domain("samples", "need at least one sample"));
    }
    for s in samples {
        crate::error::check_len("sample", world.dim(), s.len())?;
    }
    let soft = world.components().len() > 1 && world.min_separation() < MIN_HARD_SEPARATION;
    if soft {
        warn!(
            "modes are {:.2}σ apart (< {MIN_HARD_SEPARATION}σ); using soft assignment",
            world.min_separation()
        );
    }
    let k = world.components().len();
    let mut mass = vec![0.0; k];
    for s in samples {
        if soft {
            for (m, r) in mass.iter_mut().zip(world.responsibilities(s)) {
                *m += r;
            }
        } else {
            mass[world.assign(s)] += 1.0;
        }
    }
    let n = samples.len() as f64;
    let benign = world.benign_indices();
    let b = world.benign_mass();
    let occupancy: Vec<f64> = benign.iter().map(|&i| mass[i] / n).collect();
    let reference: Vec<f64> = benign.iter().map(|&i| world.components()[i].weight / b).collect();
    let malign = (0..k)
        .filter(|i| world.components()[*i].label == Label::Malign)
        .map(|i| mass[i] / n)
        .sum::<f64>();
    let tv = 0.5
        * (occupancy
            .iter()
            .zip(&reference)
            .map(|(o, r)| (o - r).abs())
            .sum::<f64>()
            + malign);
    Ok(ModeOccupancy {
        benign_components: benign,
        occupancy,
        malign,
        reference,
        tv,
        soft,
    })
}

/// One trial of one experimental arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub malign_fraction: Proportion,
    pub occupancy_tv: Option<f64>,
    pub acceptance_ratio: Option<f64>,
    pub oracle_labels: usize,
    pub human_labels: usize,
    pub label_seconds: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub trials: Vec<TrialReport>,
}

impl ArmReport {
    pub fn summary(&self) -> Option<(f64, f64)> {
        if self.trials.is_empty() {
            None
        } else {
            Some(mean_std(self.trials.iter().map(|t| t.malign_fraction.estimate)))
        }
    }
}

/// A row of the arm comparison table. Trial rows carry `trial = Some(i)`;
/// aggregate rows carry the mean and std over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub trial: String,
    pub n: usize,
    pub malign_fraction: f64,
    pub std: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub occupancy_tv: Option<f64>,
    pub acceptance_ratio: Option<f64>,
    pub oracle_labels: usize,
    pub human_labels: usize,
    pub label_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmTable {
    pub rows: Vec<ArmRow>,
    /// Whether aggregate malign fractions are non-increasing in arm order.
    pub monotone: bool,
}

impl ArmTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    pub fn from_csv(text: &str) -> Result<Vec<ArmRow>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    pub fn aggregates(&self) -> impl Iterator<Item = &ArmRow> {
        self.rows.iter().filter(|r| r.trial == "all")
    }
}

pub fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

/// Orders arms as given, drops empty arms with a warning, and emits one row
/// per trial plus one aggregate row per arm.
pub fn compare_arms(arms: &[ArmReport]) -> Result<ArmTable> {
    if arms.len() < 2 {
        return Err(Error::domain("arms", format!("need at least 2 arms, got {}", arms.len())));
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for arm in arms {
        let Some((mean, std)) = arm.summary() else {
            warn!("arm {:?} has no trials; excluded", arm.arm);
            continue;
        };
        for t in &arm.trials {
            rows.push(ArmRow {
                arm: arm.arm.clone(),
                trial: t.trial.to_string(),
                n: t.malign_fraction.n,
                malign_fraction: t.malign_fraction.estimate,
                std: 0.0,
                ci_lower: t.malign_fraction.ci.lower,
                ci_upper: t.malign_fraction.ci.upper,
                occupancy_tv: t.occupancy_tv,
                acceptance_ratio: t.acceptance_ratio,
                oracle_labels: t.oracle_labels,
                human_labels: t.human_labels,
                label_seconds: t.label_seconds,
            });
        }
        let count: usize = arm.trials.iter().map(|t| t.malign_fraction.count).sum();
        let n: usize = arm.trials.iter().map(|t| t.malign_fraction.n).sum();
        let pooled = wilson(count, n, 0.95)?;
        let opt_mean = |f: fn(&TrialReport) -> Option<f64>| {
            let v: Vec<f64> = arm.trials.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| mean_std(v).0)
        };
        rows.push(ArmRow {
            arm: arm.arm.clone(),
            trial: "all".into(),
            n,
            malign_fraction: mean,
            std,
            ci_lower: pooled.lower,
            ci_upper: pooled.upper,
            occupancy_tv: opt_mean(|t| t.occupancy_tv),
            acceptance_ratio: opt_mean(|t| t.acceptance_ratio),
            oracle_labels: arm.trials.iter().map(|t| t.oracle_labels).max().unwrap_or(0),
            human_labels: arm.trials.iter().map(|t| t.human_labels).max().unwrap_or(0),
            label_seconds: arm.trials.iter().map(|t| t.label_seconds).sum(),
        });
        means.push(mean);
    }
    Ok(ArmTable {
        monotone: non_increasing(&means),
        rows,
    })
}
