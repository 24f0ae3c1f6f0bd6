//! Run directories: config snapshot, artifacts and the hash-stamped ledger.
//!
//! Layout:
//!
//! ```text
//! <run>/config.toml
//! <run>/ledger.json
//! <run>/buffer.jsonl            imitation feedback buffer
//! <run>/feedback/*.jsonl        other labeled pools
//! <run>/checkpoints/*.json
//! <run>/samples/*.jsonl
//! <run>/metrics/*.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use censorlab::reward::{FeedbackDataset, Source};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EvalSpec, RunConfig};
use crate::error::{Error, Result};

pub const CONFIG: &str = "config.toml";
pub const LEDGER: &str = "ledger.json";
pub const BUFFER: &str = "buffer.jsonl";
pub const INITIAL: &str = "feedback/initial.jsonl";
pub const NON_IMITATION: &str = "feedback/non_imitation.jsonl";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// A unit of work recorded in the ledger, replayable in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "job", rename_all = "snake_case")]
pub enum Job {
    Sample {
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        guided: Option<crate::pipeline::ModelRef>,
    },
    Ensemble,
    Union,
    TrainReward,
    /// Imitation rounds trained so far when the job finished.
    Imitate {
        rounds: usize,
    },
    NonImitation,
    Reject {
        trials: usize,
        n: usize,
    },
    Eval {
        spec: EvalSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRun {
    #[serde(flatten)]
    pub job: Job,
    pub wall_seconds: f64,
}

/// Labels spent on the run, split by source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HumanTime {
    pub human_labels: usize,
    pub human_seconds: f64,
    pub oracle_labels: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub config_sha256: String,
    /// Relative path → sha256 of every artifact written.
    pub artifacts: BTreeMap<String, String>,
    pub jobs: Vec<JobRun>,
    pub human_time: HumanTime,
    /// Imitation rounds whose model has been trained.
    pub imitation_rounds: usize,
}

impl Ledger {
    pub fn total_wall_seconds(&self) -> f64 {
        self.jobs.iter().map(|j| j.wall_seconds).sum()
    }
}

/// An open run directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    pub config: RunConfig,
    pub ledger: Ledger,
}

impl RunDir {
    /// Opens `root`, creating it with `config` if it has no config yet. An
    /// existing config must match `config` outside the `eval` section.
    pub fn create(root: &Path, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if root.join(CONFIG).exists() {
            let dir = Self::open(root)?;
            let mut a = dir.config.clone();
            let mut b = config;
            a.eval = Default::default();
            b.eval = Default::default();
            if a != b {
                return Err(Error::Record(format!(
                    "{} already holds a different run config",
                    root.display()
                )));
            }
            return Ok(dir);
        }
        fs::create_dir_all(root)?;
        let text = config.to_toml();
        fs::write(root.join(CONFIG), &text)?;
        let mut dir = Self {
            root: root.to_path_buf(),
            config,
            ledger: Ledger {
                config_sha256: sha256_hex(text.as_bytes()),
                ..Ledger::default()
            },
        };
        dir.save_ledger()?;
        Ok(dir)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(CONFIG))
            .map_err(|e| Error::Record(format!("{}: not a run directory ({e})", root.display())))?;
        let config = RunConfig::from_toml(&text)?;
        let ledger: Ledger = match fs::read(root.join(LEDGER)) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ledger {
                config_sha256: sha256_hex(text.as_bytes()),
                ..Ledger::default()
            },
            Err(e) => return Err(e.into()),
        };
        if ledger.config_sha256 != sha256_hex(text.as_bytes()) {
            return Err(Error::Record(format!("{}: config.toml does not match its ledger hash", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            config,
            ledger,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.ledger.artifacts.contains_key(rel) && self.path(rel).exists()
    }

    /// Writes an artifact and stamps its hash into the ledger.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.ledger.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        self.save_ledger()
    }

    /// Reads an artifact, checking it against its recorded hash.
    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let expected = self
            .ledger
            .artifacts
            .get(rel)
            .ok_or_else(|| Error::Record(format!("{rel}: not recorded in the ledger")))?;
        let bytes = fs::read(self.path(rel))?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Record(format!("{rel}: hash does not match the ledger")));
        }
        Ok(bytes)
    }

    pub fn read_feedback(&self, rel: &str) -> Result<Option<FeedbackDataset>> {
        if !self.exists(rel) {
            return Ok(None);
        }
        let bytes = self.read(rel)?;
        Ok(Some(FeedbackDataset::read_jsonl(BufReader::new(bytes.as_slice()))?))
    }

    /// Writes a labeled pool and refreshes the human-time ledger.
    pub fn write_feedback(&mut self, rel: &str, data: &FeedbackDataset) -> Result<()> {
        self.write(rel, data.to_jsonl().as_bytes())?;
        self.refresh_human_time()
    }

    fn refresh_human_time(&mut self) -> Result<()> {
        let mut t = HumanTime::default();
        for rel in [INITIAL, BUFFER, NON_IMITATION] {
            if let Some(data) = self.read_feedback(rel)? {
                for r in data.records() {
                    match r.source {
                        Source::Human => {
                            t.human_labels += 1;
                            t.human_seconds += r.elapsed_label_seconds;
                        }
                        Source::Oracle => t.oracle_labels += 1,
                    }
                }
            }
        }
        self.ledger.human_time = t;
        self.save_ledger()
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string(value)?;
        self.write(rel, text.as_bytes())
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.read(rel)?)?)
    }

    pub fn push_job(&mut self, job: Job, wall_seconds: f64) -> Result<()> {
        self.ledger.jobs.push(JobRun { job, wall_seconds });
        self.save_ledger()
    }

    pub fn save_ledger(&mut self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.ledger)?;
        fs::write(self.root.join(LEDGER), text)?;
        Ok(())
    }

    /// Recorded artifacts under `prefix`, in path order.
    pub fn artifacts_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.ledger
            .artifacts
            .keys()
            .filter(move |k| k.starts_with(prefix))
            .map(String::as_str)
    }
}
