use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use censorlab::metrics::ArmTable;
use censorlab::mixture::presets;
use censorlab_run::config::{AnnotatorKind, Arm, EvalSpec, RejectionReward, RunConfig};
use censorlab_run::lab::Lab;
use censorlab_run::pipeline::{self, Mode, ModelRef, RoundRow};
use censorlab_run::record::{Job, RunDir};
use censorlab_run::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "censorlab", version, about = "Censored sampling of diffusion models on labeled Gaussian-mixture worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the preset worlds.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
    /// Create a run directory without running anything.
    Init(RunArgs),
    /// Draw samples, unguided or censored by a trained model.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, value_enum)]
        guided: Option<ModelRef>,
    },
    /// Train one reward net on every kept label in the run.
    TrainReward(RunArgs),
    /// Label uncensored samples and train the bootstrap ensemble.
    Ensemble {
        #[command(flatten)]
        run: RunArgs,
        /// Also train the union baseline on the same labels.
        #[arg(long)]
        union: bool,
    },
    /// Run the imitation rounds with the oracle annotator.
    Imitate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        rounds: Option<usize>,
        /// Per-round `malign,benign` label quota.
        #[arg(long, value_parser = parse_quota)]
        quota: Option<(usize, usize)>,
        #[arg(long, value_enum)]
        annotator: Option<AnnotatorArg>,
    },
    /// Rejection sampling against the unguided baseline.
    Reject {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum)]
        reward: Option<RejectionArg>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Evaluate experimental arms and write metrics/eval.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated arms.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write plot-ready tables from a run's metrics.
    Plotdata {
        #[arg(long)]
        run: PathBuf,
    },
    /// Serve the labeling API over the runs under a directory.
    Serve {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Re-execute a run from its record and compare metric CSVs.
    Replay {
        #[arg(long)]
        run: PathBuf,
        /// Empty directory to re-execute into.
        #[arg(long)]
        into: PathBuf,
    },
}

#[derive(Subcommand)]
enum WorldAction {
    List,
    Show { name: String },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AnnotatorArg {
    Oracle,
    Human,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RejectionArg {
    Oracle,
    Ensemble,
    Imitation,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a preset world's default configuration.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory; defaults to `<runs-root>/<config name>`.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
}

fn parse_quota(s: &str) -> std::result::Result<(usize, usize), String> {
    let (m, b) = s.split_once(',').ok_or("expected `malign,benign`")?;
    Ok((
        m.trim().parse().map_err(|e| format!("malign quota: {e}"))?,
        b.trim().parse().map_err(|e| format!("benign quota: {e}"))?,
    ))
}

impl RunArgs {
    /// The requested config, with `edit` applied, and its run directory.
    fn open(&self, edit: impl FnOnce(&mut RunConfig)) -> Result<RunDir> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), _) => Some(RunConfig::from_toml(&std::fs::read_to_string(path)?)?),
            (None, Some(name)) => Some(RunConfig::for_preset(name, self.seed)?),
            (None, None) => None,
        };
        match cfg {
            Some(mut cfg) => {
                edit(&mut cfg);
                cfg.validate()?;
                let root = self.run.clone().unwrap_or_else(|| self.runs_root.join(&cfg.name));
                RunDir::create(&root, cfg)
            }
            None => {
                let root = self
                    .run
                    .clone()
                    .ok_or_else(|| Error::Config(vec!["give --config, --preset or --run".into()]))?;
                let dir = RunDir::open(&root)?;
                let mut cfg = dir.config.clone();
                edit(&mut cfg);
                // flags must not contradict the recorded config
                RunDir::create(&root, cfg)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::World { action } => world(action),
        Command::Init(args) => {
            let dir = args.open(|_| {})?;
            println!("{}", dir.root().display());
            Ok(())
        }
        Command::Sample { run, n, guided } => {
            let (mut dir, lab) = open_lab(&run, |_| {})?;
            let start = Instant::now();
            let p = pipeline::sample(&mut dir, &lab, n, guided, Mode::Live)?;
            dir.push_job(Job::Sample { n, guided }, start.elapsed().as_secs_f64())?;
            println!(
                "malign fraction {:.4} ({}/{}; 95% CI [{:.4}, {:.4}])",
                p.estimate, p.count, p.n, p.ci.lower, p.ci.upper
            );
            println!("{}", dir.path(&pipeline::sample_path(guided)).display());
            Ok(())
        }
        Command::TrainReward(run) => {
            let (mut dir, lab) = open_lab(&run, |_| {})?;
            pipeline::execute(&mut dir, &lab, &Job::TrainReward, Mode::Live)?;
            println!("{}", dir.path(pipeline::REWARD_CKPT).display());
            Ok(())
        }
        Command::Ensemble { run, union } => {
            let (mut dir, lab) = open_lab(&run, |_| {})?;
            pipeline::execute(&mut dir, &lab, &Job::Ensemble, Mode::Live)?;
            if union {
                pipeline::execute(&mut dir, &lab, &Job::Union, Mode::Live)?;
            }
            let initial = dir.read_feedback(censorlab_run::record::INITIAL)?.unwrap_or_default();
            let (m, b) = initial.kept_counts();
            println!("{} labels ({m} malign, {b} benign kept)", initial.len());
            println!("{}", dir.path(pipeline::ENSEMBLE_CKPT).display());
            Ok(())
        }
        Command::Imitate {
            run,
            rounds,
            quota,
            annotator,
        } => {
            let (mut dir, lab) = open_lab(&run, |c| {
                if let Some(r) = rounds {
                    c.feedback.rounds = r;
                }
                if let Some((m, b)) = quota {
                    c.feedback.malign_quota = m;
                    c.feedback.benign_quota = b;
                }
                if let Some(a) = annotator {
                    c.feedback.annotator = match a {
                        AnnotatorArg::Oracle => AnnotatorKind::Oracle,
                        AnnotatorArg::Human => AnnotatorKind::Human,
                    };
                }
            })?;
            let rounds = dir.ledger.imitation_rounds;
            pipeline::execute(&mut dir, &lab, &Job::Imitate { rounds }, Mode::Live)?;
            let rows: Vec<RoundRow> = pipeline::read_csv(&dir.read(pipeline::ROUNDS_CSV)?)?;
            for r in &rows {
                println!(
                    "round {}: presented {}, kept {}+{}, buffer {}, malign fraction {:.4}",
                    r.round, r.presented, r.kept_malign, r.kept_benign, r.buffer_kept, r.malign_fraction
                );
            }
            println!("{}", dir.path(censorlab_run::record::BUFFER).display());
            Ok(())
        }
        Command::Reject {
            run,
            threshold,
            reward,
            trials,
            n,
        } => {
            let (mut dir, lab) = open_lab(&run, |c| {
                if let Some(t) = threshold {
                    c.rejection.threshold = t;
                }
                if let Some(r) = reward {
                    c.rejection.reward = match r {
                        RejectionArg::Oracle => RejectionReward::Oracle,
                        RejectionArg::Ensemble => RejectionReward::Ensemble,
                        RejectionArg::Imitation => RejectionReward::Imitation,
                    };
                }
            })?;
            let job = Job::Reject {
                trials: trials.unwrap_or(lab.config.eval.trials),
                n: n.unwrap_or(lab.config.eval.n),
            };
            pipeline::execute(&mut dir, &lab, &job, Mode::Live)?;
            print_table(&dir, pipeline::REJECTION_CSV)
        }
        Command::Eval { run, arms, trials, n } => {
            let (mut dir, lab) = open_lab(&run, |_| {})?;
            let mut spec: EvalSpec = lab.config.eval.clone();
            if let Some(names) = arms {
                let mut bad = Vec::new();
                spec.arms = names
                    .iter()
                    .filter_map(|a| Arm::parse(a.trim()).or_else(|| {
                        bad.push(format!("--arms: unknown arm {a:?}"));
                        None
                    }))
                    .collect();
                if !bad.is_empty() {
                    return Err(Error::Config(bad));
                }
            }
            if let Some(t) = trials {
                spec.trials = t;
            }
            if let Some(n) = n {
                spec.n = n;
            }
            let mut check = lab.config.clone();
            check.eval = spec.clone();
            check.validate()?;
            pipeline::execute(&mut dir, &lab, &Job::Eval { spec }, Mode::Live)?;
            print_table(&dir, pipeline::EVAL_CSV)
        }
        Command::Plotdata { run } => plotdata(&run),
        Command::Serve { runs, addr } => {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(censorlab_run::service::serve(&addr, &runs))?;
            Ok(())
        }
        Command::Replay { run, into } => {
            let report = pipeline::replay(&run, &into)?;
            for (rel, ok) in &report.metrics {
                println!("{} {rel}", if *ok { "identical" } else { "DIFFERS  " });
            }
            for rel in &report.other_mismatches {
                println!("DIFFERS   {rel}");
            }
            println!(
                "replayed in {:.1}s (original {:.1}s)",
                report.seconds, report.original_seconds
            );
            if report.identical() {
                Ok(())
            } else {
                Err(Error::Record("replay did not reproduce the run".into()))
            }
        }
    }
}

fn open_lab(args: &RunArgs, edit: impl FnOnce(&mut RunConfig)) -> Result<(RunDir, Lab)> {
    let dir = args.open(edit)?;
    let lab = Lab::new(dir.config.clone())?;
    Ok((dir, lab))
}

fn world(action: WorldAction) -> Result<()> {
    match action {
        WorldAction::List => {
            for name in presets::NAMES {
                let w = presets::by_name(name).expect("listed preset");
                println!(
                    "{name:<16} {} components, malign mass {:.3}",
                    w.components().len(),
                    w.malign_mass()
                );
            }
            Ok(())
        }
        WorldAction::Show { name } => {
            let w = presets::by_name(&name)
                .ok_or_else(|| Error::Config(vec![format!("world: unknown preset {name:?}")]))?;
            println!("{}", serde_json::to_string_pretty(w.components())?);
            Ok(())
        }
    }
}

fn print_table(dir: &RunDir, rel: &str) -> Result<()> {
    let rows = ArmTable::from_csv(std::str::from_utf8(&dir.read(rel)?).map_err(|e| Error::Record(e.to_string()))?)?;
    println!("{:<22} {:>7} {:>8} {:>8} {:>17}", "arm", "n", "malign", "std", "95% CI");
    for r in rows.iter().filter(|r| r.trial == "all") {
        println!(
            "{:<22} {:>7} {:>8.4} {:>8.4}  [{:.4}, {:.4}]",
            r.arm, r.n, r.malign_fraction, r.std, r.ci_lower, r.ci_upper
        );
    }
    println!("{}", dir.path(rel).display());
    Ok(())
}

/// Tab-separated tables for plotting: one row per arm aggregate and one per
/// imitation round.
fn plotdata(run: &Path) -> Result<()> {
    let mut dir = RunDir::open(run)?;
    let mut written = Vec::new();
    for (src, dst) in [
        (pipeline::EVAL_CSV, "plots/eval_arms.tsv"),
        (pipeline::REJECTION_CSV, "plots/rejection_arms.tsv"),
    ] {
        if !dir.exists(src) {
            continue;
        }
        let rows = ArmTable::from_csv(std::str::from_utf8(&dir.read(src)?).map_err(|e| Error::Record(e.to_string()))?)?;
        let mut out = String::from("index\tarm\tmalign_fraction\tstd\tci_lower\tci_upper\tn\n");
        for (i, r) in rows.iter().filter(|r| r.trial == "all").enumerate() {
            out.push_str(&format!(
                "{i}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.arm, r.malign_fraction, r.std, r.ci_lower, r.ci_upper, r.n
            ));
        }
        dir.write(dst, out.as_bytes())?;
        written.push(dst);
    }
    if dir.exists(pipeline::ROUNDS_CSV) {
        let rows: Vec<RoundRow> = pipeline::read_csv(&dir.read(pipeline::ROUNDS_CSV)?)?;
        let mut out = String::from("round\tmalign_fraction\tbuffer_kept\tlabel_seconds\n");
        for r in rows {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.round, r.malign_fraction, r.buffer_kept, r.label_seconds));
        }
        dir.write("plots/imitation_rounds.tsv", out.as_bytes())?;
        written.push("plots/imitation_rounds.tsv");
    }
    if written.is_empty() {
        return Err(Error::Record(format!("{}: no metrics to plot yet", run.display())));
    }
    for w in written {
        println!("{}", dir.path(w).display());
    }
    Ok(())
}
