use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ovdet::config::ExperimentConfig;
use ovdet::error::Error;
use ovdet::evaluation::Setup;
use ovdet::gradsuite::{GradSuiteConfig, GradTerm};
use ovdet::pipeline;
use ovdet::synthworld::Split;

#[derive(Parser)]
#[command(
    name = "ovdet",
    version,
    about = "Open-vocabulary detection experiments on synthetic worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetupArg {
    Novel,
    Known,
    Generalized,
    All,
}

impl SetupArg {
    fn setups(self) -> Vec<Setup> {
        match self {
            SetupArg::Novel => vec![Setup::Novel],
            SetupArg::Known => vec![Setup::Known],
            SetupArg::Generalized => vec![Setup::Generalized],
            SetupArg::All => Setup::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Stage one: caption-supervised region-word matching.
    TrainLsm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Stage two: detector fine-tuning on known-class boxes.
    TrainStt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Stage-one checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a stage-two checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        setup: SetupArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every objective.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Instances per objective.
        #[arg(long)]
        instances: Option<usize>,
        /// Restrict to these objectives (repeatable).
        #[arg(long = "term")]
        terms: Vec<String>,
        /// Perturb the analytic gradient of one objective.
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Region-mode x consistency x pipeline sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn term(name: &str, flag: &str) -> Result<GradTerm, Error> {
    GradTerm::parse(name).ok_or_else(|| {
        let known: Vec<&str> = GradTerm::ALL.iter().map(|t| t.name()).collect();
        Error::invalid_config(
            flag,
            format!(
                "unknown objective {name:?}; expected one of {}",
                known.join(", ")
            ),
        )
    })
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn ensure_dir(p: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.load()?;
            let out = pipeline::resolve_out(common.out.clone(), &cfg, "world");
            ensure_dir(&out)?;
            let stats = pipeline::cmd_synth(&cfg, &out)?;
            print_json(&stats)?;
        }
        Command::TrainLsm { common, dataset } => {
            let cfg = common.load()?;
            let out = pipeline::resolve_out(common.out.clone(), &cfg, "lsm");
            ensure_dir(&out)?;
            let log = pipeline::cmd_train_lsm(&cfg, &dataset, &out)?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                eprintln!(
                    "loss {:.4} -> {:.4} over {} steps",
                    first.total,
                    last.total,
                    log.len()
                );
            }
            println!("{}", out.join(pipeline::LSM_CHECKPOINT).display());
        }
        Command::TrainStt {
            common,
            dataset,
            checkpoint,
        } => {
            let cfg = match (&common.config, common.seed) {
                (None, None) => None,
                _ => Some(common.load()?),
            };
            let default = ExperimentConfig::default();
            let out =
                pipeline::resolve_out(common.out.clone(), cfg.as_ref().unwrap_or(&default), "stt");
            ensure_dir(&out)?;
            let outcome = pipeline::cmd_train_stt(cfg.as_ref(), &dataset, &checkpoint, &out)?;
            if let (Some(step), Some(score)) = (outcome.best_step, outcome.best_score) {
                eprintln!("kept step {step} (validation AP {score:.4})");
            }
            println!("{}", out.join(pipeline::STT_CHECKPOINT).display());
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            setup,
            split,
            out,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from("eval"));
            ensure_dir(&out)?;
            let report =
                pipeline::cmd_evaluate(&checkpoint, &dataset, split.into(), &setup.setups(), &out)?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck {
            seed,
            instances,
            terms,
            corrupt,
            out,
        } => {
            let mut suite = GradSuiteConfig::default();
            if let Some(s) = seed {
                suite.seed = s;
            }
            if let Some(n) = instances {
                suite.instances = n;
            }
            let terms = if terms.is_empty() {
                GradTerm::ALL.to_vec()
            } else {
                terms
                    .iter()
                    .map(|t| term(t, "term"))
                    .collect::<Result<_, _>>()?
            };
            let corrupt = corrupt.as_deref().map(|t| term(t, "corrupt")).transpose()?;
            if let Some(o) = &out {
                ensure_dir(o)?;
            }
            let results = pipeline::cmd_gradcheck(&suite, &terms, corrupt, out.as_deref())?;
            let mut ok = true;
            for t in &terms {
                let mine: Vec<_> = results.iter().filter(|r| r.term == *t).collect();
                let failed = mine.iter().filter(|r| !r.passed).count();
                let worst = mine.iter().map(|r| r.max_rel).fold(0.0, f64::max);
                let verdict = if failed == 0 { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {:<12} {} instances, {failed} failed, max rel {worst:.2e}",
                    t.name(),
                    mine.len()
                );
                ok &= failed == 0;
            }
            return Ok(ok);
        }
        Command::Ablate { common, dataset } => {
            let cfg = common.load()?;
            let out = pipeline::resolve_out(common.out.clone(), &cfg, "ablation");
            ensure_dir(&out)?;
            let rows = pipeline::cmd_ablate(&cfg, &dataset, &out)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
