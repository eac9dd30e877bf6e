use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use srl_core::harness::{
    cmd_collect, cmd_gtc, cmd_report, cmd_sweep, cmd_train_rl, cmd_train_srl, run_experiment,
    ExperimentConfig, GtcSplit, HarnessError, SweepSpec, DATASET_FILE, SRL_CHECKPOINT,
};

#[derive(Parser)]
#[command(
    name = "srl-bench",
    version,
    about = "State representation learning benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply to every missing key.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory; overrides `out` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Sets the data, SRL and (single) RL seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a random-policy dataset into <out>/dataset.bin.
    Collect(Common),
    /// Train the configured SRL model.
    TrainSrl {
        #[command(flatten)]
        common: Common,
        /// Dataset to train on [default: <out>/dataset.bin]
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Train PPO policies on a frozen SRL checkpoint.
    TrainRl {
        #[command(flatten)]
        common: Common,
        /// SRL checkpoint [default: <out>/srl.ckpt]
        #[arg(long, value_name = "PATH")]
        srl: Option<PathBuf>,
    },
    /// Ground-truth correlation of an SRL checkpoint.
    Gtc {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        srl: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Collect, train SRL, measure GTC and train RL in one go.
    Run(Common),
    /// Run a sweep. `--config` is a sweep spec file unless `--preset` is given.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Built-in sweep: ablation, methods, seeds, state_dim, train_size, weights.
        #[arg(long)]
        preset: Option<String>,
        /// Runs executed at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Print the expanded runs without executing them.
        #[arg(long)]
        dry_run: bool,
    },
    /// Summarize a run or sweep directory into summary.csv / summary.json.
    Report(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

impl From<Split> for GtcSplit {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => GtcSplit::Train,
            Split::Val => GtcSplit::Val,
            Split::All => GtcSplit::All,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(path: &Option<PathBuf>, dir: &Path, file: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| dir.join(file))
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) -> Result<(), HarnessError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Collect(common) => {
            let cfg = load_config(&common)?;
            let path = cmd_collect(&cfg)?;
            println!("{}", path.display());
        }
        Command::TrainSrl { common, dataset } => {
            let cfg = load_config(&common)?;
            let dataset = or_default(&dataset, &cfg.out, DATASET_FILE);
            let report = cmd_train_srl(&cfg, &dataset)?;
            match report.selected() {
                Some(e) => println!(
                    "trained {} epochs, selected epoch {} (val loss {:.6})",
                    report.epochs.len(),
                    e.epoch,
                    e.val.total
                ),
                None => println!("no trainable parameters; checkpoint written"),
            }
        }
        Command::TrainRl { common, srl } => {
            let cfg = load_config(&common)?;
            let srl = or_default(&srl, &cfg.out, SRL_CHECKPOINT);
            for curve in cmd_train_rl(&cfg, &srl)? {
                if let Some(p) = curve.points.last() {
                    println!(
                        "seed {}: {:.1} ± {:.1} at {} steps",
                        curve.seed, p.eval.mean_reward, p.eval.std_error, p.timesteps
                    );
                }
            }
        }
        Command::Gtc {
            common,
            srl,
            dataset,
            split,
        } => {
            let cfg = load_config(&common)?;
            let srl = or_default(&srl, &cfg.out, SRL_CHECKPOINT);
            let dataset = or_default(&dataset, &cfg.out, DATASET_FILE);
            print_json(&cmd_gtc(&cfg, &srl, &dataset, split.into())?)?;
        }
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            let outcome = run_experiment(&cfg, None)?;
            if let Some(g) = &outcome.gtc {
                println!("gtc_mean {:.4}", g.report.gtc_mean);
            }
            for curve in &outcome.curves {
                if let Some(p) = curve.points.last() {
                    println!(
                        "seed {}: {:.1} ± {:.1}",
                        curve.seed, p.eval.mean_reward, p.eval.std_error
                    );
                }
            }
        }
        Command::Sweep {
            common,
            preset,
            jobs,
            dry_run,
        } => {
            let mut spec = match (&preset, &common.config) {
                (Some(name), None) => SweepSpec::preset(name)?,
                (None, Some(path)) => SweepSpec::load(path)?,
                (Some(_), Some(_)) => {
                    return Err(HarnessError::Config(
                        "give either --preset or --config, not both".into(),
                    ))
                }
                (None, None) => {
                    return Err(HarnessError::Config(
                        "sweep needs --preset or --config".into(),
                    ))
                }
            };
            if let Some(seed) = common.seed {
                spec.base.override_seed(seed);
            }
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(&spec.name));
            let runs = spec.expand(&out)?;
            if dry_run {
                for r in &runs {
                    println!("{:03} {} -> {}", r.index, r.label, r.config.out.display());
                }
                return Ok(());
            }
            let outcome = cmd_sweep(&spec, &out, jobs)?;
            for (i, e) in &outcome.failures {
                eprintln!("run {i:03} `{}` failed: {e}", outcome.runs[*i].label);
            }
            println!("{} runs written to {}", outcome.runs.len(), out.display());
            if !outcome.failures.is_empty() {
                return Err(HarnessError::SweepFailed {
                    failed: outcome.failures.len(),
                    total: outcome.runs.len(),
                });
            }
        }
        Command::Report(common) => {
            let dir = match (&common.out, &common.config) {
                (Some(d), _) => d.clone(),
                (None, Some(_)) => load_config(&common)?.out,
                (None, None) => return Err(HarnessError::Config("report needs --out DIR".into())),
            };
            let report = cmd_report(&dir)?;
            println!("{} rows written to {}", report.rows.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage mistakes are configuration errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
