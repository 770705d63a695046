use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use softq::agent::Algorithm;
use softq::config::{ConfigError, EnvKind, ExperimentConfig};
use softq::env::GridSoccerConfig;
use softq::experiment::{self, ExperimentError};
use softq::suite::{run_verify, VerifyKind};

const OUT_DIR_ENV: &str = "SOFTQ_OUT_DIR";
const STOP_FILE: &str = "STOP";

#[derive(Parser, Debug)]
#[command(
    name = "softq",
    version,
    about = "Maximum-entropy Q-learning experiments"
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory. Falls back to $SOFTQ_OUT_DIR, then `runs/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an agent; writes metrics.jsonl, agent.ckpt and summary.json.
    Train,
    /// Greedy match of a checkpoint against another checkpoint or a random player.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Opponent checkpoint; uniform random when absent.
        #[arg(long, value_name = "PATH")]
        opponent: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
    },
    /// Run a verification suite and print its report as JSON.
    Verify {
        #[arg(value_enum)]
        kind: VerifyArg,
    },
    /// One training run per reuse ratio; writes reuse_sweep.csv.
    ReuseSweep {
        /// Comma-separated reuse ratios.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        ratios: Vec<f64>,
    },
    /// Write the exact soft-optimal Q* and pi* of a tabular environment as CSV.
    SolveTabular,
    /// Print a complete config with every default filled in.
    Defaults {
        #[arg(long, value_enum, default_value = "qop")]
        algorithm: AlgorithmArg,
        #[arg(long, value_enum, default_value = "grid-soccer")]
        env: EnvArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VerifyArg {
    GradEquiv,
    TabularSuite,
    Gradcheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlgorithmArg {
    Sqn,
    SqnCf,
    Qop,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnvArg {
    Gridworld,
    Chain,
    RandomMdp,
    GridSoccer,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
    Verification,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification => 3,
        }
    }
}

fn classify(err: anyhow::Error) -> Failure {
    let validation = err.chain().any(|cause| {
        cause.downcast_ref::<ConfigError>().is_some()
            || cause
                .downcast_ref::<ExperimentError>()
                .is_some_and(ExperimentError::is_validation)
            || cause.downcast_ref::<UsageError>().is_some()
    });
    if validation {
        Failure::Validation(err)
    } else {
        Failure::Runtime(err)
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if let Failure::Validation(e) | Failure::Runtime(e) = &failure {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(failure.code())
        }
    }
}

fn out_dir(cli: &Cli, command: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| {
            std::env::var_os(OUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| Path::new("runs").join(command))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let Some(path) = &cli.config else {
        bail!(UsageError("this command needs --config PATH".into()));
    };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Raised by SIGINT/SIGTERM or by a `STOP` file appearing in the output
/// directory.
fn stop_control(out: &Path) -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    // A second handler registration fails; the flag file still works then.
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::Release));
    let flag = Arc::clone(&stop);
    let stop_file = out.join(STOP_FILE);
    let _ = std::fs::remove_file(&stop_file);
    thread::spawn(move || loop {
        if stop_file.exists() {
            flag.store(true, Ordering::Release);
            return;
        }
        thread::sleep(Duration::from_millis(200));
    });
    stop
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => train(cli).map_err(classify),
        Command::Eval {
            checkpoint,
            opponent,
            episodes,
        } => eval(cli, checkpoint, opponent.as_deref(), *episodes).map_err(classify),
        Command::Verify { kind } => verify(cli, *kind),
        Command::ReuseSweep { ratios } => sweep(cli, ratios).map_err(classify),
        Command::SolveTabular => solve(cli).map_err(classify),
        Command::Defaults { algorithm, env } => defaults(*algorithm, *env).map_err(classify),
    }
}

fn train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    cfg.validate()?;
    let out = out_dir(cli, "train");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).context("writing config.toml")?;
    let stop = stop_control(&out);
    let quiet = cli.quiet;
    let mut observe = |rec: &softq::harness::MetricsRecord| {
        if !quiet {
            let extra = match (rec.win_rate, rec.tabular_gap) {
                (Some(w), _) => format!(" win_rate {w:.3}"),
                (_, Some(g)) => format!(" gap {g:.4}"),
                _ => String::new(),
            };
            eprintln!(
                "step {} env_steps {} loss {:.4}/{:.4} alpha {:.4}{extra}",
                rec.step, rec.env_steps, rec.loss1, rec.loss2, rec.alpha
            );
        }
        false
    };
    let summary = experiment::train_with_sink(&cfg, &out, stop, &mut observe)?;
    if !quiet {
        eprintln!("wrote {}", out.display());
    }
    print_json(&summary)
}

fn eval(cli: &Cli, checkpoint: &Path, opponent: Option<&Path>, episodes: usize) -> Result<()> {
    let (soccer, seed) = match &cli.config {
        Some(_) => {
            let cfg = load_config(cli)?;
            if cfg.env != EnvKind::GridSoccer {
                bail!(UsageError(format!(
                    "eval plays grid_soccer matches, config names {}",
                    cfg.env.as_str()
                )));
            }
            (cfg.soccer(), cfg.seed)
        }
        None => (GridSoccerConfig::default(), cli.seed.unwrap_or(0)),
    };
    let report = experiment::run_eval(&soccer, checkpoint, opponent, episodes, seed)?;
    if cli.out.is_some() || std::env::var_os(OUT_DIR_ENV).is_some() {
        write_json(&out_dir(cli, "eval").join("eval.json"), &report)?;
    }
    print_json(&report)
}

fn verify(cli: &Cli, kind: VerifyArg) -> Result<(), Failure> {
    let kind = match kind {
        VerifyArg::GradEquiv => VerifyKind::GradEquiv,
        VerifyArg::TabularSuite => VerifyKind::TabularSuite,
        VerifyArg::Gradcheck => VerifyKind::Gradcheck,
    };
    let report = run_verify(kind, cli.seed.unwrap_or(0));
    if cli.out.is_some() || std::env::var_os(OUT_DIR_ENV).is_some() {
        write_json(&out_dir(cli, "verify").join("verify.json"), &report)
            .map_err(Failure::Runtime)?;
    }
    print_json(&report).map_err(Failure::Runtime)?;
    if !cli.quiet {
        let passed = report.checks.iter().filter(|c| c.passed).count();
        eprintln!("{passed}/{} checks passed", report.checks.len());
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn sweep(cli: &Cli, ratios: &[f64]) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, "reuse-sweep");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let stop = stop_control(&out);
    let report = experiment::run_reuse_sweep(&cfg, ratios, &out, stop)?;
    if !cli.quiet {
        eprint!("{}", report.to_csv());
        eprintln!(
            "steps to threshold nondecreasing in ratio: {}",
            report.steps_nondecreasing_in_ratio
        );
    }
    print_json(&report)
}

fn solve(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, "solve-tabular");
    let report = experiment::solve_tabular(&cfg, &out)?;
    print_json(&report)
}

fn defaults(algorithm: AlgorithmArg, env: EnvArg) -> Result<()> {
    let algorithm = match algorithm {
        AlgorithmArg::Sqn => Algorithm::Sqn,
        AlgorithmArg::SqnCf => Algorithm::SqnCf,
        AlgorithmArg::Qop => Algorithm::Qop,
    };
    let env = match env {
        EnvArg::Gridworld => EnvKind::Gridworld,
        EnvArg::Chain => EnvKind::Chain,
        EnvArg::RandomMdp => EnvKind::RandomMdp,
        EnvArg::GridSoccer => EnvKind::GridSoccer,
    };
    print!("{}", ExperimentConfig::new(algorithm, env).to_toml()?);
    Ok(())
}
