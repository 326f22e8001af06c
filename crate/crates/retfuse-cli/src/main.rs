//! Command-line front end for the retfuse toolkit.
//!
//! Every workflow is driven by one TOML experiment file: `synth`
//! materializes the synthetic dataset it declares, `run` trains the
//! configured models, and `compare` scores the resulting checkpoints
//! on the held-out test split and writes the comparison report.
//! `gradcheck` needs no config; it verifies backbone gradients
//! against finite differences and is mostly useful after touching the
//! autodiff core.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retfuse::experiment::{parse_experiment, Experiment, ExperimentError};
use retfuse::gradcheck::{backbone_suite, FdConfig};

// ── Argument grammar ─────────────────────────────────────────────────

const EXIT_HELP: &str = "Exit codes:
  0  success
  1  a valid request failed while executing (training, scoring, I/O)
  2  configuration or usage problems (bad flags, unreadable or invalid config)";

#[derive(Parser)]
#[command(
    name = "retfuse",
    version,
    about = "Train and compare multimodal fusion models on retinal-style data",
    after_help = EXIT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment TOML file; relative paths inside it resolve against
    /// the file's directory.
    #[arg(short, long, value_name = "FILE")]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset declared in the config.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Wipe and regenerate a dataset that already exists.
        #[arg(long)]
        force: bool,
    },
    /// Train the configured runs and write checkpoints + histories.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Train just the named run instead of all of them.
        #[arg(long, value_name = "NAME")]
        only: Option<String>,
    },
    /// Score every run's checkpoint on the test split and write
    /// report.csv and roc.svg.
    Compare {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Check backbone gradients against finite differences.
    Gradcheck {
        /// Independent model/data seeds per backbone family.
        #[arg(long, default_value_t = 5, value_name = "N")]
        strata: usize,
        /// Check every N-th parameter; 1 checks all of them.
        #[arg(long, default_value_t = 25, value_name = "N")]
        thin: usize,
        /// Base finite-difference step.
        #[arg(long, default_value_t = 1e-3, value_name = "H")]
        step: f64,
    },
}

// ── Failure classification ───────────────────────────────────────────

enum Failure {
    /// The request itself was unusable; nothing was attempted.
    Config(String),
    /// The request was valid but executing it went wrong.
    Runtime(String),
}

impl Failure {
    fn exit(&self) -> ExitCode {
        match self {
            Failure::Config(_) => ExitCode::from(2),
            Failure::Runtime(_) => ExitCode::from(1),
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn classify(e: ExperimentError) -> Failure {
    match &e {
        ExperimentError::BadConfig(_) | ExperimentError::Toml(_) => {
            Failure::Config(e.to_string())
        }
        ExperimentError::AlreadyExists(_) => {
            Failure::Config(format!("{e} (pass --force to regenerate)"))
        }
        _ => Failure::Runtime(e.to_string()),
    }
}

fn load_experiment(path: &Path) -> Result<Experiment, Failure> {
    // Everything in this phase is reading and validating the request,
    // so any failure here is a configuration problem regardless of
    // which library error it surfaces as.
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = parse_experiment(&text).map_err(|e| Failure::Config(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Experiment::from_parts(config, base).map_err(|e| Failure::Config(e.to_string()))
}

// ── Subcommands ──────────────────────────────────────────────────────

fn cmd_synth(config: &Path, force: bool) -> Result<(), Failure> {
    let exp = load_experiment(config)?;
    let manifest = exp.cmd_synth(force).map_err(classify)?;
    println!("synth ok manifest {}", manifest.display());
    Ok(())
}

fn cmd_run(config: &Path, only: Option<&str>) -> Result<(), Failure> {
    let exp = load_experiment(config)?;
    let outcomes = exp.cmd_run_only(only).map_err(classify)?;
    let mut diverged = Vec::new();
    for o in &outcomes {
        let epoch = o
            .best_epoch
            .map_or_else(|| "-".to_string(), |e| e.to_string());
        let auc = o
            .best_val_auc
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!(
            "run {} stopping {} best_epoch {} val_auc {} checkpoint {}",
            o.name,
            o.stopping.as_str(),
            epoch,
            auc,
            o.checkpoint.display()
        );
        if o.failed() {
            diverged.push(o.name.clone());
        }
    }
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "diverged: {}",
            diverged.join(", ")
        )))
    }
}

fn cmd_compare(config: &Path) -> Result<(), Failure> {
    let exp = load_experiment(config)?;
    let out = exp.cmd_compare().map_err(classify)?;
    print!("{}", out.report.to_text());
    println!(
        "compare ok csv {} svg {}",
        out.csv_path.display(),
        out.svg_path.display()
    );
    Ok(())
}

fn cmd_gradcheck(strata: usize, thin: usize, step: f64) -> Result<(), Failure> {
    if strata == 0 || thin == 0 {
        return Err(Failure::Config(
            "--strata and --thin must be at least 1".to_string(),
        ));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Failure::Config("--step must be a positive number".to_string()));
    }
    let cfg = FdConfig {
        step,
        ..FdConfig::default()
    };
    let outcomes =
        backbone_suite(strata, thin, &cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut ok = true;
    for o in &outcomes {
        println!(
            "gradcheck {} coords {} max_abs_err {:.3e} pass {}",
            o.label,
            o.report.coords_checked(),
            o.report.max_abs_err(),
            o.report.pass()
        );
        for line in o.report.failures().iter().take(5) {
            println!("  {line}");
        }
        ok &= o.report.pass();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(
            "analytic gradients disagree with finite differences".to_string(),
        ))
    }
}

// ── Entry point ──────────────────────────────────────────────────────

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, force } => cmd_synth(&config.config, *force),
        Command::Run { config, only } => cmd_run(&config.config, only.as_deref()),
        Command::Compare { config } => cmd_compare(&config.config),
        Command::Gradcheck { strata, thin, step } => cmd_gradcheck(*strata, *thin, *step),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit()
        }
    }
}
