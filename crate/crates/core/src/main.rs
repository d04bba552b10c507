use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use subedit::config::{ExperimentConfig, Overrides};
use subedit::pipeline;
use subedit::updater::EditMode;
use subedit::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "subedit", version, about = "Subspace-constrained knowledge editing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// suit, alphaedit, memit, k-only or delta-only.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<EditMode>,

    #[arg(long = "tau-energy", global = true)]
    tau_energy: Option<f64>,

    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Output root; the run bundle is written to `<out>/<run-id>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic fact corpus.
    GenCorpus,
    /// Train the toy model on the corpus.
    Train,
    /// Apply the edit session for each configured mode.
    Edit,
    /// Evaluate the edited checkpoints.
    Eval,
    /// Write perturbation, drift, variance, leakage and decomposition tables.
    Analyze,
    /// Run the hyperparameter sweep.
    Sweep,
    /// Run every stage in order.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Train => "train",
            Command::Edit => "edit",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::Sweep => "sweep",
            Command::All => "all",
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<EditMode, String> {
    EditMode::parse(s).map_err(|e| e.to_string())
}

fn configure_threads() -> Result<()> {
    let n = match std::env::var("SUBEDIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("SUBEDIT_THREADS must be a count, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<PathBuf> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        mode: cli.mode,
        tau_energy: cli.tau_energy,
        lambda_penalty: cli.lambda,
        out_dir: cli.out.clone(),
    })?;
    match cli.command {
        Command::GenCorpus => pipeline::cmd_gen_corpus(&cfg)?,
        Command::Train => pipeline::cmd_train(&cfg)?,
        Command::Edit => pipeline::cmd_edit(&cfg)?,
        Command::Eval => pipeline::cmd_eval(&cfg)?,
        Command::Analyze => pipeline::cmd_analyze(&cfg)?,
        Command::Sweep => pipeline::cmd_sweep(&cfg)?,
        Command::All => pipeline::cmd_all(&cfg)?,
    }
    Ok(cfg.run_dir())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!(
                "{}",
                json!({"status": "ok", "command": cli.command.name(), "run_dir": dir})
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut record = json!({
                "status": "error",
                "command": cli.command.name(),
                "kind": e.kind(),
                "message": e.to_string(),
            });
            if let Error::MissingArtifact { path, producer } = &e {
                record["path"] = json!(path);
                record["producer"] = json!(producer);
            }
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
