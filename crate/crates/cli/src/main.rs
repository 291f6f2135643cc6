//! Command-line front end: training, generation, encoding, evaluation,
//! latent property optimization and grid-pattern experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CommandError;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "modflow", version, about = "Graph flow models for molecule generation", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key=value configuration file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads (1 forces a fully sequential run)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a molecule corpus
    Train,
    /// Sample molecules from a checkpoint
    Generate,
    /// Map molecules to their latent start states
    Encode,
    /// Score a generated set against the training corpus
    Eval,
    /// Climb a fitted property in latent space
    Optimize,
    /// Fit and sample a binary grid pattern
    Toy {
        /// chessboard or stripes
        pattern: Option<String>,
        /// grid side length
        grid: Option<usize>,
        /// block size (chessboard) or stripe width
        size: Option<usize>,
    },
}

/// Flags that override configuration keys of the same name.
#[derive(Args, Debug)]
struct Settings {
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    data: Option<String>,
    #[arg(long, global = true)]
    format: Option<String>,
    #[arg(long, global = true)]
    heldout: Option<String>,
    #[arg(long, global = true)]
    input: Option<String>,
    #[arg(long, global = true)]
    atoms: Option<String>,
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    vocab: Option<String>,
    #[arg(long = "vocab-size", global = true)]
    vocab_size: Option<String>,
    #[arg(long, global = true)]
    dim: Option<String>,
    #[arg(long, global = true)]
    rtol: Option<String>,
    #[arg(long, global = true)]
    atol: Option<String>,
    #[arg(long, global = true)]
    eps: Option<String>,
    #[arg(long, global = true)]
    lr: Option<String>,
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<String>,
    #[arg(long, global = true)]
    shuffle: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<String>,
    #[arg(long, global = true)]
    resume: Option<String>,
    #[arg(long, global = true)]
    count: Option<String>,
    #[arg(long, global = true)]
    bins: Option<String>,
    #[arg(long, global = true)]
    property: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<String>,
    #[arg(long = "ascent-steps", global = true)]
    ascent_steps: Option<String>,
    #[arg(long, global = true)]
    molecule: Option<String>,
    #[arg(long = "toy-steps", global = true)]
    toy_steps: Option<String>,
    #[arg(long = "toy-lr", global = true)]
    toy_lr: Option<String>,
    #[arg(long = "toy-samples", global = true)]
    toy_samples: Option<String>,
}

impl Cli {
    fn overrides(&self) -> Vec<(String, String)> {
        let s = &self.settings;
        let mut out: Vec<(String, String)> = [
            ("out", &s.out),
            ("data", &s.data),
            ("format", &s.format),
            ("heldout", &s.heldout),
            ("input", &s.input),
            ("atoms", &s.atoms),
            ("mode", &s.mode),
            ("vocab", &s.vocab),
            ("vocab_size", &s.vocab_size),
            ("dim", &s.dim),
            ("rtol", &s.rtol),
            ("atol", &s.atol),
            ("eps", &s.eps),
            ("lr", &s.lr),
            ("batch_size", &s.batch_size),
            ("epochs", &s.epochs),
            ("shuffle", &s.shuffle),
            ("checkpoint", &s.checkpoint),
            ("resume", &s.resume),
            ("count", &s.count),
            ("bins", &s.bins),
            ("property", &s.property),
            ("lambda", &s.lambda),
            ("ascent_steps", &s.ascent_steps),
            ("molecule", &s.molecule),
            ("toy_steps", &s.toy_steps),
            ("toy_lr", &s.toy_lr),
            ("toy_samples", &s.toy_samples),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
        if let Some(seed) = self.seed {
            out.push(("seed".into(), seed.to_string()));
        }
        if let Some(t) = self.threads {
            out.push(("threads".into(), t.to_string()));
        }
        if let Command::Toy { pattern, grid, size } = &self.command {
            if let Some(p) = pattern {
                out.push(("pattern".into(), p.clone()));
            }
            if let Some(n) = grid {
                out.push(("grid".into(), n.to_string()));
            }
            if let Some(b) = size {
                let key = if pattern.as_deref() == Some("stripes") { "stripe_w" } else { "block" };
                out.push((key.into(), b.to_string()));
            }
        }
        out
    }
}

fn run(cli: &Cli) -> Result<(), CommandError> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides()).map_err(|e| CommandError::Usage(e.0))?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CommandError::Runtime(e.into()))?;
    }
    match cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Generate => commands::cmd_generate(&cfg),
        Command::Encode => commands::cmd_encode(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Optimize => commands::cmd_optimize(&cfg),
        Command::Toy { .. } => commands::cmd_toy(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CommandError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CommandError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
