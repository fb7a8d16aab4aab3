//! The `rapo` command line: configuration, provider wiring, and a resumable
//! run directory around the `rapo_core` pipeline.

pub mod commands;
pub mod config;
pub mod store;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::SspoInput;
pub use config::{load_config, Overrides, PipelineConfig, ResolvedConfig};
pub use store::RunStore;

#[derive(Debug, Parser)]
#[command(name = "rapo", version, about = "Prompt optimization for text-to-video models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, default_value = "rapo.toml")]
    pub config: PathBuf,
    /// Overrides `paths.run_dir`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sample-level worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or query the relation graph.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Stage 1 on every user prompt.
    Optimize,
    /// Stage 2 feedback loop on every sample.
    Sspo {
        #[arg(long, value_enum, default_value = "stage1")]
        from: SspoInput,
    },
    /// Write the fine-tuning pairs, and optionally the Stage-1 model datasets.
    Export {
        /// Also build the refactoring dataset from the training corpus.
        #[arg(long)]
        refactor: bool,
        /// Build the discriminator dataset from these selection examples (JSON lines).
        #[arg(long)]
        discriminator: Option<PathBuf>,
    },
    /// Prompt length statistics against the training corpus.
    Stats,
}

#[derive(Debug, Subcommand)]
pub enum GraphCommand {
    Build,
    Query {
        prompt: String,
        #[arg(long)]
        k_scene: Option<usize>,
        #[arg(long)]
        k_mod: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success,
    /// Some samples failed; the rest are complete.
    Partial,
}

impl Exit {
    pub fn code(self) -> i32 {
        match self {
            Exit::Success => 0,
            Exit::Partial => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}", render_chain(.0))]
    Startup(anyhow::Error),
    #[error("{}", render_chain(.0))]
    Runtime(anyhow::Error),
}

/// The error and its causes, skipping causes already spelled out by an outer message.
fn render_chain(e: &anyhow::Error) -> String {
    let mut s = e.to_string();
    for cause in e.chain().skip(1) {
        let m = cause.to_string();
        if !s.contains(&m) {
            s.push_str(": ");
            s.push_str(&m);
        }
    }
    s
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Startup(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Runs one command. `now` stamps new graphs and run records.
pub fn run(cli: &Cli, now: u64, out: &mut dyn Write) -> Result<Exit, CliError> {
    let g = &cli.global;
    let overrides = Overrides {
        run_dir: g.run_dir.clone(),
        seed: g.seed,
        workers: g.workers,
    };
    let cfg = load_config(&g.config, &overrides).map_err(|e| CliError::Startup(e.into()))?;
    if let Command::Graph {
        command: GraphCommand::Query { prompt, k_scene, k_mod },
    } = &cli.command
    {
        return commands::graph_query(&cfg, prompt, *k_scene, *k_mod, out);
    }
    let mut store = RunStore::open(&cfg.run_dir, cfg.snapshot(), now).map_err(|e| CliError::Startup(e.into()))?;
    match &cli.command {
        Command::Graph { .. } => commands::graph_build(&cfg, &mut store, now, out),
        Command::Optimize => commands::optimize(&cfg, &mut store, out),
        Command::Sspo { from } => commands::run_sspo(&cfg, &mut store, *from, out),
        Command::Export {
            refactor,
            discriminator,
        } => commands::run_export(&cfg, &mut store, *refactor, discriminator.as_deref(), out),
        Command::Stats => commands::run_stats(&cfg, &mut store, out),
    }
}
