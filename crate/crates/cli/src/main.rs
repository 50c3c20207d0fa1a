//! Command-line surface for the token-graph factuality pipeline.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Ctx, GraphFormat};

/// Train a tiny transformer, build token-level causal graphs from its
/// attention and attributions, and measure hallucination under fact-anchored
/// attention reweighting. A JSON config file is the source of truth; `--set`
/// flags override individual keys.
#[derive(Parser)]
#[command(name = "factgraph", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config entry, e.g. --set train.max_steps=100.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    /// Top-level seed, fanned out to components by labeled derivation.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Suppress progress logging (the summary line still prints).
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fact corpus (facts + train/test episodes).
    GenCorpus,
    /// Train a model on a corpus file and write a checkpoint.
    Train {
        /// Training episodes (JSON lines). Default: <out>/corpus_train.jsonl.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        /// Held-out episodes whose tokens join the vocabulary.
        /// Default: <out>/corpus_test.jsonl when present.
        #[arg(long, value_name = "PATH")]
        corpus_test: Option<PathBuf>,
    },
    /// Greedy decoding from a checkpoint.
    Generate {
        /// Checkpoint file. Default: <out>/checkpoint.json.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Whitespace-separated prompt tokens.
        #[arg(long, value_name = "TOKENS")]
        prompt: String,
        /// Tokens to generate (default: config max_new_tokens).
        #[arg(long, value_name = "N")]
        max_new_tokens: Option<usize>,
    },
    /// Decode one prompt under both conditions and export the causal graph,
    /// contribution scores, and per-step diagnostics.
    Audit {
        /// Checkpoint file. Default: <out>/checkpoint.json.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Fact store (JSON lines). Default: <out>/facts.jsonl.
        #[arg(long, value_name = "PATH")]
        facts: Option<PathBuf>,
        /// Whitespace-separated prompt tokens.
        #[arg(long, value_name = "TOKENS")]
        prompt: String,
    },
    /// Run the full experiment: per-seed training plus baseline vs.
    /// reweighted evaluation on the held-out split.
    Eval,
    /// Re-render a saved graph JSON as DOT or JSON.
    ExportGraph {
        /// Graph JSON produced by `audit`.
        #[arg(long, value_name = "PATH")]
        graph: PathBuf,
        #[arg(long, value_enum, default_value = "dot")]
        format: GraphFormat,
        /// Output path. Default: <out>/graph.<format>.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let config = config::load_config(cli.config.as_deref(), &cli.sets, cli.seed)?;
    let ctx = Ctx {
        config,
        out: cli.out,
        quiet: cli.quiet,
        seed: cli.seed,
    };
    match cli.command {
        Command::GenCorpus => commands::cmd_gen_corpus(&ctx),
        Command::Train {
            corpus,
            corpus_test,
        } => commands::cmd_train(&ctx, corpus.as_deref(), corpus_test.as_deref()),
        Command::Generate {
            checkpoint,
            prompt,
            max_new_tokens,
        } => commands::cmd_generate(&ctx, checkpoint.as_deref(), &prompt, max_new_tokens),
        Command::Audit {
            checkpoint,
            facts,
            prompt,
        } => commands::cmd_audit(&ctx, checkpoint.as_deref(), facts.as_deref(), &prompt),
        Command::Eval => commands::cmd_eval(&ctx),
        Command::ExportGraph {
            graph,
            format,
            output,
        } => commands::cmd_export_graph(&ctx, &graph, format, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = config::exit_code_for(&err);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
