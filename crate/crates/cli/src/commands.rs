//! Subcommand implementations. Each returns a one-line machine-parsable
//! summary (`<command> ok key=value ...`) printed by main on success.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use factgraph_core::eval::{
    ccs_report, ccs_report_csv, gen_corpus, run_experiment, EpisodeAudit, ExperimentConfig,
};
use factgraph_core::factstore::FactStore;
use factgraph_core::graph::CcsVector;
use factgraph_core::graph::{export_dot, export_json, import_json};
use factgraph_core::model::{
    generate, Checkpoint, Episode, GenerateOptions, ModelParams,
};
use factgraph_core::reweight::{audit_episode, generate_reweighted, GatParams};
use factgraph_core::rng::derive_seed;
use factgraph_core::train::train;
use factgraph_core::vocab::Vocab;

use crate::config::UsageError;
use crate::io;

// Re-exported for audit outputs.
use serde::Serialize;

pub struct Ctx {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub quiet: bool,
    pub seed: Option<u64>,
}

impl Ctx {
    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn cmd_gen_corpus(ctx: &Ctx) -> anyhow::Result<String> {
    io::ensure_dir(&ctx.out)?;
    let corpus = gen_corpus(&ctx.config.corpus)?;
    io::write_jsonl(&ctx.path("facts.jsonl"), &corpus.facts)?;
    io::write_jsonl(&ctx.path("corpus_train.jsonl"), &corpus.train)?;
    io::write_jsonl(&ctx.path("corpus_test.jsonl"), &corpus.test)?;
    ctx.log(&format!(
        "wrote {} facts, {} train episodes, {} test episodes to {}",
        corpus.facts.len(),
        corpus.train.len(),
        corpus.test.len(),
        ctx.out.display()
    ));
    Ok(format!(
        "gen-corpus ok out={} facts={} train={} test={}",
        ctx.out.display(),
        corpus.facts.len(),
        corpus.train.len(),
        corpus.test.len()
    ))
}

pub fn cmd_train(
    ctx: &Ctx,
    corpus: Option<&Path>,
    corpus_test: Option<&Path>,
) -> anyhow::Result<String> {
    io::ensure_dir(&ctx.out)?;
    let train_path = corpus
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.path("corpus_train.jsonl"));
    let records = io::read_corpus(&train_path)?;
    if records.is_empty() {
        bail!("{}: no training episodes", train_path.display());
    }
    // The vocabulary covers the held-out split too, when present, so the
    // checkpoint can decode evaluation prompts (fresh subjects appear there).
    let test_path = corpus_test
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.path("corpus_test.jsonl"));
    let test_records = if test_path.exists() {
        io::read_corpus(&test_path)?
    } else {
        Vec::new()
    };
    let vocab = Vocab::build(
        records
            .iter()
            .chain(test_records.iter())
            .flat_map(|r| r.tokens.iter().map(|t| t.as_str())),
    );

    let mut model_config = ctx.config.model.clone();
    model_config.vocab_size = vocab.len();
    if let Some(seed) = ctx.seed {
        model_config.seed = derive_seed(seed, "model");
    }
    let mut params = ModelParams::init(&model_config)?;
    let examples: Vec<_> = records
        .iter()
        .map(|r| r.to_train_example(&vocab))
        .collect::<Result<_, _>>()?;
    ctx.log(&format!(
        "training {} steps on {} episodes (vocab {})",
        ctx.config.train.max_steps,
        examples.len(),
        vocab.len()
    ));
    let report = train(&mut params, &examples, &ctx.config.train)?;

    let checkpoint_path = ctx.path("checkpoint.json");
    io::write_text(&checkpoint_path, &Checkpoint::new(params, &vocab).to_json())?;
    let mut history = String::from("step,loss\n");
    for (i, loss) in report.loss_history.iter().enumerate() {
        history.push_str(&format!("{},{}\n", i + 1, loss));
    }
    io::write_text(&ctx.path("loss_history.csv"), &history)?;
    Ok(format!(
        "train ok checkpoint={} steps={} initial_loss={} final_loss={}",
        checkpoint_path.display(),
        report.loss_history.len(),
        report.initial_loss,
        report.final_loss
    ))
}

fn load_checkpoint(ctx: &Ctx, checkpoint: Option<&Path>) -> anyhow::Result<(ModelParams, Vocab)> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.path("checkpoint.json"));
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(Checkpoint::from_json(&text)?)
}

fn encode_prompt(vocab: &Vocab, prompt: &str) -> anyhow::Result<(Vec<usize>, Vec<String>)> {
    let tokens: Vec<String> = prompt.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(anyhow!(UsageError(String::from("--prompt is empty"))));
    }
    let ids = vocab.encode(&tokens)?;
    Ok((ids, tokens))
}

#[derive(Serialize)]
struct GenerateArtifact {
    prompt: Vec<String>,
    output: Vec<String>,
}

pub fn cmd_generate(
    ctx: &Ctx,
    checkpoint: Option<&Path>,
    prompt: &str,
    max_new_tokens: Option<usize>,
) -> anyhow::Result<String> {
    io::ensure_dir(&ctx.out)?;
    let (params, vocab) = load_checkpoint(ctx, checkpoint)?;
    let (ids, prompt_tokens) = encode_prompt(&vocab, prompt)?;
    let max_new = max_new_tokens.unwrap_or(ctx.config.max_new_tokens);
    let (output, _) = generate(&params, &ids, &GenerateOptions { max_new_tokens: max_new })?;
    let output_tokens = vocab.decode(&output);
    let artifact = GenerateArtifact {
        prompt: prompt_tokens,
        output: output_tokens.clone(),
    };
    io::write_text(
        &ctx.path("generate.json"),
        &serde_json::to_string_pretty(&artifact)?,
    )?;
    println!("{}", output_tokens.join(" "));
    Ok(format!(
        "generate ok tokens={} output={}",
        output_tokens.len(),
        output_tokens.join(",")
    ))
}

#[derive(Serialize)]
struct AuditArtifact {
    prompt: Vec<String>,
    baseline_output: Vec<String>,
    reweighted_output: Vec<String>,
    ccs_baseline: CcsVector,
    ccs_reweighted: CcsVector,
    steps: Vec<factgraph_core::reweight::StepDiagnostics>,
}

pub fn cmd_audit(
    ctx: &Ctx,
    checkpoint: Option<&Path>,
    facts: Option<&Path>,
    prompt: &str,
) -> anyhow::Result<String> {
    io::ensure_dir(&ctx.out)?;
    let (params, vocab) = load_checkpoint(ctx, checkpoint)?;
    let facts_path = facts
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.path("facts.jsonl"));
    let store = FactStore::ingest(io::read_facts(&facts_path)?)?;
    let (ids, prompt_tokens) = encode_prompt(&vocab, prompt)?;
    let max_new = ctx.config.max_new_tokens;

    let (base_out, base_traces) =
        generate(&params, &ids, &GenerateOptions { max_new_tokens: max_new })?;
    let base_episode = Episode {
        prompt: ids.clone(),
        output: base_out.clone(),
    };
    let (_, base_ccs, _) = audit_episode(
        &params,
        &base_episode,
        &base_traces,
        &vocab,
        None,
        &ctx.config.reweight,
    )?;

    let gat_seed = ctx.seed.map(|s| derive_seed(s, "gat")).unwrap_or_else(|| {
        derive_seed(ctx.config.corpus.seed, "gat")
    });
    let gat = GatParams::init(
        params.config.embed_dim + 2,
        ctx.config.reweight.gat_proj_dim,
        ctx.config.reweight.gat_heads,
        gat_seed,
    )?;
    let run = generate_reweighted(
        &params,
        &ids,
        &store,
        &gat,
        &vocab,
        &ctx.config.reweight,
        max_new,
    )?;

    let base_tokens = vocab.decode(&base_out);
    let rw_tokens = vocab.decode(&run.output);

    io::write_text(&ctx.path("graph.json"), &export_json(&run.final_graph))?;
    io::write_text(&ctx.path("graph.dot"), &export_dot(&run.final_graph))?;

    let baseline_audit = EpisodeAudit {
        prompt_tokens: prompt_tokens.clone(),
        output_tokens: base_tokens.clone(),
        ccs: base_ccs.clone(),
        steps: None,
    };
    let reweighted_audit = EpisodeAudit {
        prompt_tokens: prompt_tokens.clone(),
        output_tokens: rw_tokens.clone(),
        ccs: run.final_ccs.clone(),
        steps: Some(run.steps.clone()),
    };
    let rows = ccs_report(&reweighted_audit, &baseline_audit)?;
    io::write_text(&ctx.path("ccs_report.csv"), &ccs_report_csv(&rows))?;

    let artifact = AuditArtifact {
        prompt: prompt_tokens,
        baseline_output: base_tokens.clone(),
        reweighted_output: rw_tokens.clone(),
        ccs_baseline: base_ccs,
        ccs_reweighted: run.final_ccs,
        steps: run.steps,
    };
    io::write_text(
        &ctx.path("audit.json"),
        &serde_json::to_string_pretty(&artifact)?,
    )?;

    Ok(format!(
        "audit ok baseline={} reweighted={} graph={} rows={}",
        base_tokens.join(","),
        rw_tokens.join(","),
        ctx.path("graph.json").display(),
        rows.len()
    ))
}

pub fn cmd_eval(ctx: &Ctx) -> anyhow::Result<String> {
    io::ensure_dir(&ctx.out)?;
    ctx.log(&format!(
        "running experiment: {} facts, seeds {:?}",
        ctx.config.corpus.num_facts, ctx.config.seeds
    ));
    let report = run_experiment(&ctx.config)?;
    let report_path = ctx.path("report.json");
    io::write_text(&report_path, &report.to_json())?;
    io::write_text(&ctx.path("results.csv"), &report.results_csv())?;
    io::write_text(&ctx.path("ccs_per_token.csv"), &report.ccs_samples_csv())?;
    Ok(format!(
        "eval ok report={} digest={} baseline_hallucination={} reweighted_hallucination={} baseline_accuracy={} reweighted_accuracy={} improved={}/{}",
        report_path.display(),
        report.config_digest,
        report.aggregate.baseline_hallucination.mean,
        report.aggregate.reweighted_hallucination.mean,
        report.aggregate.baseline_accuracy.mean,
        report.aggregate.reweighted_accuracy.mean,
        report.aggregate.seeds_improved,
        report.aggregate.seeds_total
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GraphFormat {
    Dot,
    Json,
}

pub fn cmd_export_graph(
    ctx: &Ctx,
    graph: &Path,
    format: GraphFormat,
    output: Option<&Path>,
) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(graph)
        .with_context(|| format!("reading graph {}", graph.display()))?;
    let parsed = import_json(&text)?;
    let (rendered, default_name) = match format {
        GraphFormat::Dot => (export_dot(&parsed), "graph.dot"),
        GraphFormat::Json => (export_json(&parsed), "graph.json"),
    };
    let out_path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.path(default_name));
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            io::ensure_dir(parent)?;
        }
    }
    io::write_text(&out_path, &rendered)?;
    Ok(format!(
        "export-graph ok input={} output={} nodes={} edges={}",
        graph.display(),
        out_path.display(),
        parsed.nodes.len(),
        parsed.edges.len()
    ))
}
