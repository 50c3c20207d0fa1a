//! End-to-end CLI checks: help surfaces, exit codes, the command pipeline,
//! and byte-level determinism of artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_factgraph"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn factgraph")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

/// Small-but-real settings shared by the pipeline tests.
fn fast_args(out_dir: &Path) -> Vec<String> {
    [
        "--quiet",
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "corpus.num_facts=12",
        "--set",
        "corpus.vocab.num_relations=2",
        "--set",
        "corpus.vocab.num_values=6",
        "--set",
        "corpus.noise_prefix_len=2",
        "--set",
        "model.num_layers=1",
        "--set",
        "model.num_heads=2",
        "--set",
        "model.embed_dim=16",
        "--set",
        "model.dropout_rate=0.1",
        "--set",
        "train.max_steps=6",
        "--set",
        "train.batch_size=4",
        "--set",
        "reweight.ig_steps=8",
        "--set",
        "seeds=[1]",
        "--set",
        "ccs_sample_episodes=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("factgraph-test-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in [
        "gen-corpus",
        "train",
        "generate",
        "audit",
        "eval",
        "export-graph",
    ] {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        let text = stdout(&out);
        for flag in ["--config", "--set", "--out", "--seed", "--quiet"] {
            assert!(text.contains(flag), "{sub} --help missing {flag}:\n{text}");
        }
    }
    assert!(run(&["--help"]).status.success());
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let out = run(&["gen-corpus", "--set", "corpus.num_fatcs=10"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("num_fatcs"), "{}", stderr(&out));
}

#[test]
fn bad_set_syntax_exits_2() {
    let out = run(&["gen-corpus", "--set", "no-equals-sign"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tmp_dir("missing-ckpt");
    let out = run(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--prompt",
        "Q s000 r0",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn pipeline_gen_train_generate_audit_and_noop_equivalence() {
    let dir = tmp_dir("pipeline");
    let mut args: Vec<String> = vec!["gen-corpus".into()];
    args.extend(fast_args(&dir));
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("gen-corpus ok"), "{}", stdout(&out));
    assert!(dir.join("facts.jsonl").exists());

    let mut args: Vec<String> = vec!["train".into()];
    args.extend(fast_args(&dir));
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("train ok"));
    assert!(dir.join("checkpoint.json").exists());
    assert!(dir.join("loss_history.csv").exists());

    // A prompt built from the generated test corpus.
    let test_corpus = std::fs::read_to_string(dir.join("corpus_test.jsonl")).unwrap();
    let first: serde_json::Value =
        serde_json::from_str(test_corpus.lines().next().unwrap()).unwrap();
    let tokens: Vec<String> = first["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let target_start = first["target_span"][0].as_u64().unwrap() as usize;
    let prompt = tokens[..target_start].join(" ");

    let mut args: Vec<String> = vec!["generate".into(), "--prompt".into(), prompt.clone()];
    args.extend(fast_args(&dir));
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let gen_line = stdout(&out);
    let baseline_tokens = gen_line.lines().next().unwrap().to_string();

    // Audit with flagging disabled (tau=0): the plan is the identity, so
    // the reweighted output must equal the baseline decode exactly.
    let mut args: Vec<String> = vec!["audit".into(), "--prompt".into(), prompt.clone()];
    args.extend(fast_args(&dir));
    args.push("--set".into());
    args.push("reweight.policy.tau_percentile=0".into());
    let out = bin().args(&args).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let audit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("audit.json")).unwrap()).unwrap();
    let rw: Vec<String> = audit["reweighted_output"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let base: Vec<String> = audit["baseline_output"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert_eq!(rw, base, "identity plan must reproduce the baseline decode");
    assert_eq!(baseline_tokens, base.join(" "));
    assert!(dir.join("graph.dot").exists());
    assert!(dir.join("ccs_report.csv").exists());

    // export-graph: DOT rendering of the saved graph matches the audit DOT.
    let graph_path = dir.join("graph.json");
    let exported = dir.join("exported.dot");
    let out = run(&[
        "export-graph",
        "--graph",
        graph_path.to_str().unwrap(),
        "--format",
        "dot",
        "--output",
        exported.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read_to_string(&exported).unwrap(),
        std::fs::read_to_string(dir.join("graph.dot")).unwrap()
    );

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn gen_corpus_artifacts_are_byte_deterministic() {
    let dir_a = tmp_dir("det-a");
    let dir_b = tmp_dir("det-b");
    for dir in [&dir_a, &dir_b] {
        let mut args: Vec<String> = vec!["gen-corpus".into()];
        args.extend(fast_args(dir));
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for name in ["facts.jsonl", "corpus_train.jsonl", "corpus_test.jsonl"] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    let _ = std::fs::remove_dir_all(&dir_a);
    let _ = std::fs::remove_dir_all(&dir_b);
}

#[test]
fn eval_writes_schema_valid_deterministic_report() {
    let dir_a = tmp_dir("eval-a");
    let dir_b = tmp_dir("eval-b");
    for dir in [&dir_a, &dir_b] {
        let mut args: Vec<String> = vec!["eval".into()];
        args.extend(fast_args(dir));
        args.push("--set".into());
        args.push("max_new_tokens=2".into());
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        let line = stdout(&out);
        assert!(line.starts_with("eval ok"), "{line}");
        assert!(line.contains("baseline_hallucination="), "{line}");
    }
    let a = std::fs::read_to_string(dir_a.join("report.json")).unwrap();
    let b = std::fs::read_to_string(dir_b.join("report.json")).unwrap();
    assert_eq!(a, b, "eval reports differ byte-for-byte");

    // Schema check: parses back into the typed report with matching digest.
    let report = factgraph_core::eval::EvalReport::from_json(&a).unwrap();
    assert_eq!(report.config_digest, report.config.digest());
    assert_eq!(report.per_seed.len(), 1);
    assert!(dir_a.join("results.csv").exists());
    assert!(dir_a.join("ccs_per_token.csv").exists());

    let _ = std::fs::remove_dir_all(&dir_a);
    let _ = std::fs::remove_dir_all(&dir_b);
}
