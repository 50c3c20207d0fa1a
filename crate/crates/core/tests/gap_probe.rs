//! What would it take to flip a hallucinated answer? (ignored; tuning aid)

use factgraph_core::eval::{gen_corpus, CorpusSpec, VocabProfile};
use factgraph_core::model::{
    argmax_token, build_forward, generate, EmbedSource, ForwardOptions, GenerateOptions,
    ModelConfig, ModelParams, ReweightSource,
};
use factgraph_core::rng::derive_seed;
use factgraph_core::tape::Tape;
use factgraph_core::train::{train, TrainSpec};

fn class_of(token: &str) -> &'static str {
    match token.chars().next() {
        Some('v') => "value",
        Some('s') => "subject",
        Some('r') => "relation",
        Some('n') => "noise",
        _ => "marker",
    }
}

#[test]
#[ignore]
fn probe_answer_step_structure() {
    let spec = CorpusSpec {
        num_facts: 60,
        num_distractors_per_prompt: 2,
        vocab: VocabProfile {
            num_relations: 6,
            num_values: 20,
            ..VocabProfile::default()
        },
        ..CorpusSpec::default()
    };
    let corpus = gen_corpus(&spec).unwrap();
    let vocab = corpus.vocab();
    let examples: Vec<_> = corpus
        .train
        .iter()
        .map(|r| r.to_train_example(&vocab).unwrap())
        .collect();

    let seed = 1u64;
    let mut cfg = ModelConfig::toy(vocab.len());
    cfg.seed = derive_seed(seed, "model-init");
    let mut params = ModelParams::init(&cfg).unwrap();
    let tspec = TrainSpec {
        max_steps: 70,
        seed: derive_seed(seed, "train"),
        ..TrainSpec::default()
    };
    train(&mut params, &examples, &tspec).unwrap();

    for record in corpus.test.iter() {
        let prompt = vocab.encode(record.prompt_tokens()).unwrap();
        let (a_tok, _) =
            generate(&params, &prompt, &GenerateOptions { max_new_tokens: 1 }).unwrap();
        let mut seq = prompt.clone();
        seq.push(a_tok[0]);
        let gold = record.gold_answer();
        let ev = record.evidence_tokens();

        let logits_for = |s: Option<&[f64]>, all: bool| {
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                dropout: None,
                reweight_last: s.map(ReweightSource::Values),
                reweight_all_layers: all,
                supervision: None,
            };
            let b = build_forward(&mut tape, &params, EmbedSource::Ids(&seq), &opts).unwrap();
            tape.value(b.logits).row(seq.len() - 1).to_vec()
        };

        let base = logits_for(None, false);
        let emitted = argmax_token(&base);
        let emitted_tok = vocab.token(emitted).to_string();

        // Best in-evidence alternative.
        let (mut best_ev_tok, mut best_ev_logit) = ("", f64::NEG_INFINITY);
        for t in &ev {
            if let Some(id) = vocab.id(t) {
                if base[id] > best_ev_logit {
                    best_ev_logit = base[id];
                    best_ev_tok = t;
                }
            }
        }
        let is_hall = emitted_tok != gold && !ev.contains(emitted_tok.as_str());

        // Entailed tokens under windowed k=1 retrieval: the queried fact.
        let queried_subject = &record.tokens[record.evidence_span.1 + 1];
        let entailed = [queried_subject.as_str(), &record.tokens[record.evidence_span.1 + 2], gold];

        // Suppress every non-entailed content key (values/subjects of
        // distractor facts, noise, markers) at 0.05.
        let mut s = vec![1.0; seq.len()];
        for (pos, tok) in record.prompt_tokens().iter().enumerate() {
            if !entailed.contains(&tok.as_str()) {
                s[pos] = 0.05;
            }
        }
        let rw_final = logits_for(Some(&s), false);
        let rw_all = logits_for(Some(&s), true);

        // Narrow variant: only distractor VALUE keys.
        let mut s2 = vec![1.0; seq.len()];
        for (pos, tok) in record.prompt_tokens().iter().enumerate() {
            if class_of(tok) == "value" && tok != gold {
                s2[pos] = 0.05;
            }
        }
        let rw_vals = logits_for(Some(&s2), true);

        let gold_id = vocab.id(gold).unwrap();
        println!(
            "{}hall emitted {emitted_tok}({}) gap_to_best_ev {:+.2} ({best_ev_tok}) gap_to_gold {:+.2} | non-entailed crush: drop(final) {:+.2} drop(all) {:+.2} gold_gain(all) {:+.2} argmax(all) {} | distractor-value crush: drop {:+.2} gold_gain {:+.2} argmax {}",
            if is_hall { "" } else { "no-" },
            class_of(&emitted_tok),
            base[emitted] - best_ev_logit,
            base[emitted] - base[gold_id],
            rw_final[emitted] - base[emitted],
            rw_all[emitted] - base[emitted],
            rw_all[gold_id] - base[gold_id],
            vocab.token(argmax_token(&rw_all)),
            rw_vals[emitted] - base[emitted],
            rw_vals[gold_id] - base[gold_id],
            vocab.token(argmax_token(&rw_vals)),
        );
    }
}
