//! Integrated-gradients behavior on the toy transformer: agreement with a
//! high-resolution Riemann oracle, completeness residual bounds, and
//! convergence as the step count doubles.

use factgraph_core::attribution::{
    attribution_matrix, completeness_residual, integrated_gradients, output_attribution,
    BaselineKind,
};
use factgraph_core::model::{generate, Episode, GenerateOptions, ModelConfig, ModelParams};
use factgraph_core::rng::DetRng;

fn micro_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        context_length: 10,
        num_layers: 1,
        num_heads: 2,
        embed_dim: 8,
        dropout_rate: 0.0,
        seed,
    }
}

fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        context_length: 64,
        num_layers: 2,
        num_heads: 4,
        embed_dim: 64,
        dropout_rate: 0.3,
        seed,
    }
}

/// Sample an episode by greedy generation from a random prompt.
fn sample_episode(params: &ModelParams, rng: &mut DetRng, prompt_len: usize, new: usize) -> Episode {
    let prompt: Vec<usize> = (0..prompt_len)
        .map(|_| rng.below(params.config.vocab_size))
        .collect();
    let (output, _) = generate(params, &prompt, &GenerateOptions { max_new_tokens: new }).unwrap();
    Episode { prompt, output }
}

#[test]
fn low_step_rows_match_high_resolution_oracle() {
    let params = ModelParams::init(&micro_config(31)).unwrap();
    let mut rng = DetRng::labeled(31, "episodes");
    let episode = sample_episode(&params, &mut rng, 6, 2);

    let coarse = integrated_gradients(&params, &episode, 0, 64, BaselineKind::ZeroEmbedding)
        .unwrap();
    let fine = integrated_gradients(&params, &episode, 0, 4096, BaselineKind::ZeroEmbedding)
        .unwrap();
    for (j, (c, f)) in coarse.iter().zip(fine.iter()).enumerate() {
        if f.abs() > 1e-6 {
            let rel = (c - f).abs() / f.abs();
            assert!(rel <= 0.02, "element {j}: {c} vs {f} (rel {rel})");
        }
    }
}

#[test]
fn completeness_residual_small_and_shrinking_on_toy_model() {
    let params = ModelParams::init(&toy_config(33)).unwrap();
    let mut rng = DetRng::labeled(33, "episodes");

    let episodes: Vec<Episode> = (0..20)
        .map(|_| {
            let prompt_len = 8 + rng.below(6);
            sample_episode(&params, &mut rng, prompt_len, 2)
        })
        .collect();

    let mut improved = 0usize;
    for (i, ep) in episodes.iter().enumerate() {
        let matrix = attribution_matrix(&params, ep, 64, BaselineKind::ZeroEmbedding).unwrap();
        let attr = output_attribution(&params, ep, 0, 64, BaselineKind::ZeroEmbedding).unwrap();
        assert_eq!(matrix.residuals[0], attr.residual, "episode {i} residual mismatch");
        let r64 = attr.residual;
        let r128 = completeness_residual(&params, ep, 0, 128, BaselineKind::ZeroEmbedding).unwrap();
        if r128 < r64 {
            improved += 1;
        }
        assert!(
            r64 <= 0.01 * attr.delta_f.abs(),
            "episode {i}: residual {r64} vs 1% of |delta_f| {}",
            attr.delta_f.abs()
        );
    }
    assert!(improved >= 18, "only {improved}/20 improved when steps doubled");
}
