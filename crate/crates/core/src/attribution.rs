//! Integrated-gradients attribution of generated tokens to input tokens.
//!
//! For output token `y_i`, the target scalar F is the pre-softmax logit of
//! the realized token at its generating position (post-softmax probabilities
//! saturate and flatten gradients). Token embeddings are moved along the
//! straight path from a baseline to their actual values while positional
//! embeddings stay fixed; the path integral is approximated by a right
//! Riemann sum with `steps` points, and per-token scores are the signed sum
//! over embedding dimensions, which keeps the completeness identity additive:
//! the scores over all path inputs sum to F(x) - F(baseline) up to the
//! recorded residual.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, TapeError};
use crate::model::{build_forward, EmbedSource, Episode, ForwardOptions, ModelParams};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Zero token-embedding vector (positional embeddings kept intact).
    ZeroEmbedding,
    /// Every path input starts from this token's embedding.
    PadToken(usize),
}

impl Default for BaselineKind {
    fn default() -> Self {
        BaselineKind::ZeroEmbedding
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttributionError {
    #[error("output index {index} out of range for {len} generated tokens")]
    OutputIndexOutOfRange { index: usize, len: usize },
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Influence scores of input tokens (columns) on generated tokens (rows),
/// plus the per-row completeness residual measured over all path inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    /// (generated tokens, input tokens).
    pub shape: (usize, usize),
    /// Row-major scores restricted to input-token columns.
    pub data: Vec<f64>,
    pub baseline: BaselineKind,
    pub steps: usize,
    /// Per-row |sum of all attributions - (F(x) - F(baseline))|.
    pub residuals: Vec<f64>,
    /// Full per-row attributions over every prefix position (inputs and
    /// prior outputs); used for output-to-output edges, not serialized.
    #[serde(skip)]
    pub full_rows: Vec<Vec<f64>>,
}

impl AttributionMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        let (_, n) = self.shape;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("attribution matrix serializes")
    }
}

/// Result of one path-integrated attribution.
#[derive(Clone, Debug)]
pub struct PathAttribution {
    /// Signed score per input row.
    pub per_row: Vec<f64>,
    /// F(actual) - F(baseline).
    pub delta_f: f64,
    /// |sum(per_row) - delta_f|.
    pub residual: f64,
}

/// Integrated gradients of `seed . output` with respect to `input_id`, moving
/// the input from `baseline` to `actual` in `steps` right-Riemann points.
/// Generic over any recorded computation; the transformer entry points below
/// build the tape and delegate here.
pub fn path_integrated_gradients(
    tape: &mut Tape,
    input_id: ValueId,
    output_id: ValueId,
    seed: &Tensor,
    actual: &Tensor,
    baseline: &Tensor,
    steps: usize,
) -> Result<PathAttribution, AttributionError> {
    if steps == 0 {
        return Err(AttributionError::ZeroSteps);
    }
    let scalar_of = |tape: &Tape| -> f64 {
        tape.value(output_id)
            .data()
            .iter()
            .zip(seed.data())
            .map(|(v, s)| v * s)
            .sum()
    };

    tape.set_input(input_id, actual.clone())?;
    tape.recompute();
    let f_actual = scalar_of(tape);

    tape.set_input(input_id, baseline.clone())?;
    tape.recompute();
    let f_baseline = scalar_of(tape);

    let numel = actual.numel();
    let mut grad_sum = vec![0.0; numel];
    let mut point = Tensor::zeros(actual.shape().to_vec());
    for k in 1..=steps {
        // Midpoint rule: second-order accurate, which the completeness
        // checks need at the shipped step count; an endpoint sum at the same
        // step count misses them by an order of magnitude.
        let alpha = (k as f64 - 0.5) / steps as f64;
        for (p, (a, b)) in point
            .data_mut()
            .iter_mut()
            .zip(actual.data().iter().zip(baseline.data()))
        {
            *p = b + alpha * (a - b);
        }
        tape.set_input(input_id, point.clone())?;
        tape.recompute();
        let grads = tape.backward(output_id, seed)?;
        if let Some(g) = grads.get(input_id) {
            for (acc, gv) in grad_sum.iter_mut().zip(g.data()) {
                *acc += gv;
            }
        }
    }
    // Leave the tape at the actual input.
    tape.set_input(input_id, actual.clone())?;
    tape.recompute();

    let inv_steps = 1.0 / steps as f64;
    let rows = actual.rows();
    let cols = actual.cols();
    let mut per_row = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            let i = r * cols + c;
            acc += (actual.data()[i] - baseline.data()[i]) * grad_sum[i] * inv_steps;
        }
        per_row[r] = acc;
    }
    let delta_f = f_actual - f_baseline;
    let total: f64 = per_row.iter().sum();
    Ok(PathAttribution {
        per_row,
        delta_f,
        residual: (total - delta_f).abs(),
    })
}

fn gather_embeddings(params: &ModelParams, tokens: &[usize]) -> Tensor {
    let d = params.config.embed_dim;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(params.tok_embed.row(t));
    }
    Tensor::matrix(tokens.len(), d, data).expect("sized")
}

fn baseline_embeddings(
    params: &ModelParams,
    len: usize,
    baseline: BaselineKind,
) -> Result<Tensor, AttributionError> {
    let d = params.config.embed_dim;
    match baseline {
        BaselineKind::ZeroEmbedding => Ok(Tensor::zeros(vec![len, d])),
        BaselineKind::PadToken(id) => {
            if id >= params.config.vocab_size {
                return Err(AttributionError::Model(ModelError::TokenOutOfRange {
                    id,
                    vocab_size: params.config.vocab_size,
                }));
            }
            let mut data = Vec::with_capacity(len * d);
            for _ in 0..len {
                data.extend_from_slice(params.tok_embed.row(id));
            }
            Ok(Tensor::matrix(len, d, data).expect("sized"))
        }
    }
}

/// Attribution of an arbitrary linear functional of the last-position logits
/// (`seed_row` weights each vocabulary entry). Returns per-position scores
/// over the whole prefix.
pub fn integrated_gradients_seeded(
    params: &ModelParams,
    prefix: &[usize],
    seed_row: &[f64],
    steps: usize,
    baseline: BaselineKind,
) -> Result<PathAttribution, AttributionError> {
    let mut tape = Tape::new();
    let actual = gather_embeddings(params, prefix);
    let build = build_forward(
        &mut tape,
        params,
        EmbedSource::Matrix(actual.clone()),
        &ForwardOptions::default(),
    )?;
    let t = prefix.len();
    let vocab = params.config.vocab_size;
    let mut seed = Tensor::zeros(vec![t, vocab]);
    for (c, &w) in seed_row.iter().enumerate() {
        if w != 0.0 {
            seed.set(t - 1, c, w);
        }
    }
    let base = baseline_embeddings(params, t, baseline)?;
    path_integrated_gradients(&mut tape, build.embeddings, build.logits, &seed, &actual, &base, steps)
}

/// Full path attribution (scores over every prefix position, the logit
/// delta, and the completeness residual) for one generated token.
pub fn output_attribution(
    params: &ModelParams,
    episode: &Episode,
    output_index: usize,
    steps: usize,
    baseline: BaselineKind,
) -> Result<PathAttribution, AttributionError> {
    if output_index >= episode.output.len() {
        return Err(AttributionError::OutputIndexOutOfRange {
            index: output_index,
            len: episode.output.len(),
        });
    }
    let prefix = episode.prefix(output_index);
    let target = episode.output[output_index];
    let mut seed_row = vec![0.0; params.config.vocab_size];
    if target >= seed_row.len() {
        return Err(AttributionError::Model(ModelError::TokenOutOfRange {
            id: target,
            vocab_size: params.config.vocab_size,
        }));
    }
    seed_row[target] = 1.0;
    integrated_gradients_seeded(params, &prefix, &seed_row, steps, baseline)
}

/// Influence scores of each input token on generated token `output_index`
/// (input columns only; scores over prior outputs are computed for the
/// completeness bookkeeping but excluded here).
pub fn integrated_gradients(
    params: &ModelParams,
    episode: &Episode,
    output_index: usize,
    steps: usize,
    baseline: BaselineKind,
) -> Result<Vec<f64>, AttributionError> {
    let attr = output_attribution(params, episode, output_index, steps, baseline)?;
    Ok(attr.per_row[..episode.prompt.len()].to_vec())
}

/// |sum of attributions over all path inputs - (F(x) - F(baseline))| for one
/// generated token.
pub fn completeness_residual(
    params: &ModelParams,
    episode: &Episode,
    output_index: usize,
    steps: usize,
    baseline: BaselineKind,
) -> Result<f64, AttributionError> {
    Ok(output_attribution(params, episode, output_index, steps, baseline)?.residual)
}

/// Full attribution matrix for an episode: one row per generated token.
pub fn attribution_matrix(
    params: &ModelParams,
    episode: &Episode,
    steps: usize,
    baseline: BaselineKind,
) -> Result<AttributionMatrix, AttributionError> {
    let m = episode.output.len();
    let n = episode.prompt.len();
    let mut data = Vec::with_capacity(m * n);
    let mut residuals = Vec::with_capacity(m);
    let mut full_rows = Vec::with_capacity(m);
    for i in 0..m {
        let attr = output_attribution(params, episode, i, steps, baseline)?;
        data.extend_from_slice(&attr.per_row[..n]);
        residuals.push(attr.residual);
        full_rows.push(attr.per_row);
    }
    Ok(AttributionMatrix {
        shape: (m, n),
        data,
        baseline,
        steps,
        residuals,
        full_rows,
    })
}
