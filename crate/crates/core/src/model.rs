//! The tiny decoder-only transformer.
//!
//! Pre-norm GPT-style blocks built entirely on the [`Tape`], so one forward
//! definition serves training (gradients for every parameter), attribution
//! (gradients with respect to injected embeddings), and generation (values
//! only). Every forward records the per-layer, per-head attention matrices;
//! decoding keeps them for graph construction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::rng::{self, DetRng};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab};

fn default_num_layers() -> usize {
    2
}
fn default_num_heads() -> usize {
    4
}
fn default_embed_dim() -> usize {
    64
}
fn default_dropout() -> f64 {
    0.3
}

fn default_context() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// 0 means "derive from the corpus vocabulary" in pipeline configs;
    /// validation rejects it at initialization time.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "default_context")]
    pub context_length: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, 64-dim embeddings, context 64.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_length: 64,
            num_layers: default_num_layers(),
            num_heads: default_num_heads(),
            embed_dim: default_embed_dim(),
            dropout_rate: default_dropout(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0 {
            return Err(ModelError::InvalidConfig {
                field: "vocab_size",
                message: String::from("must be positive"),
            });
        }
        if self.context_length == 0 {
            return Err(ModelError::InvalidConfig {
                field: "context_length",
                message: String::from("must be positive"),
            });
        }
        if self.num_layers == 0 {
            return Err(ModelError::InvalidConfig {
                field: "num_layers",
                message: String::from("must be positive"),
            });
        }
        if self.num_heads == 0 {
            return Err(ModelError::InvalidConfig {
                field: "num_heads",
                message: String::from("must be positive"),
            });
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig {
                field: "embed_dim",
                message: format!(
                    "{} not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig {
                field: "dropout_rate",
                message: format!("{} outside [0, 1)", self.dropout_rate),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_mlp_in: Tensor,
    pub b_mlp_in: Tensor,
    pub w_mlp_out: Tensor,
    pub b_mlp_out: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Deterministic initialization from `config.seed`: scaled normal for
    /// weight matrices and embeddings, ones for norm scales, zeros for biases.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = 4 * d;
        let mut rng = DetRng::labeled(config.seed, "model-init");
        let tok_embed = Tensor::randn(vec![config.vocab_size, d], INIT_STD, &mut rng);
        let pos_embed = Tensor::randn(vec![config.context_length, d], INIT_STD, &mut rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                ln1_gamma: Tensor::filled(vec![d], 1.0),
                ln1_beta: Tensor::zeros(vec![d]),
                w_q: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                b_q: Tensor::zeros(vec![d]),
                w_k: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                b_k: Tensor::zeros(vec![d]),
                w_v: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                b_v: Tensor::zeros(vec![d]),
                w_o: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                b_o: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::filled(vec![d], 1.0),
                ln2_beta: Tensor::zeros(vec![d]),
                w_mlp_in: Tensor::randn(vec![d, hidden], INIT_STD, &mut rng),
                b_mlp_in: Tensor::zeros(vec![hidden]),
                w_mlp_out: Tensor::randn(vec![hidden, d], INIT_STD, &mut rng),
                b_mlp_out: Tensor::zeros(vec![d]),
            });
        }
        Ok(ModelParams {
            config: config.clone(),
            tok_embed,
            pos_embed,
            layers,
            lnf_gamma: Tensor::filled(vec![d], 1.0),
            lnf_beta: Tensor::zeros(vec![d]),
            w_out: Tensor::randn(vec![d, config.vocab_size], INIT_STD, &mut rng),
            b_out: Tensor::zeros(vec![config.vocab_size]),
        })
    }

    /// Canonical enumeration of every parameter tensor; the optimizer and the
    /// tape binding both rely on this order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            (String::from("tok_embed"), &self.tok_embed),
            (String::from("pos_embed"), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_gamma", &layer.ln1_gamma),
                ("ln1_beta", &layer.ln1_beta),
                ("w_q", &layer.w_q),
                ("b_q", &layer.b_q),
                ("w_k", &layer.w_k),
                ("b_k", &layer.b_k),
                ("w_v", &layer.w_v),
                ("b_v", &layer.b_v),
                ("w_o", &layer.w_o),
                ("b_o", &layer.b_o),
                ("ln2_gamma", &layer.ln2_gamma),
                ("ln2_beta", &layer.ln2_beta),
                ("w_mlp_in", &layer.w_mlp_in),
                ("b_mlp_in", &layer.b_mlp_in),
                ("w_mlp_out", &layer.w_mlp_out),
                ("b_mlp_out", &layer.b_mlp_out),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push((String::from("lnf_gamma"), &self.lnf_gamma));
        out.push((String::from("lnf_beta"), &self.lnf_beta));
        out.push((String::from("w_out"), &self.w_out));
        out.push((String::from("b_out"), &self.b_out));
        out
    }

    /// Mutable view in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.ln1_gamma);
            out.push(&mut layer.ln1_beta);
            out.push(&mut layer.w_q);
            out.push(&mut layer.b_q);
            out.push(&mut layer.w_k);
            out.push(&mut layer.b_k);
            out.push(&mut layer.w_v);
            out.push(&mut layer.b_v);
            out.push(&mut layer.w_o);
            out.push(&mut layer.b_o);
            out.push(&mut layer.ln2_gamma);
            out.push(&mut layer.ln2_beta);
            out.push(&mut layer.w_mlp_in);
            out.push(&mut layer.b_mlp_in);
            out.push(&mut layer.w_mlp_out);
            out.push(&mut layer.b_mlp_out);
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Per-layer, per-head attention matrices from one forward pass.
/// `layers[l][h]` is (seq_len x seq_len); rows are query positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionTrace {
    pub fn seq_len(&self) -> usize {
        self.layers[0][0].rows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers[0].len()
    }

    /// Head-averaged attention for one layer.
    pub fn head_mean(&self, layer: usize) -> Tensor {
        let heads = &self.layers[layer];
        let (rows, cols) = (heads[0].rows(), heads[0].cols());
        let mut out = Tensor::zeros(vec![rows, cols]);
        for h in heads {
            for (o, v) in out.data_mut().iter_mut().zip(h.data()) {
                *o += v;
            }
        }
        let inv = 1.0 / heads.len() as f64;
        for o in out.data_mut() {
            *o *= inv;
        }
        out
    }
}

/// How token embeddings enter the forward pass.
pub enum EmbedSource<'a> {
    /// Normal path: look token rows up from the embedding table.
    Ids(&'a [TokenId]),
    /// Attribution path: inject a (seq_len x embed_dim) embedding matrix
    /// directly. Positional embeddings are still added inside.
    Matrix(Tensor),
}

/// Deterministic dropout context for one training example.
#[derive(Clone, Copy)]
pub struct DropoutCtx {
    pub rate: f64,
    pub seed: u64,
    pub step: u64,
}

/// Source of the key-suppression multipliers applied to the final attention
/// layer: `ln(s)` is added to the generating (last) row of every final-layer
/// head's scores before the causal softmax.
pub enum ReweightSource<'a> {
    /// Fixed multipliers, one per key position.
    Values(&'a [f64]),
    /// A (1 x seq_len) value already on the tape (used when training the
    /// graph-attention scorer through the decode loss).
    OnTape(ValueId),
}

/// Supervision attached to the forward pass.
pub struct Supervision<'a> {
    /// Next-token target id per row.
    pub targets: &'a [TokenId],
    /// Rows that contribute to the cross-entropy mean.
    pub supervised: &'a [bool],
    /// Optional differentiable attention penalty: sum of `mask`-weighted
    /// entries of the final-layer head-averaged attention. The caller bakes
    /// row averaging into the mask weights.
    pub penalty_mask: Option<Tensor>,
    /// Weight of the penalty in the total loss. Zero keeps the loss exactly
    /// equal to the cross-entropy (bit-for-bit).
    pub lambda: f64,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub dropout: Option<DropoutCtx>,
    pub reweight_last: Option<ReweightSource<'a>>,
    /// Apply the reweight offset at every layer's generating row instead of
    /// the final layer only.
    pub reweight_all_layers: bool,
    pub supervision: Option<Supervision<'a>>,
}

/// Tape value ids of interest after building a forward pass.
pub struct ForwardBuild {
    /// The (seq_len x embed_dim) token-embedding value (an input when built
    /// from [`EmbedSource::Matrix`], the lookup output otherwise).
    pub embeddings: ValueId,
    /// Id of the embedding-table input (ids path only).
    pub tok_table: Option<ValueId>,
    /// (seq_len x vocab) next-token logits.
    pub logits: ValueId,
    /// `probs[layer][head]` attention matrices.
    pub probs: Vec<Vec<ValueId>>,
    /// Scalar total loss (present when supervision was given).
    pub loss: Option<ValueId>,
    /// Scalar cross-entropy component.
    pub cross_entropy: Option<ValueId>,
    /// Scalar attention-penalty component (pre-lambda), shape [1, 1].
    pub penalty: Option<ValueId>,
    /// Tape ids of every parameter tensor, in [`ModelParams::tensors`] order.
    pub param_ids: Vec<ValueId>,
}

pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut mask = vec![false; t * t];
    for q in 0..t {
        for k in 0..=q {
            mask[q * t + k] = true;
        }
    }
    mask
}

fn dropout_mask(shape: &[usize], ctx: &DropoutCtx, site: u64) -> Tensor {
    let numel: usize = shape.iter().product();
    let keep_scale = 1.0 / (1.0 - ctx.rate);
    let data = (0..numel)
        .map(|i| {
            if rng::dropout_keep(ctx.seed, ctx.step, site, i as u64, ctx.rate) {
                keep_scale
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Build the full forward pass on `tape`. Validates sequence length and
/// (for the ids path) token-id range.
pub fn build_forward(
    tape: &mut Tape,
    params: &ModelParams,
    source: EmbedSource,
    opts: &ForwardOptions,
) -> Result<ForwardBuild, ModelError> {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / crate::math::sqrt(dh as f64);

    let seq_len = match &source {
        EmbedSource::Ids(ids) => ids.len(),
        EmbedSource::Matrix(m) => m.rows(),
    };
    if seq_len == 0 {
        return Err(ModelError::EmptyPrompt);
    }
    if seq_len > cfg.context_length {
        return Err(ModelError::ContextOverflow {
            needed: seq_len,
            context_length: cfg.context_length,
        });
    }

    // Parameters enter the tape in canonical order.
    let param_ids: Vec<ValueId> = params
        .tensors()
        .into_iter()
        .map(|(_, t)| tape.input(t.clone()))
        .collect();
    let tok_table = param_ids[0];
    let pos_table = param_ids[1];
    let layer_base = |l: usize| 2 + l * 16;
    let tail = 2 + cfg.num_layers * 16;

    let (embeddings, tok_table_id) = match source {
        EmbedSource::Ids(ids) => {
            if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(ModelError::TokenOutOfRange {
                    id: bad,
                    vocab_size: cfg.vocab_size,
                });
            }
            (tape.embed_lookup(tok_table, ids.to_vec())?, Some(tok_table))
        }
        EmbedSource::Matrix(m) => {
            if m.shape() != [seq_len, d] {
                return Err(ModelError::Tape(crate::error::TapeError::ShapeMismatch {
                    op: "build_forward(embeddings)",
                    expected: vec![seq_len, d],
                    actual: m.shape().to_vec(),
                }));
            }
            (tape.input(m), None)
        }
    };

    let pos = tape.slice_rows(pos_table, 0, seq_len)?;
    let mut x = tape.add(embeddings, pos)?;
    if let Some(ctx) = &opts.dropout {
        let mask = tape.input(dropout_mask(&[seq_len, d], ctx, 0));
        x = tape.mul(x, mask)?;
    }

    let mask = causal_mask(seq_len);
    let mut probs_all: Vec<Vec<ValueId>> = Vec::with_capacity(cfg.num_layers);

    // Optional final-layer reweight offset, ln(s) in the last row only,
    // built as unit_last_col @ ln(s_row).
    let reweight_offset = match &opts.reweight_last {
        None => None,
        Some(src) => {
            let s_id = match src {
                ReweightSource::Values(s) => {
                    if s.len() != seq_len {
                        return Err(ModelError::Tape(crate::error::TapeError::ShapeMismatch {
                            op: "build_forward(reweight)",
                            expected: vec![1, seq_len],
                            actual: vec![1, s.len()],
                        }));
                    }
                    tape.input(Tensor::matrix(1, seq_len, s.to_vec()).expect("sized"))
                }
                ReweightSource::OnTape(id) => {
                    if tape.value(*id).shape() != [1, seq_len] {
                        return Err(ModelError::Tape(crate::error::TapeError::ShapeMismatch {
                            op: "build_forward(reweight)",
                            expected: vec![1, seq_len],
                            actual: tape.value(*id).shape().to_vec(),
                        }));
                    }
                    *id
                }
            };
            let ln_s = tape.ln(s_id);
            let mut unit = Tensor::zeros(vec![seq_len, 1]);
            unit.data_mut()[seq_len - 1] = 1.0;
            let unit = tape.input(unit);
            Some(tape.matmul(unit, ln_s)?)
        }
    };

    for l in 0..cfg.num_layers {
        let base = layer_base(l);
        let normed = tape.layer_norm(x, param_ids[base], param_ids[base + 1])?;
        let q = tape.matmul(normed, param_ids[base + 2])?;
        let q = tape.add_bias(q, param_ids[base + 3])?;
        let k = tape.matmul(normed, param_ids[base + 4])?;
        let k = tape.add_bias(k, param_ids[base + 5])?;
        let v = tape.matmul(normed, param_ids[base + 6])?;
        let v = tape.add_bias(v, param_ids[base + 7])?;

        let mut layer_probs = Vec::with_capacity(heads);
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q_h = tape.slice_cols(q, h * dh, dh)?;
            let k_h = tape.slice_cols(k, h * dh, dh)?;
            let v_h = tape.slice_cols(v, h * dh, dh)?;
            let k_t = tape.transpose(k_h)?;
            let scores = tape.matmul(q_h, k_t)?;
            let mut scores = tape.scale(scores, scale);
            if opts.reweight_all_layers || l == cfg.num_layers - 1 {
                if let Some(offset) = reweight_offset {
                    scores = tape.add(scores, offset)?;
                }
            }
            let attn = tape.masked_softmax(scores, mask.clone())?;
            layer_probs.push(attn);
            head_outputs.push(tape.matmul(attn, v_h)?);
        }
        let ctx_cat = tape.concat_cols(&head_outputs)?;
        let proj = tape.matmul(ctx_cat, param_ids[base + 8])?;
        let mut proj = tape.add_bias(proj, param_ids[base + 9])?;
        if let Some(dctx) = &opts.dropout {
            let m = tape.input(dropout_mask(&[seq_len, d], dctx, 100 + l as u64));
            proj = tape.mul(proj, m)?;
        }
        x = tape.add(x, proj)?;

        let normed2 = tape.layer_norm(x, param_ids[base + 10], param_ids[base + 11])?;
        let hidden = tape.matmul(normed2, param_ids[base + 12])?;
        let hidden = tape.add_bias(hidden, param_ids[base + 13])?;
        let hidden = tape.gelu(hidden);
        let mlp_out = tape.matmul(hidden, param_ids[base + 14])?;
        let mut mlp_out = tape.add_bias(mlp_out, param_ids[base + 15])?;
        if let Some(dctx) = &opts.dropout {
            let m = tape.input(dropout_mask(&[seq_len, d], dctx, 200 + l as u64));
            mlp_out = tape.mul(mlp_out, m)?;
        }
        x = tape.add(x, mlp_out)?;

        probs_all.push(layer_probs);
    }

    let final_norm = tape.layer_norm(x, param_ids[tail], param_ids[tail + 1])?;
    let logits = tape.matmul(final_norm, param_ids[tail + 2])?;
    let logits = tape.add_bias(logits, param_ids[tail + 3])?;

    let (mut loss, mut ce, mut penalty) = (None, None, None);
    if let Some(sup) = &opts.supervision {
        let ce_id = tape.cross_entropy(logits, sup.targets.to_vec(), sup.supervised.to_vec())?;
        ce = Some(ce_id);
        let mut total = ce_id;
        if let Some(mask_t) = &sup.penalty_mask {
            let last = &probs_all[cfg.num_layers - 1];
            let mut acc = last[0];
            for &p in &last[1..] {
                acc = tape.add(acc, p)?;
            }
            let mean = tape.scale(acc, 1.0 / heads as f64);
            let mask_id = tape.input(mask_t.clone());
            let weighted = tape.mul(mean, mask_id)?;
            let ones_r =
                tape.input(Tensor::matrix(1, seq_len, vec![1.0; seq_len]).expect("sized"));
            let ones_c =
                tape.input(Tensor::matrix(seq_len, 1, vec![1.0; seq_len]).expect("sized"));
            let partial = tape.matmul(ones_r, weighted)?;
            let pen = tape.matmul(partial, ones_c)?;
            penalty = Some(pen);
            if sup.lambda != 0.0 {
                let pen_scaled = tape.scale(pen, sup.lambda);
                let pen_flat = tape.reshape(pen_scaled, vec![1])?;
                total = tape.add(ce_id, pen_flat)?;
            }
        }
        loss = Some(total);
    }

    Ok(ForwardBuild {
        embeddings,
        tok_table: tok_table_id,
        logits,
        probs: probs_all,
        loss,
        cross_entropy: ce,
        penalty,
        param_ids,
    })
}

/// Inference forward: logits plus the attention trace, dropout disabled.
pub fn forward(
    params: &ModelParams,
    tokens: &[TokenId],
) -> Result<(Tensor, AttentionTrace), ModelError> {
    let mut tape = Tape::new();
    let build = build_forward(
        &mut tape,
        params,
        EmbedSource::Ids(tokens),
        &ForwardOptions::default(),
    )?;
    let logits = tape.value(build.logits).clone();
    let trace = extract_trace(&tape, &build);
    Ok((logits, trace))
}

pub fn extract_trace(tape: &Tape, build: &ForwardBuild) -> AttentionTrace {
    AttentionTrace {
        layers: build
            .probs
            .iter()
            .map(|heads| heads.iter().map(|&id| tape.value(id).clone()).collect())
            .collect(),
    }
}

/// Greedy argmax with ties broken toward the smallest token id.
pub fn argmax_token(row: &[f64]) -> TokenId {
    let mut best = 0usize;
    let mut best_val = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
}

/// One prompt/continuation pair, the unit the attribution and graph modules
/// operate on.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub prompt: Vec<TokenId>,
    pub output: Vec<TokenId>,
}

impl Episode {
    /// Token sequence feeding the step that produced `output[i]`.
    pub fn prefix(&self, output_index: usize) -> Vec<TokenId> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.output[..output_index]);
        seq
    }
}

/// Greedy decoding; every step's full attention trace is retained.
pub fn generate(
    params: &ModelParams,
    prompt: &[TokenId],
    opts: &GenerateOptions,
) -> Result<(Vec<TokenId>, Vec<AttentionTrace>), ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let needed = prompt.len() + opts.max_new_tokens;
    if needed > params.config.context_length {
        return Err(ModelError::ContextOverflow {
            needed,
            context_length: params.config.context_length,
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let mut traces = Vec::new();
    for _ in 0..opts.max_new_tokens {
        let (logits, trace) = forward(params, &seq)?;
        let next = argmax_token(logits.row(logits.rows() - 1));
        out.push(next);
        seq.push(next);
        traces.push(trace);
    }
    Ok((out, traces))
}

/// Versioned checkpoint: config, vocabulary, and all parameters. JSON keeps
/// full float precision, so round-trips are bit-exact.
#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab: Vec<String>,
    pub model: ModelParams,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: ModelParams, vocab: &Vocab) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab: vocab.tokens().to_vec(),
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<(ModelParams, Vocab), ModelError> {
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(format!("{e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut vocab = Vocab::build(ck.vocab.iter().map(|s| s.as_str()));
        vocab.rebuild_index();
        if vocab.len() != ck.vocab.len() {
            return Err(ModelError::Checkpoint(String::from(
                "vocabulary contains duplicates",
            )));
        }
        ck.model.config.validate()?;
        Ok((ck.model, vocab))
    }
}
