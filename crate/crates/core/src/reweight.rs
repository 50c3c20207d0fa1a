//! Fact-anchored graph re-weighting: a graph-attention scoring pass over the
//! causal graph plus suppression of weakly supported keys during decoding.
//!
//! At every decode step the episode-so-far causal graph is built, with the
//! step's would-be (provisional) token included as an output node so the
//! current decision itself can be protected. Output nodes whose causal
//! contribution score falls in the episode's bottom percentile propagate a
//! flag back to their strongest input contributors; each such key position j
//! gets a multiplier s_j = max(s_floor, f_j * gat_j) and the generating row
//! of the final attention layer is re-softmaxed with ln(s) added to its
//! logits. Everything else decodes exactly as the baseline.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attribution::{output_attribution, AttributionMatrix, BaselineKind};
use crate::error::{ModelError, ReweightError};
use crate::factstore::{entailment_factor, EntailmentMode, EvidenceSet, FactStore, DEFAULT_F_MIN};
use crate::graph::{
    aggregate_attention, build_graph, ccs, percentile_flags, AggregationPolicy, CausalGraph,
    CcsOptions, CcsVector, GraphOptions, NodeRole,
};
use crate::model::{
    argmax_token, build_forward, extract_trace, AttentionTrace, EmbedSource, Episode,
    ForwardOptions, ModelParams, ReweightSource,
};
use crate::rng::DetRng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use crate::train::TrainExample;
use crate::vocab::{TokenId, Vocab};

// ── graph-attention scoring ──────────────────────────────────────────

/// Multi-head graph-attention scorer parameters. Per head: a feature
/// projection W (feature_dim x proj_dim) and an attention vector a (2*proj_dim,
/// stored as a column) split into source and destination halves, so the score
/// of edge u -> v is LeakyReLU(a_src . W h_u + a_dst . W h_v).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    pub w: Vec<Tensor>,
    pub a: Vec<Tensor>,
    pub leaky_slope: f64,
    pub num_heads: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl GatParams {
    /// Seeded normal initialization; scores start uninformative (near 0.5
    /// after the sigmoid squash).
    pub fn init(
        feature_dim: usize,
        proj_dim: usize,
        num_heads: usize,
        seed: u64,
    ) -> Result<Self, ReweightError> {
        if num_heads == 0 || proj_dim == 0 || feature_dim == 0 {
            return Err(ReweightError::InvalidParams {
                field: "dims",
                message: String::from("feature_dim, proj_dim, num_heads must be positive"),
            });
        }
        let mut rng = DetRng::labeled(seed, "gat-init");
        let std = 1.0 / crate::math::sqrt(feature_dim as f64);
        let w = (0..num_heads)
            .map(|_| Tensor::randn(vec![feature_dim, proj_dim], std, &mut rng))
            .collect();
        let a = (0..num_heads)
            .map(|_| Tensor::randn(vec![2 * proj_dim, 1], std, &mut rng))
            .collect();
        Ok(GatParams {
            w,
            a,
            leaky_slope: 0.2,
            num_heads,
            dropout: 0.3,
            seed,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w[0].rows()
    }

    pub fn proj_dim(&self) -> usize {
        self.w[0].cols()
    }

    fn validate(&self, feature_dim: usize) -> Result<(), ReweightError> {
        if !(0.0 < self.leaky_slope && self.leaky_slope < 1.0) {
            return Err(ReweightError::InvalidParams {
                field: "leaky_slope",
                message: format!("{} outside (0, 1)", self.leaky_slope),
            });
        }
        if self.w.len() != self.num_heads || self.a.len() != self.num_heads {
            return Err(ReweightError::InvalidParams {
                field: "num_heads",
                message: String::from("per-head tensor counts disagree with num_heads"),
            });
        }
        if self.feature_dim() != feature_dim {
            return Err(ReweightError::FeatureDim {
                expected: self.feature_dim(),
                got: feature_dim,
            });
        }
        for (h, (w, a)) in self.w.iter().zip(self.a.iter()).enumerate() {
            if a.numel() != 2 * w.cols() {
                return Err(ReweightError::InvalidParams {
                    field: "a",
                    message: format!("head {h}: attention vector is not 2*proj_dim"),
                });
            }
        }
        Ok(())
    }

    /// Canonical tensor enumeration, mirroring the model's convention.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.num_heads);
        for w in self.w.iter_mut() {
            out.push(w);
        }
        for a in self.a.iter_mut() {
            out.push(a);
        }
        out
    }
}

/// Per-node scores in [0, 1] plus the per-head neighborhood coefficients
/// (`coefficients[head][node]` lists (source, weight) over the node's
/// in-neighborhood, source-ascending).
#[derive(Clone, Debug)]
pub struct GatScores {
    pub scores: Vec<f64>,
    pub coefficients: Vec<Vec<Vec<(usize, f64)>>>,
}

fn in_neighborhoods(num_nodes: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    // Self-loops first, then edge sources in ascending order.
    let mut nbrs: Vec<BTreeSet<usize>> = (0..num_nodes).map(|v| BTreeSet::from([v])).collect();
    for &(src, dst) in edges {
        nbrs[dst].insert(src);
    }
    nbrs.into_iter().map(|s| s.into_iter().collect()).collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + crate::math::exp(-x))
    } else {
        let e = crate::math::exp(x);
        e / (1.0 + e)
    }
}

/// Offset inside the score squash: an untrained scorer must start neutral
/// (scores near 1, deferring entirely to the entailment factor f) rather
/// than dampening every candidate by half. Training moves scores down for
/// keys the decode loss wants suppressed.
const SCORE_BIAS: f64 = 3.0;

/// Score every node of the graph in [0, 1]. `features` is (num_nodes x
/// feature_dim); `edges` are directed (src, dst) pairs; self-loops are added
/// automatically so isolated nodes still score.
pub fn gat_scores(
    features: &Tensor,
    edges: &[(usize, usize)],
    params: &GatParams,
) -> Result<GatScores, ReweightError> {
    params.validate(features.cols())?;
    let v = features.rows();
    let d = params.proj_dim();
    let nbrs = in_neighborhoods(v, edges);

    let mut totals = vec![0.0; v];
    let mut coefficients = Vec::with_capacity(params.num_heads);
    for (w, a) in params.w.iter().zip(params.a.iter()) {
        // H = features @ W, p = H a_src, q = H a_dst.
        let mut h = vec![0.0; v * d];
        for node in 0..v {
            let feat = features.row(node);
            for c in 0..d {
                let mut acc = 0.0;
                for (k, &fv) in feat.iter().enumerate() {
                    acc += fv * w.at(k, c);
                }
                h[node * d + c] = acc;
            }
        }
        let mut p = vec![0.0; v];
        let mut q = vec![0.0; v];
        for node in 0..v {
            let hrow = &h[node * d..(node + 1) * d];
            p[node] = hrow.iter().zip(&a.data()[..d]).map(|(x, y)| x * y).sum();
            q[node] = hrow.iter().zip(&a.data()[d..]).map(|(x, y)| x * y).sum();
        }

        let mut head_coefs = Vec::with_capacity(v);
        for node in 0..v {
            let logits: Vec<f64> = nbrs[node]
                .iter()
                .map(|&u| leaky(p[u] + q[node], params.leaky_slope))
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| crate::math::exp(x - max)).collect();
            let sum: f64 = exps.iter().sum();
            let coefs: Vec<(usize, f64)> = nbrs[node]
                .iter()
                .zip(exps.iter())
                .map(|(&u, &e)| (u, e / sum))
                .collect();
            // Aggregate and reduce to a scalar: mean over projected dims.
            let mut agg = 0.0;
            for &(u, c) in &coefs {
                let hrow = &h[u * d..(u + 1) * d];
                agg += c * hrow.iter().sum::<f64>();
            }
            totals[node] += agg / d as f64;
            head_coefs.push(coefs);
        }
        coefficients.push(head_coefs);
    }

    let scores = totals
        .iter()
        .map(|&t| sigmoid(t / params.num_heads as f64 + SCORE_BIAS))
        .collect();
    Ok(GatScores {
        scores,
        coefficients,
    })
}

/// The same scorer expressed on a tape, returning the (1 x num_nodes) score
/// row; used when training the scorer through the decode loss. Must agree
/// with [`gat_scores`] to 1e-12 (tested).
pub fn gat_scores_on_tape(
    tape: &mut Tape,
    features: &Tensor,
    edges: &[(usize, usize)],
    params: &GatParams,
) -> Result<(ValueId, Vec<ValueId>), ReweightError> {
    params.validate(features.cols())?;
    let v = features.rows();
    let d = params.proj_dim();
    let nbrs = in_neighborhoods(v, edges);
    // Adjacency mask over (dst, src): true where src is in dst's neighborhood.
    let mut mask = vec![false; v * v];
    for (dst, srcs) in nbrs.iter().enumerate() {
        for &src in srcs {
            mask[dst * v + src] = true;
        }
    }

    let feats = tape.input(features.clone());
    let ones_col = tape.input(Tensor::matrix(v, 1, vec![1.0; v]).expect("sized"));
    let ones_row = tape.input(Tensor::matrix(1, v, vec![1.0; v]).expect("sized"));
    let mean_col = tape.input(Tensor::matrix(d, 1, vec![1.0 / d as f64; d]).expect("sized"));

    let mut param_ids = Vec::with_capacity(2 * params.num_heads);
    let mut head_contribs: Vec<ValueId> = Vec::with_capacity(params.num_heads);
    let mut a_ids = Vec::with_capacity(params.num_heads);
    for w in &params.w {
        param_ids.push(tape.input(w.clone()));
    }
    for a in &params.a {
        let id = tape.input(a.clone());
        param_ids.push(id);
        a_ids.push(id);
    }

    for head in 0..params.num_heads {
        let w_id = param_ids[head];
        let a_id = a_ids[head];
        let h = tape.matmul(feats, w_id)?;
        let a_src = tape.slice_rows(a_id, 0, d)?;
        let a_dst = tape.slice_rows(a_id, d, d)?;
        let p = tape.matmul(h, a_src)?; // (v x 1)
        let q = tape.matmul(h, a_dst)?; // (v x 1)
        let p_row = tape.transpose(p)?; // (1 x v)
        let p_mat = tape.matmul(ones_col, p_row)?; // P[dst][src] = p[src]
        let q_mat = tape.matmul(q, ones_row)?; // Q[dst][src] = q[dst]
        let e = tape.add(p_mat, q_mat)?;
        let e = tape.leaky_relu(e, params.leaky_slope);
        let coefs = tape.masked_softmax(e, mask.clone())?;
        let agg = tape.matmul(coefs, h)?; // (v x d)
        let contrib = tape.matmul(agg, mean_col)?; // (v x 1)
        head_contribs.push(contrib);
    }
    let mut acc = head_contribs[0];
    for &c in &head_contribs[1..] {
        acc = tape.add(acc, c)?;
    }
    let mean = tape.scale(acc, 1.0 / params.num_heads as f64);
    let bias = tape.input(Tensor::vector(vec![SCORE_BIAS]));
    let mean = tape.add_bias(mean, bias)?;
    let squashed = tape.sigmoid(mean);
    let row = tape.transpose(squashed)?; // (1 x v)
    Ok((row, param_ids))
}

// ── suppression plan ─────────────────────────────────────────────────

/// Thresholds and knobs of the suppression policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanPolicy {
    /// Output tokens with normalized CCS in this bottom percentile are
    /// flagged (nearest-rank; 0 disables flagging and makes every plan the
    /// identity).
    pub tau_percentile: f64,
    /// Lower clamp for suppression factors; keeps ln(s) finite.
    pub s_floor: f64,
    /// How many of a flagged output's strongest input contributors (by
    /// |edge weight|) become suppression candidates.
    pub flag_fanout: usize,
    /// Also suppress already-generated output keys. Off by default: the
    /// contribution score is defined against input tokens.
    pub suppress_outputs: bool,
}

impl Default for PlanPolicy {
    fn default() -> Self {
        PlanPolicy {
            tau_percentile: 25.0,
            s_floor: 0.05,
            flag_fanout: 3,
            suppress_outputs: false,
        }
    }
}

/// Provenance of one suppressed key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Key position (input-token index unless outputs are suppressed too).
    pub pos: usize,
    pub s: f64,
    /// Output indices whose low-CCS flag selected this key.
    pub flagged_by: Vec<usize>,
    pub f: f64,
    pub gat: f64,
}

/// Per-key multipliers for one decode step: 1.0 exactly for untouched keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightPlan {
    /// One factor per input position.
    pub s: Vec<f64>,
    /// One factor per output position generated so far (all 1.0 unless
    /// output suppression is on).
    pub s_outputs: Vec<f64>,
    pub entries: Vec<PlanEntry>,
}

impl ReweightPlan {
    pub fn identity(n_inputs: usize, n_outputs: usize) -> Self {
        ReweightPlan {
            s: vec![1.0; n_inputs],
            s_outputs: vec![1.0; n_outputs],
            entries: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.entries.is_empty()
    }

    /// Expand to one multiplier per key position of a sequence of length
    /// `seq_len` (inputs, then generated tokens, then 1.0 padding for the
    /// position being decoded).
    pub fn key_multipliers(&self, seq_len: usize) -> Vec<f64> {
        let mut s = Vec::with_capacity(seq_len);
        s.extend_from_slice(&self.s);
        s.extend_from_slice(&self.s_outputs);
        s.resize(seq_len, 1.0);
        s
    }
}

/// Build the suppression plan from the episode graph and its signals.
/// `factors` and `gat` are per-node (inputs then outputs, graph id order).
pub fn make_plan(
    graph: &CausalGraph,
    scores: &CcsVector,
    factors: &[f64],
    gat: &[f64],
    policy: &PlanPolicy,
) -> Result<ReweightPlan, ReweightError> {
    let n = graph.n_inputs();
    let m = graph.n_outputs();
    let nodes = n + m;
    if factors.len() != nodes || gat.len() != nodes {
        return Err(ReweightError::InvalidParams {
            field: "factors/gat",
            message: format!(
                "per-node signals must cover {nodes} nodes (got {} and {})",
                factors.len(),
                gat.len()
            ),
        });
    }
    let mut plan = ReweightPlan::identity(n, m);
    if policy.tau_percentile <= 0.0 || m == 0 {
        return Ok(plan);
    }
    let flags = percentile_flags(&scores.raw, &scores.normalized, policy.tau_percentile);

    // Selected key -> flagged outputs that voted for it.
    let mut votes: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    for (i, &flagged) in flags.iter().enumerate() {
        if !flagged {
            continue;
        }
        let dst = n + i;
        let mut incoming: Vec<(usize, f64)> = graph
            .edges
            .iter()
            .filter(|e| e.dst == dst)
            .filter(|e| policy.suppress_outputs || e.src < n)
            .map(|e| (e.src, e.weight.abs()))
            .collect();
        incoming.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
        for &(src, _) in incoming.iter().take(policy.flag_fanout) {
            votes[src].push(i);
        }
    }

    for (pos, flagged_by) in votes.into_iter().enumerate() {
        if flagged_by.is_empty() {
            continue;
        }
        let s = (factors[pos] * gat[pos]).max(policy.s_floor);
        let entry = PlanEntry {
            pos,
            s,
            flagged_by,
            f: factors[pos],
            gat: gat[pos],
        };
        if pos < n {
            plan.s[pos] = s;
        } else {
            plan.s_outputs[pos - n] = s;
        }
        plan.entries.push(entry);
    }
    Ok(plan)
}

/// Re-softmax one attention-logit row under per-key multipliers:
/// probs = softmax(logit + ln s). Identical to multiplying softmax(logit)
/// by s and renormalizing.
pub fn reweight_attention(logits_row: &[f64], s: &[f64]) -> Result<Vec<f64>, ReweightError> {
    if logits_row.len() != s.len() {
        return Err(ReweightError::PlanLength {
            plan_len: s.len(),
            row_len: logits_row.len(),
        });
    }
    for (pos, &v) in s.iter().enumerate() {
        if !(v > 0.0) {
            return Err(ReweightError::NonPositiveFactor { pos, value: v });
        }
    }
    let shifted: Vec<f64> = logits_row
        .iter()
        .zip(s)
        .map(|(&l, &sv)| l + crate::math::ln(sv))
        .collect();
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted.iter().map(|&x| crate::math::exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

// ── reweighted decoding ──────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightOptions {
    pub policy: PlanPolicy,
    pub aggregation: AggregationPolicy,
    pub ccs: CcsOptions,
    /// Path resolution of each attribution row.
    pub ig_steps: usize,
    /// Cached attribution rows for already-generated tokens are recomputed
    /// every this many decode steps; the in-flight token's row is always
    /// fresh. Trades attribution staleness against decode cost.
    pub refresh_every: usize,
    pub retrieval_k: usize,
    /// Use only the last N prompt tokens as the retrieval query (None: the
    /// whole prompt). Prompts end with the actual question, so a recency
    /// window isolates the queried fact instead of tying with every
    /// fact mentioned earlier.
    pub retrieval_query_window: Option<usize>,
    pub entailment: EntailmentMode,
    pub f_min: f64,
    pub baseline: BaselineKind,
    pub gat_proj_dim: usize,
    pub gat_heads: usize,
    pub include_output_edges: bool,
    /// Apply suppression at every layer's generating row rather than only
    /// the final layer's.
    pub apply_to_all_layers: bool,
}

impl Default for ReweightOptions {
    fn default() -> Self {
        ReweightOptions {
            policy: PlanPolicy::default(),
            aggregation: AggregationPolicy::default(),
            ccs: CcsOptions::default(),
            ig_steps: 64,
            refresh_every: 4,
            retrieval_k: 3,
            retrieval_query_window: None,
            entailment: EntailmentMode::Binary,
            f_min: DEFAULT_F_MIN,
            baseline: BaselineKind::ZeroEmbedding,
            gat_proj_dim: 8,
            gat_heads: 4,
            include_output_edges: false,
            apply_to_all_layers: false,
        }
    }
}

/// One decode step's record, Fig-5-style raw material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// Raw CCS of every output node considered at this step (prior outputs
    /// plus the provisional token).
    pub ccs: Vec<f64>,
    /// Input-key multipliers applied at this step.
    pub plan: Vec<f64>,
    /// The emitted token.
    pub token: TokenId,
    /// Key positions with s < 1.
    pub suppressed: Vec<usize>,
}

/// Outcome of a fact-anchored decode.
#[derive(Clone, Debug)]
pub struct ReweightedRun {
    pub output: Vec<TokenId>,
    pub steps: Vec<StepDiagnostics>,
    /// Episode graph rebuilt after decoding finished (fresh attributions,
    /// entailment factors attached to every node).
    pub final_graph: CausalGraph,
    pub final_ccs: CcsVector,
    pub final_attributions: AttributionMatrix,
}

fn node_features(
    params: &ModelParams,
    input_ids: &[TokenId],
    output_ids: &[TokenId],
    scores: &CcsVector,
    factors: &[f64],
) -> Tensor {
    let d = params.config.embed_dim;
    let total = input_ids.len() + output_ids.len();
    let mut data = Vec::with_capacity(total * (d + 2));
    for (idx, &tok) in input_ids.iter().chain(output_ids.iter()).enumerate() {
        data.extend_from_slice(params.tok_embed.row(tok));
        if idx < input_ids.len() {
            data.push(1.0);
        } else {
            data.push(scores.normalized[idx - input_ids.len()]);
        }
        data.push(factors[idx]);
    }
    Tensor::matrix(total, d + 2, data).expect("sized")
}

fn graph_edge_list(graph: &CausalGraph) -> Vec<(usize, usize)> {
    graph.edges.iter().map(|e| (e.src, e.dst)).collect()
}

fn entailment_per_node(
    input_tokens: &[String],
    output_tokens: &[String],
    evidence: &EvidenceSet,
    mode: EntailmentMode,
    f_min: f64,
) -> Vec<f64> {
    input_tokens
        .iter()
        .map(|t| entailment_factor(t, NodeRole::Input, evidence, mode, f_min))
        .chain(
            output_tokens
                .iter()
                .map(|t| entailment_factor(t, NodeRole::Output, evidence, mode, f_min)),
        )
        .collect()
}

fn assemble_attr_matrix(
    rows: &[Vec<f64>],
    n: usize,
    residuals: Vec<f64>,
    steps: usize,
    baseline: BaselineKind,
) -> AttributionMatrix {
    let m = rows.len();
    let total = n + m;
    let mut data = Vec::with_capacity(m * n);
    let mut full = Vec::with_capacity(m);
    for row in rows {
        data.extend_from_slice(&row[..n]);
        let mut f = row.clone();
        f.resize(total, 0.0);
        full.push(f);
    }
    AttributionMatrix {
        shape: (m, n),
        data,
        baseline,
        steps,
        residuals,
        full_rows: full,
    }
}

struct AttrCache {
    rows: Vec<Vec<f64>>,
    residuals: Vec<f64>,
    last_refresh_step: usize,
}

/// Greedy decoding with fact-anchored suppression. Deterministic for fixed
/// inputs; with an identity plan at every step it reproduces the baseline
/// token-for-token (bit-exactly, since ln(1) offsets do not change scores).
pub fn generate_reweighted(
    params: &ModelParams,
    prompt: &[TokenId],
    store: &FactStore,
    gat: &GatParams,
    vocab: &Vocab,
    opts: &ReweightOptions,
    max_new_tokens: usize,
) -> Result<ReweightedRun, ReweightError> {
    if prompt.is_empty() {
        return Err(ReweightError::Model(ModelError::EmptyPrompt));
    }
    let needed = prompt.len() + max_new_tokens;
    if needed > params.config.context_length {
        return Err(ReweightError::Model(ModelError::ContextOverflow {
            needed,
            context_length: params.config.context_length,
        }));
    }
    let n = prompt.len();
    let prompt_tokens: Vec<String> = vocab.decode(prompt);
    let query: &[String] = match opts.retrieval_query_window {
        Some(w) if w < prompt_tokens.len() => &prompt_tokens[prompt_tokens.len() - w..],
        _ => &prompt_tokens,
    };
    let evidence = store.retrieve(query, opts.retrieval_k);

    let mut outputs: Vec<TokenId> = Vec::new();
    let mut traces: Vec<AttentionTrace> = Vec::new();
    let mut steps_diag: Vec<StepDiagnostics> = Vec::new();
    let mut cache = AttrCache {
        rows: Vec::new(),
        residuals: Vec::new(),
        last_refresh_step: 0,
    };

    for step in 1..=max_new_tokens {
        let seq: Vec<TokenId> = prompt.iter().chain(outputs.iter()).copied().collect();

        // Baseline forward for this step.
        let mut tape = Tape::new();
        let build = build_forward(
            &mut tape,
            params,
            EmbedSource::Ids(&seq),
            &ForwardOptions::default(),
        )?;
        let logits = tape.value(build.logits).clone();
        let baseline_trace = extract_trace(&tape, &build);
        let provisional = argmax_token(logits.row(seq.len() - 1));

        // Episode-so-far graph, provisional token included as the newest
        // output node.
        let virtual_outputs: Vec<TokenId> =
            outputs.iter().copied().chain([provisional]).collect();
        let episode = Episode {
            prompt: prompt.to_vec(),
            output: virtual_outputs.clone(),
        };

        // Attribution rows: full refresh on cadence, otherwise fill what is
        // missing; the provisional row is always computed fresh.
        let refresh = step == 1 || step - cache.last_refresh_step >= opts.refresh_every;
        if refresh {
            cache.rows.clear();
            cache.residuals.clear();
            cache.last_refresh_step = step;
        }
        while cache.rows.len() < outputs.len() {
            let i = cache.rows.len();
            let attr = output_attribution(params, &episode, i, opts.ig_steps, opts.baseline)
                .map_err(|e| ReweightError::Attribution(format!("{e}")))?;
            cache.rows.push(attr.per_row);
            cache.residuals.push(attr.residual);
        }
        let provisional_attr = output_attribution(
            params,
            &episode,
            outputs.len(),
            opts.ig_steps,
            opts.baseline,
        )
        .map_err(|e| ReweightError::Attribution(format!("{e}")))?;

        let mut rows = cache.rows.clone();
        rows.push(provisional_attr.per_row.clone());
        let mut residuals = cache.residuals.clone();
        residuals.push(provisional_attr.residual);
        let attr_matrix =
            assemble_attr_matrix(&rows, n, residuals, opts.ig_steps, opts.baseline);

        let mut step_traces: Vec<&AttentionTrace> = traces.iter().collect();
        step_traces.push(&baseline_trace);
        let owned: Vec<AttentionTrace> = step_traces.into_iter().cloned().collect();
        let alpha = aggregate_attention(&owned, n, opts.aggregation)?;

        let scores = ccs(&alpha, &attr_matrix, &opts.ccs)?;
        let out_tokens: Vec<String> = vocab.decode(&virtual_outputs);
        let graph = build_graph(
            &alpha,
            &attr_matrix,
            &prompt_tokens,
            &out_tokens,
            &GraphOptions {
                prune_below: 0.0,
                include_output_edges: opts.include_output_edges,
            },
            &opts.ccs,
        )?;

        let factors =
            entailment_per_node(&prompt_tokens, &out_tokens, &evidence, opts.entailment, opts.f_min);
        let features = node_features(params, prompt, &virtual_outputs, &scores, &factors);
        let gat_out = gat_scores(&features, &graph_edge_list(&graph), gat)?;
        let plan = make_plan(&graph, &scores, &factors, &gat_out.scores, &opts.policy)?;

        let (token, applied_trace) = if plan.is_identity() {
            (provisional, baseline_trace)
        } else {
            let multipliers = plan.key_multipliers(seq.len());
            let mut rw_tape = Tape::new();
            let rw_build = build_forward(
                &mut rw_tape,
                params,
                EmbedSource::Ids(&seq),
                &ForwardOptions {
                    dropout: None,
                    reweight_last: Some(ReweightSource::Values(&multipliers)),
                    reweight_all_layers: opts.apply_to_all_layers,
                    supervision: None,
                },
            )?;
            let rw_logits = rw_tape.value(rw_build.logits).clone();
            let tok = argmax_token(rw_logits.row(seq.len() - 1));
            (tok, extract_trace(&rw_tape, &rw_build))
        };

        // The provisional attribution row belongs to the provisional token;
        // keep it cached only if that token was actually emitted.
        if token == provisional {
            cache.rows.push(provisional_attr.per_row);
            cache.residuals.push(provisional_attr.residual);
        }

        steps_diag.push(StepDiagnostics {
            step,
            ccs: scores.raw.clone(),
            plan: plan.s.clone(),
            token,
            suppressed: plan
                .entries
                .iter()
                .map(|e| e.pos)
                .collect(),
        });
        outputs.push(token);
        traces.push(applied_trace);
    }

    // Final audit pass: fresh attributions for the realized episode, graph
    // with entailment factors attached.
    let episode = Episode {
        prompt: prompt.to_vec(),
        output: outputs.clone(),
    };
    let (final_graph, final_ccs, final_attr) = audit_episode(
        params,
        &episode,
        &traces,
        vocab,
        Some(&evidence),
        opts,
    )?;

    Ok(ReweightedRun {
        output: outputs,
        steps: steps_diag,
        final_graph,
        final_ccs,
        final_attributions: final_attr,
    })
}

/// Build the full graph + CCS for a finished episode from its per-step
/// traces. Used for the baseline condition and for the reweighted run's
/// final report; when `evidence` is given, entailment factors are attached
/// to the nodes.
pub fn audit_episode(
    params: &ModelParams,
    episode: &Episode,
    traces: &[AttentionTrace],
    vocab: &Vocab,
    evidence: Option<&EvidenceSet>,
    opts: &ReweightOptions,
) -> Result<(CausalGraph, CcsVector, AttributionMatrix), ReweightError> {
    let n = episode.prompt.len();
    let mut rows = Vec::with_capacity(episode.output.len());
    let mut residuals = Vec::with_capacity(episode.output.len());
    for i in 0..episode.output.len() {
        let attr = output_attribution(params, episode, i, opts.ig_steps, opts.baseline)
            .map_err(|e| ReweightError::Attribution(format!("{e}")))?;
        rows.push(attr.per_row);
        residuals.push(attr.residual);
    }
    let attr_matrix = assemble_attr_matrix(&rows, n, residuals, opts.ig_steps, opts.baseline);
    let alpha = aggregate_attention(traces, n, opts.aggregation)?;
    let scores = ccs(&alpha, &attr_matrix, &opts.ccs)?;
    let prompt_tokens = vocab.decode(&episode.prompt);
    let out_tokens = vocab.decode(&episode.output);
    let mut graph = build_graph(
        &alpha,
        &attr_matrix,
        &prompt_tokens,
        &out_tokens,
        &GraphOptions {
            prune_below: 0.0,
            include_output_edges: opts.include_output_edges,
        },
        &opts.ccs,
    )?;
    if let Some(ev) = evidence {
        let factors =
            entailment_per_node(&prompt_tokens, &out_tokens, ev, opts.entailment, opts.f_min);
        for (node, f) in graph.nodes.iter_mut().zip(factors) {
            node.f = Some(f);
        }
    }
    Ok((graph, scores, attr_matrix))
}

// ── scorer training through the decode loss ──────────────────────────

/// Schedule for training the graph-attention scorer. The transformer stays
/// frozen; gradients flow through the scorer and the reweighted final layer
/// only (graph signals — CCS, entailment, features — are treated as fixed
/// per step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatTrainSpec {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for GatTrainSpec {
    fn default() -> Self {
        GatTrainSpec {
            learning_rate: 5e-3,
            max_steps: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GatTrainReport {
    /// Per-step decode loss (cross-entropy of the gold token under the
    /// reweighted final layer).
    pub loss_history: Vec<f64>,
    /// Steps skipped because the plan was the identity (no gradient path).
    pub skipped: usize,
}

/// Train the scorer on teacher-forced answer steps of the corpus.
pub fn train_gat(
    params: &ModelParams,
    gat: &mut GatParams,
    corpus: &[TrainExample],
    store: &FactStore,
    vocab: &Vocab,
    opts: &ReweightOptions,
    spec: &GatTrainSpec,
) -> Result<GatTrainReport, ReweightError> {
    if corpus.is_empty() {
        return Err(ReweightError::InvalidParams {
            field: "corpus",
            message: String::from("no training examples"),
        });
    }
    let shapes: Vec<Vec<usize>> = gat
        .w
        .iter()
        .chain(gat.a.iter())
        .map(|t| t.shape().to_vec())
        .collect();
    let mut optimizer = crate::train::AdamW::for_shapes(&shapes);
    let mut order_rng = DetRng::labeled(spec.seed, "gat-order");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut history = Vec::new();
    let mut skipped = 0usize;

    for _ in 0..spec.max_steps {
        if cursor == order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let example = &corpus[order[cursor]];
        cursor += 1;

        // Teacher-forced answer step: the sequence up to (excluding) the
        // token right after the answer marker; that token is the target.
        let (ts, te) = example.target_span;
        let answer_pos = (ts + 1).min(te - 1);
        let seq = &example.tokens[..answer_pos];
        let gold = example.tokens[answer_pos];
        let n = ts.min(seq.len());
        let prompt: Vec<TokenId> = seq[..n].to_vec();
        let outputs: Vec<TokenId> = seq[n..].to_vec();

        // Frozen per-step pipeline, mirroring generate_reweighted.
        let prompt_tokens = vocab.decode(&prompt);
        let query: &[String] = match opts.retrieval_query_window {
            Some(w) if w < prompt_tokens.len() => &prompt_tokens[prompt_tokens.len() - w..],
            _ => &prompt_tokens,
        };
        let evidence = store.retrieve(query, opts.retrieval_k);
        let mut traces = Vec::with_capacity(outputs.len() + 1);
        for k in 0..=outputs.len() {
            let sub = &seq[..n + k];
            let (_, trace) = crate::model::forward(params, sub)?;
            traces.push(trace);
        }
        let (logits, _) = crate::model::forward(params, seq)?;
        let provisional = argmax_token(logits.row(seq.len() - 1));
        let virtual_outputs: Vec<TokenId> =
            outputs.iter().copied().chain([provisional]).collect();
        let episode = Episode {
            prompt: prompt.clone(),
            output: virtual_outputs.clone(),
        };
        let mut rows = Vec::new();
        let mut residuals = Vec::new();
        for i in 0..virtual_outputs.len() {
            let attr = output_attribution(params, &episode, i, opts.ig_steps, opts.baseline)
                .map_err(|e| ReweightError::Attribution(format!("{e}")))?;
            rows.push(attr.per_row);
            residuals.push(attr.residual);
        }
        let attr_matrix = assemble_attr_matrix(&rows, n, residuals, opts.ig_steps, opts.baseline);
        let alpha = aggregate_attention(&traces, n, opts.aggregation)?;
        let scores = ccs(&alpha, &attr_matrix, &opts.ccs)?;
        let out_tokens = vocab.decode(&virtual_outputs);
        let graph = build_graph(
            &alpha,
            &attr_matrix,
            &prompt_tokens,
            &out_tokens,
            &GraphOptions {
                prune_below: 0.0,
                include_output_edges: opts.include_output_edges,
            },
            &opts.ccs,
        )?;
        let factors =
            entailment_per_node(&prompt_tokens, &out_tokens, &evidence, opts.entailment, opts.f_min);

        // Candidate keys under the current policy (flags are data here;
        // gradients flow through the scorer's s values only).
        let probe_gat = gat_scores(
            &node_features(params, &prompt, &virtual_outputs, &scores, &factors),
            &graph_edge_list(&graph),
            gat,
        )?;
        let plan = make_plan(&graph, &scores, &factors, &probe_gat.scores, &opts.policy)?;
        if plan.is_identity() {
            skipped += 1;
            continue;
        }

        // One tape: scorer -> s vector -> reweighted forward -> loss.
        let mut tape = Tape::new();
        let features = node_features(params, &prompt, &virtual_outputs, &scores, &factors);
        let (score_row, gat_param_ids) =
            gat_scores_on_tape(&mut tape, &features, &graph_edge_list(&graph), gat)?;
        // s over input keys: 1 + mask * (clamp(f * g) - 1).
        let g_inputs = tape.slice_cols(score_row, 0, n)?;
        let f_row = tape.input(Tensor::matrix(1, n, factors[..n].to_vec()).expect("sized"));
        let raw = tape.mul(f_row, g_inputs)?;
        let clamped = tape.clamp_min(raw, opts.policy.s_floor);
        let mut mask_data = vec![0.0; n];
        for e in &plan.entries {
            if e.pos < n {
                mask_data[e.pos] = 1.0;
            }
        }
        let mask = tape.input(Tensor::matrix(1, n, mask_data).expect("sized"));
        let neg_ones = tape.input(Tensor::matrix(1, n, vec![-1.0; n]).expect("sized"));
        let delta = tape.add(clamped, neg_ones)?;
        let masked_delta = tape.mul(mask, delta)?;
        let ones = tape.input(Tensor::matrix(1, n, vec![1.0; n]).expect("sized"));
        let s_inputs = tape.add(ones, masked_delta)?;
        let s_keys = if seq.len() > n {
            let pad = tape.input(
                Tensor::matrix(1, seq.len() - n, vec![1.0; seq.len() - n]).expect("sized"),
            );
            tape.concat_cols(&[s_inputs, pad])?
        } else {
            s_inputs
        };

        let targets: Vec<TokenId> = {
            let mut t: Vec<TokenId> = seq[1..].to_vec();
            t.push(gold);
            t
        };
        let mut supervised = vec![false; seq.len()];
        supervised[seq.len() - 1] = true;
        let build = build_forward(
            &mut tape,
            params,
            EmbedSource::Ids(seq),
            &ForwardOptions {
                dropout: None,
                reweight_last: Some(ReweightSource::OnTape(s_keys)),
                reweight_all_layers: opts.apply_to_all_layers,
                supervision: Some(crate::model::Supervision {
                    targets: &targets,
                    supervised: &supervised,
                    penalty_mask: None,
                    lambda: 0.0,
                }),
            },
        )?;
        let loss_id = build.loss.expect("supervised");
        let loss = tape.value(loss_id).data()[0];
        history.push(loss);

        let seed = Tensor::filled(tape.value(loss_id).shape().to_vec(), 1.0);
        let grads = tape.backward(loss_id, &seed)?;
        let grad_tensors: Vec<Tensor> = gat_param_ids
            .iter()
            .zip(shapes.iter())
            .map(|(&pid, shape)| grads.get_or_zeros(pid, shape))
            .collect();
        optimizer.step(gat.tensors_mut(), &grad_tensors, spec.learning_rate, 0.0);
    }

    Ok(GatTrainReport {
        loss_history: history,
        skipped,
    })
}
