//! Token-level causal graph: attention aggregation, causal contribution
//! scores, graph construction, and DOT/JSON export.
//!
//! Nodes are the input tokens plus the generated tokens; a directed edge
//! x_j -> y_i carries weight alpha_ij * I_ij, the product of aggregated
//! attention and integrated-gradients influence. The causal contribution
//! score of an output token is sum_j alpha_ij * |I_ij|: signs stay on the
//! edges, but a strongly negative influence is still a dependency, and a
//! signed sum could cancel to a spuriously low score.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMatrix;
use crate::error::GraphError;
use crate::math;
use crate::model::AttentionTrace;

/// How per-step attention traces collapse into one weight per
/// (output token, input token) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationPolicy {
    /// Mean over heads of the final layer (default: the last layer is where
    /// overgeneralization shows up, and the one the reweighting acts on).
    FinalLayerMeanHeads,
    /// Mean over heads and layers.
    AllLayersMean,
    /// Product of head-averaged layer matrices, propagating attention
    /// through depth. No identity mixing, so a 1-layer model degenerates
    /// exactly to [`AggregationPolicy::FinalLayerMeanHeads`].
    Rollout,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        AggregationPolicy::FinalLayerMeanHeads
    }
}

impl AggregationPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationPolicy::FinalLayerMeanHeads => "final_layer_mean_heads",
            AggregationPolicy::AllLayersMean => "all_layers_mean",
            AggregationPolicy::Rollout => "rollout",
        }
    }
}

/// Aggregated attention from each generation step to the input tokens.
///
/// Row i comes from the attention row of the position that generated output
/// token i, restricted to input columns and stored unrenormalized; the mass
/// that row put on input positions (vs. already-generated ones) is recorded
/// per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaMatrix {
    /// (generated tokens, input tokens).
    pub shape: (usize, usize),
    /// Row-major, input columns only.
    pub data: Vec<f64>,
    /// Fraction of each row's attention landing on input positions.
    pub input_row_mass: Vec<f64>,
    pub policy: AggregationPolicy,
    /// Full rows over every key position available at each step (inputs and
    /// prior outputs, zero-padded to n+m); kept for output-to-output edges.
    #[serde(skip)]
    pub full_rows: Vec<Vec<f64>>,
}

impl AlphaMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape.1;
        &self.data[i * n..(i + 1) * n]
    }
}

/// Collapse one step's trace into a single row for the generating position.
fn step_row(trace: &AttentionTrace, policy: AggregationPolicy) -> Vec<f64> {
    let t = trace.seq_len();
    let last = t - 1;
    match policy {
        AggregationPolicy::FinalLayerMeanHeads => {
            trace.head_mean(trace.num_layers() - 1).row(last).to_vec()
        }
        AggregationPolicy::AllLayersMean => {
            let mut acc = vec![0.0; t];
            for l in 0..trace.num_layers() {
                let mean = trace.head_mean(l);
                for (a, v) in acc.iter_mut().zip(mean.row(last)) {
                    *a += v;
                }
            }
            let inv = 1.0 / trace.num_layers() as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            acc
        }
        AggregationPolicy::Rollout => {
            // R = A_L @ ... @ A_1 of head-averaged layers; the generating row
            // of R is then row(last) of the product. Computed as a vector-
            // matrix product chain from the left.
            let mut row = vec![0.0; t];
            row[last] = 1.0;
            for l in (0..trace.num_layers()).rev() {
                let mean = trace.head_mean(l);
                let mut next = vec![0.0; t];
                for k in 0..t {
                    let w = row[k];
                    if w == 0.0 {
                        continue;
                    }
                    for (n, m) in next.iter_mut().zip(mean.row(k)) {
                        *n += w * m;
                    }
                }
                row = next;
            }
            row
        }
    }
}

/// Aggregate per-step traces into the alpha matrix. `traces[i]` must be the
/// trace of the forward pass that generated output token i (sequence length
/// n_inputs + i).
pub fn aggregate_attention(
    traces: &[AttentionTrace],
    n_inputs: usize,
    policy: AggregationPolicy,
) -> Result<AlphaMatrix, GraphError> {
    let m = traces.len();
    let total = n_inputs + m;
    let mut data = Vec::with_capacity(m * n_inputs);
    let mut input_row_mass = Vec::with_capacity(m);
    let mut full_rows = Vec::with_capacity(m);
    for (i, trace) in traces.iter().enumerate() {
        if trace.seq_len() != n_inputs + i {
            return Err(GraphError::BadTrace { step: i });
        }
        let row = step_row(trace, policy);
        let mass: f64 = row[..n_inputs].iter().sum();
        data.extend_from_slice(&row[..n_inputs]);
        input_row_mass.push(mass);
        let mut full = vec![0.0; total];
        full[..row.len()].copy_from_slice(&row);
        full_rows.push(full);
    }
    Ok(AlphaMatrix {
        shape: (m, n_inputs),
        data,
        input_row_mass,
        policy,
        full_rows,
    })
}

/// Causal contribution scores for an episode's output tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcsVector {
    /// sum_j alpha_ij * |I_ij| per output token.
    pub raw: Vec<f64>,
    /// Per-episode normalization of `raw` into [0, 1].
    pub normalized: Vec<f64>,
    /// Flagged when normalized CCS falls in the episode's bottom
    /// `flag_percentile` (no flags when all raw values are equal).
    pub low_ccs: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcsNorm {
    None,
    /// Episode minimum maps to 0, maximum to 1; a constant vector maps to
    /// all 1.0 so that no token looks suspicious when none stands out.
    RowMinMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcsOptions {
    pub norm: CcsNorm,
    /// Percentile rank (0..=100) under which a token is flagged, computed
    /// nearest-rank within the episode. 0 disables flagging entirely.
    pub flag_percentile: f64,
    /// Divide each raw score by its row's input attention mass before
    /// normalizing, compensating steps whose attention mostly sat on
    /// already-generated tokens. Off by default.
    pub renormalize_by_input_mass: bool,
}

impl Default for CcsOptions {
    fn default() -> Self {
        CcsOptions {
            norm: CcsNorm::RowMinMax,
            flag_percentile: 25.0,
            renormalize_by_input_mass: false,
        }
    }
}

fn check_shapes(alpha: &AlphaMatrix, attributions: &AttributionMatrix) -> Result<(), GraphError> {
    if alpha.shape != attributions.shape {
        return Err(GraphError::ShapeMismatch {
            alpha_rows: alpha.shape.0,
            alpha_cols: alpha.shape.1,
            attr_rows: attributions.shape.0,
            attr_cols: attributions.shape.1,
        });
    }
    Ok(())
}

/// Nearest-rank percentile flags over normalized scores. Exposed for the
/// reweighting planner, which recomputes flags under its own percentile.
pub fn percentile_flags(raw: &[f64], normalized: &[f64], percentile: f64) -> Vec<bool> {
    let m = raw.len();
    if m == 0 || percentile <= 0.0 {
        return vec![false; m];
    }
    let all_equal = raw.iter().all(|&v| v == raw[0]);
    if all_equal {
        return vec![false; m];
    }
    let rank = math::ceil(percentile / 100.0 * m as f64) as usize;
    if rank == 0 {
        return vec![false; m];
    }
    let mut sorted = normalized.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let threshold = sorted[rank.min(m) - 1];
    normalized.iter().map(|&v| v <= threshold).collect()
}

/// Causal contribution score per output token (Eq. alpha . |I| per row).
pub fn ccs(
    alpha: &AlphaMatrix,
    attributions: &AttributionMatrix,
    opts: &CcsOptions,
) -> Result<CcsVector, GraphError> {
    check_shapes(alpha, attributions)?;
    let (m, n) = alpha.shape;
    let mut raw = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..n {
            acc += alpha.data[i * n + j] * attributions.data[i * n + j].abs();
        }
        if opts.renormalize_by_input_mass {
            let mass = alpha.input_row_mass[i];
            if mass > 0.0 {
                acc /= mass;
            }
        }
        raw.push(acc);
    }
    let normalized = match opts.norm {
        CcsNorm::None => raw.clone(),
        CcsNorm::RowMinMax => {
            let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == 0 {
                Vec::new()
            } else if max == min {
                vec![1.0; m]
            } else {
                raw.iter().map(|&v| (v - min) / (max - min)).collect()
            }
        }
    };
    let low_ccs = percentile_flags(&raw, &normalized, opts.flag_percentile);
    Ok(CcsVector {
        raw,
        normalized,
        low_ccs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Input,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub token: String,
    pub pos: usize,
    pub role: NodeRole,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ccs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub alpha: f64,
    pub ig: f64,
    pub weight: f64,
}

/// Directed token graph over inputs and outputs. Input nodes come first
/// (ids 0..n by position), then output nodes (ids n..n+m).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalGraph {
    pub version: u32,
    pub tokens_in: Vec<String>,
    pub tokens_out: Vec<String>,
    pub policy: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

pub const GRAPH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    /// Edges with |weight| strictly below this are dropped (display-level
    /// pruning; node CCS is computed before pruning).
    pub prune_below: f64,
    /// Also add edges between output tokens (y_k -> y_i for k < i), using
    /// the full attention/attribution rows.
    pub include_output_edges: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            prune_below: 0.0,
            include_output_edges: false,
        }
    }
}

/// Assemble the graph: edge weights alpha_ij * I_ij (signed), node CCS from
/// the magnitude convention, pruning applied to edges only.
pub fn build_graph(
    alpha: &AlphaMatrix,
    attributions: &AttributionMatrix,
    tokens_in: &[String],
    tokens_out: &[String],
    opts: &GraphOptions,
    ccs_opts: &CcsOptions,
) -> Result<CausalGraph, GraphError> {
    check_shapes(alpha, attributions)?;
    let (m, n) = alpha.shape;
    if tokens_in.len() != n {
        return Err(GraphError::TokenCount {
            expected: n,
            got: tokens_in.len(),
        });
    }
    if tokens_out.len() != m {
        return Err(GraphError::TokenCount {
            expected: m,
            got: tokens_out.len(),
        });
    }
    let scores = ccs(alpha, attributions, ccs_opts)?;

    let mut nodes = Vec::with_capacity(n + m);
    for (j, tok) in tokens_in.iter().enumerate() {
        nodes.push(GraphNode {
            id: j,
            token: tok.clone(),
            pos: j,
            role: NodeRole::Input,
            ccs: None,
            f: None,
        });
    }
    for (i, tok) in tokens_out.iter().enumerate() {
        nodes.push(GraphNode {
            id: n + i,
            token: tok.clone(),
            pos: n + i,
            role: NodeRole::Output,
            ccs: Some(scores.raw[i]),
            f: None,
        });
    }

    let mut edges = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let a = alpha.data[i * n + j];
            let g = attributions.data[i * n + j];
            let w = a * g;
            if w.abs() >= opts.prune_below {
                edges.push(GraphEdge {
                    src: j,
                    dst: n + i,
                    alpha: a,
                    ig: g,
                    weight: w,
                });
            }
        }
        if opts.include_output_edges {
            for k in 0..i {
                let col = n + k;
                let a = alpha.full_rows[i][col];
                let g = attributions
                    .full_rows
                    .get(i)
                    .and_then(|r| r.get(col).copied())
                    .unwrap_or(0.0);
                let w = a * g;
                if w.abs() >= opts.prune_below {
                    edges.push(GraphEdge {
                        src: col,
                        dst: n + i,
                        alpha: a,
                        ig: g,
                        weight: w,
                    });
                }
            }
        }
    }

    Ok(CausalGraph {
        version: GRAPH_VERSION,
        tokens_in: tokens_in.to_vec(),
        tokens_out: tokens_out.to_vec(),
        policy: alpha.policy.name().to_string(),
        nodes,
        edges,
    })
}

impl CausalGraph {
    pub fn n_inputs(&self) -> usize {
        self.tokens_in.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.tokens_out.len()
    }

    /// Raw CCS attached to output nodes, in output order.
    pub fn output_ccs(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter(|n| n.role == NodeRole::Output)
            .map(|n| n.ccs.unwrap_or(0.0))
            .collect()
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Deterministic DOT rendering: nodes ordered by position, edges in build
/// order, pen width proportional to |weight| (dashed for negative weights).
pub fn export_dot(graph: &CausalGraph) -> String {
    let mut out = String::from("digraph causal {\n  rankdir=LR;\n");
    let max_w = graph
        .edges
        .iter()
        .map(|e| e.weight.abs())
        .fold(0.0_f64, f64::max);
    for node in &graph.nodes {
        let name = node_name(graph, node.id);
        match node.role {
            NodeRole::Input => {
                out.push_str(&format!(
                    "  {name} [label=\"{}@{}\" shape=box];\n",
                    dot_escape(&node.token),
                    node.pos
                ));
            }
            NodeRole::Output => {
                let ccs = node.ccs.unwrap_or(0.0);
                out.push_str(&format!(
                    "  {name} [label=\"{}@{}\\nccs={ccs:.6}\" shape=ellipse];\n",
                    dot_escape(&node.token),
                    node.pos
                ));
            }
        }
    }
    for edge in &graph.edges {
        let pen = if max_w > 0.0 {
            0.5 + 3.5 * edge.weight.abs() / max_w
        } else {
            0.5
        };
        let style = if edge.weight < 0.0 { " style=dashed" } else { "" };
        out.push_str(&format!(
            "  {} -> {} [penwidth={pen:.4}{style}];\n",
            node_name(graph, edge.src),
            node_name(graph, edge.dst)
        ));
    }
    out.push_str("}\n");
    out
}

fn node_name(graph: &CausalGraph, id: usize) -> String {
    let n = graph.n_inputs();
    if id < n {
        format!("x{id}")
    } else {
        format!("y{}", id - n)
    }
}

/// Lossless JSON export; [`import_json`] reproduces an equal graph.
pub fn export_json(graph: &CausalGraph) -> String {
    serde_json::to_string(graph).expect("graph serializes")
}

pub fn import_json(s: &str) -> Result<CausalGraph, GraphError> {
    let graph: CausalGraph =
        serde_json::from_str(s).map_err(|e| GraphError::Import(format!("{e}")))?;
    if graph.version != GRAPH_VERSION {
        return Err(GraphError::Import(format!(
            "unsupported version {} (expected {GRAPH_VERSION})",
            graph.version
        )));
    }
    if graph.nodes.len() != graph.tokens_in.len() + graph.tokens_out.len() {
        return Err(GraphError::Import(String::from(
            "node count does not match token lists",
        )));
    }
    Ok(graph)
}
