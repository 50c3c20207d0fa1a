//! Error types, one enum per subsystem.

use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised while building or evaluating computation records.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("seed gradient shape {seed:?} does not match output shape {output:?}")]
    SeedShapeMismatch { seed: Vec<usize>, output: Vec<usize> },
    #[error("value id {0} does not exist on this tape")]
    UnknownValue(usize),
    #[error("value id {0} is not an input")]
    NotAnInput(usize),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence length {needed} exceeds context length {context_length}")]
    ContextOverflow {
        needed: usize,
        context_length: usize,
    },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("training diverged at step {step}: {diagnostic}")]
    Diverged { step: usize, diagnostic: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch: alpha is {alpha_rows}x{alpha_cols}, attributions are {attr_rows}x{attr_cols}")]
    ShapeMismatch {
        alpha_rows: usize,
        alpha_cols: usize,
        attr_rows: usize,
        attr_cols: usize,
    },
    #[error("trace {step} is missing or too short for the generation step it should cover")]
    BadTrace { step: usize },
    #[error("token list length {got} does not match matrix dimension {expected}")]
    TokenCount { expected: usize, got: usize },
    #[error("graph import: {0}")]
    Import(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("fact field `{0}` is empty")]
    EmptyField(&'static str),
    #[error(
        "conflicting facts for ({subject}, {relation}): existing value `{existing}`, new value `{incoming}`"
    )]
    Conflict {
        subject: String,
        relation: String,
        existing: String,
        incoming: String,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReweightError {
    #[error("suppression factor at position {pos} is {value}; factors must be positive")]
    NonPositiveFactor { pos: usize, value: f64 },
    #[error("plan covers {plan_len} key positions but the row has {row_len}")]
    PlanLength { plan_len: usize, row_len: usize },
    #[error("node features have dimension {got}, parameters expect {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("invalid graph-attention parameter `{field}`: {message}")]
    InvalidParams { field: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("attribution: {0}")]
    Attribution(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("invalid corpus spec field `{field}`: {message}")]
    InvalidSpec { field: &'static str, message: String },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("episode prompts differ; reports compare runs of the same prompt")]
    PromptMismatch,
    #[error("seed {seed}: {source}")]
    Seeded {
        seed: u64,
        #[source]
        source: alloc::boxed::Box<EvalError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
}
