//! Training: AdamW over the tape gradients, cross-entropy plus an
//! evidence-attention penalty.
//!
//! The penalty term pushes the final layer's head-averaged attention at the
//! supervised positions toward the annotated evidence span: it is the mean
//! attention mass landing outside that span, so it is zero exactly when all
//! of it lands inside, differentiable, and cheap.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::math;
use crate::model::{
    build_forward, AttentionTrace, DropoutCtx, EmbedSource, ForwardOptions, ModelParams,
    Supervision,
};
use crate::rng::{derive_seed, DetRng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::TokenId;

/// Learning rate used when fine-tuning a large pretrained model of this
/// architecture family; kept as a named constant for reference. Training the
/// toy model from scratch does not converge with it in any reasonable number
/// of steps, hence the 100x larger default below.
pub const PRETRAINED_FINETUNE_LR: f64 = 2e-5;

pub const DEFAULT_TOY_LR: f64 = 2e-3;

fn default_lr() -> f64 {
    DEFAULT_TOY_LR
}
fn default_batch() -> usize {
    16
}
fn default_steps() -> usize {
    250
}
fn default_lambda() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

/// Which positions the attention penalty covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegPositions {
    /// Only the positions generating annotated answer tokens (default).
    AnswerOnly,
    /// Every next-token position.
    All,
}

impl Default for RegPositions {
    fn default() -> Self {
        RegPositions::AnswerOnly
    }
}

/// Optimizer: AdamW with the standard moment coefficients (0.9, 0.999).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    /// Weight of the evidence-attention penalty; 0 leaves the loss exactly
    /// equal to the cross-entropy.
    #[serde(default = "default_lambda")]
    pub causal_reg_weight: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub dropout: bool,
    #[serde(default)]
    pub reg_positions: RegPositions,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_steps: default_steps(),
            causal_reg_weight: default_lambda(),
            weight_decay: default_weight_decay(),
            seed: 0,
            dropout: true,
            reg_positions: RegPositions::AnswerOnly,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig {
                field: "learning_rate",
                message: format!("{} must be positive", self.learning_rate),
            });
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig {
                field: "batch_size",
                message: String::from("must be at least 1"),
            });
        }
        Ok(())
    }
}

/// One training sequence with its evidence and answer annotations
/// (half-open spans over token positions).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub evidence_span: (usize, usize),
    pub target_span: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean batch loss recorded at every step, pre-update.
    pub loss_history: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW state over an ordered tensor list (the model's canonical parameter
/// order, or any other fixed enumeration).
pub(crate) struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: usize,
}

impl AdamW {
    pub(crate) fn for_shapes(shapes: &[Vec<usize>]) -> Self {
        AdamW {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            steps: 0,
        }
    }

    fn new(params: &ModelParams) -> Self {
        let shapes: Vec<Vec<usize>> = params
            .tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        AdamW::for_shapes(&shapes)
    }

    pub(crate) fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - math::exp(t * math::ln(ADAM_BETA1));
        let bc2 = 1.0 - math::exp(t * math::ln(ADAM_BETA2));
        for (idx, p) in params.into_iter().enumerate() {
            // Decay only matrices; biases and norm parameters are exempt.
            let decay = if p.shape().len() >= 2 { weight_decay } else { 0.0 };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let g = grads[idx].data();
            for ((pi, mi), (vi, gi)) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(g.iter()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * (m_hat / (math::sqrt(v_hat) + ADAM_EPS) + decay * *pi);
            }
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.step(params.tensors_mut(), grads, lr, weight_decay);
    }
}

/// Penalty rows for one example under the configured policy: the positions
/// whose attention rows generate the supervised tokens.
fn penalty_rows(example: &TrainExample, positions: RegPositions) -> Vec<usize> {
    match positions {
        RegPositions::AnswerOnly => {
            let (start, end) = example.target_span;
            (start..end).filter_map(|t| t.checked_sub(1)).collect()
        }
        RegPositions::All => (0..example.tokens.len() - 1).collect(),
    }
}

fn build_penalty_mask(example: &TrainExample, rows: &[usize]) -> Option<Tensor> {
    if rows.is_empty() {
        return None;
    }
    let t = example.tokens.len();
    let (ev_start, ev_end) = example.evidence_span;
    let mut mask = Tensor::zeros(vec![t, t]);
    let w = 1.0 / rows.len() as f64;
    for &r in rows {
        for j in 0..t {
            if j < ev_start || j >= ev_end {
                mask.set(r, j, w);
            }
        }
    }
    Some(mask)
}

fn validate_example(example: &TrainExample, context_length: usize) -> Result<(), ModelError> {
    let t = example.tokens.len();
    if t < 2 {
        return Err(ModelError::InvalidConfig {
            field: "corpus",
            message: String::from("training sequences need at least 2 tokens"),
        });
    }
    if t > context_length {
        return Err(ModelError::ContextOverflow {
            needed: t,
            context_length,
        });
    }
    let (ts, te) = example.target_span;
    let (es, ee) = example.evidence_span;
    if ts >= te || te > t || ts == 0 {
        return Err(ModelError::InvalidConfig {
            field: "target_span",
            message: format!("({ts}, {te}) invalid for length {t}"),
        });
    }
    if es >= ee || ee > t {
        return Err(ModelError::InvalidConfig {
            field: "evidence_span",
            message: format!("({es}, {ee}) invalid for length {t}"),
        });
    }
    Ok(())
}

/// Train in place. The loss of each step is recorded before the update; a
/// non-finite loss or parameter aborts with the step index.
pub fn train(
    params: &mut ModelParams,
    corpus: &[TrainExample],
    spec: &TrainSpec,
) -> Result<TrainReport, ModelError> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::InvalidConfig {
            field: "corpus",
            message: String::from("no training examples"),
        });
    }
    for e in corpus {
        validate_example(e, params.config.context_length)?;
    }

    let dropout_seed = derive_seed(spec.seed, "dropout");
    let mut order_rng = DetRng::labeled(spec.seed, "order");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut optimizer = AdamW::new(params);
    let mut history = Vec::with_capacity(spec.max_steps);

    for step in 1..=spec.max_steps {
        // Assemble the batch, reshuffling at epoch boundaries.
        let mut batch = Vec::with_capacity(spec.batch_size);
        for _ in 0..spec.batch_size {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let shapes: Vec<Vec<usize>> = params
            .tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let mut grad_acc: Vec<Tensor> =
            shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        let mut batch_loss = 0.0;

        for (k, &idx) in batch.iter().enumerate() {
            let example = &corpus[idx];
            let t = example.tokens.len();
            let targets: Vec<TokenId> =
                example.tokens[1..].iter().copied().chain([0]).collect();
            let mut supervised = vec![true; t];
            supervised[t - 1] = false;

            let rows = penalty_rows(example, spec.reg_positions);
            let penalty_mask = if spec.causal_reg_weight != 0.0 {
                build_penalty_mask(example, &rows)
            } else {
                None
            };

            let mut tape = Tape::new();
            let build = build_forward(
                &mut tape,
                params,
                EmbedSource::Ids(&example.tokens),
                &ForwardOptions {
                    dropout: if spec.dropout && params.config.dropout_rate > 0.0 {
                        Some(DropoutCtx {
                            rate: params.config.dropout_rate,
                            seed: dropout_seed,
                            // Distinct stream per example slot within the step.
                            step: (step as u64) * 64 + k as u64,
                        })
                    } else {
                        None
                    },
                    reweight_last: None,
                    reweight_all_layers: false,
                    supervision: Some(Supervision {
                        targets: &targets,
                        supervised: &supervised,
                        penalty_mask,
                        lambda: spec.causal_reg_weight,
                    }),
                },
            )?;
            let loss_id = build.loss.expect("supervised build");
            let loss = tape.value(loss_id).data()[0];
            batch_loss += loss;

            let seed = Tensor::filled(tape.value(loss_id).shape().to_vec(), 1.0);
            let grads = tape.backward(loss_id, &seed)?;
            for (slot, &pid) in grad_acc.iter_mut().zip(build.param_ids.iter()) {
                if let Some(g) = grads.get(pid) {
                    for (acc, gv) in slot.data_mut().iter_mut().zip(g.data()) {
                        *acc += gv;
                    }
                }
            }
        }

        let inv = 1.0 / batch.len() as f64;
        for g in grad_acc.iter_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        batch_loss *= inv;
        history.push(batch_loss);

        if !batch_loss.is_finite() {
            return Err(ModelError::Diverged {
                step,
                diagnostic: format!("batch loss is {batch_loss}"),
            });
        }

        optimizer.update(params, &grad_acc, spec.learning_rate, spec.weight_decay);

        if !params.all_finite() {
            return Err(ModelError::Diverged {
                step,
                diagnostic: String::from("non-finite parameter after update"),
            });
        }
    }

    Ok(TrainReport {
        initial_loss: history[0],
        final_loss: *history.last().unwrap(),
        loss_history: history,
    })
}

/// Reference computation of the evidence-attention penalty from a recorded
/// trace: mean over `rows` of final-layer head-averaged attention mass
/// outside `evidence_span`. Mirrors the differentiable term built on the
/// tape during training; tests hold the two equal.
pub fn evidence_penalty(
    trace: &AttentionTrace,
    evidence_span: (usize, usize),
    rows: &[usize],
) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mean = trace.head_mean(trace.num_layers() - 1);
    let (es, ee) = evidence_span;
    let mut total = 0.0;
    for &r in rows {
        for j in 0..mean.cols() {
            if j < es || j >= ee {
                total += mean.at(r, j);
            }
        }
    }
    total / rows.len() as f64
}
