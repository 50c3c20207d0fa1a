//! Central finite-difference checks for every tape primitive, plus the
//! hand-rolled loop oracle for a small recorded MLP.
//!
//! Each case builds a record applying one primitive to random inputs, reduces
//! the output to a scalar through a fixed random probe, and compares the
//! analytic gradient of every probed input against central differences at
//! relative tolerance 1e-6 (100 random cases per op).

use factgraph_core::rng::DetRng;
use factgraph_core::tape::{finite_diff_check, Tape, ValueId};
use factgraph_core::Tensor;

const CASES: usize = 100;
const EPS: f64 = 5e-6;
const TOL: f64 = 1e-6;

/// Reduce `id` (r x c) to a scalar: ones_row @ (id .* probe) @ ones_col.
fn scalarize(tape: &mut Tape, id: ValueId, probe: Tensor) -> ValueId {
    let rows = tape.value(id).rows();
    let cols = tape.value(id).cols();
    let p = tape.input(probe);
    let weighted = tape.mul(id, p).unwrap();
    let ones_row = tape.input(Tensor::matrix(1, rows, vec![1.0; rows]).unwrap());
    let ones_col = tape.input(Tensor::matrix(cols, 1, vec![1.0; cols]).unwrap());
    let partial = tape.matmul(ones_row, weighted).unwrap();
    tape.matmul(partial, ones_col).unwrap()
}

/// Run finite differences on `target_input` of a built tape whose scalar
/// output is `loss`.
fn check_input(tape: &mut Tape, loss: ValueId, target_input: ValueId) {
    let x0 = tape.value(target_input).clone();
    let seed = Tensor::filled(tape.value(loss).shape().to_vec(), 1.0);
    let grads = tape.backward(loss, &seed).unwrap();
    let analytic = grads.get_or_zeros(target_input, x0.shape());
    let report = finite_diff_check(
        |probe| {
            tape.set_input(target_input, probe.clone()).unwrap();
            tape.recompute();
            let v = tape.value(loss).data()[0];
            v
        },
        &x0,
        &analytic,
        EPS,
        TOL,
    );
    // Restore before the caller reuses the tape.
    tape.set_input(target_input, x0).unwrap();
    tape.recompute();
    assert!(
        report.passed,
        "max rel err {} (non-finite {})",
        report.max_rel_err, report.non_finite_count
    );
}

fn randn(rng: &mut DetRng, r: usize, c: usize, std: f64) -> Tensor {
    Tensor::randn(vec![r, c], std, rng)
}

/// Random values bounded away from zero, for kinked activations.
fn randn_off_kink(rng: &mut DetRng, r: usize, c: usize, kink: f64, margin: f64) -> Tensor {
    let mut t = randn(rng, r, c, 1.0);
    for v in t.data_mut() {
        if (*v - kink).abs() < margin {
            *v = kink + margin * 2.0 * if *v >= kink { 1.0 } else { -1.0 };
        }
    }
    t
}

#[test]
fn matmul_gradients() {
    let mut rng = DetRng::labeled(101, "matmul");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let a = tape.input(randn(&mut rng, 3, 4, 1.0));
        let b = tape.input(randn(&mut rng, 4, 2, 1.0));
        let c = tape.matmul(a, b).unwrap();
        let loss = scalarize(&mut tape, c, randn(&mut rng, 3, 2, 1.0));
        check_input(&mut tape, loss, a);
        check_input(&mut tape, loss, b);
    }
}

#[test]
fn transpose_gradients() {
    let mut rng = DetRng::labeled(101, "transpose");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let a = tape.input(randn(&mut rng, 3, 5, 1.0));
        let t = tape.transpose(a).unwrap();
        let loss = scalarize(&mut tape, t, randn(&mut rng, 5, 3, 1.0));
        check_input(&mut tape, loss, a);
    }
}

#[test]
fn add_and_bias_gradients() {
    let mut rng = DetRng::labeled(101, "add");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let a = tape.input(randn(&mut rng, 3, 4, 1.0));
        let b = tape.input(randn(&mut rng, 3, 4, 1.0));
        let bias = tape.input(Tensor::vector(randn(&mut rng, 1, 4, 1.0).into_data()));
        let s = tape.add(a, b).unwrap();
        let s = tape.add_bias(s, bias).unwrap();
        let loss = scalarize(&mut tape, s, randn(&mut rng, 3, 4, 1.0));
        check_input(&mut tape, loss, a);
        check_input(&mut tape, loss, b);
        check_input(&mut tape, loss, bias);
    }
}

#[test]
fn mul_and_scale_gradients() {
    let mut rng = DetRng::labeled(101, "mul");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let a = tape.input(randn(&mut rng, 2, 5, 1.0));
        let b = tape.input(randn(&mut rng, 2, 5, 1.0));
        let m = tape.mul(a, b).unwrap();
        let m = tape.scale(m, -1.7);
        let loss = scalarize(&mut tape, m, randn(&mut rng, 2, 5, 1.0));
        check_input(&mut tape, loss, a);
        check_input(&mut tape, loss, b);
    }
}

#[test]
fn slice_and_concat_gradients() {
    let mut rng = DetRng::labeled(101, "slice");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let a = tape.input(randn(&mut rng, 4, 6, 1.0));
        let left = tape.slice_cols(a, 0, 2).unwrap();
        let right = tape.slice_cols(a, 2, 4).unwrap();
        let rows = tape.slice_rows(a, 1, 2).unwrap();
        let joined = tape.concat_cols(&[right, left]).unwrap();
        let l1 = scalarize(&mut tape, joined, randn(&mut rng, 4, 6, 1.0));
        let l2 = scalarize(&mut tape, rows, randn(&mut rng, 2, 6, 1.0));
        let loss = tape.add(l1, l2).unwrap();
        check_input(&mut tape, loss, a);
    }
}

#[test]
fn softmax_gradients() {
    let mut rng = DetRng::labeled(101, "softmax");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let a = tape.input(randn(&mut rng, 3, 5, 2.0));
        let y = tape.softmax(a).unwrap();
        let loss = scalarize(&mut tape, y, randn(&mut rng, 3, 5, 1.0));
        check_input(&mut tape, loss, a);
    }
}

#[test]
fn masked_softmax_gradients() {
    let mut rng = DetRng::labeled(101, "masked");
    for _ in 0..CASES {
        let rows = 4;
        let cols = 4;
        // Causal mask: row r keeps columns 0..=r.
        let mut mask = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..=r {
                mask[r * cols + c] = true;
            }
        }
        let mut tape = Tape::new();
        let a = tape.input(randn(&mut rng, rows, cols, 2.0));
        let y = tape.masked_softmax(a, mask).unwrap();
        let loss = scalarize(&mut tape, y, randn(&mut rng, rows, cols, 1.0));
        check_input(&mut tape, loss, a);
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = DetRng::labeled(101, "layernorm");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let x = tape.input(randn(&mut rng, 3, 6, 1.5));
        let gamma = tape.input(Tensor::vector(
            randn(&mut rng, 1, 6, 0.5).into_data().iter().map(|v| v + 1.0).collect(),
        ));
        let beta = tape.input(Tensor::vector(randn(&mut rng, 1, 6, 0.5).into_data()));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        let loss = scalarize(&mut tape, y, randn(&mut rng, 3, 6, 1.0));
        check_input(&mut tape, loss, x);
        check_input(&mut tape, loss, gamma);
        check_input(&mut tape, loss, beta);
    }
}

#[test]
fn activation_gradients() {
    let mut rng = DetRng::labeled(101, "activations");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let x_gelu = tape.input(randn(&mut rng, 2, 4, 1.5));
        let x_relu = tape.input(randn_off_kink(&mut rng, 2, 4, 0.0, 0.05));
        let x_leaky = tape.input(randn_off_kink(&mut rng, 2, 4, 0.0, 0.05));
        let x_sig = tape.input(randn(&mut rng, 2, 4, 1.5));
        let y1 = tape.gelu(x_gelu);
        let y2 = tape.relu(x_relu);
        let y3 = tape.leaky_relu(x_leaky, 0.2);
        let y4 = tape.sigmoid(x_sig);
        let l1 = scalarize(&mut tape, y1, randn(&mut rng, 2, 4, 1.0));
        let l2 = scalarize(&mut tape, y2, randn(&mut rng, 2, 4, 1.0));
        let l3 = scalarize(&mut tape, y3, randn(&mut rng, 2, 4, 1.0));
        let l4 = scalarize(&mut tape, y4, randn(&mut rng, 2, 4, 1.0));
        let s1 = tape.add(l1, l2).unwrap();
        let s2 = tape.add(l3, l4).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        check_input(&mut tape, loss, x_gelu);
        check_input(&mut tape, loss, x_relu);
        check_input(&mut tape, loss, x_leaky);
        check_input(&mut tape, loss, x_sig);
    }
}

#[test]
fn ln_and_clamp_gradients() {
    let mut rng = DetRng::labeled(101, "lnclamp");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        // Positive inputs in [0.5, 2.5] keep ln well conditioned.
        let mut pos = randn(&mut rng, 2, 4, 0.4);
        for v in pos.data_mut() {
            *v = 1.5 + v.clamp(-1.0, 1.0);
        }
        let x_ln = tape.input(pos);
        let x_clamp = tape.input(randn_off_kink(&mut rng, 2, 4, 0.3, 0.05));
        let y1 = tape.ln(x_ln);
        let y2 = tape.clamp_min(x_clamp, 0.3);
        let l1 = scalarize(&mut tape, y1, randn(&mut rng, 2, 4, 1.0));
        let l2 = scalarize(&mut tape, y2, randn(&mut rng, 2, 4, 1.0));
        let loss = tape.add(l1, l2).unwrap();
        check_input(&mut tape, loss, x_ln);
        check_input(&mut tape, loss, x_clamp);
    }
}

#[test]
fn embed_lookup_gradients() {
    let mut rng = DetRng::labeled(101, "embed");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let table = tape.input(randn(&mut rng, 6, 3, 1.0));
        let ids = vec![
            rng.below(6),
            rng.below(6),
            rng.below(6),
            rng.below(6),
        ];
        let out = tape.embed_lookup(table, ids).unwrap();
        let loss = scalarize(&mut tape, out, randn(&mut rng, 4, 3, 1.0));
        check_input(&mut tape, loss, table);
    }
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = DetRng::labeled(101, "xent");
    for _ in 0..CASES {
        let mut tape = Tape::new();
        let logits = tape.input(randn(&mut rng, 4, 6, 1.0));
        let targets = vec![rng.below(6), rng.below(6), rng.below(6), rng.below(6)];
        let supervised = vec![true, rng.below(2) == 0, true, rng.below(2) == 0];
        let loss = tape.cross_entropy(logits, targets, supervised).unwrap();
        check_input(&mut tape, loss, logits);
    }
}

/// Forward oracle: a recorded 2-layer MLP with fixed random weights (seed 7)
/// must match an independently hand-rolled nested-loop computation to 1e-12.
#[test]
fn mlp_forward_matches_loop_oracle() {
    let mut rng = DetRng::new(7);
    let x0 = Tensor::randn(vec![2, 5], 1.0, &mut rng);
    let w1 = Tensor::randn(vec![5, 8], 0.5, &mut rng);
    let b1 = Tensor::vector(Tensor::randn(vec![8], 0.5, &mut rng).into_data());
    let w2 = Tensor::randn(vec![8, 3], 0.5, &mut rng);
    let b2 = Tensor::vector(Tensor::randn(vec![3], 0.5, &mut rng).into_data());

    let mut tape = Tape::new();
    let x = tape.input(x0.clone());
    let w1_id = tape.input(w1.clone());
    let b1_id = tape.input(b1.clone());
    let w2_id = tape.input(w2.clone());
    let b2_id = tape.input(b2.clone());
    let h = tape.matmul(x, w1_id).unwrap();
    let h = tape.add_bias(h, b1_id).unwrap();
    let h = tape.gelu(h);
    let y = tape.matmul(h, w2_id).unwrap();
    let y = tape.add_bias(y, b2_id).unwrap();
    let got = tape.value(y).clone();

    // Loop oracle, written directly against the math with no shared code.
    let gelu = |x: f64| {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    };
    for r in 0..2 {
        for out_col in 0..3 {
            let mut acc2 = b2.data()[out_col];
            for mid in 0..8 {
                let mut acc1 = b1.data()[mid];
                for k in 0..5 {
                    acc1 += x0.at(r, k) * w1.at(k, mid);
                }
                acc2 += gelu(acc1) * w2.at(mid, out_col);
            }
            assert!(
                (got.at(r, out_col) - acc2).abs() <= 1e-12,
                "({r},{out_col}): {} vs {acc2}",
                got.at(r, out_col)
            );
        }
    }
}

/// Determinism contract: same record, same inputs, bit-identical gradients.
#[test]
fn gradients_are_bit_deterministic() {
    let build = || {
        let mut rng = DetRng::new(23);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::randn(vec![3, 3], 1.0, &mut rng));
        let w = tape.input(Tensor::randn(vec![3, 3], 1.0, &mut rng));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.softmax(h).unwrap();
        let probe = tape.input(Tensor::randn(vec![3, 3], 1.0, &mut rng));
        let weighted = tape.mul(h, probe).unwrap();
        let ones_r = tape.input(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap());
        let ones_c = tape.input(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        let p = tape.matmul(ones_r, weighted).unwrap();
        let loss = tape.matmul(p, ones_c).unwrap();
        let grads = tape
            .backward(loss, &Tensor::matrix(1, 1, vec![1.0]).unwrap())
            .unwrap();
        (grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
    };
    let (gx1, gw1) = build();
    let (gx2, gw2) = build();
    assert!(gx1.bit_eq(&gx2));
    assert!(gw1.bit_eq(&gw2));
}
