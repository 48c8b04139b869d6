//! Every differentiable primitive is checked against central finite
//! differences at random points, in 64-bit.

use pccot_core::{grad_check, NodeId, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    use pccot_core::Scalar;
    let data = (0..rows * cols).map(|_| f64::sample_standard_normal(rng)).collect();
    Tensor::new(rows, cols, data)
}

/// Reduce any tensor to a scalar through mse against zeros, so each
/// primitive can be checked with a generic harness.
fn to_scalar(tape: &mut Tape<f64>, node: NodeId) -> NodeId {
    let shape = tape.value(node).shape();
    let zeros = tape.constant(Tensor::zeros(shape[0], shape[1]));
    tape.mse(node, zeros).unwrap()
}

fn check(build: impl Fn(&mut Tape<f64>, &mut ChaCha8Rng) -> (NodeId, Vec<NodeId>), seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let (out, params) = build(&mut tape, &mut rng);
    let loss = to_scalar(&mut tape, out);
    for p in params {
        tape.reset_grads();
        let err = grad_check(&mut tape, loss, p, 1e-5, &mut rng).unwrap();
        assert!(err <= 1e-5, "FD mismatch {err} (seed {seed})");
    }
}

#[test]
fn matmul_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 4, 6));
            let b = t.param(randn(r, 6, 3));
            (t.matmul(a, b).unwrap(), vec![a, b])
        },
        1,
    );
}

#[test]
fn matmul_nt_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 4, 6));
            let b = t.param(randn(r, 5, 6));
            (t.matmul_nt(a, b).unwrap(), vec![a, b])
        },
        2,
    );
}

#[test]
fn add_mul_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 3, 5));
            let b = t.param(randn(r, 3, 5));
            let s = t.add(a, b).unwrap();
            (t.mul(s, b).unwrap(), vec![a, b])
        },
        3,
    );
}

#[test]
fn bias_and_scale_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 4, 5));
            let bias = t.param(randn(r, 1, 5));
            let s = t.add_bias_row(a, bias).unwrap();
            (t.scale(s, 0.37).unwrap(), vec![a, bias])
        },
        4,
    );
}

#[test]
fn gelu_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 3, 7));
            (t.gelu(a).unwrap(), vec![a])
        },
        5,
    );
}

#[test]
fn layer_norm_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 4, 8));
            let gamma = t.param(randn(r, 1, 8));
            let beta = t.param(randn(r, 1, 8));
            (t.layer_norm(a, gamma, beta).unwrap(), vec![a, gamma, beta])
        },
        6,
    );
}

#[test]
fn softmax_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 3, 9));
            (t.softmax_rows(a).unwrap(), vec![a])
        },
        7,
    );
}

#[test]
fn masked_softmax_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 4, 9));
            (t.masked_softmax_rows(a, vec![1, 4, 7, 9]).unwrap(), vec![a])
        },
        8,
    );
}

#[test]
fn gather_rows_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 6, 4));
            // repeated index exercises gradient accumulation into one row
            (t.gather_rows(a, vec![2, 2, 5, 0]).unwrap(), vec![a])
        },
        9,
    );
}

#[test]
fn concat_and_slice_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 2, 4));
            let b = t.param(randn(r, 3, 4));
            let c = t.param(randn(r, 5, 2));
            let rows = t.concat_rows(a, b).unwrap();
            let cols = t.concat_cols(rows, c).unwrap();
            (t.slice_cols(cols, 1, 4).unwrap(), vec![a, b, c])
        },
        10,
    );
}

#[test]
fn cross_entropy_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let logits = tape.param(randn(&mut rng, 5, 12));
    let loss = tape.cross_entropy(logits, vec![0, 3, 11, 7, 7]).unwrap();
    let err = grad_check(&mut tape, loss, logits, 1e-5, &mut rng).unwrap();
    assert!(err <= 1e-5, "cross entropy FD mismatch {err}");
}

#[test]
fn l1_distance_grads() {
    // softmax outputs keep the distributions normalized while perturbing
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new();
    let a = tape.param(randn(&mut rng, 1, 8));
    let b = tape.param(randn(&mut rng, 1, 8));
    let p = tape.softmax_rows(a).unwrap();
    let q = tape.softmax_rows(b).unwrap();
    let loss = tape.l1_distance(p, q).unwrap();
    for param in [a, b] {
        tape.reset_grads();
        let err = grad_check(&mut tape, loss, param, 1e-5, &mut rng).unwrap();
        assert!(err <= 1e-5, "l1 FD mismatch {err}");
    }
}

#[test]
fn mse_grads() {
    check(
        |t, r| {
            let a = t.param(randn(r, 3, 4));
            let b = t.param(randn(r, 3, 4));
            (t.mse(a, b).unwrap(), vec![a, b])
        },
        13,
    );
}
