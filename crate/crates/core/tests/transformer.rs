//! Transformer contract tests: KV-cache equivalence, causality, injection
//! consistency, checkpoint round-trips.

use pccot_core::checkpoint::{restore, restore_expecting, snapshot};
use pccot_core::model::{
    forward, greedy_pick, lm_head, InputSegment, KVCache, ModelConfig, PositionInput,
    segments_from_positions, TransformerWeights,
};
use pccot_core::{Precision, Tape, Tensor};

fn tiny_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 32,
        d_ff: 128,
        vocab: 64,
        max_positions: 64,
        precision,
    }
}

fn tiny64(seed: u64) -> TransformerWeights<f64> {
    TransformerWeights::init(tiny_config(Precision::F64), seed).unwrap()
}

fn token_run(ids: &[u32]) -> Vec<InputSegment<f64>> {
    vec![InputSegment::Tokens(ids.to_vec())]
}

#[test]
fn single_token_forward_has_width_d() {
    let w = tiny64(0);
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut cache = KVCache::new(w.config.layers);
    let h = forward(&mut tape, &tw, &token_run(&[5]), &mut cache, None).unwrap();
    assert_eq!(tape.value(h).shape(), [1, 32]);
    assert_eq!(cache.len(), 1);
}

#[test]
fn kv_cache_matches_full_recompute() {
    let w = tiny64(1);
    let prefix: Vec<u32> = vec![3, 1, 4, 1, 5, 9, 2, 6];
    let suffix: Vec<u32> = vec![5, 3, 5, 8, 9];

    // full recompute oracle
    let mut tape_full = Tape::new();
    let tw = w.insert_into(&mut tape_full, false);
    let mut cache_full = KVCache::new(w.config.layers);
    let all: Vec<u32> = prefix.iter().chain(&suffix).copied().collect();
    let h_full = forward(&mut tape_full, &tw, &token_run(&all), &mut cache_full, None).unwrap();

    // cached incremental
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut cache = KVCache::new(w.config.layers);
    forward(&mut tape, &tw, &token_run(&prefix), &mut cache, None).unwrap();
    let h_inc = forward(&mut tape, &tw, &token_run(&suffix), &mut cache, None).unwrap();

    let full = tape_full.value(h_full);
    let inc = tape.value(h_inc);
    let mut max_diff = 0.0f64;
    for i in 0..suffix.len() {
        for (a, b) in full.row(prefix.len() + i).iter().zip(inc.row(i)) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    assert!(max_diff <= 1e-10, "cached vs recompute diff {max_diff}");
}

#[test]
fn kv_cache_matches_full_recompute_f32() {
    let w: TransformerWeights<f32> =
        TransformerWeights::init(tiny_config(Precision::F32), 2).unwrap();
    let prefix: Vec<u32> = vec![10, 20, 30];
    let suffix: Vec<u32> = vec![40, 50];

    let mut tape_full = Tape::new();
    let tw = w.insert_into(&mut tape_full, false);
    let mut cache_full = KVCache::new(w.config.layers);
    let all: Vec<u32> = prefix.iter().chain(&suffix).copied().collect();
    let h_full =
        forward(&mut tape_full, &tw, &[InputSegment::Tokens(all)], &mut cache_full, None).unwrap();

    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut cache = KVCache::new(w.config.layers);
    forward(&mut tape, &tw, &[InputSegment::Tokens(prefix.clone())], &mut cache, None).unwrap();
    let h_inc =
        forward(&mut tape, &tw, &[InputSegment::Tokens(suffix.clone())], &mut cache, None).unwrap();

    let mut max_diff = 0.0f32;
    for i in 0..suffix.len() {
        for (a, b) in tape_full.value(h_full).row(prefix.len() + i).iter().zip(tape.value(h_inc).row(i)) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    assert!(max_diff <= 1e-5, "cached vs recompute diff {max_diff}");
}

#[test]
fn causality_perturbation_leaves_earlier_positions_unchanged() {
    let w = tiny64(3);
    let base: Vec<u32> = vec![7, 8, 9, 10, 11, 12];
    let mut perturbed = base.clone();
    perturbed[4] = 33; // change position 4; positions 0..4 must be untouched

    let run = |ids: &[u32]| {
        let mut tape = Tape::new();
        let tw = w.insert_into(&mut tape, false);
        let mut cache = KVCache::new(w.config.layers);
        let h = forward(&mut tape, &tw, &token_run(ids), &mut cache, None).unwrap();
        tape.value(h).clone()
    };
    let a = run(&base);
    let b = run(&perturbed);
    for pos in 0..4 {
        assert_eq!(a.row(pos), b.row(pos), "position {pos} changed");
    }
    assert_ne!(a.row(4), b.row(4));
}

#[test]
fn injecting_embedding_row_equals_token_input() {
    let w = tiny64(4);
    let token = 17u32;
    let prefix: Vec<u32> = vec![1, 2, 3];

    let run = |as_vector: bool| {
        let mut tape = Tape::new();
        let tw = w.insert_into(&mut tape, false);
        let mut cache = KVCache::new(w.config.layers);
        let mut inputs: Vec<PositionInput<f64>> =
            prefix.iter().map(|&t| PositionInput::Token(t)).collect();
        if as_vector {
            inputs.push(PositionInput::Vector(w.token_embedding.row(token as usize).to_vec()));
        } else {
            inputs.push(PositionInput::Token(token));
        }
        let segs = segments_from_positions(&inputs);
        let h = forward(&mut tape, &tw, &segs, &mut cache, None).unwrap();
        tape.value(h).clone()
    };
    let by_token = run(false);
    let by_vector = run(true);
    assert_eq!(by_token, by_vector, "injection of E[token] must be exact");
}

#[test]
fn attention_rows_sum_to_one() {
    use pccot_core::model::AttnRecorder;
    let w = tiny64(5);
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut cache = KVCache::new(w.config.layers);
    let mut rec = AttnRecorder::default();
    forward(&mut tape, &tw, &token_run(&[4, 8, 15, 16, 23, 42]), &mut cache, Some(&mut rec))
        .unwrap();
    assert_eq!(rec.records.len(), 2 * 2); // layers x heads
    for r in &rec.records {
        let probs = tape.value(r.probs);
        for row in 0..probs.rows() {
            let sum: f64 = probs.row(row).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "row {row} sums to {sum}");
        }
    }
}

#[test]
fn hidden_width_mismatch_is_rejected() {
    let w = tiny64(6);
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut cache = KVCache::new(w.config.layers);
    let bad = vec![InputSegment::Vectors(Tensor::row_vector(vec![0.0f64; 16]))];
    assert!(forward(&mut tape, &tw, &bad, &mut cache, None).is_err());
}

#[test]
fn position_overflow_is_rejected() {
    let w = tiny64(7);
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut cache = KVCache::new(w.config.layers);
    let too_long: Vec<u32> = (0..65).map(|i| (i % 64) as u32).collect();
    let err = forward(&mut tape, &tw, &token_run(&too_long), &mut cache, None).unwrap_err();
    assert!(err.to_string().contains("maximum positions"));
}

#[test]
fn lm_head_is_tied_to_embedding() {
    let w = tiny64(8);
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut cache = KVCache::new(w.config.layers);
    let h = forward(&mut tape, &tw, &token_run(&[1, 2]), &mut cache, None).unwrap();
    let logits = lm_head(&mut tape, &tw, h).unwrap();
    assert_eq!(tape.value(logits).shape(), [2, 64]);

    // explicit multiply oracle: logits[r][v] = dot(h[r], E[v])
    let hval = tape.value(h).clone();
    let lval = tape.value(logits).clone();
    for r in 0..2 {
        for v in (0..64).step_by(7) {
            let manual: f64 = hval
                .row(r)
                .iter()
                .zip(w.token_embedding.row(v))
                .map(|(a, b)| a * b)
                .sum();
            assert!((manual - lval.get(r, v)).abs() <= 1e-10);
        }
    }
}

#[test]
fn zero_hidden_gives_uniform_logits() {
    let w = tiny64(9);
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let zero = tape.constant(Tensor::zeros(1, 32));
    let logits = lm_head(&mut tape, &tw, zero).unwrap();
    let sm = tape.softmax_rows(logits).unwrap();
    for &p in tape.value(sm).data() {
        assert!((p - 1.0 / 64.0).abs() <= 1e-12);
    }
}

#[test]
fn greedy_tie_breaks_to_lowest_id() {
    assert_eq!(greedy_pick(&[0.0f64; 5]), 0);
    assert_eq!(greedy_pick(&[1.0, 3.0, 3.0, 2.0f64]), 1);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let w = tiny64(10);
    let h1 = snapshot(&w, &path).unwrap();
    let restored: TransformerWeights<f64> = restore(&path).unwrap();
    assert_eq!(w, restored);

    // hash stable across two writes of the same weights
    let path2 = dir.path().join("model2.ckpt");
    let h2 = snapshot(&w, &path2).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_wrong_config_is_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let w = tiny64(11);
    snapshot(&w, &path).unwrap();

    let mut other = tiny_config(Precision::F64);
    other.layers = 3;
    let err = restore_expecting::<f64>(&path, &other).unwrap_err();
    assert!(err.to_string().contains("config mismatch"), "{err}");

    // wrong precision is also a config mismatch
    let err32 = restore::<f32>(&path).unwrap_err();
    assert!(err32.to_string().contains("precision"), "{err32}");
}

#[test]
fn checkpoint_truncation_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let w = tiny64(12);
    snapshot(&w, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
    assert!(restore::<f64>(&path).is_err());
}

#[test]
fn forward_determinism_bytes() {
    let w = tiny64(13);
    let run = || {
        let mut tape = Tape::new();
        let tw = w.insert_into(&mut tape, false);
        let mut cache = KVCache::new(w.config.layers);
        let h = forward(&mut tape, &tw, &token_run(&[9, 9, 9, 1]), &mut cache, None).unwrap();
        tape.value(h).to_le_bytes()
    };
    assert_eq!(run(), run());
}
