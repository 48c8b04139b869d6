//! Decoder-only transformer with causal attention, learned absolute
//! positions, KV caching, and per-position input injection: a position is
//! fed either a token embedding or an arbitrary hidden vector.
//!
//! Blocks are pre-norm, the LM head is weight-tied to the token embedding,
//! and the hidden state exposed to callers is taken after the final layer
//! norm (the choice is recorded in checkpoint headers).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Precision;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.vocab == 0 || self.max_positions == 0 {
            return Err(Error::InvalidArgument("layers, vocab and max_positions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S> {
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
    pub w_ff1: Tensor<S>,
    pub b_ff1: Tensor<S>,
    pub w_ff2: Tensor<S>,
    pub b_ff2: Tensor<S>,
}

/// All learnable parameters. The token embedding doubles as the LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights<S> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<S>,
    pub position_embedding: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_gamma: Tensor<S>,
    pub final_beta: Tensor<S>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> TransformerWeights<S> {
    /// Random initialization: N(0, 0.02) matrices, zero biases, unit norms.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != S::PRECISION {
            return Err(Error::ConfigMismatch {
                field: "precision",
                expected: S::PRECISION.to_string(),
                found: config.precision.to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, d_ff) = (config.d_model, config.d_ff);
        let mut normal = |rows: usize, cols: usize| -> Tensor<S> {
            let std = S::from_f64(INIT_STD);
            let data = (0..rows * cols)
                .map(|_| S::sample_standard_normal(&mut rng) * std)
                .collect();
            Tensor::new(rows, cols, data)
        };
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_gamma: ones(1, d),
                ln1_beta: Tensor::zeros(1, d),
                wq: normal(d, d),
                bq: Tensor::zeros(1, d),
                wk: normal(d, d),
                bk: Tensor::zeros(1, d),
                wv: normal(d, d),
                bv: Tensor::zeros(1, d),
                wo: normal(d, d),
                bo: Tensor::zeros(1, d),
                ln2_gamma: ones(1, d),
                ln2_beta: Tensor::zeros(1, d),
                w_ff1: normal(d, d_ff),
                b_ff1: Tensor::zeros(1, d_ff),
                w_ff2: normal(d_ff, d),
                b_ff2: Tensor::zeros(1, d),
            })
            .collect();
        let token_embedding = normal(config.vocab, d);
        let position_embedding = normal(config.max_positions, d);
        Ok(TransformerWeights {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gamma: ones(1, d),
            final_beta: Tensor::zeros(1, d),
        })
    }

    /// Fixed parameter enumeration order shared by the optimizer, the
    /// checkpoint format and gradient collection.
    pub fn param_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for l in 0..config.layers {
            for f in [
                "ln1_gamma", "ln1_beta", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln2_gamma", "ln2_beta", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
            ] {
                names.push(format!("layer{l}.{f}"));
            }
        }
        names.push("final_gamma".to_string());
        names.push("final_beta".to_string());
        names
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend([
                &l.ln1_gamma, &l.ln1_beta, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                &l.bo, &l.ln2_gamma, &l.ln2_beta, &l.w_ff1, &l.b_ff1, &l.w_ff2, &l.b_ff2,
            ]);
        }
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gamma, &mut l.ln1_beta, &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk,
                &mut l.wv, &mut l.bv, &mut l.wo, &mut l.bo, &mut l.ln2_gamma, &mut l.ln2_beta,
                &mut l.w_ff1, &mut l.b_ff1, &mut l.w_ff2, &mut l.b_ff2,
            ]);
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    /// Insert every parameter into a tape, preserving enumeration order.
    pub fn insert_into(&self, tape: &mut Tape<S>, trainable: bool) -> TapedWeights {
        let mut put = |t: &Tensor<S>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let token_embedding = put(&self.token_embedding);
        let position_embedding = put(&self.position_embedding);
        let layers: Vec<TapedLayer> = self
            .layers
            .iter()
            .map(|l| TapedLayer {
                ln1_gamma: put(&l.ln1_gamma),
                ln1_beta: put(&l.ln1_beta),
                wq: put(&l.wq),
                bq: put(&l.bq),
                wk: put(&l.wk),
                bk: put(&l.bk),
                wv: put(&l.wv),
                bv: put(&l.bv),
                wo: put(&l.wo),
                bo: put(&l.bo),
                ln2_gamma: put(&l.ln2_gamma),
                ln2_beta: put(&l.ln2_beta),
                w_ff1: put(&l.w_ff1),
                b_ff1: put(&l.b_ff1),
                w_ff2: put(&l.w_ff2),
                b_ff2: put(&l.b_ff2),
            })
            .collect();
        let final_gamma = put(&self.final_gamma);
        let final_beta = put(&self.final_beta);
        TapedWeights {
            config: self.config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_gamma,
            final_beta,
        }
    }
}

fn ones<S: Scalar>(rows: usize, cols: usize) -> Tensor<S> {
    Tensor::new(rows, cols, vec![S::one(); rows * cols])
}

#[derive(Debug, Clone, Copy)]
pub struct TapedLayer {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub w_ff1: NodeId,
    pub b_ff1: NodeId,
    pub w_ff2: NodeId,
    pub b_ff2: NodeId,
}

/// Node ids of all weights on one tape, in parameter enumeration order.
#[derive(Debug, Clone)]
pub struct TapedWeights {
    pub config: ModelConfig,
    pub token_embedding: NodeId,
    pub position_embedding: NodeId,
    pub layers: Vec<TapedLayer>,
    pub final_gamma: NodeId,
    pub final_beta: NodeId,
}

impl TapedWeights {
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            out.extend([
                l.ln1_gamma, l.ln1_beta, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                l.ln2_gamma, l.ln2_beta, l.w_ff1, l.b_ff1, l.w_ff2, l.b_ff2,
            ]);
        }
        out.push(self.final_gamma);
        out.push(self.final_beta);
        out
    }
}

/// Input for a run of new positions: token ids are embedded through the
/// embedding table; hidden rows are used verbatim as input vectors.
#[derive(Debug, Clone)]
pub enum InputSegment<S> {
    Tokens(Vec<u32>),
    /// `[rows, d_model]` node already on the tape (hidden-state feedback).
    Hidden(NodeId),
    /// `[rows, d_model]` raw vectors, entered as a constant.
    Vectors(Tensor<S>),
}

/// Per-position view of an input, mirroring the two-way duality between
/// embedded tokens and injected vectors.
#[derive(Debug, Clone)]
pub enum PositionInput<S> {
    Token(u32),
    Vector(Vec<S>),
}

pub fn segments_from_positions<S: Scalar>(inputs: &[PositionInput<S>]) -> Vec<InputSegment<S>> {
    let mut segments: Vec<InputSegment<S>> = Vec::new();
    for input in inputs {
        match input {
            PositionInput::Token(id) => {
                if let Some(InputSegment::Tokens(run)) = segments.last_mut() {
                    run.push(*id);
                } else {
                    segments.push(InputSegment::Tokens(vec![*id]));
                }
            }
            PositionInput::Vector(v) => {
                segments.push(InputSegment::Vectors(Tensor::row_vector(v.clone())));
            }
        }
    }
    segments
}

/// Per-layer attention keys/values for a contiguous prefix of positions.
///
/// Append-only: each forward extends it; `truncate_to_checkpoint` rolls back
/// to a recorded length (used between Jacobi iterations, where the query
/// prefix is reused but latent entries are replaced).
#[derive(Debug, Clone)]
pub struct KVCache {
    per_layer: Vec<LayerKV>,
    len: usize,
    saved: Option<(usize, Vec<LayerKV>)>,
}

#[derive(Debug, Clone, Default)]
struct LayerKV {
    k: Option<NodeId>,
    v: Option<NodeId>,
}

impl KVCache {
    pub fn new(layers: usize) -> Self {
        KVCache { per_layer: vec![LayerKV::default(); layers], len: 0, saved: None }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn record_checkpoint(&mut self) {
        self.saved = Some((self.len, self.per_layer.clone()));
    }

    /// Record a checkpoint at `len` positions, slicing the stored keys and
    /// values when the cache already extends past that point.
    pub fn checkpoint_at<S: Scalar>(&mut self, tape: &mut Tape<S>, len: usize) -> Result<()> {
        assert!(len <= self.len, "checkpoint beyond cache length");
        if len == self.len {
            self.record_checkpoint();
            return Ok(());
        }
        let rows: Vec<usize> = (0..len).collect();
        let mut layers = Vec::with_capacity(self.per_layer.len());
        for lkv in &self.per_layer {
            let k = match lkv.k {
                Some(node) => Some(tape.gather_rows(node, rows.clone())?),
                None => None,
            };
            let v = match lkv.v {
                Some(node) => Some(tape.gather_rows(node, rows.clone())?),
                None => None,
            };
            layers.push(LayerKV { k, v });
        }
        self.saved = Some((len, layers));
        Ok(())
    }

    pub fn truncate_to_checkpoint(&mut self) {
        let (len, layers) = self
            .saved
            .clone()
            .expect("truncate_to_checkpoint without a recorded checkpoint");
        self.len = len;
        self.per_layer = layers;
    }

    /// Keys node for a layer, `[len, d_model]`, if any positions are cached.
    pub fn keys(&self, layer: usize) -> Option<NodeId> {
        self.per_layer[layer].k
    }

    pub fn values(&self, layer: usize) -> Option<NodeId> {
        self.per_layer[layer].v
    }
}

/// Captured attention probabilities from one forward call.
pub struct AttnRecord {
    pub layer: usize,
    pub head: usize,
    /// `[new_positions, attended_positions]` probabilities node.
    pub probs: NodeId,
    /// Absolute position of the first query row.
    pub first_query_pos: usize,
}

#[derive(Default)]
pub struct AttnRecorder {
    pub records: Vec<AttnRecord>,
}

/// Run the stack over new positions, attending to `cache` plus the new
/// positions causally. Returns the post-final-norm hidden states
/// `[new_positions, d_model]` and extends the cache in place.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    segments: &[InputSegment<S>],
    cache: &mut KVCache,
    mut recorder: Option<&mut AttnRecorder>,
) -> Result<NodeId> {
    let cfg = &w.config;
    let d = cfg.d_model;
    let prefix_len = cache.len();

    // assemble input rows
    let mut parts: Vec<NodeId> = Vec::new();
    let mut m = 0usize;
    for seg in segments {
        let node = match seg {
            InputSegment::Tokens(ids) => {
                if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab) {
                    return Err(Error::InvalidArgument(format!(
                        "token id {bad} out of vocabulary ({})",
                        cfg.vocab
                    )));
                }
                let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
                tape.gather_rows(w.token_embedding, idx)?
            }
            InputSegment::Hidden(node) => {
                let got = tape.value(*node).cols();
                if got != d {
                    return Err(Error::BadInjectionWidth { expected: d, got });
                }
                *node
            }
            InputSegment::Vectors(t) => {
                if t.cols() != d {
                    return Err(Error::BadInjectionWidth { expected: d, got: t.cols() });
                }
                tape.constant(t.clone())
            }
        };
        m += tape.value(node).rows();
        parts.push(node);
    }
    if m == 0 {
        return Err(Error::InvalidArgument("forward over zero positions".into()));
    }
    if prefix_len + m > cfg.max_positions {
        return Err(Error::LengthOverflow { needed: prefix_len + m, max: cfg.max_positions });
    }
    let mut x = parts[0];
    for &p in &parts[1..] {
        x = tape.concat_rows(x, p)?;
    }

    // absolute position embeddings; injected positions keep their index
    let positions: Vec<usize> = (prefix_len..prefix_len + m).collect();
    let pos = tape.gather_rows(w.position_embedding, positions)?;
    x = tape.add(x, pos)?;

    let head_dim = cfg.head_dim();
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let limits: std::rc::Rc<[usize]> = (0..m).map(|i| prefix_len + i + 1).collect();

    for (layer_idx, layer) in w.layers.iter().enumerate() {
        let xn = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta)?;
        let q0 = tape.matmul(xn, layer.wq)?;
        let q = tape.add_bias_row(q0, layer.bq)?;
        let k0 = tape.matmul(xn, layer.wk)?;
        let k_new = tape.add_bias_row(k0, layer.bk)?;
        let v0 = tape.matmul(xn, layer.wv)?;
        let v_new = tape.add_bias_row(v0, layer.bv)?;

        let k_all = match cache.keys(layer_idx) {
            Some(prev) => tape.concat_rows(prev, k_new)?,
            None => k_new,
        };
        let v_all = match cache.values(layer_idx) {
            Some(prev) => tape.concat_rows(prev, v_new)?,
            None => v_new,
        };
        cache.per_layer[layer_idx] = LayerKV { k: Some(k_all), v: Some(v_all) };

        let merged = match recorder.as_deref_mut() {
            // fused path: one node for the whole multi-head block
            None => tape.causal_attention(q, k_all, v_all, cfg.heads, limits.clone(), scale)?,
            // recording path: per-head primitives so the probability
            // matrices exist as plain nodes
            Some(rec) => {
                let mut merged: Option<NodeId> = None;
                for head in 0..cfg.heads {
                    let start = head * head_dim;
                    let qh = tape.slice_cols(q, start, head_dim)?;
                    let kh = tape.slice_cols(k_all, start, head_dim)?;
                    let vh = tape.slice_cols(v_all, start, head_dim)?;
                    let scores0 = tape.matmul_nt(qh, kh)?;
                    let scores = tape.scale(scores0, scale)?;
                    let probs = tape.masked_softmax_rows(scores, limits.to_vec())?;
                    rec.records.push(AttnRecord {
                        layer: layer_idx,
                        head,
                        probs,
                        first_query_pos: prefix_len,
                    });
                    let ctx = tape.matmul(probs, vh)?;
                    merged = Some(match merged {
                        Some(prev) => tape.concat_cols(prev, ctx)?,
                        None => ctx,
                    });
                }
                merged.expect("at least one head")
            }
        };
        let attn0 = tape.matmul(merged, layer.wo)?;
        let attn = tape.add_bias_row(attn0, layer.bo)?;
        x = tape.add(x, attn)?;

        let xn2 = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta)?;
        let h0 = tape.matmul(xn2, layer.w_ff1)?;
        let h1 = tape.add_bias_row(h0, layer.b_ff1)?;
        let h2 = tape.gelu(h1)?;
        let h3 = tape.matmul(h2, layer.w_ff2)?;
        let ffn = tape.add_bias_row(h3, layer.b_ff2)?;
        x = tape.add(x, ffn)?;
    }

    cache.len = prefix_len + m;
    tape.layer_norm(x, w.final_gamma, w.final_beta)
}

/// Logits over the vocabulary via the weight-tied head: `hidden * E^T`.
pub fn lm_head<S: Scalar>(tape: &mut Tape<S>, w: &TapedWeights, hidden: NodeId) -> Result<NodeId> {
    let got = tape.value(hidden).cols();
    if got != w.config.d_model {
        return Err(Error::ShapeMismatch {
            op: "lm_head",
            operand: "hidden",
            expected: format!("[_, {}]", w.config.d_model),
            got: format!("{:?}", tape.value(hidden).shape()),
        });
    }
    tape.matmul_nt(hidden, w.token_embedding)
}

/// Greedy pick over one logits row; ties break toward the lowest token id.
pub fn greedy_pick<S: Scalar>(logits: &[S]) -> u32 {
    let mut best = 0usize;
    for (j, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = j;
        }
    }
    best as u32
}
