//! Latent-thought reasoning: sequential continuous CoT, the Jacobi-iterated
//! parallel variant, the reductions to simpler schemes, answer decoding, and
//! the equivalence verifier.
//!
//! Position convention (0-indexed): a query of n tokens occupies positions
//! 0..n-1, `<bot>` sits at position n, the c latent positions are n+1..n+c,
//! `<eot>` follows at n+c+1. Latent positions keep these indices across all
//! iterations, so iteration count never shifts position embeddings.

use crate::error::{Error, Result};
use crate::model::{forward, lm_head, InputSegment, KVCache, TapedWeights};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};

/// The three reserved vocabulary entries for the latent region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bot: u32,
    pub latent: u32,
    pub eot: u32,
}

impl SpecialTokens {
    pub fn validate(&self) -> Result<()> {
        if self.bot == self.latent || self.bot == self.eot || self.latent == self.eot {
            return Err(Error::InvalidReasoningConfig(
                "special tokens must be pairwise distinct".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Icot,
    Pause,
    Ccot,
    Pccot,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Icot => "icot",
            Mode::Pause => "pause",
            Mode::Ccot => "ccot",
            Mode::Pccot => "pccot",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "icot" => Ok(Mode::Icot),
            "pause" => Ok(Mode::Pause),
            "ccot" => Ok(Mode::Ccot),
            "pccot" => Ok(Mode::Pccot),
            other => Err(format!("unknown mode '{other}' (icot|pause|ccot|pccot)")),
        }
    }
}

/// How the latent region is produced: which scheme, how many latent tokens,
/// how many extra iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningConfig {
    pub mode: Mode,
    pub latent_count: usize,
    pub extra_iterations: usize,
}

impl ReasoningConfig {
    pub fn new(mode: Mode, latent_count: usize, extra_iterations: usize) -> Result<Self> {
        let cfg = ReasoningConfig { mode, latent_count, extra_iterations };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Icot if self.latent_count != 0 => Err(Error::InvalidReasoningConfig(
                format!("icot requires c = 0, got c = {}", self.latent_count),
            )),
            Mode::Pause if self.extra_iterations != 0 => Err(Error::InvalidReasoningConfig(
                format!("pause requires T = 0, got T = {}", self.extra_iterations),
            )),
            Mode::Pccot if self.latent_count == 0 => Err(Error::InvalidReasoningConfig(
                "pccot requires c >= 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// One iteration of the latent region.
///
/// `inputs` are the vectors fed at latent positions n+1..n+c (None in the
/// first pass, where the dummy `<latent>` embedding is used); `outputs` are
/// the resulting hidden states at those same positions. The wiring invariant
/// is that iteration t+1's inputs are iteration t's outputs shifted right by
/// one, prepended with the constant `<bot>` output.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub iteration: usize,
    pub inputs: Option<NodeId>,
    pub outputs: NodeId,
}

/// Result of running the Jacobi-iterated latent region.
pub struct PccotRun {
    pub prefix_len: usize,
    /// Hidden state at the `<bot>` position; constant across iterations.
    pub bot_output: NodeId,
    /// One block per iteration, t = 1..=T+1. Empty when c = 0.
    pub blocks: Vec<LatentBlock>,
    /// Prefix + final-iteration latent entries; ready for answer decoding.
    pub cache: KVCache,
    /// Transformer invocations: T+1 by construction (1 when c = 0).
    pub forward_calls: usize,
}

impl PccotRun {
    /// Latent outputs of the last iteration, `[c, d]`.
    pub fn final_outputs(&self) -> Option<NodeId> {
        self.blocks.last().map(|b| b.outputs)
    }
}

/// Result of the sequential continuous-CoT region.
pub struct CcotRun {
    pub prefix_len: usize,
    /// c+1 hidden states for the `<bot>` and latent positions, `[1, d]` each.
    pub hidden: Vec<NodeId>,
    pub cache: KVCache,
    /// Transformer invocations: c+1 (one prefix pass plus c injected steps).
    pub forward_calls: usize,
}

/// Sequential continuous CoT: after the query+`<bot>` pass, run c
/// single-position forwards, each injecting the previous final hidden state.
pub fn run_ccot<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    st: &SpecialTokens,
    query: &[u32],
    c: usize,
) -> Result<CcotRun> {
    let mut cache = KVCache::new(w.config.layers);
    let mut prefix_tokens = query.to_vec();
    prefix_tokens.push(st.bot);
    let prefix_out = forward(tape, w, &[InputSegment::Tokens(prefix_tokens)], &mut cache, None)?;
    let prefix_len = cache.len();
    let bot_out = tape.gather_rows(prefix_out, vec![prefix_len - 1])?;

    let mut hidden = vec![bot_out];
    for _ in 0..c {
        let prev = *hidden.last().expect("at least the bot output");
        let out = forward(tape, w, &[InputSegment::Hidden(prev)], &mut cache, None)?;
        hidden.push(out);
    }
    Ok(CcotRun { prefix_len, hidden, cache, forward_calls: c + 1 })
}

/// First pass of the parallel scheme: one full forward over the query,
/// `<bot>`, and c dummy `<latent>` tokens. The returned cache holds all
/// n+c+1 positions with a recorded checkpoint at the query prefix.
pub fn pccot_first_pass<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    st: &SpecialTokens,
    query: &[u32],
    c: usize,
) -> Result<(PccotRun, NodeId)> {
    let mut cache = KVCache::new(w.config.layers);
    let mut tokens = query.to_vec();
    tokens.push(st.bot);
    tokens.extend(std::iter::repeat(st.latent).take(c));
    let out = forward(tape, w, &[InputSegment::Tokens(tokens)], &mut cache, None)?;
    let prefix_len = query.len() + 1;

    // record the query-prefix checkpoint inside the already-extended cache
    cache.checkpoint_at(tape, prefix_len)?;

    let bot_output = tape.gather_rows(out, vec![prefix_len - 1])?;
    let blocks = if c > 0 {
        let latent_rows: Vec<usize> = (prefix_len..prefix_len + c).collect();
        let outputs = tape.gather_rows(out, latent_rows)?;
        vec![LatentBlock { iteration: 1, inputs: None, outputs }]
    } else {
        Vec::new()
    };
    Ok((PccotRun { prefix_len, bot_output, blocks, cache, forward_calls: 1 }, out))
}

/// One Jacobi update: all latent positions are recomputed in a single
/// batched forward against the cached prefix, fed with the previous
/// iteration's outputs. The cache must currently hold exactly the prefix.
/// Returns the assembled input vectors and the new outputs, both `[c, d]`.
pub fn jacobi_step<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    cache: &mut KVCache,
    bot_output: NodeId,
    prev_outputs: NodeId,
) -> Result<(NodeId, NodeId)> {
    let c = tape.value(prev_outputs).rows();
    let inputs = jacobi_inputs(tape, bot_output, prev_outputs, c)?;
    let outputs = forward(tape, w, &[InputSegment::Hidden(inputs)], cache, None)?;
    Ok((inputs, outputs))
}

/// Inputs for the next iteration: previous outputs shifted right by one
/// position, with the constant `<bot>` output in front.
pub fn jacobi_inputs<S: Scalar>(
    tape: &mut Tape<S>,
    bot_output: NodeId,
    prev_outputs: NodeId,
    c: usize,
) -> Result<NodeId> {
    if c == 1 {
        return Ok(bot_output);
    }
    let carried = tape.gather_rows(prev_outputs, (0..c - 1).collect())?;
    tape.concat_rows(bot_output, carried)
}

/// Full parallel run: first pass plus T Jacobi iterations. The final
/// iteration's latent entries are the ones left in the cache, so answer
/// decoding attends to the hidden states computed from the last iteration.
pub fn run_pccot<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    st: &SpecialTokens,
    query: &[u32],
    c: usize,
    extra_iterations: usize,
) -> Result<PccotRun> {
    let (mut run, _) = pccot_first_pass(tape, w, st, query, c)?;
    if c == 0 {
        return Ok(run);
    }
    for t in 0..extra_iterations {
        let prev = run.blocks.last().expect("first pass recorded").clone();
        run.cache.truncate_to_checkpoint();
        let (inputs, outputs) = jacobi_step(tape, w, &mut run.cache, run.bot_output, prev.outputs)?;
        run.blocks.push(LatentBlock { iteration: t + 2, inputs: Some(inputs), outputs });
        run.forward_calls += 1;
    }
    Ok(run)
}

/// Latent region for a `ReasoningConfig`, mapping each mode onto the
/// machinery it reduces to.
pub fn run_latent_region<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    st: &SpecialTokens,
    query: &[u32],
    cfg: &ReasoningConfig,
) -> Result<PccotRun> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Icot => run_pccot(tape, w, st, query, 0, 0),
        Mode::Pause => run_pccot(tape, w, st, query, cfg.latent_count, 0),
        Mode::Pccot => run_pccot(tape, w, st, query, cfg.latent_count, cfg.extra_iterations),
        Mode::Ccot => {
            let ccot = run_ccot(tape, w, st, query, cfg.latent_count)?;
            let c = cfg.latent_count;
            let bot_output = ccot.hidden[0];
            let blocks = if c > 0 {
                let mut outputs = ccot.hidden[1];
                for h in &ccot.hidden[2..] {
                    outputs = tape.concat_rows(outputs, *h)?;
                }
                vec![LatentBlock { iteration: 1, inputs: None, outputs }]
            } else {
                Vec::new()
            };
            Ok(PccotRun {
                prefix_len: ccot.prefix_len,
                bot_output,
                blocks,
                cache: ccot.cache,
                forward_calls: ccot.forward_calls,
            })
        }
    }
}

/// Outcome of greedy answer decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    pub truncated: bool,
}

/// Append `<eot>` and the fixed answer prompt against the latent-region
/// cache, then decode greedily until the end-of-answer token or `max_len`.
pub fn decode_answer<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    cache: &mut KVCache,
    st: &SpecialTokens,
    prompt: &[u32],
    end_of_answer: u32,
    max_len: usize,
) -> Result<DecodeResult> {
    let mut region = vec![st.eot];
    region.extend_from_slice(prompt);
    let hidden = forward(tape, w, &[InputSegment::Tokens(region.clone())], cache, None)?;
    if max_len == 0 {
        return Ok(DecodeResult { tokens: Vec::new(), truncated: true });
    }
    let last = tape.gather_rows(hidden, vec![region.len() - 1])?;
    let logits = lm_head(tape, w, last)?;
    let mut next = crate::model::greedy_pick(tape.value(logits).row(0));

    let mut tokens = Vec::new();
    let mut truncated = false;
    loop {
        if next == end_of_answer {
            break;
        }
        tokens.push(next);
        if tokens.len() >= max_len {
            truncated = true;
            break;
        }
        let hidden = forward(tape, w, &[InputSegment::Tokens(vec![next])], cache, None)?;
        let logits = lm_head(tape, w, hidden)?;
        next = crate::model::greedy_pick(tape.value(logits).row(0));
    }
    Ok(DecodeResult { tokens, truncated })
}

/// Logits for the `<eot>` + answer-prompt region computed through the
/// iterative machinery (first pass, Jacobi steps, cached prefix).
pub fn pccot_region_logits<S: Scalar>(
    w: &crate::model::TransformerWeights<S>,
    st: &SpecialTokens,
    query: &[u32],
    c: usize,
    extra_iterations: usize,
    prompt: &[u32],
) -> Result<crate::tensor::Tensor<S>> {
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut run = run_pccot(&mut tape, &tw, st, query, c, extra_iterations)?;
    let mut region = vec![st.eot];
    region.extend_from_slice(prompt);
    let hidden = forward(&mut tape, &tw, &[InputSegment::Tokens(region)], &mut run.cache, None)?;
    let logits = lm_head(&mut tape, &tw, hidden)?;
    Ok(tape.value(logits).clone())
}

/// Independent one-shot path with no latent tokens and no iterative
/// machinery: a single forward over query + `<bot>` + `<eot>` + prompt.
pub fn icot_region_logits<S: Scalar>(
    w: &crate::model::TransformerWeights<S>,
    st: &SpecialTokens,
    query: &[u32],
    prompt: &[u32],
) -> Result<crate::tensor::Tensor<S>> {
    pause_region_logits(w, st, query, 0, prompt)
}

/// Independent one-shot path for trainable placeholder tokens: a single
/// forward over query + `<bot>` + c x `<latent>` + `<eot>` + prompt, with
/// no iterative refinement.
pub fn pause_region_logits<S: Scalar>(
    w: &crate::model::TransformerWeights<S>,
    st: &SpecialTokens,
    query: &[u32],
    c: usize,
    prompt: &[u32],
) -> Result<crate::tensor::Tensor<S>> {
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let mut tokens = query.to_vec();
    tokens.push(st.bot);
    tokens.extend(std::iter::repeat(st.latent).take(c));
    tokens.push(st.eot);
    tokens.extend_from_slice(prompt);
    let mut cache = KVCache::new(w.config.layers);
    let hidden = forward(&mut tape, &tw, &[InputSegment::Tokens(tokens)], &mut cache, None)?;
    let region_len = prompt.len() + 1;
    let total = tape.value(hidden).rows();
    let region_rows: Vec<usize> = (total - region_len..total).collect();
    let region_hidden = tape.gather_rows(hidden, region_rows)?;
    let logits = lm_head(&mut tape, &tw, region_hidden)?;
    Ok(tape.value(logits).clone())
}

/// One row of the equivalence report: token i (paper indexing, position
/// n+i) at iteration t, with its max abs deviation from the sequential
/// value. The fixed point is expected for t >= i.
#[derive(Debug, Clone, Serialize)]
pub struct TheoremRow {
    pub token_index: usize,
    pub iteration: usize,
    pub diff: f64,
    pub fixed_point_expected: bool,
}

#[derive(Debug, Clone)]
pub struct TheoremReport {
    pub rows: Vec<TheoremRow>,
    /// Max diff over all (i, t) pairs with t >= i.
    pub max_fixed_diff: f64,
    pub tolerance: f64,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.max_fixed_diff <= self.tolerance
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("token_index,iteration,diff,fixed_point_expected\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.17e},{}\n",
                r.token_index, r.iteration, r.diff, r.fixed_point_expected
            ));
        }
        out
    }
}

/// Compare every iteration of the parallel scheme against sequential
/// continuous CoT, token by token. Reports diffs for all (token, iteration)
/// pairs and asserts nothing; callers check `passed()`.
pub fn verify_theorem1<S: Scalar>(
    w: &crate::model::TransformerWeights<S>,
    st: &SpecialTokens,
    query: &[u32],
    c: usize,
    extra_iterations: usize,
    tolerance: f64,
) -> Result<TheoremReport> {
    let mut tape = Tape::new();
    let tw = w.insert_into(&mut tape, false);
    let seq = run_ccot(&mut tape, &tw, st, query, c)?;
    let par = run_pccot(&mut tape, &tw, st, query, c, extra_iterations)?;

    // token i = 1 is the <bot> position; computed once and reused, so its
    // row is identical at every iteration
    let bot_diff = tape
        .value(par.bot_output)
        .max_abs_diff(tape.value(seq.hidden[0]))
        .to_f64_lossy();

    let mut rows = Vec::new();
    let mut max_fixed: f64 = bot_diff;
    for block in &par.blocks {
        let t = block.iteration;
        rows.push(TheoremRow {
            token_index: 1,
            iteration: t,
            diff: bot_diff,
            fixed_point_expected: true,
        });
        let outputs = tape.value(block.outputs).clone();
        for latent in 0..c {
            let token_index = latent + 2; // position n + token_index
            let seq_row = tape.value(seq.hidden[latent + 1]).row(0);
            let mut diff = 0.0f64;
            for (a, b) in outputs.row(latent).iter().zip(seq_row) {
                diff = diff.max((a.to_f64_lossy() - b.to_f64_lossy()).abs());
            }
            let fixed_point_expected = t >= token_index;
            if fixed_point_expected {
                max_fixed = max_fixed.max(diff);
            }
            rows.push(TheoremRow { token_index, iteration: t, diff, fixed_point_expected });
        }
    }
    Ok(TheoremReport { rows, max_fixed_diff: max_fixed, tolerance })
}
