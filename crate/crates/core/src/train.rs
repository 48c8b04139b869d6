//! Self-distillation training: a shared-weight teacher task (explicit
//! reasoning chain, cross-entropy on chain and answer tokens) and student
//! task (latent reasoning, cross-entropy on answer tokens only), tied by an
//! L1 loss between their prediction distributions at the answer-prompt
//! anchor. The teacher side of the distillation is detached, so knowledge
//! flows teacher -> student only.
//!
//! Cross-entropy is token-mean per span.

use crate::data::ArithmeticExample;
use crate::error::{Error, Result};
use crate::model::{forward, lm_head, InputSegment, TapedWeights, TransformerWeights};
use crate::reasoning::{decode_answer, run_latent_region, ReasoningConfig, SpecialTokens};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Token spans of one training example, in fixed concatenation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub question: Vec<u32>,
    pub cot: Vec<u32>,
    /// Fixed answer prompt; its last token is the distillation anchor.
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub end_of_answer: u32,
}

impl TrainExample {
    pub fn from_arithmetic(ex: &ArithmeticExample, tok: &Tokenizer) -> Result<Self> {
        Ok(TrainExample {
            question: tok.encode(&ex.question)?,
            cot: tok.encode(&ex.cot)?,
            prompt: tok.answer_prompt_ids(),
            answer: tok.encode(&ex.answer)?,
            end_of_answer: tok.end_of_answer(),
        })
    }

    pub fn anchor_token(&self) -> u32 {
        *self.prompt.last().expect("answer prompt is never empty")
    }
}

/// Weights of the three loss components; all must be non-negative.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(format!("unknown schedule '{other}' (cosine|constant)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    /// Keep the dummy latent embedding at its random initialization.
    pub freeze_latent_embedding: bool,
    /// Cross-entropy reduction; recorded in run manifests.
    pub ce_reduction: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 128,
            epochs: 20,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_ratio: 0.03,
            schedule: Schedule::Cosine,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            freeze_latent_embedding: false,
            ce_reduction: "token_mean".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidArgument(format!(
                "warmup ratio {} outside [0, 1]",
                self.warmup_ratio
            )));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.ce_reduction != "token_mean" {
            return Err(Error::InvalidArgument(format!(
                "unsupported ce_reduction '{}'",
                self.ce_reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub teacher_ce: f64,
    pub student_ce: f64,
    pub distill_l1: f64,
    pub total: f64,
}

/// Node handles of one example's loss graph; exposed for invariant tests.
pub struct LossNodes {
    pub teacher_ce: NodeId,
    pub student_ce: NodeId,
    pub distill_l1: NodeId,
    pub total: NodeId,
    /// Teacher anchor distribution before detaching.
    pub teacher_anchor: NodeId,
    pub student_anchor: NodeId,
}

/// Teacher task: one forward over question + chain + prompt + answer;
/// cross-entropy on chain and answer tokens (plus the end-of-answer mark),
/// token-mean. Also returns the anchor next-token distribution.
pub fn teacher_loss<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    ex: &TrainExample,
) -> Result<(NodeId, NodeId)> {
    if ex.cot.is_empty() {
        return Err(Error::InvalidArgument("teacher task requires a gold reasoning chain".into()));
    }
    let mut inputs = ex.question.clone();
    inputs.extend_from_slice(&ex.cot);
    inputs.extend_from_slice(&ex.prompt);
    inputs.extend_from_slice(&ex.answer);

    // supervised rows predict: every chain token, every answer token, and
    // the end-of-answer mark
    let n_q = ex.question.len();
    let cot_range = n_q..n_q + ex.cot.len();
    let ans_start = n_q + ex.cot.len() + ex.prompt.len();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for i in cot_range {
        rows.push(i - 1);
        targets.push(inputs[i] as usize);
    }
    for i in ans_start..inputs.len() {
        rows.push(i - 1);
        targets.push(inputs[i] as usize);
    }
    rows.push(inputs.len() - 1);
    targets.push(ex.end_of_answer as usize);
    let anchor_row = ans_start - 1;

    let mut cache = crate::model::KVCache::new(w.config.layers);
    let hidden = forward(tape, w, &[InputSegment::Tokens(inputs)], &mut cache, None)?;

    let supervised = tape.gather_rows(hidden, rows)?;
    let logits = lm_head(tape, w, supervised)?;
    let ce = tape.cross_entropy(logits, targets)?;

    let anchor_hidden = tape.gather_rows(hidden, vec![anchor_row])?;
    let anchor_logits = lm_head(tape, w, anchor_hidden)?;
    let anchor_probs = tape.softmax_rows(anchor_logits)?;
    Ok((ce, anchor_probs))
}

/// Student task: latent region per the reasoning config, then one
/// teacher-forced pass over `<eot>` + prompt + answer; cross-entropy on the
/// answer tokens only (plus the end-of-answer mark). Gradients flow through
/// every unrolled iteration and the hidden-state feedback edges.
pub fn student_loss<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    st: &SpecialTokens,
    ex: &TrainExample,
    rcfg: &ReasoningConfig,
) -> Result<(NodeId, NodeId)> {
    rcfg.validate()?;
    let mut run = run_latent_region(tape, w, st, &ex.question, rcfg)?;

    let mut region = vec![st.eot];
    region.extend_from_slice(&ex.prompt);
    region.extend_from_slice(&ex.answer);
    let anchor_row = ex.prompt.len(); // eot occupies region row 0
    let hidden = forward(tape, w, &[InputSegment::Tokens(region.clone())], &mut run.cache, None)?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (j, &t) in ex.answer.iter().enumerate() {
        rows.push(anchor_row + j);
        targets.push(t as usize);
    }
    rows.push(region.len() - 1);
    targets.push(ex.end_of_answer as usize);

    let supervised = tape.gather_rows(hidden, rows)?;
    let logits = lm_head(tape, w, supervised)?;
    let ce = tape.cross_entropy(logits, targets)?;

    let anchor_hidden = tape.gather_rows(hidden, vec![anchor_row])?;
    let anchor_logits = lm_head(tape, w, anchor_hidden)?;
    let anchor_probs = tape.softmax_rows(anchor_logits)?;
    Ok((ce, anchor_probs))
}

/// L1 between anchor distributions with the teacher side detached, so the
/// distillation gradient reaches only the student branch.
pub fn distill_loss<S: Scalar>(
    tape: &mut Tape<S>,
    teacher_anchor: NodeId,
    student_anchor: NodeId,
) -> Result<NodeId> {
    let frozen = tape.detach(teacher_anchor)?;
    tape.l1_distance(frozen, student_anchor)
}

/// Build the full loss graph for one example on one tape. Teacher and
/// student read the same parameter leaves; nothing is duplicated.
pub fn example_losses<S: Scalar>(
    tape: &mut Tape<S>,
    w: &TapedWeights,
    st: &SpecialTokens,
    ex: &TrainExample,
    rcfg: &ReasoningConfig,
    lw: &LossWeights,
) -> Result<LossNodes> {
    lw.validate()?;
    let (teacher_ce, teacher_anchor) = teacher_loss(tape, w, ex)?;
    let (student_ce, student_anchor) = student_loss(tape, w, st, ex, rcfg)?;
    let distill_l1 = distill_loss(tape, teacher_anchor, student_anchor)?;

    let wt = tape.scale(teacher_ce, S::from_f64(lw.alpha))?;
    let ws = tape.scale(student_ce, S::from_f64(lw.beta))?;
    let wd = tape.scale(distill_l1, S::from_f64(lw.gamma))?;
    let ts = tape.add(wt, ws)?;
    let total = tape.add(ts, wd)?;
    Ok(LossNodes { teacher_ce, student_ce, distill_l1, total, teacher_anchor, student_anchor })
}

impl LossNodes {
    pub fn breakdown<S: Scalar>(&self, tape: &Tape<S>) -> LossBreakdown {
        LossBreakdown {
            teacher_ce: tape.value(self.teacher_ce).item().to_f64_lossy(),
            student_ce: tape.value(self.student_ce).item().to_f64_lossy(),
            distill_l1: tape.value(self.distill_l1).item().to_f64_lossy(),
            total: tape.value(self.total).item().to_f64_lossy(),
        }
    }
}

/// Decoupled-weight-decay Adam with bias correction.
pub struct AdamW<S> {
    step: usize,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> AdamW<S> {
    pub fn new(weights: &TransformerWeights<S>) -> Self {
        let shapes: Vec<[usize; 2]> = weights.param_tensors().iter().map(|t| t.shape()).collect();
        AdamW {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect(),
        }
    }

    pub fn apply(
        &mut self,
        weights: &mut TransformerWeights<S>,
        grads: &[Tensor<S>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(cfg.adam_beta1);
        let b2 = S::from_f64(cfg.adam_beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - cfg.adam_beta1.powi(t));
        let bc2 = S::from_f64(1.0 - cfg.adam_beta2.powi(t));
        let eps = S::from_f64(ADAM_EPS);
        let lr_s = S::from_f64(lr);
        let decay = S::from_f64(lr * cfg.weight_decay);

        for ((param, grad), (m, v)) in weights
            .param_tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let p = param.data()[i];
                param.data_mut()[i] = p - lr_s * m_hat / (v_hat.sqrt() + eps) - decay * p;
            }
        }
    }
}

/// Learning rate at `step` (0-based) out of `total_steps`: linear warmup
/// over `warmup_ratio` of the run, then cosine decay to zero (or constant).
pub fn scheduled_lr(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let warmup = ((total_steps as f64) * cfg.warmup_ratio).ceil() as usize;
    if step < warmup {
        return cfg.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.learning_rate,
        Schedule::Cosine => {
            let span = (total_steps - warmup).max(1) as f64;
            let progress = (step - warmup) as f64 / span;
            cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Mean gradients over a batch, with per-example forward/backward on its
/// own tape and reduction in example order.
pub fn batch_gradients<S: Scalar>(
    weights: &TransformerWeights<S>,
    st: &SpecialTokens,
    batch: &[TrainExample],
    rcfg: &ReasoningConfig,
    lw: &LossWeights,
    freeze_latent: Option<u32>,
) -> Result<(Vec<Tensor<S>>, LossBreakdown)> {
    let mut acc: Vec<Tensor<S>> = weights
        .param_tensors()
        .iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let mut sums = LossBreakdown { teacher_ce: 0.0, student_ce: 0.0, distill_l1: 0.0, total: 0.0 };
    let inv = S::from_f64(1.0 / batch.len() as f64);

    for ex in batch {
        let mut tape = Tape::new();
        let tw = weights.insert_into(&mut tape, true);
        let nodes = example_losses(&mut tape, &tw, st, ex, rcfg, lw)?;
        let b = nodes.breakdown(&tape);
        if !b.total.is_finite() {
            return Err(Error::NumericFault { op: "example_losses" });
        }
        sums.teacher_ce += b.teacher_ce;
        sums.student_ce += b.student_ce;
        sums.distill_l1 += b.distill_l1;
        sums.total += b.total;

        tape.backward(nodes.total)?;
        for (slot, id) in acc.iter_mut().zip(tw.param_ids()) {
            let g = tape.grad(id).expect("parameter gradient after backward");
            for (o, &gv) in slot.data_mut().iter_mut().zip(g.data()) {
                *o += gv * inv;
            }
        }
    }

    if let Some(latent_id) = freeze_latent {
        // accumulator slot 0 is the token embedding
        let row = latent_id as usize;
        for v in acc[0].row_mut(row) {
            *v = S::zero();
        }
    }

    let n = batch.len() as f64;
    sums.teacher_ce /= n;
    sums.student_ce /= n;
    sums.distill_l1 /= n;
    sums.total /= n;
    Ok((acc, sums))
}

/// Global L2 norm over all gradients, computed in f64.
pub fn global_grad_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    let mut sq = 0.0f64;
    for g in grads {
        for &v in g.data() {
            let v = v.to_f64_lossy();
            sq += v * v;
        }
    }
    sq.sqrt()
}

fn clip_gradients<S: Scalar>(grads: &mut [Tensor<S>], clip_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > clip_norm {
        let scale = S::from_f64(clip_norm / norm);
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One record of the per-step metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub teacher_ce: f64,
    pub student_ce: f64,
    pub distill_l1: f64,
    pub total: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,lr,teacher_ce,student_ce,distill_l1,total,grad_norm";

impl StepRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.lr, self.teacher_ce, self.student_ce, self.distill_l1, self.total,
            self.grad_norm
        )
    }
}

/// One optimizer step over a batch. On a non-finite loss the step is
/// aborted and the weights are left untouched.
pub fn train_step<S: Scalar>(
    weights: &mut TransformerWeights<S>,
    opt: &mut AdamW<S>,
    st: &SpecialTokens,
    batch: &[TrainExample],
    rcfg: &ReasoningConfig,
    lw: &LossWeights,
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<(LossBreakdown, f64)> {
    let freeze = if cfg.freeze_latent_embedding { Some(st.latent) } else { None };
    let (mut grads, losses) = batch_gradients(weights, st, batch, rcfg, lw, freeze)
        .map_err(|e| match e {
            Error::NumericFault { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
    let norm = clip_gradients(&mut grads, cfg.clip_norm);
    opt.apply(weights, &grads, lr, cfg);
    Ok((losses, norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Decode through the latent region of the configured mode.
    Latent,
    /// Decode the reasoning chain autoregressively, then the answer.
    TeacherCot,
    /// Teacher-force the gold chain, decode the answer only.
    TeacherGoldCot,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "latent" => Ok(EvalMode::Latent),
            "teacher-cot" => Ok(EvalMode::TeacherCot),
            "teacher-gold-cot" => Ok(EvalMode::TeacherGoldCot),
            other => Err(format!("unknown eval mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub index: usize,
    pub gold: Vec<u32>,
    pub decoded: Vec<u32>,
    pub correct: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub records: Vec<EvalRecord>,
}

pub const MAX_ANSWER_LEN: usize = 8;
const MAX_FREE_DECODE: usize = 96;

/// Exact-match accuracy under greedy decoding.
pub fn evaluate<S: Scalar>(
    weights: &TransformerWeights<S>,
    st: &SpecialTokens,
    examples: &[TrainExample],
    rcfg: &ReasoningConfig,
    mode: EvalMode,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(examples.len());
    let mut correct_count = 0usize;
    for (index, ex) in examples.iter().enumerate() {
        let (decoded, truncated) = match mode {
            EvalMode::Latent => {
                let mut tape = Tape::new();
                let tw = weights.insert_into(&mut tape, false);
                let mut run = run_latent_region(&mut tape, &tw, st, &ex.question, rcfg)?;
                let out = decode_answer(
                    &mut tape,
                    &tw,
                    &mut run.cache,
                    st,
                    &ex.prompt,
                    ex.end_of_answer,
                    MAX_ANSWER_LEN,
                )?;
                (out.tokens, out.truncated)
            }
            EvalMode::TeacherCot => decode_teacher(weights, ex, None)?,
            EvalMode::TeacherGoldCot => decode_teacher(weights, ex, Some(&ex.cot))?,
        };
        let correct = !truncated && decoded == ex.answer;
        if correct {
            correct_count += 1;
        }
        records.push(EvalRecord { index, gold: ex.answer.clone(), decoded, correct, truncated });
    }
    Ok(EvalReport {
        accuracy: correct_count as f64 / examples.len().max(1) as f64,
        correct: correct_count,
        total: examples.len(),
        records,
    })
}

/// Teacher-style decoding. With a forced chain, the answer is decoded right
/// after the teacher-forced prompt; otherwise the chain itself is decoded
/// greedily and the answer is whatever follows the prompt in the stream.
fn decode_teacher<S: Scalar>(
    weights: &TransformerWeights<S>,
    ex: &TrainExample,
    gold_cot: Option<&[u32]>,
) -> Result<(Vec<u32>, bool)> {
    let mut tape = Tape::new();
    let tw = weights.insert_into(&mut tape, false);
    let mut cache = crate::model::KVCache::new(weights.config.layers);

    match gold_cot {
        Some(cot) => {
            let mut inputs = ex.question.clone();
            inputs.extend_from_slice(cot);
            inputs.extend_from_slice(&ex.prompt);
            let hidden =
                forward(&mut tape, &tw, &[InputSegment::Tokens(inputs.clone())], &mut cache, None)?;
            let last = tape.gather_rows(hidden, vec![inputs.len() - 1])?;
            let logits = lm_head(&mut tape, &tw, last)?;
            let mut next = crate::model::greedy_pick(tape.value(logits).row(0));
            let mut tokens = Vec::new();
            let mut truncated = false;
            loop {
                if next == ex.end_of_answer {
                    break;
                }
                tokens.push(next);
                if tokens.len() >= MAX_ANSWER_LEN {
                    truncated = true;
                    break;
                }
                let h = forward(&mut tape, &tw, &[InputSegment::Tokens(vec![next])], &mut cache, None)?;
                let l = lm_head(&mut tape, &tw, h)?;
                next = crate::model::greedy_pick(tape.value(l).row(0));
            }
            Ok((tokens, truncated))
        }
        None => {
            // free-run from the question until the end-of-answer mark, then
            // extract what follows the prompt
            let hidden = forward(
                &mut tape,
                &tw,
                &[InputSegment::Tokens(ex.question.clone())],
                &mut cache,
                None,
            )?;
            let last = tape.gather_rows(hidden, vec![ex.question.len() - 1])?;
            let logits = lm_head(&mut tape, &tw, last)?;
            let mut next = crate::model::greedy_pick(tape.value(logits).row(0));
            let mut stream = Vec::new();
            let mut truncated = true;
            while stream.len() < MAX_FREE_DECODE {
                if next == ex.end_of_answer {
                    truncated = false;
                    break;
                }
                stream.push(next);
                let h = forward(&mut tape, &tw, &[InputSegment::Tokens(vec![next])], &mut cache, None)?;
                let l = lm_head(&mut tape, &tw, h)?;
                next = crate::model::greedy_pick(tape.value(l).row(0));
            }
            let answer = extract_after_subsequence(&stream, &ex.prompt);
            match answer {
                Some(tokens) => Ok((tokens, truncated)),
                None => Ok((Vec::new(), truncated)),
            }
        }
    }
}

fn extract_after_subsequence(stream: &[u32], needle: &[u32]) -> Option<Vec<u32>> {
    if needle.is_empty() || stream.len() < needle.len() {
        return None;
    }
    (0..=stream.len() - needle.len())
        .rev()
        .find(|&i| &stream[i..i + needle.len()] == needle)
        .map(|i| stream[i + needle.len()..].to_vec())
}

/// Full training run: epoch loop with deterministic shuffling, per-step
/// metrics, per-epoch dev accuracy, and best-by-dev-accuracy tracking.
pub struct TrainOutcome<S> {
    pub final_weights: TransformerWeights<S>,
    pub best_weights: TransformerWeights<S>,
    pub best_dev_accuracy: f64,
    pub metrics: Vec<StepRecord>,
    pub dev_accuracy_per_epoch: Vec<f64>,
}

pub fn run_training<S: Scalar>(
    mut weights: TransformerWeights<S>,
    st: &SpecialTokens,
    train: &[TrainExample],
    dev: &[TrainExample],
    rcfg: &ReasoningConfig,
    lw: &LossWeights,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    lw.validate()?;
    rcfg.validate()?;
    let mut opt = AdamW::new(&weights);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);

    let mut best_weights = weights.clone();
    let mut best_dev_accuracy = -1.0f64;
    let mut metrics = Vec::with_capacity(total_steps);
    let mut dev_accuracy_per_epoch = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let lr = scheduled_lr(cfg, step, total_steps);
            let (losses, grad_norm) =
                train_step(&mut weights, &mut opt, st, &batch, rcfg, lw, cfg, lr, step)?;
            let record = StepRecord {
                step,
                lr,
                teacher_ce: losses.teacher_ce,
                student_ce: losses.student_ce,
                distill_l1: losses.distill_l1,
                total: losses.total,
                grad_norm,
            };
            on_step(&record);
            metrics.push(record);
            step += 1;
        }
        let dev_report = evaluate(&weights, st, dev, rcfg, EvalMode::Latent)?;
        dev_accuracy_per_epoch.push(dev_report.accuracy);
        if dev_report.accuracy > best_dev_accuracy {
            best_dev_accuracy = dev_report.accuracy;
            best_weights = weights.clone();
        }
    }

    Ok(TrainOutcome {
        final_weights: weights,
        best_weights,
        best_dev_accuracy,
        metrics,
        dev_accuracy_per_epoch,
    })
}
