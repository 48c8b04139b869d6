//! Synthetic multi-step arithmetic corpus with equation-style reasoning
//! chains, shaped like equation-only grade-school math data.
//!
//! Each example is a chain of k integer operations: the first step may
//! multiply or add/subtract two bound variables, later steps fold one more
//! single-digit variable into the running value. The gold chain writes the
//! literal equations, e.g. `<<7*3=21>><<21-5=16>>`.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// One word problem with its gold equation chain and final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithmeticExample {
    pub question: String,
    pub cot: String,
    pub answer: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ArithmeticExample>,
    pub dev: Vec<ArithmeticExample>,
    pub test: Vec<ArithmeticExample>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Inclusive range of reasoning steps per example; must lie in [1, 6].
    pub step_range: (usize, usize),
    /// Inclusive operand range; must lie in [1, 99].
    pub operand_range: (i64, i64),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            train: 10_000,
            dev: 500,
            test: 1_000,
            step_range: (2, 3),
            operand_range: (2, 9),
        }
    }
}

/// Running values are kept within this bound so answers stay short.
const VALUE_CAP: i64 = 99;
/// No answer string may exceed this share of the corpus while generating.
const ANSWER_SHARE_CAP: f64 = 0.10;

const VAR_NAMES: &[char] = &['a', 'b', 'c', 'd', 'e', 'f', 'g'];

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    let (k_lo, k_hi) = cfg.step_range;
    if k_lo < 1 || k_hi > 6 || k_lo > k_hi {
        return Err(Error::InvalidArgument(format!(
            "step range {k_lo}..={k_hi} outside [1, 6]"
        )));
    }
    let (op_lo, op_hi) = cfg.operand_range;
    if op_lo < 1 || op_hi > VALUE_CAP || op_lo > op_hi {
        return Err(Error::VocabOverflow { value: op_hi });
    }

    let total = cfg.train + cfg.dev + cfg.test;
    let share_cap = ((total as f64 * ANSWER_SHARE_CAP).ceil() as usize).max(1);
    let mut seen = HashSet::new();
    let mut answer_counts: HashMap<String, usize> = HashMap::new();
    let mut examples = Vec::with_capacity(total);

    let mut candidate = 0u64;
    while examples.len() < total {
        // one derived stream per candidate index, so output depends only on
        // the seed, never on iteration interleaving
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ candidate);
        candidate += 1;
        let ex = sample_example(&mut rng, cfg);
        if seen.contains(&ex.question) {
            continue;
        }
        let count = answer_counts.entry(ex.answer.clone()).or_insert(0);
        if *count >= share_cap {
            continue;
        }
        *count += 1;
        seen.insert(ex.question.clone());
        validate_example(&ex)?;
        examples.push(ex);
    }

    let dev_start = cfg.train;
    let test_start = cfg.train + cfg.dev;
    Ok(Dataset {
        test: examples.split_off(test_start),
        dev: examples.split_off(dev_start),
        train: examples,
    })
}

fn sample_example(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> ArithmeticExample {
    let (k_lo, k_hi) = cfg.step_range;
    let (op_lo, op_hi) = cfg.operand_range;
    let k = rng.gen_range(k_lo..=k_hi);

    loop {
        let mut operands = Vec::with_capacity(k + 1);
        for _ in 0..k + 1 {
            operands.push(rng.gen_range(op_lo..=op_hi));
        }
        // the first step may multiply; later steps only shift the running
        // value, keeping answers within two digits
        let mut ops = Vec::with_capacity(k);
        ops.push(*pick(rng, &['*', '+', '-']));
        for _ in 1..k {
            ops.push(*pick(rng, &['+', '-']));
        }

        let mut value = operands[0];
        let mut cot = String::new();
        let mut ok = true;
        for step in 0..k {
            let rhs = operands[step + 1];
            let next = match ops[step] {
                '*' => value * rhs,
                '+' => value + rhs,
                '-' => value - rhs,
                _ => unreachable!(),
            };
            if !(0..=VALUE_CAP).contains(&next) {
                ok = false;
                break;
            }
            cot.push_str(&format!("<<{}{}{}={}>>", value, ops[step], rhs, next));
            value = next;
        }
        if !ok {
            continue;
        }

        let mut question = String::new();
        for (i, v) in operands.iter().enumerate() {
            question.push_str(&format!("{}={}. ", VAR_NAMES[i], v));
        }
        question.push_str("What is ");
        question.push(VAR_NAMES[0]);
        for (step, op) in ops.iter().enumerate() {
            question.push(*op);
            question.push(VAR_NAMES[step + 1]);
        }
        question.push('?');

        return ArithmeticExample { question, cot, answer: value.to_string(), steps: k };
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// Independent re-evaluation: parse the question's bindings and expression,
/// evaluate left to right, and check both the chain equations and the final
/// answer. This is the oracle the generator must satisfy.
pub fn validate_example(ex: &ArithmeticExample) -> Result<()> {
    let bad = |msg: String| Error::InvalidArgument(format!("invalid example: {msg}"));

    // bindings
    let mut bindings: HashMap<char, i64> = HashMap::new();
    let expr_start = ex.question.find("What is ").ok_or_else(|| bad("missing question stem".into()))?;
    for part in ex.question[..expr_start].split(". ") {
        if part.is_empty() {
            continue;
        }
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("bad binding '{part}'")))?;
        let name = name.chars().next().ok_or_else(|| bad("empty variable".into()))?;
        bindings.insert(name, value.trim_end_matches('.').parse::<i64>().map_err(|e| bad(e.to_string()))?);
    }

    // expression, left-associative
    let expr = ex.question[expr_start + "What is ".len()..].trim_end_matches('?');
    let mut chars = expr.chars();
    let first = chars.next().ok_or_else(|| bad("empty expression".into()))?;
    let mut value = *bindings.get(&first).ok_or_else(|| bad(format!("unbound {first}")))?;
    let mut expected_equations = Vec::new();
    while let (Some(op), Some(var)) = (chars.next(), chars.next()) {
        let rhs = *bindings.get(&var).ok_or_else(|| bad(format!("unbound {var}")))?;
        let next = match op {
            '*' => value * rhs,
            '+' => value + rhs,
            '-' => value - rhs,
            other => return Err(bad(format!("unknown operator {other}"))),
        };
        expected_equations.push(format!("<<{value}{op}{rhs}={next}>>"));
        value = next;
    }

    if expected_equations.concat() != ex.cot {
        return Err(bad(format!("chain mismatch: expected {}, got {}", expected_equations.concat(), ex.cot)));
    }
    if value.to_string() != ex.answer {
        return Err(bad(format!("answer mismatch: expected {value}, got {}", ex.answer)));
    }
    if expected_equations.len() != ex.steps {
        return Err(bad("step count mismatch".into()));
    }
    Ok(())
}

pub fn write_jsonl(path: &Path, examples: &[ArithmeticExample]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ArithmeticExample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
