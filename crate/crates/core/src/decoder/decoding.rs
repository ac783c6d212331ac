//! Greedy, beam and timestamp-constrained decoding.

use super::model::ToyEncDec;
use super::prompt::TIMESTAMP_TOKENS;
use super::tokenizer::{digit_id, DIGIT_BASE, EOS, PAD, SEP};
use crate::error::Result;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    Free,
    /// `DDD-DDD</s>` with leading digits limited to 0-4.
    Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Search {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, including the final `</s>` when emitted.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Ids permitted at output position `pos`; `None` means unrestricted.
pub fn allowed_tokens(constraint: Constraint, pos: usize) -> Option<Vec<usize>> {
    match constraint {
        Constraint::Free => None,
        Constraint::Timestamp => Some(match pos {
            0 | 4 => (0..5).map(digit_id).collect(),
            3 => vec![SEP],
            p if p < TIMESTAMP_TOKENS => (DIGIT_BASE..DIGIT_BASE + 10).collect(),
            _ => vec![EOS],
        }),
    }
}

fn max_steps(constraint: Constraint, max_len: usize) -> usize {
    match constraint {
        Constraint::Free => max_len,
        Constraint::Timestamp => TIMESTAMP_TOKENS + 1,
    }
}

/// Log-probabilities of the next token, renormalized over the allowed set.
pub fn next_log_probs(
    model: &ToyEncDec,
    memory: &Tensor,
    generated: &[usize],
    constraint: Constraint,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mem = tape.constant(memory.clone());
    let mut prefix = vec![PAD];
    prefix.extend_from_slice(generated);
    let logits = model.decode_logits(&mut tape, mem, &prefix)?;
    let v = model.vocab_size();
    let row = &tape.value(logits).data()[(prefix.len() - 1) * v..];
    let mut out = vec![f64::NEG_INFINITY; v];
    let ids: Vec<usize> = match allowed_tokens(constraint, generated.len()) {
        Some(a) => a,
        None => (0..v).filter(|&i| i != PAD).collect(),
    };
    let m = ids.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + ids.iter().map(|&i| (row[i] - m).exp()).sum::<f64>().ln();
    for i in ids {
        out[i] = row[i] - lse;
    }
    Ok(out)
}

fn argmax(lp: &[f64]) -> usize {
    // first index wins ties
    lp.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

pub fn greedy(model: &ToyEncDec, memory: &Tensor, constraint: Constraint, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    for _ in 0..max_steps(constraint, max_len) {
        let lp = next_log_probs(model, memory, &h.tokens, constraint)?;
        let t = argmax(&lp);
        h.tokens.push(t);
        h.log_prob += lp[t];
        if t == EOS {
            break;
        }
    }
    Ok(h)
}

/// Beam search over summed log-probabilities. Stops once the best finished
/// hypothesis scores at least as well as every live one.
pub fn beam(
    model: &ToyEncDec,
    memory: &Tensor,
    width: usize,
    constraint: Constraint,
    max_len: usize,
) -> Result<Hypothesis> {
    let width = width.max(1);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_steps(constraint, max_len) {
        let mut cands = Vec::new();
        for h in &live {
            let lp = next_log_probs(model, memory, &h.tokens, constraint)?;
            for (t, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    let mut tokens = h.tokens.clone();
                    tokens.push(t);
                    cands.push(Hypothesis {
                        tokens,
                        log_prob: h.log_prob + l,
                    });
                }
            }
        }
        cands.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        live.clear();
        for c in cands {
            if live.len() == width {
                break;
            }
            if c.finished() {
                if done.len() < width {
                    done.push(c);
                }
            } else {
                live.push(c);
            }
        }
        let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= best_live {
            break;
        }
    }
    let pool = if done.is_empty() { live } else { done };
    Ok(pool
        .into_iter()
        .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
        .expect("beam keeps at least one hypothesis"))
}

pub fn decode(
    model: &ToyEncDec,
    memory: &Tensor,
    search: Search,
    constraint: Constraint,
    max_len: usize,
) -> Result<Hypothesis> {
    match search {
        Search::Greedy => greedy(model, memory, constraint, max_len),
        Search::Beam(k) => beam(model, memory, k, constraint, max_len),
    }
}
