//! Timestamp objective, confidence profiles and overlap resolution.

pub mod overlap;
pub mod profile;
pub mod window;

pub use crate::decoder::prompt::{decode_span, encode_span, TIMESTAMP_TOKENS};
pub use overlap::{exhaustive_resolve, resolve_overlaps, segmentation_score, Resolution, BACKGROUND_SCORE};
pub use profile::{build_profile, CueProfile, DEFAULT_BETA};
pub use window::{cue_frames, frames_to_seconds, to_window_relative, window_origin};

use crate::decoder::tokenizer::DIGIT_BASE;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.01;
/// Target positions of the six digits within `DDD-DDD</s>`.
pub const DIGIT_POSITIONS: [usize; 6] = [0, 1, 2, 4, 5, 6];

/// Expected digit value `Σ k·p(k)` of a 10-way distribution.
pub fn soft_decode(p: &[f64]) -> Result<f64> {
    if p.len() != 10 {
        return Err(Error::shape("soft_decode", &[p.len()], &[10]));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::contract(format!("digit distribution sums to {total}")));
    }
    Ok(p.iter().enumerate().map(|(k, &v)| k as f64 * v).sum())
}

/// `Σ_d |ỹ_d − y_d|` over plain distributions.
pub fn l1_from_distributions(dists: &[[f64; 10]], target: &[usize]) -> Result<f64> {
    if dists.len() != target.len() {
        return Err(Error::shape("ssa_l1", &[dists.len()], &[target.len()]));
    }
    dists
        .iter()
        .zip(target)
        .map(|(p, &y)| Ok((soft_decode(p)? - y as f64).abs()))
        .sum()
}

/// Soft-decoded L1 on teacher-forced logits `[n, V]` whose rows at
/// [`DIGIT_POSITIONS`] predict the six target digits. The softmax runs over
/// the ten digit ids only.
pub fn ssa_l1(tape: &mut Tape, logits: Var, digits: &[usize; 6]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] < TIMESTAMP_TOKENS || s[1] < DIGIT_BASE + 10 {
        return Err(Error::shape("ssa_l1", &s, &[TIMESTAMP_TOKENS, DIGIT_BASE + 10]));
    }
    let rows = DIGIT_POSITIONS
        .iter()
        .map(|&p| tape.slice(logits, 0, p, p + 1))
        .collect::<Result<Vec<_>>>()?;
    let rows = tape.concat(&rows, 0)?;
    let d = tape.slice(rows, 1, DIGIT_BASE, DIGIT_BASE + 10)?;
    let p = tape.softmax(d, 1)?;
    let k = tape.constant(Tensor::new(&[10, 1], (0..10).map(f64::from).collect())?);
    let y = tape.matmul(p, k)?;
    let t = tape.constant(Tensor::new(&[6, 1], digits.iter().map(|&v| v as f64).collect())?);
    let diff = tape.sub(y, t)?;
    let a = tape.abs(diff);
    tape.sum_all(a)
}

pub struct SsaLoss {
    pub total: Var,
    pub ce: Var,
    pub l1: Var,
}

/// `L_CE + λ·L_L1` on teacher-forced logits for a `DDD-DDD</s>` target.
pub fn ssa_loss(tape: &mut Tape, logits: Var, target: &[usize], lambda: f64) -> Result<SsaLoss> {
    let digits = target_digits(target)?;
    let ce = tape.cross_entropy(logits, target)?;
    let l1 = ssa_l1(tape, logits, &digits)?;
    let w = tape.scale(l1, lambda);
    let total = tape.add(ce, w)?;
    Ok(SsaLoss { total, ce, l1 })
}

/// The six digit values of a timestamp target; exactly six positions by
/// construction.
pub fn target_digits(target: &[usize]) -> Result<[usize; 6]> {
    use crate::decoder::tokenizer::id_digit;
    if target.len() < TIMESTAMP_TOKENS {
        return Err(Error::contract("timestamp target shorter than 7 tokens"));
    }
    let mut out = [0; 6];
    for (o, &p) in out.iter_mut().zip(&DIGIT_POSITIONS) {
        *o = id_digit(target[p])
            .ok_or_else(|| Error::contract(format!("target position {p} is not a digit")))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::tokenizer::EOS;
    use crate::tensor::Init;
    use proptest::prelude::*;

    #[test]
    fn soft_decode_examples() {
        let mut one = [0.0; 10];
        one[7] = 1.0;
        assert_eq!(soft_decode(&one).unwrap(), 7.0);
        assert!((soft_decode(&[0.1; 10]).unwrap() - 4.5).abs() < 1e-12);
        let mut half = [0.0; 10];
        half[2] = 0.5;
        half[4] = 0.5;
        assert_eq!(soft_decode(&half).unwrap(), 3.0);
        assert!(soft_decode(&[0.2; 10]).is_err());
    }

    #[test]
    fn l1_examples() {
        let one = |k: usize| {
            let mut p = [0.0; 10];
            p[k] = 1.0;
            p
        };
        let digits = [1, 2, 3, 4, 5, 6];
        let perfect: Vec<[f64; 10]> = digits.iter().map(|&d| one(d)).collect();
        assert_eq!(l1_from_distributions(&perfect, &digits).unwrap(), 0.0);
        let mut one_uniform = perfect.clone();
        one_uniform[2] = [0.1; 10];
        let t = [1, 2, 0, 4, 5, 6];
        assert!((l1_from_distributions(&one_uniform, &t).unwrap() - 4.5).abs() < 1e-12);
    }

    fn target(s: usize, e: usize) -> Vec<usize> {
        let mut t = encode_span(s, e).unwrap();
        t.push(EOS);
        t
    }

    #[test]
    fn tape_l1_matches_direct_expectation() {
        let mut init = Init::new(0);
        for _ in 0..20 {
            let logits = init.uniform(&[8, 24], 3.0);
            let tgt = target(137, 402);
            let digits = target_digits(&tgt).unwrap();
            let mut tape = Tape::new();
            let z = tape.constant(logits.clone());
            let l = ssa_l1(&mut tape, z, &digits).unwrap();
            let dists: Vec<[f64; 10]> = DIGIT_POSITIONS
                .iter()
                .map(|&p| {
                    let row = &logits.row(p)[DIGIT_BASE..DIGIT_BASE + 10];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    std::array::from_fn(|k| e[k] / s)
                })
                .collect();
            let want = l1_from_distributions(&dists, &digits).unwrap();
            assert!((tape.value(l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_parts_and_gradcheck_on_logits() {
        let mut init = Init::new(1);
        let logits = init.uniform(&[8, 24], 2.0);
        let tgt = target(37, 142);
        let mut tape = Tape::new();
        let z = tape.constant(logits.clone());
        let zero = ssa_loss(&mut tape, z, &tgt, 0.0).unwrap();
        assert_eq!(tape.value(zero.total).item(), tape.value(zero.ce).item());

        let z = tape.variable(logits.clone());
        let l = ssa_loss(&mut tape, z, &tgt, DEFAULT_LAMBDA).unwrap();
        tape.backward(l.total).unwrap();
        let g = tape.grad(z).unwrap();
        let h = 1e-5;
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let l = ssa_loss(&mut t, v, &tgt, DEFAULT_LAMBDA).unwrap();
            t.value(l.total).item()
        };
        for i in 0..logits.numel() {
            let mut up = logits.clone();
            up.data_mut()[i] += h;
            let mut dn = logits.clone();
            dn.data_mut()[i] -= h;
            let num = (eval(&up) - eval(&dn)) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - num).abs() / a.abs().max(1.0) <= 1e-4, "entry {i}: {a} vs {num}");
        }
    }

    #[test]
    fn six_digit_positions() {
        let t = target(5, 499);
        assert_eq!(target_digits(&t).unwrap(), [0, 0, 5, 4, 9, 9]);
        assert_eq!(DIGIT_POSITIONS.len(), 6);
    }

    proptest! {
        #[test]
        fn moving_mass_up_increases_expectation(raw in proptest::collection::vec(0.01f64..1.0, 10), k in 0usize..9, frac in 0.01f64..1.0) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let mut q = p.clone();
            let moved = p[k] * frac;
            q[k] -= moved;
            q[k + 1] += moved;
            prop_assert!(soft_decode(&q).unwrap() > soft_decode(&p).unwrap());
        }
    }
}
