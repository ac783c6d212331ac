//! Prompt templates and the latent splice.
//!
//! ```text
//! task=translate lang={lang} span={DDD}-{DDD} signs=<SignHere>
//! task=align sentence={sentence} [prior={DDD}-{DDD}] signs=<SignHere>
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{
    digit_id, id_digit, Tokenizer, EOS, LANG, PRIOR, SENTENCE, SEP, SIGNS, SIGN_HERE, SPAN,
    TASK_ALIGN, TASK_TRANSLATE,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Frames per model input window; timestamps index into it.
pub const WINDOW_FRAMES: usize = 500;
/// Target tokens for a timestamp pair: three digits, `-`, three digits.
pub const TIMESTAMP_TOKENS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Slt,
    Ssa,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptedSample {
    pub task: Task,
    pub prompt: Vec<usize>,
    pub splice: usize,
    /// Target ids ending in `</s>`; empty at inference.
    pub target: Vec<usize>,
}

pub fn encode_frame(v: usize) -> Result<[usize; 3]> {
    if v >= WINDOW_FRAMES {
        return Err(Error::contract(format!("frame {v} outside the {WINDOW_FRAMES}-frame window")));
    }
    Ok([v / 100, v / 10 % 10, v % 10].map(digit_id))
}

pub fn encode_span(start: usize, end: usize) -> Result<Vec<usize>> {
    if start > end {
        return Err(Error::contract(format!("span {start}-{end} ends before it starts")));
    }
    let mut out = encode_frame(start)?.to_vec();
    out.push(SEP);
    out.extend(encode_frame(end)?);
    Ok(out)
}

/// Parse `DDD-DDD` ids. Spans decoded backwards are swapped.
pub fn decode_span(ids: &[usize]) -> Option<(usize, usize)> {
    if ids.len() < TIMESTAMP_TOKENS || ids[3] != SEP {
        return None;
    }
    let num = |s: &[usize]| -> Option<usize> {
        s.iter().try_fold(0, |acc, &id| id_digit(id).map(|d| acc * 10 + d))
    };
    let (a, b) = (num(&ids[..3])?, num(&ids[4..7])?);
    Some((a.min(b), a.max(b)))
}

pub fn build_slt_prompt(
    tok: &Tokenizer,
    start: usize,
    end: usize,
    lang: &str,
    sentence: Option<&str>,
) -> Result<PromptedSample> {
    let mut prompt = vec![TASK_TRANSLATE, LANG, tok.lang_id(lang)?, SPAN];
    prompt.extend(encode_span(start, end)?);
    prompt.extend([SIGNS, SIGN_HERE]);
    let target = match sentence {
        Some(s) => {
            let mut t = tok.encode(s);
            t.push(EOS);
            t
        }
        None => Vec::new(),
    };
    Ok(PromptedSample {
        task: Task::Slt,
        splice: prompt.len() - 1,
        prompt,
        target,
    })
}

/// `prior` is included only when available and `include_prior` holds.
pub fn build_ssa_prompt(
    tok: &Tokenizer,
    sentence: &str,
    prior: Option<(usize, usize)>,
    include_prior: bool,
    target: Option<(usize, usize)>,
) -> Result<PromptedSample> {
    let words = tok.encode(sentence);
    if words.is_empty() {
        return Err(Error::contract("alignment prompt needs a non-empty sentence"));
    }
    let mut prompt = vec![TASK_ALIGN, SENTENCE];
    prompt.extend(words);
    if let (Some((s, e)), true) = (prior, include_prior) {
        prompt.push(PRIOR);
        prompt.extend(encode_span(s, e)?);
    }
    prompt.extend([SIGNS, SIGN_HERE]);
    let target = match target {
        Some((s, e)) => {
            let mut t = encode_span(s, e)?;
            t.push(EOS);
            t
        }
        None => Vec::new(),
    };
    Ok(PromptedSample {
        task: Task::Ssa,
        splice: prompt.len() - 1,
        prompt,
        target,
    })
}

/// The training-time coin deciding whether the audio prior is shown.
pub fn prior_coin(rng: &mut impl Rng) -> bool {
    rng.gen_bool(0.5)
}

/// Replace row `splice` of `embeds: [P, D]` by `latents: [T', D]`.
pub fn splice_latents(tape: &mut Tape, embeds: Var, splice: usize, latents: Var) -> Result<Var> {
    let se = tape.shape(embeds).to_vec();
    let sl = tape.shape(latents).to_vec();
    if se.len() != 2 || sl.len() != 2 || se[1] != sl[1] {
        return Err(Error::shape("splice_latents", &se, &sl));
    }
    if splice >= se[0] {
        return Err(Error::contract(format!("splice index {splice} past prompt length {}", se[0])));
    }
    let mut parts = Vec::with_capacity(3);
    if splice > 0 {
        parts.push(tape.slice(embeds, 0, 0, splice)?);
    }
    parts.push(latents);
    if splice + 1 < se[0] {
        parts.push(tape.slice(embeds, 0, splice + 1, se[0])?);
    }
    tape.concat(&parts, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::tokenizer::{DEFAULT_LANGS, DEFAULT_VOCAB_SIZE};
    use crate::tensor::{Init, Tensor};

    fn tok() -> Tokenizer {
        Tokenizer::train(["a red cat sat", "the cat ran"], DEFAULT_VOCAB_SIZE, &DEFAULT_LANGS).unwrap()
    }

    #[test]
    fn slt_span_digits() {
        let t = tok();
        let p = build_slt_prompt(&t, 37, 142, "en", Some("the cat ran")).unwrap();
        let span: Vec<&str> = p.prompt[4..11].iter().map(|&i| t.token(i).unwrap()).collect();
        assert_eq!(span, ["0", "3", "7", "-", "1", "4", "2"]);
        assert_eq!(p.prompt.iter().filter(|&&i| i == SIGN_HERE).count(), 1);
        assert_eq!(p.prompt[p.splice], SIGN_HERE);
        assert_eq!(t.render(&p.prompt), "task=translate lang=en span=037-142 signs=<SignHere>");
        assert_eq!(*p.target.last().unwrap(), EOS);

        let z = build_slt_prompt(&t, 0, 0, "en", None).unwrap();
        assert_eq!(t.render(&z.prompt[4..11]), "000-000");
        assert!(build_slt_prompt(&t, 10, 500, "en", None).is_err());
        assert!(build_slt_prompt(&t, 20, 10, "en", None).is_err());
    }

    #[test]
    fn language_changes_the_prompt() {
        let t = tok();
        let a = build_slt_prompt(&t, 1, 2, "ase", None).unwrap();
        let b = build_slt_prompt(&t, 1, 2, "bsl", None).unwrap();
        assert_ne!(a.prompt, b.prompt);
    }

    #[test]
    fn ssa_prior_follows_the_coin() {
        let t = tok();
        let with = build_ssa_prompt(&t, "a red cat", Some((100, 200)), true, Some((120, 210))).unwrap();
        assert!(with.prompt.contains(&PRIOR));
        assert_eq!(t.render(&with.prompt), "task=align sentence=a red cat prior=100-200 signs=<SignHere>");
        let without = build_ssa_prompt(&t, "a red cat", Some((100, 200)), false, Some((120, 210))).unwrap();
        assert!(!without.prompt.contains(&PRIOR));
        assert_eq!(with.target.len(), TIMESTAMP_TOKENS + 1);
        assert!(with.target[..7].iter().all(|&i| id_digit(i).is_some() || i == SEP));
        assert!(build_ssa_prompt(&t, "  ", None, false, None).is_err());
    }

    #[test]
    fn span_codec_round_trips_all_frames() {
        for v in 0..WINDOW_FRAMES {
            let ids = encode_span(v, v).unwrap();
            assert_eq!(decode_span(&ids), Some((v, v)));
        }
        let mut ids = encode_span(5, 300).unwrap();
        ids.swap(0, 4);
        ids.swap(1, 5);
        ids.swap(2, 6);
        assert_eq!(decode_span(&ids), Some((5, 300)));
    }

    #[test]
    fn splice_lengths_and_untouched_rows() {
        let mut init = Init::new(0);
        let mut tape = Tape::new();
        let e = tape.constant(init.uniform(&[6, 4], 1.0));
        for tp in [1, 122] {
            let l = tape.constant(init.uniform(&[tp, 4], 1.0));
            let out = splice_latents(&mut tape, e, 3, l).unwrap();
            assert_eq!(tape.shape(out), &[6 + tp - 1, 4]);
            let v = tape.value(out);
            assert_eq!(&v.data()[..12], &tape.value(e).data()[..12]);
            assert_eq!(&v.data()[(3 + tp) * 4..], &tape.value(e).data()[16..]);
        }
        let bad = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(splice_latents(&mut tape, e, 3, bad), Err(Error::Shape { .. })));
    }
}
