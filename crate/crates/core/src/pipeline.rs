//! Inference over full videos: translation of a span and subtitle alignment.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataio::keypoints::KeypointClip;
use crate::dataio::lip::LipClip;
use crate::dataio::subtitles::Cue;
use crate::dataio::text::clean_text;
use crate::decoder::decoding::{decode, Constraint, Search};
use crate::decoder::prompt::{build_slt_prompt, build_ssa_prompt, decode_span, PromptedSample, WINDOW_FRAMES};
use crate::decoder::tokenizer::{Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::model::SignModel;
use crate::ssa::{build_profile, cue_frames, frames_to_seconds, resolve_overlaps, to_window_relative, window_origin, DEFAULT_BETA};
use crate::tensor::Tensor;

/// Free-running output cap for translation.
pub const MAX_TRANSLATION_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub text: String,
    pub tokens: Vec<usize>,
    pub origin: usize,
    pub prompt: Vec<usize>,
}

fn check_inputs(clip: &KeypointClip, lip: &LipClip) -> Result<()> {
    if clip.frames != lip.frames {
        return Err(Error::contract(format!(
            "{} keypoint frames but {} lip frames",
            clip.frames, lip.frames
        )));
    }
    Ok(())
}

fn window_features(model: &SignModel, clip: &KeypointClip, lip: &LipClip, origin: usize) -> Result<Tensor> {
    model.features_value(&clip.window(origin, WINDOW_FRAMES), &lip.window(origin, WINDOW_FRAMES))
}

fn run(model: &SignModel, sample: &PromptedSample, features: &Tensor, search: Search, constraint: Constraint) -> Result<Vec<usize>> {
    let mem = model.memory_value(sample, features)?;
    Ok(decode(&model.decoder, &mem, search, constraint, MAX_TRANSLATION_TOKENS)?.tokens)
}

/// Translate frames `start..=end` of a video from a window centred on them.
pub fn translate(
    model: &SignModel,
    tok: &Tokenizer,
    clip: &KeypointClip,
    lip: &LipClip,
    span: (usize, usize),
    lang: &str,
    search: Search,
) -> Result<Translation> {
    check_inputs(clip, lip)?;
    let (s, e) = span;
    if s > e || e >= clip.frames {
        return Err(Error::contract(format!(
            "span {s}-{e} outside a {}-frame video",
            clip.frames
        )));
    }
    let origin = window_origin((s + e) as f64 / 2.0, clip.frames, WINDOW_FRAMES);
    let (rs, re) = to_window_relative(span, origin);
    let sample = build_slt_prompt(tok, rs, re, lang, None)?;
    let f = window_features(model, clip, lip, origin)?;
    let tokens = run(model, &sample, &f, search, Constraint::Free)?;
    let body: Vec<usize> = tokens.iter().copied().take_while(|&t| t != EOS).collect();
    Ok(Translation {
        text: tok.decode(&body),
        tokens,
        origin,
        prompt: sample.prompt,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueReport {
    pub cue_index: usize,
    /// Inclusive video frames decoded for the cue.
    pub predicted: (usize, usize),
    /// Inclusive frames after overlap removal.
    pub resolved: (usize, usize),
    /// Centre frame of the confidence plateau.
    pub profile_peak: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub cues: Vec<Cue>,
    pub report: Vec<CueReport>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignConfig {
    pub beta: f64,
    pub search: Search,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            beta: DEFAULT_BETA,
            search: Search::Beam(5),
        }
    }
}

/// Re-time audio-aligned cues to the signing. Each cue is decoded from a
/// window centred on its audio timing, then overlaps are removed jointly.
pub fn align(
    model: &SignModel,
    tok: &Tokenizer,
    clip: &KeypointClip,
    lip: &LipClip,
    audio: &[Cue],
    cfg: &AlignConfig,
) -> Result<Alignment> {
    check_inputs(clip, lip)?;
    if audio.is_empty() {
        return Ok(Alignment {
            cues: Vec::new(),
            report: Vec::new(),
            warnings: Vec::new(),
        });
    }
    let fps = clip.fps as f64;
    let last = clip.frames.saturating_sub(1);
    let mut cache: HashMap<usize, Tensor> = HashMap::new();
    let mut predicted = Vec::with_capacity(audio.len());
    let mut warnings = Vec::new();
    for (k, cue) in audio.iter().enumerate() {
        let (ps, pe) = cue_frames(cue.start, cue.end, fps);
        let prior = (ps.min(last), pe.min(last));
        let origin = window_origin((prior.0 + prior.1) as f64 / 2.0, clip.frames, WINDOW_FRAMES);
        let text = clean_text(&cue.text);
        let sample = match build_ssa_prompt(tok, &text, Some(to_window_relative(prior, origin)), true, None) {
            Ok(s) => s,
            Err(Error::Contract(_)) => {
                warnings.push(format!("cue {k} has no usable text, keeping its audio timing"));
                predicted.push(prior);
                continue;
            }
            Err(e) => return Err(e),
        };
        if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(origin) {
            e.insert(window_features(model, clip, lip, origin)?);
        }
        let tokens = run(model, &sample, &cache[&origin], cfg.search, Constraint::Timestamp)?;
        let span = match decode_span(&tokens) {
            Some((a, b)) => ((origin + a).min(last), (origin + b).min(last)),
            None => {
                warnings.push(format!("cue {k}: unparsable timestamp, keeping its audio timing"));
                prior
            }
        };
        predicted.push(span);
    }
    let profiles: Vec<_> = predicted
        .iter()
        .enumerate()
        .map(|(k, &(s, e))| build_profile(k, s, e, cfg.beta))
        .collect();
    let res = resolve_overlaps(&profiles, clip.frames)?;
    warnings.extend(res.warnings.iter().cloned());
    let mut cues = Vec::with_capacity(audio.len());
    let mut report = Vec::with_capacity(audio.len());
    for (k, (&p, &r)) in predicted.iter().zip(&res.intervals).enumerate() {
        let (start, end) = frames_to_seconds(r, fps);
        cues.push(Cue {
            start,
            end,
            text: audio[k].text.clone(),
        });
        let plateau = profiles[k].plateau().unwrap_or(p);
        report.push(CueReport {
            cue_index: k,
            predicted: p,
            resolved: r,
            profile_peak: (plateau.0 + plateau.1) / 2,
        });
    }
    Ok(Alignment { cues, report, warnings })
}
