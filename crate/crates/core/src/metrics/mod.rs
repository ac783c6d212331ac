//! Alignment and translation metrics.

pub mod external;
pub mod frames;
pub mod text;

pub use external::{CommandScorer, ExternalScorer};
pub use frames::{cb_accuracy, f1_at_iou, frame_accuracy, iou, labels_from_intervals, IOU_THRESHOLDS};
pub use text::{bleu4, cider, lemmatize, rouge_l, word_iou};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SltScores {
    pub b4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub word_iou: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SsaScores {
    pub acc: f64,
    pub cb_acc: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slt: Option<SltScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssa: Option<SsaScores>,
}

pub fn slt_scores(hyps: &[String], refs: &[String]) -> Result<SltScores> {
    Ok(SltScores {
        b4: bleu4(hyps, refs)?,
        rouge_l: rouge_l(hyps, refs)?,
        cider: cider(hyps, refs)?,
        word_iou: word_iou(hyps, refs)?,
    })
}

/// Frame metrics over the whole video plus per-cue F1 at the three thresholds.
pub fn ssa_scores(
    pred: &[Option<(usize, usize)>],
    truth: &[(usize, usize)],
    frames: usize,
) -> Result<SsaScores> {
    let resolved: Vec<(usize, usize)> = pred.iter().flatten().cloned().collect();
    let classes: Vec<usize> = pred
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_some())
        .map(|(i, _)| i + 1)
        .collect();
    let mut p = vec![0; frames];
    for (&(s, e), &c) in resolved.iter().zip(&classes) {
        for f in s..=e.min(frames.saturating_sub(1)) {
            p[f] = c;
        }
    }
    let t = labels_from_intervals(truth, frames);
    Ok(SsaScores {
        acc: frame_accuracy(&p, &t)?,
        cb_acc: cb_accuracy(&p, &t)?,
        f1_10: f1_at_iou(pred, truth, 0.10)?,
        f1_25: f1_at_iou(pred, truth, 0.25)?,
        f1_50: f1_at_iou(pred, truth, 0.50)?,
    })
}
