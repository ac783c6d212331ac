//! Frame-level and interval metrics for alignment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Background 0, cue `i` labelled `i + 1`. Later cues win on overlap.
pub fn labels_from_intervals(intervals: &[(usize, usize)], frames: usize) -> Vec<usize> {
    let mut out = vec![0; frames];
    for (i, &(s, e)) in intervals.iter().enumerate() {
        for f in s..=e {
            if f < frames {
                out[f] = i + 1;
            }
        }
    }
    out
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "labelings differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::contract("empty labeling"));
    }
    Ok(())
}

pub fn frame_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean per-class recall over classes present in `truth`.
pub fn cb_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        let e = per.entry(t).or_default();
        e.0 += 1;
        if p == t {
            e.1 += 1;
        }
    }
    Ok(per.values().map(|&(n, h)| h as f64 / n as f64).sum::<f64>() / per.len() as f64)
}

/// IoU of inclusive frame spans.
pub fn iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

/// F1 where prediction `i` is a hit when its IoU with truth `i` reaches the
/// threshold. Missing predictions count against recall only.
pub fn f1_at_iou(pred: &[Option<(usize, usize)>], truth: &[(usize, usize)], threshold: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} cues",
            pred.len(),
            truth.len()
        )));
    }
    let made = pred.iter().flatten().count();
    let tp = pred
        .iter()
        .zip(truth)
        .filter(|(p, &t)| p.map_or(false, |p| iou(p, t) >= threshold))
        .count();
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / made as f64;
    let recall = tp as f64 / truth.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}
