//! Order-preserving segmentation of overlapping cue predictions.

use super::profile::CueProfile;
use crate::error::{Error, Result};

/// Score of a frame assigned to no cue.
pub const BACKGROUND_SCORE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Resolution {
    /// Inclusive frame interval per cue, in input order.
    pub intervals: Vec<(usize, usize)>,
    pub score: f64,
    pub warnings: Vec<String>,
}

/// Processing order: by interval midpoint, then start, then input index.
fn cue_order(profiles: &[CueProfile]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by_key(|&i| (profiles[i].start + profiles[i].end, profiles[i].start, i));
    order
}

fn check(profiles: &[CueProfile], frames: usize) -> Result<()> {
    if profiles.len() > frames {
        return Err(Error::contract(format!(
            "{} cues cannot fit in {frames} frames",
            profiles.len()
        )));
    }
    Ok(())
}

/// Total score of a segmentation: cue frames score their own profile, every
/// other frame scores [`BACKGROUND_SCORE`].
pub fn segmentation_score(profiles: &[CueProfile], intervals: &[(usize, usize)], frames: usize) -> f64 {
    let mut covered = 0;
    let mut score = 0.0;
    for (p, &(s, e)) in profiles.iter().zip(intervals) {
        covered += e + 1 - s;
        score += (s..=e).map(|t| p.at(t)).sum::<f64>();
    }
    score + BACKGROUND_SCORE * (frames - covered) as f64
}

/// Viterbi over `2n+1` states `B₀ C₁ B₁ … Cₙ Bₙ`: every cue gets one
/// non-empty contiguous run and cues appear in midpoint order.
pub fn resolve_overlaps(profiles: &[CueProfile], frames: usize) -> Result<Resolution> {
    check(profiles, frames)?;
    let n = profiles.len();
    let order = cue_order(profiles);
    let mut warnings = Vec::new();
    for w in order.windows(2) {
        let (a, b) = (&profiles[w[0]], &profiles[w[1]]);
        if let (Some(pa), Some(pb)) = (a.plateau(), b.plateau()) {
            if pa.1 >= pb.0 && pb.1 >= pa.0 {
                let msg = format!("cues {} and {} have overlapping plateaus", a.index, b.index);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if n == 0 {
        return Ok(Resolution {
            intervals: vec![],
            score: BACKGROUND_SCORE * frames as f64,
            warnings,
        });
    }
    let states = 2 * n + 1;
    let emit = |s: usize, t: usize| -> f64 {
        if s % 2 == 0 {
            BACKGROUND_SCORE
        } else {
            profiles[order[s / 2]].at(t)
        }
    };
    let neg = f64::NEG_INFINITY;
    let mut score = vec![neg; states];
    let mut back = vec![vec![0usize; states]; frames];
    score[0] = emit(0, 0);
    score[1] = emit(1, 0);
    for t in 1..frames {
        let mut next = vec![neg; states];
        for s in 0..states {
            let mut best = (score[s], s);
            if s >= 1 && score[s - 1] > best.0 {
                best = (score[s - 1], s - 1);
            }
            if s % 2 == 1 && s >= 3 && score[s - 2] > best.0 {
                best = (score[s - 2], s - 2);
            }
            if best.0 > neg {
                next[s] = best.0 + emit(s, t);
                back[t][s] = best.1;
            }
        }
        score = next;
    }
    let end = if score[states - 1] >= score[states - 2] {
        states - 1
    } else {
        states - 2
    };
    let total = score[end];
    let mut path = vec![0; frames];
    let mut s = end;
    for t in (0..frames).rev() {
        path[t] = s;
        if t > 0 {
            s = back[t][s];
        }
    }
    let mut intervals = vec![(0, 0); n];
    for (k, &cue) in order.iter().enumerate() {
        let st = 2 * k + 1;
        let first = path.iter().position(|&p| p == st).expect("every cue state is visited");
        let last = path.iter().rposition(|&p| p == st).unwrap();
        intervals[cue] = (first, last);
    }
    Ok(Resolution {
        intervals,
        score: total,
        warnings,
    })
}

/// Brute-force reference: enumerate every ordered disjoint segmentation.
pub fn exhaustive_resolve(profiles: &[CueProfile], frames: usize) -> Result<Resolution> {
    check(profiles, frames)?;
    let order = cue_order(profiles);
    let n = order.len();
    let prefix: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let mut acc = vec![0.0; frames + 1];
            for t in 0..frames {
                acc[t + 1] = acc[t] + profiles[i].at(t) - BACKGROUND_SCORE;
            }
            acc
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, vec![(0, 0); n]);
    let mut cur = vec![(0, 0); n];
    fn rec(
        k: usize,
        from: usize,
        acc: f64,
        frames: usize,
        prefix: &[Vec<f64>],
        cur: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        let n = prefix.len();
        if k == n {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        let remaining = n - k - 1;
        for s in from..frames - remaining {
            for e in s..frames - remaining {
                cur[k] = (s, e);
                let gain = prefix[k][e + 1] - prefix[k][s];
                rec(k + 1, e + 1, acc + gain, frames, prefix, cur, best);
            }
        }
    }
    rec(0, 0, 0.0, frames, &prefix, &mut cur, &mut best);
    let mut intervals = vec![(0, 0); n];
    for (k, &cue) in order.iter().enumerate() {
        intervals[cue] = best.1[k];
    }
    Ok(Resolution {
        score: best.0 + BACKGROUND_SCORE * frames as f64,
        intervals,
        warnings: vec![],
    })
}
