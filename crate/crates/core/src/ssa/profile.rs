//! Plateau-cosine confidence profile for one predicted cue.

use std::f64::consts::FRAC_PI_2;

pub const DEFAULT_BETA: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct CueProfile {
    pub index: usize,
    /// Inclusive predicted interval.
    pub start: usize,
    pub end: usize,
    /// Values for frames `start..=end`; zero elsewhere.
    pub values: Vec<f64>,
}

impl CueProfile {
    pub fn at(&self, frame: usize) -> f64 {
        if frame < self.start || frame > self.end {
            0.0
        } else {
            self.values[frame - self.start]
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Inclusive plateau frames (value exactly 1), if any.
    pub fn plateau(&self) -> Option<(usize, usize)> {
        let first = self.values.iter().position(|&v| v == 1.0)?;
        let last = self.values.iter().rposition(|&v| v == 1.0)?;
        Some((self.start + first, self.start + last))
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Central `⌈β·n⌉` frames (widened by one when parity demands symmetry) sit
/// at 1; the `m` frames on each side rise as `sin(π/2 · (k+½)/(m+½))`.
pub fn build_profile(index: usize, start: usize, end: usize, beta: f64) -> CueProfile {
    let (start, end) = (start.min(end), start.max(end));
    let n = end - start + 1;
    let core = ((beta.clamp(0.0, 1.0) * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let m = (n - core.min(n)) / 2;
    let values = (0..n)
        .map(|i| {
            let k = i.min(n - 1 - i);
            if k >= m {
                1.0
            } else {
                (FRAC_PI_2 * (k as f64 + 0.5) / (m as f64 + 0.5)).sin()
            }
        })
        .collect();
    CueProfile {
        index,
        start,
        end,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_fifth_of_ten_frames() {
        let p = build_profile(0, 0, 9, 0.2);
        assert_eq!(p.plateau(), Some((4, 5)));
        assert!(p.values[0] < 0.2 && p.values[9] < 0.2);
        assert_eq!(p.at(10), 0.0);
    }

    #[test]
    fn full_plateau_and_symmetry() {
        assert!(build_profile(0, 3, 17, 1.0).values.iter().all(|&v| v == 1.0));
        for (s, e) in [(0, 9), (5, 25), (2, 2), (0, 1), (10, 50)] {
            for beta in [0.0, 0.2, 0.5] {
                let p = build_profile(0, s, e, beta);
                let n = p.len();
                for i in 0..n {
                    assert!((p.values[i] - p.values[n - 1 - i]).abs() <= 1e-12);
                    assert!(p.values[i] > 0.0 && p.values[i] <= 1.0);
                }
            }
        }
    }

    #[test]
    fn beta_zero_is_a_single_peak() {
        let p = build_profile(0, 0, 10, 0.0);
        assert_eq!(p.plateau(), Some((5, 5)));
        let peak = (0..11).max_by(|&a, &b| p.values[a].total_cmp(&p.values[b])).unwrap();
        assert_eq!(peak, 5);
        assert!(p.values.windows(2).take(5).all(|w| w[0] < w[1]));
    }

    #[test]
    fn short_cues_keep_a_plateau() {
        let p = build_profile(0, 28, 31, 0.2);
        assert_eq!(p.plateau(), Some((29, 30)));
    }
}
