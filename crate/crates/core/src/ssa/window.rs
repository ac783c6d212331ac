//! 500-frame windows around sentence midpoints, and second/frame conversion.

use crate::decoder::prompt::WINDOW_FRAMES;

/// First frame of a `window`-frame window centred on `midpoint`, clamped to
/// the video. Shorter videos start at 0 and are padded by the caller.
pub fn window_origin(midpoint: f64, total_frames: usize, window: usize) -> usize {
    let max_origin = total_frames.saturating_sub(window) as f64;
    (midpoint.round() - (window / 2) as f64).clamp(0.0, max_origin) as usize
}

/// Global inclusive interval to window-relative frames, clipped to the window.
pub fn to_window_relative(span: (usize, usize), origin: usize) -> (usize, usize) {
    let clip = |f: usize| f.saturating_sub(origin).min(WINDOW_FRAMES - 1);
    (clip(span.0), clip(span.1))
}

/// Cue times in seconds to an inclusive frame interval.
pub fn cue_frames(start: f64, end: f64, fps: f64) -> (usize, usize) {
    let s = (start * fps).round().max(0.0) as usize;
    let e = ((end * fps).round() as usize).saturating_sub(1).max(s);
    (s, e)
}

/// Inverse of [`cue_frames`] for whole-frame times.
pub fn frames_to_seconds(span: (usize, usize), fps: f64) -> (f64, f64) {
    (span.0 as f64 / fps, (span.1 + 1) as f64 / fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_and_clamped() {
        assert_eq!(window_origin(3000.0, 10_000, 500), 2750);
        assert_eq!(window_origin(100.0, 10_000, 500), 0);
        assert_eq!(window_origin(9900.0, 10_000, 500), 9500);
        assert_eq!(window_origin(120.0, 300, 500), 0);
        assert_eq!(to_window_relative((2900, 3050), 2750), (150, 300));
        assert_eq!(to_window_relative((2700, 3400), 2750), (0, 499));
    }

    #[test]
    fn seconds_round_trip() {
        let span = cue_frames(1.0, 2.0, 25.0);
        assert_eq!(span, (25, 49));
        assert_eq!(frames_to_seconds(span, 25.0), (1.0, 2.0));
    }
}
