//! SRT and WebVTT cue lists.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

impl Cue {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    #[default]
    AudioAligned,
    SigningAligned,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SubtitleTrack {
    pub cues: Vec<Cue>,
    pub kind: TrackKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubtitleFormat {
    Srt,
    Vtt,
}

impl SubtitleFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "srt" => Ok(SubtitleFormat::Srt),
            Some(e) if e == "vtt" => Ok(SubtitleFormat::Vtt),
            _ => Err(Error::config(format!(
                "cannot infer subtitle format from {}",
                path.display()
            ))),
        }
    }
}

/// `[HH:]MM:SS(,|.)mmm` to integer milliseconds.
fn parse_timestamp(s: &str, line: usize) -> Result<u64> {
    let bad = || Error::Parse {
        line,
        message: format!("malformed timestamp {s:?}"),
    };
    let (hms, ms) = s.rsplit_once([',', '.']).ok_or_else(bad)?;
    if ms.len() != 3 || !ms.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let parts: Vec<&str> = hms.split(':').collect();
    if !(2..=3).contains(&parts.len())
        || parts
            .iter()
            .any(|p| p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()))
    {
        return Err(bad());
    }
    let nums: Vec<u64> = parts.iter().map(|p| p.parse().unwrap()).collect();
    let (h, m, sec) = match nums[..] {
        [m, s] => (0, m, s),
        [h, m, s] => (h, m, s),
        _ => unreachable!(),
    };
    if m >= 60 || sec >= 60 {
        return Err(bad());
    }
    Ok(((h * 60 + m) * 60 + sec) * 1000 + ms.parse::<u64>().unwrap())
}

fn format_timestamp(seconds: f64, sep: char) -> String {
    let total = (seconds * 1000.0).round().max(0.0) as u64;
    let (h, rem) = (total / 3_600_000, total % 3_600_000);
    let (m, rem) = (rem / 60_000, rem % 60_000);
    let (s, ms) = (rem / 1000, rem % 1000);
    format!("{h:02}:{m:02}:{s:02}{sep}{ms:03}")
}

fn parse_timing(line: &str, lineno: usize) -> Result<(f64, f64)> {
    let (a, rest) = line.split_once("-->").ok_or_else(|| Error::Parse {
        line: lineno,
        message: "expected '-->'".into(),
    })?;
    // VTT cue settings may follow the end time
    let b = rest.split_whitespace().next().unwrap_or("");
    let start = parse_timestamp(a.trim(), lineno)?;
    let end = parse_timestamp(b, lineno)?;
    if end <= start {
        return Err(Error::Parse {
            line: lineno,
            message: format!("cue ends at or before its start ({})", line.trim()),
        });
    }
    Ok((start as f64 / 1000.0, end as f64 / 1000.0))
}

fn parse_blocks(src: &str, vtt: bool) -> Result<Vec<Cue>> {
    let mut cues = Vec::new();
    let mut lines = src.lines().enumerate().peekable();
    if vtt {
        match lines.next() {
            Some((_, l)) if l.trim_start_matches('\u{feff}').starts_with("WEBVTT") => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing WEBVTT header".into(),
                })
            }
        }
    }
    loop {
        while matches!(lines.peek(), Some((_, l)) if l.trim().is_empty()) {
            lines.next();
        }
        let mut block: Vec<(usize, &str)> = Vec::new();
        while let Some(&(i, l)) = lines.peek() {
            if l.trim().is_empty() {
                break;
            }
            block.push((i + 1, l.trim_start_matches('\u{feff}')));
            lines.next();
        }
        if block.is_empty() {
            break;
        }
        if vtt && ["NOTE", "STYLE", "REGION"].iter().any(|k| block[0].1.starts_with(k)) {
            continue;
        }
        let timing_at = block
            .iter()
            .position(|(_, l)| l.contains("-->"))
            .ok_or_else(|| Error::Parse {
                line: block[0].0,
                message: "cue block without timing line".into(),
            })?;
        if timing_at > 1 {
            return Err(Error::Parse {
                line: block[timing_at].0,
                message: "unexpected lines before timing".into(),
            });
        }
        let (lineno, timing) = block[timing_at];
        let (start, end) = parse_timing(timing, lineno)?;
        let text = block[timing_at + 1..]
            .iter()
            .map(|(_, l)| l.trim())
            .collect::<Vec<_>>()
            .join(" ");
        cues.push(Cue { start, end, text });
    }
    cues.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok(cues)
}

pub fn parse_srt(src: &str) -> Result<Vec<Cue>> {
    parse_blocks(src, false)
}

pub fn parse_vtt(src: &str) -> Result<Vec<Cue>> {
    parse_blocks(src, true)
}

pub fn parse_subtitles(path: &Path, format: SubtitleFormat) -> Result<Vec<Cue>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let src = std::fs::read_to_string(path)?;
    match format {
        SubtitleFormat::Srt => parse_srt(&src),
        SubtitleFormat::Vtt => parse_vtt(&src),
    }
}

pub fn write_srt(cues: &[Cue]) -> String {
    let mut out = String::new();
    for (i, c) in cues.iter().enumerate() {
        let _ = write!(
            out,
            "{}\n{} --> {}\n{}\n\n",
            i + 1,
            format_timestamp(c.start, ','),
            format_timestamp(c.end, ','),
            c.text
        );
    }
    out
}

pub fn write_vtt(cues: &[Cue]) -> String {
    let mut out = String::from("WEBVTT\n\n");
    for c in cues {
        let _ = write!(
            out,
            "{} --> {}\n{}\n\n",
            format_timestamp(c.start, '.'),
            format_timestamp(c.end, '.'),
            c.text
        );
    }
    out
}

pub fn write_subtitles(path: &Path, cues: &[Cue], format: SubtitleFormat) -> Result<()> {
    let s = match format {
        SubtitleFormat::Srt => write_srt(cues),
        SubtitleFormat::Vtt => write_vtt(cues),
    };
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn srt_and_vtt_timings() {
        let srt = "1\n00:00:01,000 --> 00:00:03,500\nhello\nthere\n";
        let cues = parse_srt(srt).unwrap();
        assert_eq!(cues.len(), 1);
        assert_eq!((cues[0].start, cues[0].end), (1.0, 3.5));
        assert_eq!(cues[0].text, "hello there");

        let vtt = "WEBVTT\n\nNOTE a comment\n\n00:01.000 --> 00:03.500 align:start\nhi\n";
        let cues = parse_vtt(vtt).unwrap();
        assert_eq!((cues[0].start, cues[0].end), (1.0, 3.5));
    }

    #[test]
    fn malformed_timestamp_reports_line() {
        let srt = "1\n00:00:01,000 --> 00:00:03,500\nok\n\n2\n00:00:0x,000 --> 00:00:05,000\nbad\n";
        match parse_srt(srt) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_srt("1\n00:00:03,000 --> 00:00:01,000\nx\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_vtt("00:01.000 --> 00:02.000\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn overlapping_cues_are_accepted() {
        let srt = "1\n00:00:01,000 --> 00:00:04,000\na\n\n2\n00:00:02,000 --> 00:00:05,000\nb\n";
        assert_eq!(parse_srt(srt).unwrap().len(), 2);
    }

    #[test]
    fn three_cue_round_trip() {
        let cues = vec![
            Cue { start: 0.5, end: 1.25, text: "one".into() },
            Cue { start: 2.0, end: 3.999, text: "two words".into() },
            Cue { start: 3661.001, end: 3662.0, text: "three".into() },
        ];
        assert_eq!(parse_srt(&write_srt(&cues)).unwrap(), cues);
        assert_eq!(parse_vtt(&write_vtt(&cues)).unwrap(), cues);
    }

    proptest! {
        #[test]
        fn parse_write_parse_is_identity(
            raw in proptest::collection::vec((0u64..10_000_000, 1u64..100_000, "[a-z]{1,8}( [a-z]{1,8}){0,3}"), 0..8)
        ) {
            let mut cues: Vec<Cue> = raw
                .into_iter()
                .map(|(s, d, t)| Cue { start: s as f64 / 1000.0, end: (s + d) as f64 / 1000.0, text: t })
                .collect();
            cues.sort_by(|a, b| a.start.total_cmp(&b.start));
            let once = parse_srt(&write_srt(&cues)).unwrap();
            prop_assert_eq!(&once, &cues);
            prop_assert_eq!(parse_vtt(&write_vtt(&once)).unwrap(), once);
        }
    }
}
