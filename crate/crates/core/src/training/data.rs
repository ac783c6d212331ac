//! Translation and alignment samples over 500-frame video windows.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::dataio::filter::{admits, FilterConfig, Split};
use crate::dataio::keypoints::{read_keypoints, KeypointClip};
use crate::dataio::lip::{read_lip, LipClip};
use crate::dataio::manifest::{read_manifest, resolve, ManifestEntry};
use crate::dataio::subtitles::{parse_subtitles, SubtitleFormat};
use crate::dataio::synth::SynthCorpus;
use crate::dataio::text::clean_text;
use crate::decoder::prompt::{build_slt_prompt, build_ssa_prompt, prior_coin, PromptedSample, WINDOW_FRAMES};
use crate::decoder::tokenizer::Tokenizer;
use crate::error::Result;
use crate::ssa::{cue_frames, to_window_relative, window_origin};

pub struct Window {
    pub video: usize,
    pub origin: usize,
    pub clip: KeypointClip,
    pub lip: LipClip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SltItem {
    pub window: usize,
    /// Window-relative inclusive frames.
    pub span: (usize, usize),
    pub text: String,
    pub lang: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsaItem {
    pub window: usize,
    pub text: String,
    /// Audio-aligned timing, window-relative.
    pub prior: Option<(usize, usize)>,
    pub target: (usize, usize),
}

#[derive(Default)]
pub struct TaskData {
    pub windows: Vec<Window>,
    pub slt: Vec<SltItem>,
    pub ssa: Vec<SsaItem>,
    index: HashMap<(usize, usize), usize>,
}

fn midpoint(span: (usize, usize)) -> f64 {
    (span.0 + span.1) as f64 / 2.0
}

impl TaskData {
    /// Index of the window of `video` centred on `mid`, cut on first use.
    fn window(&mut self, video: usize, clip: &KeypointClip, lip: &LipClip, mid: f64) -> usize {
        let origin = window_origin(mid, clip.frames, WINDOW_FRAMES);
        if let Some(&i) = self.index.get(&(video, origin)) {
            return i;
        }
        self.windows.push(Window {
            video,
            origin,
            clip: clip.window(origin, WINDOW_FRAMES),
            lip: lip.window(origin, WINDOW_FRAMES),
        });
        self.index.insert((video, origin), self.windows.len() - 1);
        self.windows.len() - 1
    }

    /// Add one sentence of a video. Translation windows centre on the
    /// signing span, alignment windows on the audio prior.
    fn add_sentence(
        &mut self,
        video: usize,
        clip: &KeypointClip,
        lip: &LipClip,
        text: &str,
        lang: &str,
        signing: (usize, usize),
        audio: Option<(usize, usize)>,
    ) {
        let w = self.window(video, clip, lip, midpoint(signing));
        let origin = self.windows[w].origin;
        self.slt.push(SltItem {
            window: w,
            span: to_window_relative(signing, origin),
            text: text.to_string(),
            lang: lang.to_string(),
        });
        if let Some(a) = audio {
            let w = self.window(video, clip, lip, midpoint(a));
            let origin = self.windows[w].origin;
            self.ssa.push(SsaItem {
                window: w,
                text: text.to_string(),
                prior: Some(to_window_relative(a, origin)),
                target: to_window_relative(signing, origin),
            });
        }
    }

    pub fn from_synth(corpus: &SynthCorpus, split: Option<Split>) -> Self {
        let mut data = TaskData::default();
        for (v, video) in corpus.videos.iter().enumerate() {
            if split.is_some_and(|s| s != video.split) {
                continue;
            }
            for (s, a) in video.sentences.iter().zip(&video.audio_spans) {
                data.add_sentence(v, &video.clip, &video.lip, &s.text, &corpus.config.lang, s.span, Some(*a));
            }
        }
        data
    }

    /// Load a corpus manifest. Cue text is cleaned and filtered; audio cues
    /// pair with signing cues by position when both tracks have equal length.
    pub fn from_manifest(path: &Path, split: Option<Split>, filter: &FilterConfig, lip_dim: usize) -> Result<Self> {
        let entries: Vec<ManifestEntry> = read_manifest(path)?;
        let mut data = TaskData::default();
        for (v, e) in entries.iter().enumerate() {
            if split.is_some_and(|s| s != e.split) {
                continue;
            }
            let clip = read_keypoints(&resolve(path, &e.keypoints))?;
            let lip = match &e.lip {
                Some(p) => read_lip(&resolve(path, p))?,
                None => LipClip::new(clip.frames, lip_dim, vec![0.0; clip.frames * lip_dim])?,
            };
            let fps = clip.fps as f64;
            let sub = resolve(path, &e.subtitle);
            let signing = parse_subtitles(&sub, SubtitleFormat::from_path(&sub)?)?;
            let audio = match &e.audio_subtitle {
                Some(a) => {
                    let p = resolve(path, a);
                    let cues = parse_subtitles(&p, SubtitleFormat::from_path(&p)?)?;
                    if cues.len() == signing.len() {
                        Some(cues)
                    } else {
                        log::warn!(
                            "{}: {} audio cues for {} signing cues, skipping alignment samples",
                            p.display(),
                            cues.len(),
                            signing.len()
                        );
                        None
                    }
                }
                None => None,
            };
            for (k, cue) in signing.iter().enumerate() {
                let text = clean_text(&cue.text);
                let cleaned = crate::dataio::subtitles::Cue {
                    text: text.clone(),
                    ..cue.clone()
                };
                if text.is_empty() || !admits(&cleaned, filter) {
                    continue;
                }
                let span = cue_frames(cue.start, cue.end, fps);
                let prior = audio.as_ref().map(|a| cue_frames(a[k].start, a[k].end, fps));
                data.add_sentence(v, &clip, &lip, &text, &e.lang, span, prior);
            }
        }
        Ok(data)
    }

    /// Keep the first `n` samples of each task.
    pub fn truncate(&mut self, n: usize) {
        self.slt.truncate(n);
        self.ssa.truncate(n);
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.slt.iter().map(|s| s.text.as_str())
    }

    pub fn slt_sample(&self, tok: &Tokenizer, i: usize) -> Result<PromptedSample> {
        let s = &self.slt[i];
        build_slt_prompt(tok, s.span.0, s.span.1, &s.lang, Some(&s.text))
    }

    pub fn ssa_sample(&self, tok: &Tokenizer, i: usize, include_prior: bool) -> Result<PromptedSample> {
        let s = &self.ssa[i];
        build_ssa_prompt(tok, &s.text, s.prior, include_prior, Some(s.target))
    }

    /// Alignment sample with the prior shown by a fair coin.
    pub fn ssa_training_sample(&self, tok: &Tokenizer, i: usize, rng: &mut impl Rng) -> Result<PromptedSample> {
        let show = prior_coin(rng);
        self.ssa_sample(tok, i, show)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::SynthConfig;

    fn corpus() -> SynthCorpus {
        SynthCorpus::generate(&SynthConfig {
            n_samples: 4,
            isolated_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn synthetic_samples_share_the_whole_video_window() {
        let c = corpus();
        let d = TaskData::from_synth(&c, None);
        let n: usize = c.videos.iter().map(|v| v.sentences.len()).sum();
        assert_eq!(d.slt.len(), n);
        assert_eq!(d.ssa.len(), n);
        assert_eq!(d.windows.len(), c.videos.len());
        assert!(d.windows.iter().all(|w| w.origin == 0 && w.clip.frames == WINDOW_FRAMES));
        assert_eq!(d.slt[0].span, c.videos[0].sentences[0].span);
        assert_eq!(d.ssa[0].prior, Some(c.videos[0].audio_spans[0]));
    }

    #[test]
    fn manifest_round_trip_matches_synthetic() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let a = TaskData::from_synth(&c, None);
        let b = TaskData::from_manifest(&dir.path().join("manifest.json"), None, &FilterConfig::default(), 16).unwrap();
        assert_eq!(a.slt, b.slt);
        assert_eq!(a.ssa, b.ssa);
    }

    #[test]
    fn long_video_windows_centre_on_the_span() {
        let clip = KeypointClip::zeros(2000, 25.0);
        let lip = LipClip::new(2000, 2, vec![0.0; 4000]).unwrap();
        let mut d = TaskData::default();
        d.add_sentence(0, &clip, &lip, "a b", "bfi", (1000, 1100), Some((1200, 1300)));
        assert_eq!(d.windows.len(), 2);
        assert_eq!(d.windows[0].origin, 800);
        assert_eq!(d.slt[0].span, (200, 300));
        assert_eq!(d.windows[1].origin, 1000);
        assert_eq!(d.ssa[0].prior, Some((200, 300)));
        assert_eq!(d.ssa[0].target, (0, 100));
    }
}
