//! Deterministic synthetic corpora.
//!
//! Each pseudo-gloss class owns a smooth joint-trajectory template and a lip
//! embedding. Continuous videos concatenate class signs into sentences with
//! background (rest pose) gaps, so every signing-aligned cue boundary is known
//! exactly. The audio-aligned track is a jittered copy of it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::filter::Split;
use super::keypoints::{write_keypoints, KeypointClip, LEFT_SHOULDER, NUM_JOINTS, RIGHT_SHOULDER};
use super::lip::{write_lip, LipClip};
use super::manifest::{write_manifest, write_vocab, IsolatedEntry, ManifestEntry};
use super::subtitles::{write_srt, Cue};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_classes: usize,
    /// Continuous videos.
    pub n_samples: usize,
    pub frames: usize,
    pub fps: f32,
    pub noise: f64,
    pub lip_dim: usize,
    pub max_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_sign_frames: usize,
    pub max_sign_frames: usize,
    /// Maximum audio-track offset from the signing track, in frames.
    pub audio_jitter: usize,
    /// Isolated clips per class.
    pub isolated_per_class: usize,
    pub isolated_frames: usize,
    pub lang: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_classes: 12,
            n_samples: 16,
            frames: 500,
            fps: 25.0,
            noise: 0.01,
            lip_dim: 16,
            max_sentences: 3,
            min_words: 2,
            max_words: 4,
            min_sign_frames: 16,
            max_sign_frames: 28,
            audio_jitter: 25,
            isolated_per_class: 8,
            isolated_frames: 24,
            lang: "bfi".into(),
        }
    }
}

struct ClassTemplate {
    offset: Vec<[f64; 3]>,
    amp: Vec<[f64; 3]>,
    phase: Vec<[f64; 3]>,
    freq: f64,
    lip: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSentence {
    pub words: Vec<usize>,
    pub text: String,
    /// Inclusive frame span.
    pub span: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub clip: KeypointClip,
    pub lip: LipClip,
    pub sentences: Vec<SynthSentence>,
    pub signing: Vec<Cue>,
    pub audio: Vec<Cue>,
    /// Audio-aligned spans in frames, inclusive.
    pub audio_spans: Vec<(usize, usize)>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct IsolatedSample {
    pub clip: KeypointClip,
    pub lip: LipClip,
    pub label: usize,
}

pub struct SynthCorpus {
    pub config: SynthConfig,
    pub vocab: Vec<String>,
    pub videos: Vec<SynthVideo>,
    pub isolated: Vec<IsolatedSample>,
    templates: Vec<ClassTemplate>,
    rest: Vec<[f64; 3]>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| {
                [
                    *CONSONANTS.choose(rng).unwrap() as char,
                    *VOWELS.choose(rng).unwrap() as char,
                ]
            })
            .collect();
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn split_for(i: usize) -> Split {
    match i % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

impl SynthCorpus {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::config("synthetic corpus needs at least 2 classes"));
        }
        if config.min_words == 0
            || config.min_words > config.max_words
            || config.min_sign_frames == 0
            || config.min_sign_frames > config.max_sign_frames
            || config.max_sentences == 0
        {
            return Err(Error::config("inconsistent synthetic length ranges"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = pseudo_words(&mut rng, config.n_classes);

        // Rest pose with shoulders one unit apart around the origin.
        let mut rest: Vec<[f64; 3]> = (0..NUM_JOINTS)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.5..0.5),
                    rng.gen_range(-0.2..0.2),
                ]
            })
            .collect();
        rest[LEFT_SHOULDER] = [-0.5, 0.0, 0.0];
        rest[RIGHT_SHOULDER] = [0.5, 0.0, 0.0];

        let templates = (0..config.n_classes)
            .map(|_| {
                let mut t = ClassTemplate {
                    offset: (0..NUM_JOINTS)
                        .map(|_| [(); 3].map(|_| rng.gen_range(-0.4..0.4)))
                        .collect(),
                    amp: (0..NUM_JOINTS)
                        .map(|_| [(); 3].map(|_| rng.gen_range(0.0..0.3)))
                        .collect(),
                    phase: (0..NUM_JOINTS)
                        .map(|_| [(); 3].map(|_| rng.gen_range(0.0..std::f64::consts::TAU)))
                        .collect(),
                    freq: rng.gen_range(1..=2) as f64,
                    lip: (0..config.lip_dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect(),
                };
                for s in [LEFT_SHOULDER, RIGHT_SHOULDER] {
                    t.offset[s] = [0.0; 3];
                    t.amp[s] = [0.0; 3];
                }
                t
            })
            .collect();

        let mut corpus = SynthCorpus {
            config: config.clone(),
            vocab,
            videos: Vec::new(),
            isolated: Vec::new(),
            templates,
            rest,
        };
        for i in 0..config.n_samples {
            let v = corpus.video(&mut rng, split_for(i))?;
            corpus.videos.push(v);
        }
        for _ in 0..config.isolated_per_class {
            for c in 0..config.n_classes {
                let s = corpus.isolated_sample(&mut rng, c);
                corpus.isolated.push(s);
            }
        }
        Ok(corpus)
    }

    fn pose(&self, class: Option<usize>, tau: f64, j: usize) -> [f64; 3] {
        let r = self.rest[j];
        match class {
            None => r,
            Some(c) => {
                let t = &self.templates[c];
                let w = std::f64::consts::TAU * t.freq * tau;
                [0, 1, 2].map(|k| r[k] + t.offset[j][k] + t.amp[j][k] * (w + t.phase[j][k]).sin())
            }
        }
    }

    /// Template position of joint `j` for `class` at relative time `tau`.
    pub fn template_joint(&self, class: usize, tau: f64, j: usize) -> [f64; 3] {
        self.pose(Some(class), tau, j)
    }

    /// Render `labels[f]` (class or background) into a clip, then apply an
    /// arbitrary global scale/translation and per-coordinate noise.
    fn render(
        &self,
        rng: &mut ChaCha8Rng,
        labels: &[(Option<usize>, f64)],
    ) -> (KeypointClip, LipClip) {
        let cfg = &self.config;
        let frames = labels.len();
        let scale = rng.gen_range(0.5..2.0);
        let shift = [(); 3].map(|_| rng.gen_range(-2.0..2.0));
        let mut clip = KeypointClip::zeros(frames, cfg.fps);
        let mut lip = vec![0.0; frames * cfg.lip_dim];
        for (f, &(class, tau)) in labels.iter().enumerate() {
            for j in 0..NUM_JOINTS {
                let p = self.pose(class, tau, j);
                let xyz = [0, 1, 2].map(|k| {
                    let n: f64 = StandardNormal.sample(rng);
                    (p[k] + cfg.noise * n) * scale + shift[k]
                });
                clip.set_joint(f, j, xyz);
            }
            let envelope = (std::f64::consts::PI * tau).sin();
            for d in 0..cfg.lip_dim {
                let n: f64 = StandardNormal.sample(rng);
                let signal = class.map_or(0.0, |c| self.templates[c].lip[d] * envelope);
                lip[f * cfg.lip_dim + d] = signal + cfg.noise * n;
            }
        }
        let lip = LipClip::new(frames, cfg.lip_dim, lip).expect("lip shape");
        (clip, lip)
    }

    fn isolated_sample(&self, rng: &mut ChaCha8Rng, class: usize) -> IsolatedSample {
        let n = self.config.isolated_frames;
        let labels: Vec<_> = (0..n)
            .map(|f| (Some(class), (f as f64 + 0.5) / n as f64))
            .collect();
        let (clip, lip) = self.render(rng, &labels);
        IsolatedSample {
            clip,
            lip,
            label: class,
        }
    }

    fn video(&self, rng: &mut ChaCha8Rng, split: Split) -> Result<SynthVideo> {
        let cfg = &self.config;
        let n_sent = rng.gen_range(1..=cfg.max_sentences);
        let mut plan: Vec<Vec<(usize, usize)>> = Vec::new();
        for _ in 0..n_sent {
            let n_words = rng.gen_range(cfg.min_words..=cfg.max_words);
            plan.push(
                (0..n_words)
                    .map(|_| {
                        (
                            rng.gen_range(0..cfg.n_classes),
                            rng.gen_range(cfg.min_sign_frames..=cfg.max_sign_frames),
                        )
                    })
                    .collect(),
            );
        }
        let signed: usize = plan.iter().flatten().map(|(_, l)| l).sum();
        if signed + n_sent + 1 > cfg.frames {
            return Err(Error::config(format!(
                "{signed} signing frames do not fit a {}-frame video",
                cfg.frames
            )));
        }
        // Distribute the background frames over n_sent + 1 gaps, at least
        // one frame between consecutive sentences.
        let spare = cfg.frames - signed - (n_sent - 1);
        let mut cuts: Vec<usize> = (0..n_sent).map(|_| rng.gen_range(0..=spare)).collect();
        cuts.sort_unstable();
        let mut gaps = Vec::with_capacity(n_sent + 1);
        let mut prev = 0;
        for c in &cuts {
            gaps.push(c - prev);
            prev = *c;
        }
        gaps.push(spare - prev);
        for g in gaps.iter_mut().take(n_sent).skip(1) {
            *g += 1;
        }

        let mut labels = Vec::with_capacity(cfg.frames);
        let mut sentences = Vec::new();
        for (s, words) in plan.iter().enumerate() {
            labels.extend(std::iter::repeat((None, 0.0)).take(gaps[s]));
            let start = labels.len();
            for &(c, len) in words {
                labels.extend((0..len).map(|f| (Some(c), (f as f64 + 0.5) / len as f64)));
            }
            let end = labels.len() - 1;
            let ids: Vec<usize> = words.iter().map(|(c, _)| *c).collect();
            sentences.push(SynthSentence {
                text: ids.iter().map(|&c| self.vocab[c].as_str()).collect::<Vec<_>>().join(" "),
                words: ids,
                span: (start, end),
            });
        }
        labels.extend(std::iter::repeat((None, 0.0)).take(gaps[n_sent]));
        debug_assert_eq!(labels.len(), cfg.frames);

        let (clip, lip) = self.render(rng, &labels);
        let fps = cfg.fps as f64;
        let to_cue = |(s, e): (usize, usize), text: &str| Cue {
            start: (s as f64 / fps * 1000.0).round() / 1000.0,
            end: ((e + 1) as f64 / fps * 1000.0).round() / 1000.0,
            text: text.to_string(),
        };
        let signing = sentences.iter().map(|s| to_cue(s.span, &s.text)).collect();
        let j = cfg.audio_jitter as i64;
        let last = cfg.frames as i64 - 1;
        let audio_spans: Vec<(usize, usize)> = sentences
            .iter()
            .map(|s| {
                let d0 = rng.gen_range(-j..=j);
                let d1 = rng.gen_range(-j..=j);
                let a = (s.span.0 as i64 + d0).clamp(0, last);
                let b = (s.span.1 as i64 + d1).clamp(0, last).max(a);
                (a as usize, b as usize)
            })
            .collect();
        let audio = sentences
            .iter()
            .zip(&audio_spans)
            .map(|(s, &sp)| to_cue(sp, &s.text))
            .collect();
        Ok(SynthVideo {
            clip,
            lip,
            sentences,
            signing,
            audio,
            audio_spans,
            split,
        })
    }

    /// Mean over joints and sampled times of the distance between two class
    /// templates.
    pub fn template_distance(&self, a: usize, b: usize) -> f64 {
        let steps = 16;
        let mut total = 0.0;
        for s in 0..steps {
            let tau = (s as f64 + 0.5) / steps as f64;
            for j in 0..NUM_JOINTS {
                let p = self.pose(Some(a), tau, j);
                let q = self.pose(Some(b), tau, j);
                total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            }
        }
        total / (steps * NUM_JOINTS) as f64
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.videos
            .iter()
            .flat_map(|v| v.sentences.iter().map(|s| s.text.as_str()))
    }

    /// Write the corpus under `dir`: `manifest.json`, `islr.json`,
    /// `vocab.txt` and the per-clip binary/subtitle files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["keypoints", "lip", "subtitles", "islr"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let mut entries = Vec::new();
        for (i, v) in self.videos.iter().enumerate() {
            let kp = format!("keypoints/{i:04}.sbkp");
            let lp = format!("lip/{i:04}.sblf");
            let st = format!("subtitles/{i:04}.signing.srt");
            let at = format!("subtitles/{i:04}.audio.srt");
            write_keypoints(&dir.join(&kp), &v.clip)?;
            write_lip(&dir.join(&lp), &v.lip)?;
            std::fs::write(dir.join(&st), write_srt(&v.signing))?;
            std::fs::write(dir.join(&at), write_srt(&v.audio))?;
            entries.push(ManifestEntry {
                keypoints: kp,
                lip: Some(lp),
                subtitle: st,
                lang: self.config.lang.clone(),
                split: v.split,
                audio_subtitle: Some(at),
            });
        }
        write_manifest(&dir.join("manifest.json"), &entries)?;

        let mut iso = Vec::new();
        for (i, s) in self.isolated.iter().enumerate() {
            let kp = format!("islr/{i:05}.sbkp");
            let lp = format!("islr/{i:05}.sblf");
            write_keypoints(&dir.join(&kp), &s.clip)?;
            write_lip(&dir.join(&lp), &s.lip)?;
            iso.push(IsolatedEntry {
                keypoints: kp,
                lip: Some(lp),
                label: s.label,
                gloss: self.vocab[s.label].clone(),
                split: split_for(i / self.config.n_classes),
            });
        }
        write_manifest(&dir.join("islr.json"), &iso)?;
        write_vocab(&dir.join("vocab.txt"), &self.vocab)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_samples: 6,
            isolated_per_class: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = SynthCorpus::generate(&small()).unwrap();
        let b = SynthCorpus::generate(&small()).unwrap();
        assert_eq!(a.vocab, b.vocab);
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.signing, y.signing);
            assert_eq!(x.audio, y.audio);
        }
        let c = SynthCorpus::generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.videos[0].clip, c.videos[0].clip);
    }

    #[test]
    fn templates_are_separated_relative_to_noise() {
        let c = SynthCorpus::generate(&small()).unwrap();
        for a in 0..c.vocab.len() {
            for b in a + 1..c.vocab.len() {
                assert!(c.template_distance(a, b) > 5.0 * c.config.noise);
            }
        }
    }

    #[test]
    fn spans_are_in_range_and_match_cues() {
        let c = SynthCorpus::generate(&SynthConfig { n_samples: 30, ..small() }).unwrap();
        for v in &c.videos {
            assert_eq!(v.clip.frames, 500);
            let mut prev_end: Option<usize> = None;
            for (s, cue) in v.sentences.iter().zip(&v.signing) {
                assert!(s.span.0 <= s.span.1 && s.span.1 <= 499);
                if let Some(p) = prev_end {
                    assert!(s.span.0 > p + 1);
                }
                prev_end = Some(s.span.1);
                assert_eq!((cue.start * 25.0).round() as usize, s.span.0);
                assert_eq!((cue.end * 25.0).round() as usize, s.span.1 + 1);
            }
            for &(a, b) in &v.audio_spans {
                assert!(a <= b && b <= 499);
            }
        }
    }

    #[test]
    fn one_class_is_rejected() {
        assert!(SynthCorpus::generate(&SynthConfig { n_classes: 1, ..small() }).is_err());
    }
}
