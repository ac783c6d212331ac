//! Isolated-sign pretraining of the pose and lip backbones.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::sampler::MixedSampler;
use super::schedule::one_cycle_lr;
use crate::backbones::{clips_tensor, sample_articulator_mask, BackboneConfig, LipBackbone, PoseBackbone};
use crate::dataio::keypoints::{normalize_keypoints, read_keypoints, KeypointClip};
use crate::dataio::lip::{read_lip, LipClip};
use crate::dataio::manifest::{read_manifest, read_vocab, resolve, IsolatedEntry};
use crate::dataio::synth::SynthCorpus;
use crate::dataio::Split;
use crate::decoder::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::islr::{islr_metrics, late_fusion, FusionWeights, IslrMetrics, LabelEmbedder, LipIslr, PoseIslr, ProjectorConfig};
use crate::tensor::{Init, ParamSet, Tape, Tensor};

pub struct IslrData {
    /// Normalized keypoint clips.
    pub clips: Vec<KeypointClip>,
    pub lips: Vec<LipClip>,
    pub labels: Vec<usize>,
    pub glosses: Vec<String>,
}

impl IslrData {
    fn build(raw: Vec<(KeypointClip, LipClip, usize)>, glosses: Vec<String>) -> Result<Self> {
        let mut d = IslrData {
            clips: Vec::new(),
            lips: Vec::new(),
            labels: Vec::new(),
            glosses,
        };
        for (c, l, y) in raw {
            if y >= d.glosses.len() {
                return Err(Error::Label {
                    label: y,
                    classes: d.glosses.len(),
                });
            }
            d.clips.push(normalize_keypoints(&c)?);
            d.lips.push(l);
            d.labels.push(y);
        }
        Ok(d)
    }

    pub fn from_synth(corpus: &SynthCorpus) -> Result<Self> {
        let raw = corpus
            .isolated
            .iter()
            .map(|s| (s.clip.clone(), s.lip.clone(), s.label))
            .collect();
        Self::build(raw, corpus.vocab.clone())
    }

    pub fn from_manifest(path: &Path, vocab: &Path, split: Option<Split>, lip_dim: usize) -> Result<Self> {
        let entries: Vec<IsolatedEntry> = read_manifest(path)?;
        let glosses = read_vocab(vocab)?;
        let mut raw = Vec::new();
        for e in entries.iter().filter(|e| split.is_none_or(|s| s == e.split)) {
            let clip = read_keypoints(&resolve(path, &e.keypoints))?;
            let lip = match &e.lip {
                Some(p) => read_lip(&resolve(path, p))?,
                None => LipClip::new(clip.frames, lip_dim, vec![0.0; clip.frames * lip_dim])?,
            };
            raw.push((clip, lip, e.label));
        }
        Self::build(raw, glosses)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IslrConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    /// Random articulator masking on the pose branch.
    pub masking: bool,
    pub projector: ProjectorConfig,
    pub fusion: FusionWeights,
}

impl Default for IslrConfig {
    fn default() -> Self {
        IslrConfig {
            seed: 0,
            lr: 2e-4,
            weight_decay: 1e-4,
            steps: 300,
            batch_size: 8,
            warmup_fraction: 0.05,
            masking: true,
            projector: ProjectorConfig::default(),
            fusion: FusionWeights::default(),
        }
    }
}

impl IslrConfig {
    pub fn toy(backbone: &BackboneConfig) -> Self {
        IslrConfig {
            lr: 3e-3,
            projector: ProjectorConfig::toy(backbone.conformer.dim, 32),
            ..IslrConfig::default()
        }
    }
}

pub struct IslrModels {
    pub pose: PoseIslr,
    pub lip: LipIslr,
    pub embedder: LabelEmbedder,
}

impl IslrModels {
    /// Backbones are named as in the translation model so their tensors
    /// load straight into it.
    pub fn new(init: &mut Init, backbone: &BackboneConfig, cfg: &IslrConfig, classes: usize, text_vocab: usize) -> Result<Self> {
        let pb = PoseBackbone::new(init, "pose", backbone)?;
        let pose = PoseIslr::new(init, pb, classes, &backbone.conformer, &cfg.projector)?;
        let lb = LipBackbone::new(init, "lip", backbone)?;
        let lip = LipIslr::new(init, lb, classes, &cfg.projector)?;
        let embedder = LabelEmbedder::new(cfg.seed ^ 0x5eed, text_vocab, cfg.projector.text[0]);
        Ok(IslrModels { pose, lip, embedder })
    }

    pub fn params(&self) -> ParamSet {
        let mut s = ParamSet::new();
        self.pose.collect(&mut s);
        self.lip.collect(&mut s);
        s
    }

    /// Pose logits, lip logits and fused log-probabilities over `data`.
    pub fn scores(&self, data: &IslrData, fusion: FusionWeights, chunk: usize) -> Result<[Tensor; 3]> {
        let mut pose_rows = Vec::new();
        let mut lip_rows = Vec::new();
        for start in (0..data.len()).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(data.len());
            let clips: Vec<&KeypointClip> = data.clips[start..end].iter().collect();
            let lips: Vec<&LipClip> = data.lips[start..end].iter().collect();
            let mut tape = Tape::new();
            let x = tape.constant(clips_tensor(&clips)?);
            let out = self.pose.backbone.forward(&mut tape, x, None)?;
            let pl = self.pose.head.forward(&mut tape, out.pooled)?;
            let lf = self.lip.backbone.forward_clips(&mut tape, &lips)?;
            let ll = self.lip.head.forward(&mut tape, lf)?;
            for r in 0..end - start {
                pose_rows.push(tape.value(pl).row(r).to_vec());
                lip_rows.push(tape.value(ll).row(r).to_vec());
            }
        }
        let p = Tensor::from_rows(&pose_rows)?;
        let l = Tensor::from_rows(&lip_rows)?;
        let f = late_fusion(&p, &l, fusion)?;
        Ok([p, l, f])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslrReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub pose: IslrMetrics,
    pub lip: IslrMetrics,
    pub fused: IslrMetrics,
}

/// Joint training of both branches, each on `CE (+ aux) + contrastive`.
pub fn train_islr(models: &IslrModels, data: &IslrData, tok: &Tokenizer, cfg: &IslrConfig) -> Result<IslrReport> {
    if cfg.batch_size < 2 {
        return Err(Error::config("contrastive training needs batch_size >= 2"));
    }
    if data.is_empty() {
        return Err(Error::contract("no isolated training clips"));
    }
    let params = models.params();
    params.set_requires_grad(true);
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let text_all = models.embedder.embed_labels(tok, &data.glosses, &data.labels)?;
    let mut sampler = MixedSampler::new(data.len(), 0, 1.0, cfg.batch_size, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let warmup = (cfg.steps as f64 * cfg.warmup_fraction).round() as usize;
    let mut losses = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let lr = one_cycle_lr(s + 1, cfg.steps + 1, warmup, cfg.lr);
        opt.zero_grad();
        let idx = sampler.next_batch().indices;
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| text_all.row(i).to_vec()).collect();
        let text = Tensor::from_rows(&rows)?;
        let clips: Vec<&KeypointClip> = idx.iter().map(|&i| &data.clips[i]).collect();
        let lips: Vec<&LipClip> = idx.iter().map(|&i| &data.lips[i]).collect();
        let masks: Vec<[bool; 4]> = idx.iter().map(|_| sample_articulator_mask(&mut rng)).collect();

        let mut tape = Tape::new();
        let x = tape.constant(clips_tensor(&clips)?);
        let pose = models
            .pose
            .loss(&mut tape, x, &labels, &text, cfg.masking.then_some(masks.as_slice()))?;
        let lf = {
            let dim = lips[0].dim;
            let data: Vec<f64> = lips.iter().flat_map(|c| c.features.iter().copied()).collect();
            tape.constant(Tensor::new(&[lips.len(), lips[0].frames, dim], data)?)
        };
        let lip = models.lip.loss(&mut tape, lf, &labels, &text)?;
        let total = tape.add(pose.total, lip.total)?;
        let v = tape.value(total).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite ISLR loss at step {s}")));
        }
        tape.backward(total)?;
        opt.step(lr, 1.0)?;
        losses.push(v);
    }
    opt.zero_grad();
    let [p, l, f] = models.scores(data, cfg.fusion, 16)?;
    Ok(IslrReport {
        steps: cfg.steps,
        losses,
        pose: islr_metrics(&p, &data.labels)?,
        lip: islr_metrics(&l, &data.labels)?,
        fused: islr_metrics(&f, &data.labels)?,
    })
}
