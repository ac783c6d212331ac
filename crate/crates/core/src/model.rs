//! Backbones, sliding perceiver and encoder-decoder wired into one model.

use serde::{Deserialize, Serialize};

use crate::backbones::{dense_extract, window_count, BackboneConfig, LipBackbone, PoseBackbone};
use crate::dataio::keypoints::KeypointClip;
use crate::dataio::lip::LipClip;
use crate::decoder::model::{DecoderConfig, ToyEncDec};
use crate::decoder::prompt::{PromptedSample, Task};
use crate::error::{Error, Result};
use crate::perceiver::{PerceiverConfig, SlidingPerceiver};
use crate::ssa::ssa_loss;
use crate::tensor::{Init, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub perceiver: PerceiverConfig,
    pub decoder: DecoderConfig,
    pub dora: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            perceiver: PerceiverConfig::default(),
            decoder: DecoderConfig::default(),
            dora: true,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        let backbone = BackboneConfig::toy();
        ModelConfig {
            perceiver: PerceiverConfig {
                in_dim: 2 * backbone.conformer.dim,
                window: 8,
                stride: 2,
                layers: 2,
                dim: 32,
                heads: 2,
                ff_mult: 2,
                max_len: 250,
            },
            backbone,
            decoder: DecoderConfig::toy(),
            dora: true,
        }
    }

    /// Feature sequence length fed to the perceiver.
    pub fn feature_len(&self) -> usize {
        let b = &self.backbone;
        window_count(b.dense_frames, b.window, b.stride)
    }

    pub fn latent_len(&self) -> usize {
        crate::perceiver::output_len(self.feature_len(), self.perceiver.window, self.perceiver.stride)
    }

    pub fn validate(&self) -> Result<()> {
        self.perceiver.validate()?;
        if self.perceiver.in_dim != 2 * self.backbone.conformer.dim {
            return Err(Error::config(format!(
                "perceiver.in_dim {} must be twice the backbone width {}",
                self.perceiver.in_dim, self.backbone.conformer.dim
            )));
        }
        if self.perceiver.dim != self.decoder.embed_dim {
            return Err(Error::config(format!(
                "perceiver.dim {} must equal decoder.embed_dim {}",
                self.perceiver.dim, self.decoder.embed_dim
            )));
        }
        let t = self.feature_len();
        if t < self.perceiver.window || t > self.perceiver.max_len {
            return Err(Error::config(format!(
                "{t} feature steps do not fit the perceiver (window {}, table {})",
                self.perceiver.window, self.perceiver.max_len
            )));
        }
        Ok(())
    }
}

pub struct SampleLoss {
    pub loss: Var,
    pub logits: Var,
    pub l1: Option<Var>,
}

pub struct SignModel {
    pub cfg: ModelConfig,
    pub pose: PoseBackbone,
    pub lip: LipBackbone,
    pub perceiver: SlidingPerceiver,
    pub decoder: ToyEncDec,
}

impl SignModel {
    pub fn new(init: &mut Init, cfg: &ModelConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let pose = PoseBackbone::new(init, "pose", &cfg.backbone)?;
        let lip = LipBackbone::new(init, "lip", &cfg.backbone)?;
        let perceiver = SlidingPerceiver::new(init, "perceiver", &cfg.perceiver)?;
        let mut decoder = ToyEncDec::new(init, "lm", vocab, &cfg.decoder)?;
        if cfg.dora {
            decoder.attach_dora(init);
        }
        Ok(SignModel {
            cfg: cfg.clone(),
            pose,
            lip,
            perceiver,
            decoder,
        })
    }

    /// `[T, 2C']` dense features of one window-length clip.
    pub fn features(&self, tape: &mut Tape, clip: &KeypointClip, lip: &LipClip) -> Result<Var> {
        dense_extract(tape, &self.pose, &self.lip, clip, lip, &self.cfg.backbone)
    }

    pub fn features_value(&self, clip: &KeypointClip, lip: &LipClip) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.features(&mut tape, clip, lip)?;
        Ok(tape.value(f).clone())
    }

    pub fn latents(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        Ok(self.perceiver.forward(tape, features)?.latents)
    }

    pub fn memory(&self, tape: &mut Tape, sample: &PromptedSample, latents: Var) -> Result<Var> {
        self.decoder.encode_prompt(tape, &sample.prompt, sample.splice, latents)
    }

    /// Decoder memory for inference from precomputed features.
    pub fn memory_value(&self, sample: &PromptedSample, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let l = self.latents(&mut tape, f)?;
        let m = self.memory(&mut tape, sample, l)?;
        Ok(tape.value(m).clone())
    }

    /// Cross-entropy for translation, `CE + λ·L1` for alignment targets.
    pub fn sample_loss(&self, tape: &mut Tape, sample: &PromptedSample, features: Var, lambda: f64) -> Result<SampleLoss> {
        let latents = self.latents(tape, features)?;
        let memory = self.memory(tape, sample, latents)?;
        let logits = self.decoder.teacher_forced(tape, memory, &sample.target)?;
        match sample.task {
            Task::Slt => Ok(SampleLoss {
                loss: tape.cross_entropy(logits, &sample.target)?,
                logits,
                l1: None,
            }),
            Task::Ssa => {
                let parts = ssa_loss(tape, logits, &sample.target, lambda)?;
                Ok(SampleLoss {
                    loss: parts.total,
                    logits,
                    l1: Some(parts.l1),
                })
            }
        }
    }

    pub fn backbone_params(&self) -> ParamSet {
        let mut s = ParamSet::new();
        self.pose.collect(&mut s);
        self.lip.collect(&mut s);
        s
    }

    /// Perceiver plus decoder adapters; with `with_decoder_base` also the
    /// decoder's embeddings, norms and head.
    pub fn mapping_params(&self, with_decoder_base: bool) -> ParamSet {
        let mut s = ParamSet::new();
        self.perceiver.collect(&mut s);
        s.extend(&self.decoder.adapter_params());
        if !self.decoder.has_dora() {
            self.decoder.collect(&mut s);
        } else if with_decoder_base {
            s.extend(&self.decoder.base_params());
        }
        s
    }

    pub fn all_params(&self) -> ParamSet {
        let mut s = self.backbone_params();
        self.perceiver.collect(&mut s);
        self.decoder.collect(&mut s);
        s
    }
}
