//! Staged multitask training with parameter freezing.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TaskData;
use super::log::{LogRecord, TrainLog};
use super::optim::{AdamW, AdamWConfig};
use super::sampler::MixedSampler;
use super::schedule::one_cycle_lr;
use crate::decoder::prompt::Task;
use crate::decoder::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::model::SignModel;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Perceiver and adapters on translation, backbone frozen.
    #[serde(rename = "1")]
    Mapping,
    /// Full model on translation.
    #[serde(rename = "2")]
    Translation,
    /// Full model on the translation/alignment mix.
    #[serde(rename = "3")]
    Multitask,
    #[serde(rename = "finetune")]
    Finetune,
}

impl Stage {
    pub const PRETRAIN: [Stage; 3] = [Stage::Mapping, Stage::Translation, Stage::Multitask];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Mapping => "1",
            Stage::Translation => "2",
            Stage::Multitask => "3",
            Stage::Finetune => "finetune",
        }
    }

    pub fn trains_backbone(self) -> bool {
        self != Stage::Mapping
    }

    pub fn slt_ratio(self, mix: f64) -> f64 {
        match self {
            Stage::Mapping | Stage::Translation => 1.0,
            Stage::Multitask | Stage::Finetune => mix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Peak learning rate of each stage's one-cycle schedule.
    pub lr: f64,
    pub optimizer: AdamWConfig,
    /// Optimizer steps; pretraining splits them by `stage_fractions`.
    pub steps: usize,
    pub stage_fractions: [f64; 3],
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Share of translation batches in multitask stages.
    pub slt_ratio: f64,
    pub lambda: f64,
    pub grad_accum: usize,
    /// Also train decoder embeddings, norms and head next to the adapters.
    pub train_decoder_base: bool,
    /// Keep the backbones frozen in every stage and train on cached features.
    pub freeze_backbone: bool,
    /// Samples per task in the before/after probe of each stage.
    pub probe_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-4,
            optimizer: AdamWConfig::default(),
            steps: 300,
            stage_fractions: [1.0 / 3.0; 3],
            warmup_fraction: 0.02,
            batch_size: 4,
            slt_ratio: 0.8,
            lambda: crate::ssa::DEFAULT_LAMBDA,
            grad_accum: 1,
            train_decoder_base: false,
            freeze_backbone: false,
            probe_samples: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("slt_ratio", self.slt_ratio)?;
        unit("warmup_fraction", self.warmup_fraction)?;
        for f in self.stage_fractions {
            unit("stage_fractions", f)?;
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::config("batch_size and grad_accum must be positive"));
        }
        if !(self.lr >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::config("lr and lambda must be non-negative"));
        }
        Ok(())
    }

    pub fn stage_steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Mapping => (self.steps as f64 * self.stage_fractions[0]).round() as usize,
            Stage::Translation => (self.steps as f64 * self.stage_fractions[1]).round() as usize,
            Stage::Multitask => (self.steps as f64 * self.stage_fractions[2]).round() as usize,
            Stage::Finetune => self.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub slt_batches: usize,
    pub ssa_batches: usize,
    pub probe_before: f64,
    pub probe_after: f64,
    /// Checksum of the parameters outside the trainable set, after the stage.
    pub frozen_checksum: String,
    pub trainable_before: String,
    pub trainable_after: String,
}

pub struct Trainer<'a> {
    pub model: &'a SignModel,
    pub tok: &'a Tokenizer,
    pub data: &'a TaskData,
    pub cfg: TrainConfig,
    pub log: TrainLog,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a SignModel, tok: &'a Tokenizer, data: &'a TaskData, cfg: TrainConfig, log: TrainLog) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            tok,
            data,
            cfg,
            log,
            step: 0,
        })
    }

    fn trains_backbone(&self, stage: Stage) -> bool {
        stage.trains_backbone() && !self.cfg.freeze_backbone
    }

    pub fn trainable(&self, stage: Stage) -> ParamSet {
        let mut s = self.model.mapping_params(self.cfg.train_decoder_base);
        if self.trains_backbone(stage) {
            s.extend(&self.model.backbone_params());
        }
        s
    }

    /// Enable gradients on the stage's trainable set only; returns it with
    /// its complement.
    pub fn apply_freeze(&self, stage: Stage) -> (ParamSet, ParamSet) {
        let all = self.model.all_params();
        let train = self.trainable(stage);
        all.set_requires_grad(false);
        train.set_requires_grad(true);
        let mut frozen = ParamSet::new();
        all.iter().filter(|p| !train.contains(p)).for_each(|p| frozen.push(p));
        (train, frozen)
    }

    fn features(&self, tape: &mut Tape, window: usize, cache: Option<&HashMap<usize, Tensor>>) -> Result<Var> {
        match cache.and_then(|c| c.get(&window)) {
            Some(t) => Ok(tape.constant(t.clone())),
            None => {
                let w = &self.data.windows[window];
                self.model.features(tape, &w.clip, &w.lip)
            }
        }
    }

    fn window_of(&self, task: Task, i: usize) -> usize {
        match task {
            Task::Slt => self.data.slt[i].window,
            Task::Ssa => self.data.ssa[i].window,
        }
    }

    /// Mean loss over the first probe samples of each task the stage trains,
    /// with the alignment prior always shown.
    pub fn probe_loss(&self, stage: Stage) -> Result<f64> {
        let mut tasks = vec![Task::Slt];
        if stage.slt_ratio(self.cfg.slt_ratio) < 1.0 {
            tasks.push(Task::Ssa);
        }
        let (mut total, mut n) = (0.0, 0usize);
        for task in tasks {
            let len = match task {
                Task::Slt => self.data.slt.len(),
                Task::Ssa => self.data.ssa.len(),
            };
            for i in 0..len.min(self.cfg.probe_samples) {
                let sample = match task {
                    Task::Slt => self.data.slt_sample(self.tok, i)?,
                    Task::Ssa => self.data.ssa_sample(self.tok, i, true)?,
                };
                let mut tape = Tape::new();
                let f = self.features(&mut tape, self.window_of(task, i), None)?;
                let out = self.model.sample_loss(&mut tape, &sample, f, self.cfg.lambda)?;
                total += tape.value(out.loss).item();
                n += 1;
            }
        }
        Ok(if n == 0 { f64::NAN } else { total / n as f64 })
    }

    pub fn run_stage(&mut self, stage: Stage, steps: usize) -> Result<StageReport> {
        let (train, frozen) = self.apply_freeze(stage);
        let frozen_before = frozen.checksum();
        let trainable_before = train.checksum();
        let probe_before = self.probe_loss(stage)?;
        let mut opt = AdamW::new(&train, self.cfg.optimizer);
        let stage_seed = self.cfg.seed ^ (0x9e37_79b9 * (stage as u64 + 1));
        let mut sampler = MixedSampler::new(
            self.data.slt.len(),
            self.data.ssa.len(),
            stage.slt_ratio(self.cfg.slt_ratio),
            self.cfg.batch_size,
            stage_seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed.wrapping_add(1));
        let cache = if self.trains_backbone(stage) {
            None
        } else {
            let mut c = HashMap::new();
            for w in self.data.slt.iter().map(|s| s.window).chain(self.data.ssa.iter().map(|s| s.window)) {
                if let std::collections::hash_map::Entry::Vacant(e) = c.entry(w) {
                    let win = &self.data.windows[w];
                    e.insert(self.model.features_value(&win.clip, &win.lip)?);
                }
            }
            Some(c)
        };
        let warmup = (steps as f64 * self.cfg.warmup_fraction).round() as usize;
        let scale = 1.0 / (self.cfg.batch_size * self.cfg.grad_accum) as f64;
        let (mut slt_batches, mut ssa_batches) = (0, 0);
        for s in 0..steps {
            let lr = one_cycle_lr(s + 1, steps + 1, warmup, self.cfg.lr);
            opt.zero_grad();
            for _ in 0..self.cfg.grad_accum {
                let batch = sampler.next_batch();
                match batch.task {
                    Task::Slt => slt_batches += 1,
                    Task::Ssa => ssa_batches += 1,
                }
                let mut sum = 0.0;
                for &i in &batch.indices {
                    let sample = match batch.task {
                        Task::Slt => self.data.slt_sample(self.tok, i)?,
                        Task::Ssa => self.data.ssa_training_sample(self.tok, i, &mut rng)?,
                    };
                    let mut tape = Tape::new();
                    let f = self.features(&mut tape, self.window_of(batch.task, i), cache.as_ref())?;
                    let out = self.model.sample_loss(&mut tape, &sample, f, self.cfg.lambda)?;
                    let v = tape.value(out.loss).item();
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("non-finite loss at stage {} step {s}", stage.label())));
                    }
                    sum += v;
                    let scaled = tape.scale(out.loss, scale);
                    tape.backward(scaled)?;
                }
                self.log.push(LogRecord {
                    step: self.step,
                    stage: stage.label().to_string(),
                    task: batch.task,
                    loss: sum / batch.indices.len() as f64,
                    lr,
                })?;
            }
            opt.step(lr, 1.0)?;
            self.step += 1;
        }
        opt.zero_grad();
        self.log.flush()?;
        let frozen_checksum = frozen.checksum();
        if frozen_checksum != frozen_before {
            return Err(Error::contract(format!("stage {} modified frozen parameters", stage.label())));
        }
        Ok(StageReport {
            stage,
            steps,
            slt_batches,
            ssa_batches,
            probe_before,
            probe_after: self.probe_loss(stage)?,
            frozen_checksum,
            trainable_before,
            trainable_after: train.checksum(),
        })
    }
}

/// Initialise both backbones from an ISLR checkpoint. Extra tensors such as
/// classifier heads are ignored.
pub fn load_backbones(model: &SignModel, checkpoint: &Path) -> Result<()> {
    load_checkpoint(checkpoint, &model.backbone_params())
}

/// Stages 1, 2 and 3 in order, writing `stage{n}.ckpt` under `out`.
pub fn run_curriculum(trainer: &mut Trainer, backbone_checkpoint: &Path, out: Option<&Path>) -> Result<Vec<StageReport>> {
    load_backbones(trainer.model, backbone_checkpoint)?;
    let mut reports = Vec::new();
    for stage in Stage::PRETRAIN {
        let steps = trainer.cfg.stage_steps(stage);
        log::info!("stage {} for {steps} steps", stage.label());
        let r = trainer.run_stage(stage, steps)?;
        if let Some(dir) = out {
            save_checkpoint(&dir.join(format!("stage{}.ckpt", stage.label())), &trainer.model.all_params())?;
        }
        reports.push(r);
    }
    Ok(reports)
}

/// Continue multitask training from a pretraining checkpoint.
pub fn run_finetune(trainer: &mut Trainer, checkpoint: &Path, out: Option<&Path>) -> Result<StageReport> {
    load_checkpoint(checkpoint, &trainer.model.all_params())?;
    let r = trainer.run_stage(Stage::Finetune, trainer.cfg.stage_steps(Stage::Finetune))?;
    if let Some(dir) = out {
        save_checkpoint(&dir.join("finetune.ckpt"), &trainer.model.all_params())?;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{SynthConfig, SynthCorpus};
    use crate::model::ModelConfig;
    use crate::tensor::Init;

    fn setup() -> (SynthCorpus, TaskData, Tokenizer) {
        let corpus = SynthCorpus::generate(&SynthConfig {
            n_samples: 2,
            isolated_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut data = TaskData::from_synth(&corpus, None);
        data.truncate(2);
        let tok = Tokenizer::train(corpus.sentences(), 96, &["bfi"]).unwrap();
        (corpus, data, tok)
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            steps,
            batch_size: 1,
            probe_samples: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_one_freezes_the_backbone() {
        let (_, data, tok) = setup();
        let model = SignModel::new(&mut Init::new(0), &ModelConfig::toy(), tok.vocab_size()).unwrap();
        let before = model.backbone_params().checksum();
        let mut t = Trainer::new(&model, &tok, &data, cfg(20), TrainLog::new()).unwrap();
        let r = t.run_stage(Stage::Mapping, 20).unwrap();
        assert_eq!(model.backbone_params().checksum(), before);
        assert_ne!(r.trainable_before, r.trainable_after);
        assert!(r.probe_after < r.probe_before, "{r:?}");
        assert_eq!((r.slt_batches, r.ssa_batches), (20, 0));
        assert!(t.log.records.iter().all(|l| l.stage == "1" && l.task == Task::Slt));
        // adapted base weights stay frozen even when the backbone trains
        let (train, frozen) = t.apply_freeze(Stage::Translation);
        assert!(!frozen.is_empty() && frozen.iter().all(|p| !p.requires_grad()));
        assert!(train.iter().all(|p| p.requires_grad()));
    }

    #[test]
    fn multitask_stage_emits_both_tasks_and_trains_backbone() {
        let (_, data, tok) = setup();
        let model = SignModel::new(&mut Init::new(0), &ModelConfig::toy(), tok.vocab_size()).unwrap();
        let before = model.backbone_params().checksum();
        let c = TrainConfig {
            slt_ratio: 0.5,
            seed: 1,
            ..cfg(6)
        };
        let mut t = Trainer::new(&model, &tok, &data, c, TrainLog::new()).unwrap();
        let r = t.run_stage(Stage::Multitask, 6).unwrap();
        assert_eq!(r.slt_batches + r.ssa_batches, 6);
        let tasks: Vec<Task> = t.log.records.iter().map(|l| l.task).collect();
        assert!(tasks.contains(&Task::Slt) && tasks.contains(&Task::Ssa));
        assert!(r.slt_batches > 0 && r.ssa_batches > 0, "{r:?}");
        assert_ne!(model.backbone_params().checksum(), before);
    }

    #[test]
    fn frozen_backbone_option_holds_in_every_stage() {
        let (_, data, tok) = setup();
        let model = SignModel::new(&mut Init::new(0), &ModelConfig::toy(), tok.vocab_size()).unwrap();
        let before = model.backbone_params().checksum();
        let c = TrainConfig {
            freeze_backbone: true,
            ..cfg(3)
        };
        let mut t = Trainer::new(&model, &tok, &data, c, TrainLog::new()).unwrap();
        for stage in [Stage::Translation, Stage::Multitask] {
            let r = t.run_stage(stage, 3).unwrap();
            assert_ne!(r.trainable_before, r.trainable_after);
        }
        assert_eq!(model.backbone_params().checksum(), before);
    }

    #[test]
    fn missing_backbone_checkpoint_is_a_startup_error() {
        let (_, data, tok) = setup();
        let model = SignModel::new(&mut Init::new(0), &ModelConfig::toy(), tok.vocab_size()).unwrap();
        let mut t = Trainer::new(&model, &tok, &data, cfg(1), TrainLog::new()).unwrap();
        let err = run_curriculum(&mut t, Path::new("/nonexistent/islr.ckpt"), None);
        assert!(matches!(err, Err(Error::Missing(_))));
        assert!(t.log.records.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            slt_ratio: 1.2,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let c = TrainConfig {
            steps: 90,
            stage_fractions: [0.5, 0.25, 0.25],
            ..TrainConfig::default()
        };
        assert_eq!(c.stage_steps(Stage::Mapping), 45);
        assert_eq!(c.stage_steps(Stage::Multitask), 23);
    }
}
