//! Overfit runs on a tiny corpus: the end-to-end plumbing check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TaskData;
use super::optim::{AdamW, AdamWConfig};
use super::sampler::MixedSampler;
use super::schedule::one_cycle_lr;
use crate::decoder::decoding::{decode, Constraint, Search};
use crate::decoder::prompt::{decode_span, PromptedSample, Task};
use crate::decoder::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::model::SignModel;
use crate::tensor::{Tape, Tensor};

pub const MAX_HARNESS_SAMPLES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub task: Task,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Stop once teacher-forced token accuracy reaches this value, checked
    /// every `eval_every` steps.
    pub target_accuracy: Option<f64>,
    pub eval_every: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            task: Task::Slt,
            steps: 2000,
            lr: 3e-3,
            warmup: 50,
            batch_size: 4,
            lambda: crate::ssa::DEFAULT_LAMBDA,
            seed: 0,
            weight_decay: 0.0,
            target_accuracy: None,
            eval_every: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HarnessEval {
    pub token_accuracy: f64,
    pub exact_match: f64,
    /// Mean absolute boundary error in frames, alignment only.
    pub boundary_mae: Option<f64>,
    /// Mean soft-decoded timestamp L1, alignment only.
    pub l1: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub steps: usize,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub eval: HarnessEval,
}

/// Trains the perceiver and decoder on cached features of a frozen backbone.
pub struct OverfitHarness<'a> {
    model: &'a SignModel,
    tok: &'a Tokenizer,
    data: &'a TaskData,
    features: Vec<Tensor>,
}

impl<'a> OverfitHarness<'a> {
    pub fn new(model: &'a SignModel, tok: &'a Tokenizer, data: &'a TaskData) -> Result<Self> {
        let n = data.slt.len().max(data.ssa.len());
        if n > MAX_HARNESS_SAMPLES {
            return Err(Error::contract(format!(
                "overfit corpus has {n} samples, at most {MAX_HARNESS_SAMPLES} allowed"
            )));
        }
        let features = data
            .windows
            .iter()
            .map(|w| model.features_value(&w.clip, &w.lip))
            .collect::<Result<_>>()?;
        Ok(OverfitHarness {
            model,
            tok,
            data,
            features,
        })
    }

    fn len(&self, task: Task) -> usize {
        match task {
            Task::Slt => self.data.slt.len(),
            Task::Ssa => self.data.ssa.len(),
        }
    }

    fn sample(&self, task: Task, i: usize, rng: Option<&mut ChaCha8Rng>) -> Result<(PromptedSample, usize)> {
        Ok(match task {
            Task::Slt => (self.data.slt_sample(self.tok, i)?, self.data.slt[i].window),
            Task::Ssa => {
                let s = match rng {
                    Some(r) => self.data.ssa_training_sample(self.tok, i, r)?,
                    None => self.data.ssa_sample(self.tok, i, true)?,
                };
                (s, self.data.ssa[i].window)
            }
        })
    }

    /// Teacher-forced and greedy metrics over every sample of `task`, with the
    /// alignment prior shown.
    pub fn evaluate(&self, task: Task, lambda: f64, greedy: bool) -> Result<HarnessEval> {
        let n = self.len(task);
        let (mut correct, mut tokens, mut exact, mut err, mut l1, mut loss) = (0, 0, 0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let (sample, w) = self.sample(task, i, None)?;
            let mut tape = Tape::new();
            let f = tape.constant(self.features[w].clone());
            let out = self.model.sample_loss(&mut tape, &sample, f, lambda)?;
            loss += tape.value(out.loss).item();
            if let Some(v) = out.l1 {
                l1 += tape.value(v).item();
            }
            let logits = tape.value(out.logits);
            for (r, &t) in sample.target.iter().enumerate() {
                let row = logits.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += (best == t) as usize;
            }
            tokens += sample.target.len();
            if greedy {
                let mem = self.model.memory_value(&sample, &self.features[w])?;
                let constraint = match task {
                    Task::Slt => Constraint::Free,
                    Task::Ssa => Constraint::Timestamp,
                };
                let h = decode(&self.model.decoder, &mem, Search::Greedy, constraint, sample.target.len() + 4)?;
                exact += (h.tokens == sample.target) as usize;
                if task == Task::Ssa {
                    let truth = self.data.ssa[i].target;
                    let (s, e) = decode_span(&h.tokens).unwrap_or((crate::decoder::prompt::WINDOW_FRAMES, 0));
                    err += (s.abs_diff(truth.0) + e.abs_diff(truth.1)) as f64 / 2.0;
                }
            }
        }
        let nf = n.max(1) as f64;
        Ok(HarnessEval {
            token_accuracy: correct as f64 / tokens.max(1) as f64,
            exact_match: exact as f64 / nf,
            boundary_mae: (greedy && task == Task::Ssa).then_some(err / nf),
            l1: (task == Task::Ssa).then_some(l1 / nf),
            loss: loss / nf,
        })
    }

    pub fn run(&self, cfg: &HarnessConfig) -> Result<HarnessReport> {
        let all = self.model.all_params();
        let train = self.model.mapping_params(true);
        all.set_requires_grad(false);
        train.set_requires_grad(true);
        let mut opt = AdamW::new(
            &train,
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
        );
        let ratio = if cfg.task == Task::Slt { 1.0 } else { 0.0 };
        let mut sampler = MixedSampler::new(self.data.slt.len(), self.data.ssa.len(), ratio, cfg.batch_size, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let scale = 1.0 / cfg.batch_size as f64;
        let mut losses = Vec::with_capacity(cfg.steps);
        for s in 0..cfg.steps {
            let lr = one_cycle_lr(s + 1, cfg.steps + 1, cfg.warmup, cfg.lr);
            opt.zero_grad();
            let batch = sampler.next_batch();
            let mut sum = 0.0;
            for &i in &batch.indices {
                let (sample, w) = self.sample(cfg.task, i, Some(&mut rng))?;
                let mut tape = Tape::new();
                let f = tape.constant(self.features[w].clone());
                let out = self.model.sample_loss(&mut tape, &sample, f, cfg.lambda)?;
                let v = tape.value(out.loss).item();
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at step {s}")));
                }
                sum += v;
                let scaled = tape.scale(out.loss, scale);
                tape.backward(scaled)?;
            }
            opt.step(lr, 1.0)?;
            losses.push(sum * scale);
            if let Some(target) = cfg.target_accuracy {
                if (s + 1) % cfg.eval_every.max(1) == 0
                    && self.evaluate(cfg.task, cfg.lambda, false)?.token_accuracy >= target
                {
                    break;
                }
            }
        }
        opt.zero_grad();
        Ok(HarnessReport {
            steps: losses.len(),
            losses,
            eval: self.evaluate(cfg.task, cfg.lambda, true)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{SynthConfig, SynthCorpus};
    use crate::model::ModelConfig;
    use crate::tensor::Init;
    use crate::training::log::block_means;

    #[test]
    fn small_translation_run_learns_and_smooths_down() {
        let corpus = SynthCorpus::generate(&SynthConfig {
            n_samples: 2,
            isolated_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut data = TaskData::from_synth(&corpus, None);
        data.truncate(4);
        let tok = Tokenizer::train(corpus.sentences(), 96, &["bfi"]).unwrap();
        let model = SignModel::new(&mut Init::new(1), &ModelConfig::toy(), tok.vocab_size()).unwrap();
        let h = OverfitHarness::new(&model, &tok, &data).unwrap();
        let before = h.evaluate(Task::Slt, 0.01, false).unwrap();
        let r = h
            .run(&HarnessConfig {
                steps: 200,
                batch_size: 2,
                ..HarnessConfig::default()
            })
            .unwrap();
        assert!(r.eval.loss < before.loss * 0.5, "{before:?} {:?}", r.eval);
        assert!(r.eval.token_accuracy > before.token_accuracy);
        let blocks = block_means(&r.losses, 50);
        assert!(blocks.windows(2).all(|w| w[1] < w[0]), "{blocks:?}");
    }

    #[test]
    fn oversized_corpus_is_rejected() {
        let corpus = SynthCorpus::generate(&SynthConfig {
            n_samples: 70,
            isolated_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let data = TaskData::from_synth(&corpus, None);
        assert!(data.slt.len() > MAX_HARNESS_SAMPLES);
        let tok = Tokenizer::train(corpus.sentences(), 96, &["bfi"]).unwrap();
        let model = SignModel::new(&mut Init::new(1), &ModelConfig::toy(), tok.vocab_size()).unwrap();
        assert!(matches!(OverfitHarness::new(&model, &tok, &data), Err(Error::Contract(_))));
    }
}
