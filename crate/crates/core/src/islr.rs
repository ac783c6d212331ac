//! Isolated recognition heads, auxiliary and contrastive losses, late fusion
//! and top-k metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbones::conformer::{attentive_pool, ConformerConfig, ConformerEncoder, PoolOrder};
use crate::backbones::{LipBackbone, PoseBackbone};
use crate::decoder::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Init, Param, ParamSet, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.1;
pub const TEXT_EMBED_DIM: usize = 2048;

/// Linear map from pooled features to pseudo-gloss logits.
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(init: &mut Init, name: &str, dim: usize, classes: usize) -> Self {
        ClassifierHead {
            linear: Linear::new(init, name, dim, classes, true),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn forward(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        self.linear.forward(tape, f)
    }

    pub fn loss(&self, tape: &mut Tape, f: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.forward(tape, f)?;
        self.check_labels(labels)?;
        tape.cross_entropy(logits, labels)
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&y| y >= self.classes()) {
            Some(&label) => Err(Error::Label {
                label,
                classes: self.classes(),
            }),
            None => Ok(()),
        }
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.linear.collect(set);
    }
}

/// Shared Conformer applied to each articulator stream separately.
pub struct AuxNetwork {
    pub conformer: ConformerEncoder,
    pub pool_order: PoolOrder,
}

impl AuxNetwork {
    pub fn new(init: &mut Init, name: &str, articulator_dim: usize, cfg: &ConformerConfig, pool_order: PoolOrder) -> Result<Self> {
        Ok(AuxNetwork {
            conformer: ConformerEncoder::new(init, name, articulator_dim, cfg)?,
            pool_order,
        })
    }

    pub fn features(&self, tape: &mut Tape, stream: Var) -> Result<Var> {
        let out = self.conformer.forward(tape, stream)?;
        attentive_pool(tape, out.hidden, &out.maps, self.pool_order)
    }

    /// `(1/N_m) Σ_m CE(head(aux(f_m)), y)` over the given streams.
    pub fn loss(&self, tape: &mut Tape, streams: &[Var], head: &ClassifierHead, labels: &[usize]) -> Result<Var> {
        if streams.is_empty() {
            return Err(Error::contract("auxiliary loss needs at least one stream"));
        }
        let mut total: Option<Var> = None;
        for &s in streams {
            let f = self.features(tape, s)?;
            let ce = head.loss(tape, f, labels)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        Ok(tape.scale(total.unwrap(), 1.0 / streams.len() as f64))
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.conformer.collect(set);
    }
}

/// Two linear layers with a ReLU between them.
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub fn new(init: &mut Init, name: &str, dims: [usize; 3]) -> Self {
        Projector {
            fc1: Linear::new(init, &format!("{name}.fc1"), dims[0], dims[1], true),
            fc2: Linear::new(init, &format!("{name}.fc2"), dims[1], dims[2], true),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.fc1.in_dim(), self.fc1.out_dim(), self.fc2.out_dim()]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.fc1.collect(set);
        self.fc2.collect(set);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub visual: [usize; 3],
    pub text: [usize; 3],
    pub tau: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            visual: [512, 256, 128],
            text: [TEXT_EMBED_DIM, 512, 128],
            tau: DEFAULT_TAU,
        }
    }
}

impl ProjectorConfig {
    pub fn toy(visual_dim: usize, text_dim: usize) -> Self {
        ProjectorConfig {
            visual: [visual_dim, 8, 4],
            text: [text_dim, 8, 4],
            tau: DEFAULT_TAU,
        }
    }
}

pub struct ContrastiveProjectors {
    pub visual: Projector,
    pub text: Projector,
    pub tau: f64,
}

impl ContrastiveProjectors {
    pub fn new(init: &mut Init, name: &str, cfg: &ProjectorConfig) -> Result<Self> {
        if cfg.visual[2] != cfg.text[2] {
            return Err(Error::config(format!(
                "projector outputs differ: {} vs {}",
                cfg.visual[2], cfg.text[2]
            )));
        }
        if !(cfg.tau > 0.0) {
            return Err(Error::config("contrastive temperature must be positive"));
        }
        Ok(ContrastiveProjectors {
            visual: Projector::new(init, &format!("{name}.visual"), cfg.visual),
            text: Projector::new(init, &format!("{name}.text"), cfg.text),
            tau: cfg.tau,
        })
    }

    /// Project `f_v [B, C']` and frozen text embeddings `[B, D_text]`, then
    /// apply [`contrastive_loss`].
    pub fn loss(&self, tape: &mut Tape, visual: Var, text: &Tensor, labels: &[usize]) -> Result<Var> {
        let v = self.visual.forward(tape, visual)?;
        let t = tape.constant(text.clone());
        let w = self.text.forward(tape, t)?;
        contrastive_loss(tape, v, w, labels, self.tau)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.visual.collect(set);
        self.text.collect(set);
    }
}

/// `α_ij = 1 / count(y_j)`: every label present in the batch carries unit
/// total weight in each denominator.
pub fn contrastive_weights(labels: &[usize]) -> Vec<Vec<f64>> {
    let mut count: HashMap<usize, usize> = HashMap::new();
    for &y in labels {
        *count.entry(y).or_default() += 1;
    }
    let row: Vec<f64> = labels.iter().map(|y| 1.0 / count[y] as f64).collect();
    vec![row; labels.len()]
}

/// Per-sample `−log(exp(s_ii) / Σ_j α_ij exp(s_ij))` with `s` the cosine
/// similarity over `τ`. Returns `[B]`.
pub fn contrastive_per_sample(tape: &mut Tape, v: Var, w: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let b = labels.len();
    let sv = tape.shape(v).to_vec();
    let sw = tape.shape(w).to_vec();
    if sv.len() != 2 || sv != sw || sv[0] != b {
        return Err(Error::shape("contrastive_loss", &sv, &sw));
    }
    if b < 2 {
        return Err(Error::contract("contrastive loss needs a batch of at least 2"));
    }
    let v = tape.l2_normalize(v)?;
    let w = tape.l2_normalize(w)?;
    let wt = tape.transpose(w)?;
    let sim = tape.matmul(v, wt)?;
    let s = tape.scale(sim, 1.0 / tau);
    let alpha = contrastive_weights(labels);
    let log_alpha: Vec<f64> = alpha.iter().flatten().map(|a| a.ln()).collect();
    let la = tape.constant(Tensor::new(&[b, b], log_alpha)?);
    let z = tape.add(s, la)?;
    let lsm = tape.log_softmax(z, 1)?;
    let diag: Vec<usize> = (0..b).collect();
    let picked = tape.pick(lsm, &diag)?;
    // log_softmax(z)_ii = s_ii + ln α_ii − lse_j(z_ij)
    let diag_alpha: Vec<f64> = (0..b).map(|i| alpha[i][i].ln()).collect();
    let da = tape.constant(Tensor::new(&[b], diag_alpha)?);
    let num = tape.sub(picked, da)?;
    Ok(tape.neg(num))
}

pub fn contrastive_loss(tape: &mut Tape, v: Var, w: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let per = contrastive_per_sample(tape, v, w, labels, tau)?;
    tape.mean_all(per)
}

/// Frozen token-embedding table standing in for the language model's.
pub struct LabelEmbedder {
    pub table: Param,
}

impl LabelEmbedder {
    pub fn new(seed: u64, vocab: usize, dim: usize) -> Self {
        let mut init = Init::new(seed);
        LabelEmbedder {
            table: Param::frozen("label_embed.table", init.normal(&[vocab, dim], 1.0)),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// Mean of the gloss's token rows.
    pub fn embed(&self, tok: &Tokenizer, gloss: &str) -> Result<Vec<f64>> {
        let ids = tok.encode(gloss);
        if ids.is_empty() {
            return Err(Error::contract(format!("gloss {gloss:?} has no tokens")));
        }
        self.table.with_value(|t| {
            let rows = t.shape()[0];
            let d = t.shape()[1];
            let mut out = vec![0.0; d];
            for &id in &ids {
                if id >= rows {
                    return Err(Error::Label { label: id, classes: rows });
                }
                for (o, v) in out.iter_mut().zip(t.row(id)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= ids.len() as f64);
            Ok(out)
        })
    }

    /// `[B, D]` embeddings for the glosses of `labels`.
    pub fn embed_labels(&self, tok: &Tokenizer, vocab: &[String], labels: &[usize]) -> Result<Tensor> {
        let rows = labels
            .iter()
            .map(|&y| {
                let g = vocab.get(y).ok_or(Error::Label {
                    label: y,
                    classes: vocab.len(),
                })?;
                self.embed(tok, g)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionWeights {
    pub pose: f64,
    pub lip: f64,
    /// Blend raw logits instead of log-probabilities.
    pub raw: bool,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            pose: 0.7,
            lip: 0.3,
            raw: false,
        }
    }
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let v = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(v) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|z| *z -= lse);
    }
    out
}

/// `w_p·log softmax(z_p) + w_l·log softmax(z_l)` row-wise.
pub fn late_fusion(pose: &Tensor, lip: &Tensor, w: FusionWeights) -> Result<Tensor> {
    if pose.shape() != lip.shape() {
        return Err(Error::shape("late_fusion", pose.shape(), lip.shape()));
    }
    if (w.pose + w.lip - 1.0).abs() > 1e-9 {
        log::warn!("fusion weights {} + {} do not sum to 1", w.pose, w.lip);
    }
    let (p, l) = if w.raw {
        (pose.clone(), lip.clone())
    } else {
        (log_softmax_rows(pose), log_softmax_rows(lip))
    };
    let data = p.data().iter().zip(l.data()).map(|(a, b)| w.pose * a + w.lip * b).collect();
    Tensor::new(pose.shape(), data)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct IslrMetrics {
    pub top1: f64,
    pub top5: f64,
    pub per_class_top1: f64,
    pub per_class_top5: f64,
}

/// Rank of the label within a score row (0 = best); ties favour lower ids.
fn label_rank(row: &[f64], label: usize) -> usize {
    let s = row[label];
    row.iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < label))
        .count()
}

/// Per-instance and per-class top-1/top-5 over `[N, V]` scores. Per-class
/// accuracies average over classes present in `labels`.
pub fn islr_metrics(scores: &Tensor, labels: &[usize]) -> Result<IslrMetrics> {
    if scores.rank() != 2 || scores.rows() != labels.len() {
        return Err(Error::shape("islr_metrics", scores.shape(), &[labels.len()]));
    }
    let v = scores.shape()[1];
    if labels.is_empty() {
        return Err(Error::contract("no predictions to score"));
    }
    let mut per: HashMap<usize, (usize, usize, usize)> = HashMap::new();
    let (mut h1, mut h5) = (0, 0);
    for (i, &y) in labels.iter().enumerate() {
        if y >= v {
            return Err(Error::Label { label: y, classes: v });
        }
        let r = label_rank(scores.row(i), y);
        let e = per.entry(y).or_default();
        e.0 += 1;
        if r < 1 {
            h1 += 1;
            e.1 += 1;
        }
        if r < 5 {
            h5 += 1;
            e.2 += 1;
        }
    }
    let n = labels.len() as f64;
    let k = per.len() as f64;
    Ok(IslrMetrics {
        top1: h1 as f64 / n,
        top5: h5 as f64 / n,
        per_class_top1: per.values().map(|&(c, a, _)| a as f64 / c as f64).sum::<f64>() / k,
        per_class_top5: per.values().map(|&(c, _, b)| b as f64 / c as f64).sum::<f64>() / k,
    })
}

pub struct IslrLoss {
    pub total: Var,
    pub ce: Var,
    pub aux: Option<Var>,
    pub contra: Var,
    pub logits: Var,
}

/// Pose backbone with its head, auxiliary network and projectors.
pub struct PoseIslr {
    pub backbone: PoseBackbone,
    pub head: ClassifierHead,
    pub aux: AuxNetwork,
    pub projectors: ContrastiveProjectors,
}

impl PoseIslr {
    pub fn new(
        init: &mut Init,
        backbone: PoseBackbone,
        classes: usize,
        aux_cfg: &ConformerConfig,
        proj: &ProjectorConfig,
    ) -> Result<Self> {
        let dim = backbone.dim();
        let head = ClassifierHead::new(init, "pose_head", dim, classes);
        let aux = AuxNetwork::new(init, "aux", backbone.articulator_dim(), aux_cfg, backbone.pool_order)?;
        if aux.conformer.dim() != dim {
            return Err(Error::config("auxiliary Conformer width must match the pose head"));
        }
        let projectors = ContrastiveProjectors::new(init, "pose_proj", proj)?;
        Ok(PoseIslr {
            backbone,
            head,
            aux,
            projectors,
        })
    }

    /// `L_pose = CE + L_aux + L_contra`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        x: Var,
        labels: &[usize],
        text: &Tensor,
        masks: Option<&[[bool; 4]]>,
    ) -> Result<IslrLoss> {
        let out = self.backbone.forward(tape, x, masks)?;
        let logits = self.head.forward(tape, out.pooled)?;
        self.head.check_labels(labels)?;
        let ce = tape.cross_entropy(logits, labels)?;
        let aux = self.aux.loss(tape, &out.articulators, &self.head, labels)?;
        let contra = self.projectors.loss(tape, out.pooled, text, labels)?;
        let t = tape.add(ce, aux)?;
        let total = tape.add(t, contra)?;
        Ok(IslrLoss {
            total,
            ce,
            aux: Some(aux),
            contra,
            logits,
        })
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.backbone.collect(set);
        self.head.collect(set);
        self.aux.collect(set);
        self.projectors.collect(set);
    }
}

pub struct LipIslr {
    pub backbone: LipBackbone,
    pub head: ClassifierHead,
    pub projectors: ContrastiveProjectors,
}

impl LipIslr {
    pub fn new(init: &mut Init, backbone: LipBackbone, classes: usize, proj: &ProjectorConfig) -> Result<Self> {
        let head = ClassifierHead::new(init, "lip_head", backbone.dim(), classes);
        let projectors = ContrastiveProjectors::new(init, "lip_proj", proj)?;
        Ok(LipIslr {
            backbone,
            head,
            projectors,
        })
    }

    /// `L_lip = CE + L_contra`.
    pub fn loss(&self, tape: &mut Tape, x: Var, labels: &[usize], text: &Tensor) -> Result<IslrLoss> {
        let f = self.backbone.forward(tape, x)?;
        let logits = self.head.forward(tape, f)?;
        self.head.check_labels(labels)?;
        let ce = tape.cross_entropy(logits, labels)?;
        let contra = self.projectors.loss(tape, f, text, labels)?;
        let total = tape.add(ce, contra)?;
        Ok(IslrLoss {
            total,
            ce,
            aux: None,
            contra,
            logits,
        })
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.backbone.collect(set);
        self.head.collect(set);
        self.projectors.collect(set);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::BackboneConfig;
    use crate::tensor::{finite_diff_check, GradCheck};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_cross_entropy_cases() {
        let mut init = Init::new(0);
        let head = ClassifierHead::new(&mut init, "h", 3, 5);
        head.linear.weight.set_value(Tensor::zeros(&[3, 5])).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(init.uniform(&[2, 3], 1.0));
        let l = head.loss(&mut tape, f, &[0, 4]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            head.loss(&mut tape, f, &[0, 5]),
            Err(Error::Label { label: 5, classes: 5 })
        ));

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[1, 3], vec![40.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-15);
    }

    #[test]
    fn head_gradcheck() {
        let mut init = Init::new(1);
        let head = ClassifierHead::new(&mut init, "h", 4, 6);
        let x = init.uniform(&[3, 4], 1.0);
        let mut set = ParamSet::new();
        head.collect(&mut set);
        let r = finite_diff_check(set.as_slice(), &GradCheck::default(), |t| {
            let f = t.constant(x.clone());
            head.loss(t, f, &[1, 5, 0])
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn projector_dims() {
        let mut init = Init::new(0);
        let p = ContrastiveProjectors::new(&mut init, "p", &ProjectorConfig::default()).unwrap();
        assert_eq!(p.visual.dims(), [512, 256, 128]);
        assert_eq!(p.text.dims(), [2048, 512, 128]);
        assert_eq!(p.tau, 0.1);
    }

    /// Direct evaluation of the weighted InfoNCE formula.
    fn brute_force(v: &Tensor, w: &Tensor, labels: &[usize], tau: f64) -> Vec<f64> {
        let b = labels.len();
        let unit = |r: &[f64]| {
            // Same guard as Tape::l2_normalize.
            let n = (r.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            r.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let vs: Vec<_> = (0..b).map(|i| unit(v.row(i))).collect();
        let ws: Vec<_> = (0..b).map(|i| unit(w.row(i))).collect();
        let sim = |i: usize, j: usize| vs[i].iter().zip(&ws[j]).map(|(a, c)| a * c).sum::<f64>() / tau;
        (0..b)
            .map(|i| {
                let den: f64 = (0..b)
                    .map(|j| {
                        let count = labels.iter().filter(|&&y| y == labels[j]).count();
                        sim(i, j).exp() / count as f64
                    })
                    .sum();
                -(sim(i, i).exp() / den).ln()
            })
            .collect()
    }

    fn batch(rng: &mut ChaCha8Rng, labels: &[usize], dim: usize) -> (Tensor, Tensor) {
        // Text rows are shared per label, as they come from the label embedding.
        let mut init = Init::new(rng.gen());
        let table = init.normal(&[16, dim], 1.0);
        let v = init.normal(&[labels.len(), dim], 1.0);
        let w = Tensor::from_rows(&labels.iter().map(|&y| table.row(y).to_vec()).collect::<Vec<_>>()).unwrap();
        (v, w)
    }

    #[test]
    fn label_weights_sum_to_one_per_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let b = rng.gen_range(2..=24);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..6)).collect();
            let alpha = contrastive_weights(&labels);
            for (i, row) in alpha.iter().enumerate() {
                let mut sums: HashMap<usize, f64> = HashMap::new();
                for (j, a) in row.iter().enumerate() {
                    *sums.entry(labels[j]).or_default() += a;
                }
                for s in sums.values() {
                    assert!((s - 1.0).abs() < 1e-12, "row {i}");
                }
            }
        }
        let a = contrastive_weights(&[0, 0, 1]);
        assert_eq!(a[0], vec![0.5, 0.5, 1.0]);
        assert_eq!(a[2], vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn matches_brute_force_and_is_duplication_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b = rng.gen_range(2..=10);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..5)).collect();
            let (v, w) = batch(&mut rng, &labels, 6);
            let mut tape = Tape::new();
            let (vv, wv) = (tape.constant(v.clone()), tape.constant(w.clone()));
            let per = contrastive_per_sample(&mut tape, vv, wv, &labels, DEFAULT_TAU).unwrap();
            let got = tape.value(per).clone();
            let want = brute_force(&v, &w, &labels, DEFAULT_TAU);
            for i in 0..b {
                assert!((got.data()[i] - want[i]).abs() < 1e-12, "{} vs {}", got.data()[i], want[i]);
            }

            let dup = |t: &Tensor| {
                let mut rows: Vec<Vec<f64>> = (0..b).map(|i| t.row(i).to_vec()).collect();
                rows.extend(rows.clone());
                Tensor::from_rows(&rows).unwrap()
            };
            let labels2: Vec<usize> = labels.iter().chain(&labels).cloned().collect();
            let mut tape = Tape::new();
            let (vv, wv) = (tape.constant(dup(&v)), tape.constant(dup(&w)));
            let per2 = contrastive_per_sample(&mut tape, vv, wv, &labels2, DEFAULT_TAU).unwrap();
            for i in 0..2 * b {
                assert!((tape.value(per2).data()[i] - got.data()[i % b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distinct_labels_reduce_to_infonce() {
        let mut init = Init::new(3);
        let v = init.normal(&[4, 5], 1.0);
        let w = init.normal(&[4, 5], 1.0);
        let mut tape = Tape::new();
        let (vv, wv) = (tape.constant(v.clone()), tape.constant(w.clone()));
        let vn = tape.l2_normalize(vv).unwrap();
        let wn = tape.l2_normalize(wv).unwrap();
        let wt = tape.transpose(wn).unwrap();
        let s = tape.matmul(vn, wt).unwrap();
        let s = tape.scale(s, 10.0);
        let plain = tape.cross_entropy(s, &[0, 1, 2, 3]).unwrap();
        let ours = contrastive_loss(&mut tape, vv, wv, &[7, 1, 2, 3], 0.1).unwrap();
        assert!((tape.value(plain).item() - tape.value(ours).item()).abs() < 1e-12);
        assert!(contrastive_loss(&mut tape, vv, wv, &[0], 0.1).is_err());
    }

    #[test]
    fn contrastive_gradcheck_and_descent() {
        let mut init = Init::new(4);
        let cfg = ProjectorConfig::toy(6, 10);
        let proj = ContrastiveProjectors::new(&mut init, "p", &cfg).unwrap();
        let labels = [0, 1, 0, 1, 1, 0];
        let table = init.normal(&[2, 10], 1.0);
        let text = Tensor::from_rows(&labels.iter().map(|&y| table.row(y).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut visual = init.normal(&[6, 6], 0.3);
        for (i, &y) in labels.iter().enumerate() {
            visual.data_mut()[i * 6 + y] += 1.0;
        }
        let mut set = ParamSet::new();
        proj.collect(&mut set);
        let r = finite_diff_check(set.as_slice(), &GradCheck::default(), |t| {
            let v = t.constant(visual.clone());
            proj.loss(t, v, &text, &labels)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");

        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            set.zero_grad();
            let mut tape = Tape::new();
            let v = tape.constant(visual.clone());
            let l = proj.loss(&mut tape, v, &text, &labels).unwrap();
            let cur = tape.value(l).item();
            assert!(cur <= prev + 1e-12, "{cur} > {prev}");
            prev = cur;
            tape.backward(l).unwrap();
            for p in set.iter() {
                p.update(|w, g| {
                    if let Some(g) = g {
                        for (x, d) in w.data_mut().iter_mut().zip(g.data()) {
                            *x -= 0.05 * d;
                        }
                    }
                });
            }
        }
    }

    #[test]
    fn label_embedding_is_a_frozen_mean() {
        let tok = Tokenizer::train(["alpha beta", "alpha"], 64, &["en"]).unwrap();
        let emb = LabelEmbedder::new(0, tok.vocab_size(), 8);
        let ids = tok.encode("alpha");
        let one = emb.embed(&tok, "alpha").unwrap();
        let table = emb.table.value();
        if ids.len() == 1 {
            assert_eq!(one, table.row(ids[0]).to_vec());
        }
        let two = emb.embed(&tok, "alpha beta").unwrap();
        let all: Vec<usize> = tok.encode("alpha beta");
        for d in 0..8 {
            let m = all.iter().map(|&i| table.row(i)[d]).sum::<f64>() / all.len() as f64;
            assert!((two[d] - m).abs() < 1e-12);
        }
        assert!(emb.embed(&tok, "  ").is_err());
        assert!(!emb.table.requires_grad());

        let mut tape = Tape::new();
        let e = emb.embed_labels(&tok, &["alpha".into()], &[0, 0]).unwrap();
        let x = tape.constant(e);
        let p = tape.param(&emb.table);
        let s = tape.sum_all(p).unwrap();
        let y = tape.sum_all(x).unwrap();
        let l = tape.add(s, y).unwrap();
        tape.backward(l).unwrap();
        assert!(emb.table.grad().is_none());
    }

    #[test]
    fn aux_loss_is_the_mean_of_stream_losses() {
        let cfg = BackboneConfig::toy();
        let mut init = Init::new(5);
        let head = ClassifierHead::new(&mut init, "h", cfg.conformer.dim, 4);
        let aux = AuxNetwork::new(&mut init, "aux", cfg.articulator_dim, &cfg.conformer, cfg.pool_order).unwrap();
        let streams: Vec<Tensor> = (0..4).map(|_| init.normal(&[2, 5, cfg.articulator_dim], 1.0)).collect();
        let labels = [1, 3];
        let mut tape = Tape::new();
        let vars: Vec<Var> = streams.iter().map(|s| tape.variable(s.clone())).collect();
        let l = aux.loss(&mut tape, &vars, &head, &labels).unwrap();
        let mut sum = 0.0;
        for s in &streams {
            let mut t = Tape::new();
            let v = t.constant(s.clone());
            let one = aux.loss(&mut t, &[v], &head, &labels).unwrap();
            sum += t.value(one).item();
        }
        assert!((tape.value(l).item() - sum / 4.0).abs() < 1e-12);

        let mut t = Tape::new();
        let same: Vec<Var> = (0..4).map(|_| t.constant(streams[0].clone())).collect();
        let a = aux.loss(&mut t, &same, &head, &labels).unwrap();
        let b = aux.loss(&mut t, &same[..1], &head, &labels).unwrap();
        assert!((t.value(a).item() - t.value(b).item()).abs() < 1e-12);

        tape.backward(l).unwrap();
        for v in vars {
            let g = tape.grad(v).unwrap();
            assert!(g.data().iter().any(|x| x.abs() > 0.0));
        }
    }

    #[test]
    fn pose_total_is_the_sum_of_components() {
        let cfg = BackboneConfig::toy();
        let mut init = Init::new(6);
        let backbone = PoseBackbone::new(&mut init, "pose", &cfg).unwrap();
        let proj = ProjectorConfig::toy(cfg.conformer.dim, 10);
        let model = PoseIslr::new(&mut init, backbone, 4, &cfg.conformer, &proj).unwrap();
        let x = init.normal(&[2, 6, crate::dataio::keypoints::NUM_JOINTS, 3], 1.0);
        let text = init.normal(&[2, 10], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let l = model.loss(&mut tape, xv, &[0, 2], &text, None).unwrap();
        let parts = tape.value(l.ce).item() + tape.value(l.aux.unwrap()).item() + tape.value(l.contra).item();
        assert!((tape.value(l.total).item() - parts).abs() < 1e-12);

        let lip = LipBackbone::new(&mut init, "lip", &cfg).unwrap();
        let lm = LipIslr::new(&mut init, lip, 4, &proj).unwrap();
        let xl = tape.constant(init.normal(&[2, 6, cfg.lip_dim], 1.0));
        let l = lm.loss(&mut tape, xl, &[0, 2], &text).unwrap();
        let parts = tape.value(l.ce).item() + tape.value(l.contra).item();
        assert!((tape.value(l.total).item() - parts).abs() < 1e-12);
    }

    #[test]
    fn fusion_cases() {
        let mut init = Init::new(7);
        let p = init.normal(&[5, 6], 2.0);
        let l = init.normal(&[5, 6], 2.0);
        let pose_only = late_fusion(&p, &l, FusionWeights { pose: 1.0, lip: 0.0, raw: false }).unwrap();
        let same = late_fusion(&p, &p, FusionWeights::default()).unwrap();
        let argmax = |t: &Tensor, r: usize| {
            (0..6).max_by(|&a, &b| t.row(r)[a].total_cmp(&t.row(r)[b])).unwrap()
        };
        for r in 0..5 {
            assert_eq!(argmax(&pose_only, r), argmax(&p, r));
            assert_eq!(argmax(&same, r), argmax(&p, r));
        }
        let raw = late_fusion(&p, &l, FusionWeights { raw: true, ..Default::default() }).unwrap();
        assert!((raw.data()[0] - (0.7 * p.data()[0] + 0.3 * l.data()[0])).abs() < 1e-12);
        assert!(late_fusion(&p, &Tensor::zeros(&[5, 5]), FusionWeights::default()).is_err());
    }

    #[test]
    fn fusion_beats_single_streams_on_complementary_bits() {
        // Class c = 2·a + b with the pose stream sure of bit a and the lip
        // stream sure of bit b; each alone is ambiguous on the other bit.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 400;
        let mut pose = Vec::new();
        let mut lip = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let (a, b) = (rng.gen_range(0..2), rng.gen_range(0..2));
            labels.push(2 * a + b);
            for c in 0..4 {
                let (ca, cb) = (c / 2, c % 2);
                pose.push(if ca == a { 3.0 } else { 0.0 } + if cb == b { 0.2 } else { 0.0 } + rng.gen_range(-0.5..0.5));
                lip.push(if cb == b { 3.0 } else { 0.0 } + if ca == a { 0.2 } else { 0.0 } + rng.gen_range(-0.5..0.5));
            }
        }
        let p = Tensor::new(&[n, 4], pose).unwrap();
        let l = Tensor::new(&[n, 4], lip).unwrap();
        let fused = late_fusion(&p, &l, FusionWeights::default()).unwrap();
        let acc = |t: &Tensor| islr_metrics(t, &labels).unwrap().top1;
        assert!(acc(&fused) > acc(&p) && acc(&fused) > acc(&l), "{} {} {}", acc(&fused), acc(&p), acc(&l));
    }

    #[test]
    fn metrics_worked_example() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            rows.push(if i < 9 { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
            labels.push(0);
        }
        rows.push(vec![1.0, 0.0]);
        labels.push(1);
        let m = islr_metrics(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
        assert!((m.top1 - 9.0 / 11.0).abs() < 1e-12);
        assert!((m.per_class_top1 - 0.45).abs() < 1e-12);
        assert_eq!(m.top5, 1.0);

        let perfect = Tensor::eye(6);
        let m = islr_metrics(&perfect, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!([m.top1, m.top5, m.per_class_top1, m.per_class_top5], [1.0; 4]);
    }

    proptest! {
        #[test]
        fn top5_bounds_top1(data in proptest::collection::vec(-3.0f64..3.0, 80), labels in proptest::collection::vec(0usize..8, 10)) {
            let m = islr_metrics(&Tensor::new(&[10, 8], data).unwrap(), &labels).unwrap();
            prop_assert!(m.top5 >= m.top1 && m.per_class_top5 >= m.per_class_top1);
        }

        #[test]
        fn fusion_is_stable_under_tiny_weight_changes(data in proptest::collection::vec(-3.0f64..3.0, 16), w in 0.05f64..0.95, d in -1e-6f64..1e-6) {
            let p = Tensor::new(&[2, 4], data[..8].to_vec()).unwrap();
            let l = Tensor::new(&[2, 4], data[8..].to_vec()).unwrap();
            let a = late_fusion(&p, &l, FusionWeights { pose: w, lip: 1.0 - w, raw: false }).unwrap();
            let b = late_fusion(&p, &l, FusionWeights { pose: w + d, lip: 1.0 - w - d, raw: false }).unwrap();
            for r in 0..2 {
                let row = a.row(r);
                let mut sorted = row.to_vec();
                sorted.sort_by(|x, y| y.total_cmp(x));
                if sorted[0] - sorted[1] > 1e-3 {
                    let top = |t: &Tensor| (0..4).max_by(|&i, &j| t.row(r)[i].total_cmp(&t.row(r)[j])).unwrap();
                    prop_assert_eq!(top(&a), top(&b));
                }
            }
        }
    }
}
