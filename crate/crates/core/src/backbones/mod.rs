//! Pose and lip backbones: articulator AGCN encoders, Conformer encoders
//! with attentive pooling, articulator masking and dense extraction.

pub mod agcn;
pub mod conformer;
pub mod skeleton;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::keypoints::{normalize_keypoints, KeypointClip, NUM_JOINTS};
use crate::dataio::lip::LipClip;
use crate::error::{Error, Result};
use crate::tensor::{Init, ParamSet, Tape, Tensor, Var};

pub use agcn::{channel_widths, joint_flatten, AgcnLayer, ArticulatorEncoder, SqueezeExcite};
pub use conformer::{
    attentive_pool, key_weights, ConformerBlock, ConformerConfig, ConformerEncoder, ConformerOutput,
    PoolOrder,
};
pub use skeleton::{normalized_adjacency, Articulator};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Width after `fc1`; AGCN widths follow the channel schedule.
    pub c_in: usize,
    /// Per-articulator feature width after joint aggregation.
    pub articulator_dim: usize,
    pub temporal_kernel: usize,
    /// `None` bypasses squeeze-and-excitation.
    pub se_reduction: Option<usize>,
    pub conformer: ConformerConfig,
    pub lip_dim: usize,
    pub pool_order: PoolOrder,
    pub window: usize,
    pub stride: usize,
    pub dense_frames: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            c_in: 64,
            articulator_dim: 384,
            temporal_kernel: 7,
            se_reduction: Some(4),
            conformer: ConformerConfig::default(),
            lip_dim: 768,
            pool_order: PoolOrder::default(),
            window: 24,
            stride: 2,
            dense_frames: 500,
        }
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig {
            c_in: 4,
            articulator_dim: 24,
            conformer: ConformerConfig {
                dim: 8,
                blocks: 2,
                heads: 2,
                ff_mult: 2,
                conv_expansion: 2,
                conv_kernel: 5,
            },
            lip_dim: 16,
            ..BackboneConfig::default()
        }
    }
}

/// Stack normalized clips into `[B, F, 203, 3]`.
pub fn clips_tensor(clips: &[&KeypointClip]) -> Result<Tensor> {
    let f = clips.first().map(|c| c.frames).unwrap_or(0);
    if clips.iter().any(|c| c.frames != f) {
        return Err(Error::contract("clips in a batch must share a frame count"));
    }
    let data = clips.iter().flat_map(|c| c.coords.iter().copied()).collect();
    Tensor::new(&[clips.len(), f, NUM_JOINTS, 3], data)
}

/// Slice `[..., 203, 3]` into face, body, left hand and right hand groups.
pub fn split_articulators(x: &Tensor) -> [Tensor; 4] {
    let s = x.shape();
    let r = s.len();
    let outer: usize = s[..r - 2].iter().product();
    Articulator::ALL.map(|art| {
        let range = art.joints();
        let mut data = Vec::with_capacity(outer * range.len() * 3);
        for o in 0..outer {
            let base = o * NUM_JOINTS * 3;
            data.extend_from_slice(&x.data()[base + range.start * 3..base + range.end * 3]);
        }
        let mut shape = s[..r - 2].to_vec();
        shape.extend([range.len(), 3]);
        Tensor::new(&shape, data).expect("shape")
    })
}

/// Negate x coordinates of a `[..., 3]` tensor.
pub fn flip_right_hand(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().step_by(3).for_each(|v| *v = -*v);
    out
}

/// Choose `k` uniformly from {0, 1, 2}, then `k` of the four streams.
/// `true` marks a stream to zero-fill.
pub fn sample_articulator_mask(rng: &mut impl Rng) -> [bool; 4] {
    let k = rng.gen_range(0..=2);
    let mut mask = [false; 4];
    for i in sample(rng, 4, k) {
        mask[i] = true;
    }
    mask
}

/// Zero-fill masked streams. Each stream is `[B, F, C]`; `masks[b]` applies
/// to sample `b`.
pub fn mask_articulators(tape: &mut Tape, streams: &[Var], masks: &[[bool; 4]]) -> Result<Vec<Var>> {
    streams
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if masks.iter().all(|m| !m[i]) {
                return Ok(s);
            }
            let keep: Vec<f64> = masks.iter().map(|m| if m[i] { 0.0 } else { 1.0 }).collect();
            let keep = tape.constant(Tensor::new(&[masks.len(), 1, 1], keep)?);
            tape.mul(s, keep)
        })
        .collect()
}

pub struct PoseOutput {
    /// `[B, C']`
    pub pooled: Var,
    /// Face, body, left and right hand features `[B, F, C]`, before masking.
    pub articulators: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PoseBackbone {
    pub face: ArticulatorEncoder,
    pub body: ArticulatorEncoder,
    /// Shared by the left hand and the mirrored right hand.
    pub hand: ArticulatorEncoder,
    pub conformer: ConformerEncoder,
    pub pool_order: PoolOrder,
}

impl PoseBackbone {
    pub fn new(init: &mut Init, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let enc = |init: &mut Init, art: Articulator, tag: &str| {
            ArticulatorEncoder::new(
                init,
                &format!("{name}.{tag}"),
                normalized_adjacency(art),
                cfg.c_in,
                cfg.articulator_dim,
                cfg.temporal_kernel,
                cfg.se_reduction,
            )
        };
        Ok(PoseBackbone {
            face: enc(init, Articulator::Face, "face"),
            body: enc(init, Articulator::Body, "body"),
            hand: enc(init, Articulator::LeftHand, "hand"),
            conformer: ConformerEncoder::new(
                init,
                &format!("{name}.conformer"),
                4 * cfg.articulator_dim,
                &cfg.conformer,
            )?,
            pool_order: cfg.pool_order,
        })
    }

    pub fn dim(&self) -> usize {
        self.conformer.dim()
    }

    pub fn articulator_dim(&self) -> usize {
        self.face.fc2.out_dim()
    }

    /// Per-articulator features for `x: [B, F, 203, 3]`.
    pub fn articulator_features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[2] != NUM_JOINTS || s[3] != 3 {
            return Err(Error::shape("pose input", &s, &[0, 0, NUM_JOINTS, 3]));
        }
        let flip = tape.constant(Tensor::new(&[3], vec![-1.0, 1.0, 1.0])?);
        let mut out = Vec::with_capacity(4);
        for art in Articulator::ALL {
            let r = art.joints();
            let g = tape.slice(x, 2, r.start, r.end)?;
            let f = match art {
                Articulator::Face => self.face.forward(tape, g)?,
                Articulator::Body => self.body.forward(tape, g)?,
                Articulator::LeftHand => self.hand.forward(tape, g)?,
                Articulator::RightHand => {
                    let g = tape.mul(g, flip)?;
                    self.hand.forward(tape, g)?
                }
            };
            out.push(f);
        }
        Ok(out)
    }

    /// Conformer and pooling over `[B, T, 4C]` fused features.
    pub fn encode_fused(&self, tape: &mut Tape, fused: Var) -> Result<Var> {
        let out = self.conformer.forward(tape, fused)?;
        attentive_pool(tape, out.hidden, &out.maps, self.pool_order)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, masks: Option<&[[bool; 4]]>) -> Result<PoseOutput> {
        let articulators = self.articulator_features(tape, x)?;
        let streams = match masks {
            Some(m) => mask_articulators(tape, &articulators, m)?,
            None => articulators.clone(),
        };
        let fused = tape.concat(&streams, 2)?;
        let pooled = self.encode_fused(tape, fused)?;
        Ok(PoseOutput {
            pooled,
            articulators,
        })
    }

    /// Normalize raw clips and run the full path.
    pub fn forward_clips(
        &self,
        tape: &mut Tape,
        clips: &[&KeypointClip],
        masks: Option<&[[bool; 4]]>,
    ) -> Result<PoseOutput> {
        let normed = clips
            .iter()
            .map(|c| normalize_keypoints(c))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&KeypointClip> = normed.iter().collect();
        let x = tape.constant(clips_tensor(&refs)?);
        self.forward(tape, x, masks)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.face.collect(set);
        self.body.collect(set);
        self.hand.collect(set);
        self.conformer.collect(set);
    }
}

/// Conformer over precomputed lip-reader features, which stay constant.
#[derive(Clone, Debug)]
pub struct LipBackbone {
    pub conformer: ConformerEncoder,
    pub pool_order: PoolOrder,
}

impl LipBackbone {
    pub fn new(init: &mut Init, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        Ok(LipBackbone {
            conformer: ConformerEncoder::new(init, &format!("{name}.conformer"), cfg.lip_dim, &cfg.conformer)?,
            pool_order: cfg.pool_order,
        })
    }

    pub fn dim(&self) -> usize {
        self.conformer.dim()
    }

    /// `x: [B, F, C_l]` to `[B, C']`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let out = self.conformer.forward(tape, x)?;
        attentive_pool(tape, out.hidden, &out.maps, self.pool_order)
    }

    pub fn forward_clips(&self, tape: &mut Tape, clips: &[&LipClip]) -> Result<Var> {
        let dim = self.conformer.in_dim();
        let f = clips.first().map(|c| c.frames).unwrap_or(0);
        if let Some(c) = clips.iter().find(|c| c.dim != dim) {
            return Err(Error::shape("lip features", &[c.frames, c.dim], &[f, dim]));
        }
        if clips.iter().any(|c| c.frames != f) {
            return Err(Error::contract("lip clips in a batch must share a frame count"));
        }
        let data = clips.iter().flat_map(|c| c.features.iter().copied()).collect();
        let x = tape.constant(Tensor::new(&[clips.len(), f, dim], data)?);
        self.forward(tape, x)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.conformer.collect(set);
    }
}

/// Number of length-`w` windows at stride `s` over `f` frames.
pub fn window_count(f: usize, w: usize, s: usize) -> usize {
    if f < w || s == 0 {
        0
    } else {
        (f - w) / s + 1
    }
}

/// Dense sequence features `[T, 2C']` for one clip: the AGCN path runs once
/// over all frames, then each window is pooled separately.
pub fn dense_extract(
    tape: &mut Tape,
    pose: &PoseBackbone,
    lip: &LipBackbone,
    clip: &KeypointClip,
    lip_clip: &LipClip,
    cfg: &BackboneConfig,
) -> Result<Var> {
    if clip.frames != cfg.dense_frames || lip_clip.frames != cfg.dense_frames {
        return Err(Error::contract(format!(
            "dense extraction expects {} frames, got {} keypoint and {} lip frames",
            cfg.dense_frames, clip.frames, lip_clip.frames
        )));
    }
    let t = window_count(cfg.dense_frames, cfg.window, cfg.stride);
    if t == 0 {
        return Err(Error::config("window longer than the clip"));
    }
    let normed = normalize_keypoints(clip)?;
    let x = tape.constant(clips_tensor(&[&normed])?);
    let streams = pose.articulator_features(tape, x)?;
    let fused = tape.concat(&streams, 2)?;
    let c4 = tape.shape(fused)[2];
    let fused = tape.reshape(fused, &[cfg.dense_frames, c4])?;
    let lip_x = tape.constant(lip_clip.to_tensor());

    let windows = |tape: &mut Tape, x: Var, c: usize| -> Result<Var> {
        let parts = (0..t)
            .map(|k| {
                let s = tape.slice(x, 0, k * cfg.stride, k * cfg.stride + cfg.window)?;
                tape.reshape(s, &[1, cfg.window, c])
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&parts, 0)
    };
    let pose_w = windows(tape, fused, c4)?;
    let lip_w = windows(tape, lip_x, lip_clip.dim)?;
    let fp = pose.encode_fused(tape, pose_w)?;
    let fl = lip.forward(tape, lip_w)?;
    tape.concat(&[fp, fl], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(init: &mut Init, frames: usize) -> KeypointClip {
        let coords = init.uniform(&[frames * NUM_JOINTS * 3], 2.0).into_data();
        let mut c = KeypointClip::new(frames, 25.0, coords).unwrap();
        c.set_joint(0, crate::dataio::keypoints::LEFT_SHOULDER, [0.5, 0.0, 0.0]);
        c.set_joint(0, crate::dataio::keypoints::RIGHT_SHOULDER, [-0.5, 0.0, 0.0]);
        c
    }

    #[test]
    fn split_matches_index_ranges() {
        let mut init = Init::new(0);
        let x = init.uniform(&[24, NUM_JOINTS, 3], 1.0);
        let groups = split_articulators(&x);
        let shapes: Vec<&[usize]> = groups.iter().map(|g| g.shape()).collect();
        assert_eq!(shapes, [&[24, 128, 3][..], &[24, 33, 3], &[24, 21, 3], &[24, 21, 3]]);
        let mut covered = vec![0; NUM_JOINTS];
        for (art, g) in Articulator::ALL.iter().zip(&groups) {
            for (local, j) in art.joints().enumerate() {
                covered[j] += 1;
                for f in 0..24 {
                    for k in 0..3 {
                        let want = x.data()[(f * NUM_JOINTS + j) * 3 + k];
                        let got = g.data()[(f * art.joints().len() + local) * 3 + k];
                        assert_eq!(got, want);
                    }
                }
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn flip_negates_x_and_is_an_involution() {
        let x = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flip_right_hand(&x).data(), &[-1.0, 2.0, 3.0]);
        assert_eq!(flip_right_hand(&flip_right_hand(&x)), x);
    }

    #[test]
    fn mirrored_right_hand_reuses_left_weights() {
        let mut init = Init::new(1);
        let cfg = BackboneConfig::toy();
        let pose = PoseBackbone::new(&mut init, "pose", &cfg).unwrap();
        let x = init.uniform(&[1, 6, NUM_JOINTS, 3], 1.0);
        let [_, _, left, right] = split_articulators(&x);
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let feats = pose.articulator_features(&mut tape, vx).unwrap();
        let l = tape.constant(left);
        let want_l = pose.hand.forward(&mut tape, l).unwrap();
        let r = tape.constant(flip_right_hand(&right));
        let want_r = pose.hand.forward(&mut tape, r).unwrap();
        assert_eq!(tape.value(feats[2]), tape.value(want_l));
        assert_eq!(tape.value(feats[3]), tape.value(want_r));

        let mut set = ParamSet::new();
        pose.collect(&mut set);
        assert!(set.iter().all(|p| !p.name().contains("right")));
        assert!(set.by_name("pose.hand.agcn1.adj_b").is_some());
    }

    #[test]
    fn mask_sampling_never_exceeds_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let m = sample_articulator_mask(&mut rng);
            let k = m.iter().filter(|&&b| b).count();
            assert!(k <= 2);
            counts[k] += 1;
        }
        assert!(counts.iter().all(|&c| c > 3000), "{counts:?}");
    }

    #[test]
    fn masked_streams_are_exactly_zero() {
        let mut init = Init::new(2);
        let mut tape = Tape::new();
        let streams: Vec<Var> = (0..4)
            .map(|_| tape.constant(init.uniform(&[2, 3, 5], 1.0)))
            .collect();
        let out = mask_articulators(&mut tape, &streams, &[[false; 4]; 2]).unwrap();
        for (a, b) in out.iter().zip(&streams) {
            assert_eq!(tape.value(*a), tape.value(*b));
        }
        let masks = [[true, false, false, true], [false, false, false, false]];
        let out = mask_articulators(&mut tape, &streams, &masks).unwrap();
        let face = tape.value(out[0]).data();
        assert!(face[..15].iter().all(|&v| v == 0.0));
        assert_eq!(&face[15..], &tape.value(streams[0]).data()[15..]);
        assert_eq!(tape.value(out[1]), tape.value(streams[1]));
    }

    #[test]
    fn paper_scale_pose_output_width() {
        let mut init = Init::new(3);
        let cfg = BackboneConfig {
            conformer: ConformerConfig {
                blocks: 1,
                ..ConformerConfig::default()
            },
            ..BackboneConfig::default()
        };
        let pose = PoseBackbone::new(&mut init, "pose", &cfg).unwrap();
        let clip = random_clip(&mut init, 24);
        let mut tape = Tape::new();
        let out = pose.forward_clips(&mut tape, &[&clip], None).unwrap();
        assert_eq!(tape.shape(out.pooled), &[1, 512]);
        assert_eq!(tape.shape(out.articulators[2]), &[1, 24, 384]);
        assert!(tape.value(out.pooled).is_finite());
    }

    #[test]
    fn zero_input_is_finite_and_translation_is_absorbed() {
        let mut init = Init::new(4);
        let cfg = BackboneConfig::toy();
        let pose = PoseBackbone::new(&mut init, "pose", &cfg).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 6, NUM_JOINTS, 3]));
        let out = pose.forward(&mut tape, z, None).unwrap();
        assert!(tape.value(out.pooled).is_finite());

        let clip = random_clip(&mut init, 6);
        let mut moved = clip.clone();
        for (i, v) in moved.coords.iter_mut().enumerate() {
            *v += [3.0, -1.5, 0.25][i % 3];
        }
        let a = pose.forward_clips(&mut tape, &[&clip], None).unwrap().pooled;
        let b = pose.forward_clips(&mut tape, &[&moved], None).unwrap().pooled;
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-9);
    }

    #[test]
    fn toy_pose_gradcheck_and_no_dead_branches() {
        let mut init = Init::new(5);
        let cfg = BackboneConfig {
            conformer: ConformerConfig {
                blocks: 1,
                ..BackboneConfig::toy().conformer
            },
            ..BackboneConfig::toy()
        };
        let pose = PoseBackbone::new(&mut init, "pose", &cfg).unwrap();
        // a fixed pose per sample plus per-frame jitter, like real skeletons
        let b = 4;
        let pose_of = init.uniform(&[b, 1, NUM_JOINTS, 3], 1.0);
        let shift = init.uniform(&[b, 3], 1.0);
        let mut x = init.uniform(&[b, 6, NUM_JOINTS, 3], 0.2);
        let per = NUM_JOINTS * 3;
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let s = i / (6 * per);
            *v += pose_of.data()[s * per + i % per] + shift.data()[s * 3 + i % 3];
        }
        let mut set = ParamSet::new();
        pose.collect(&mut set);
        let f = |tp: &mut Tape| {
            let vx = tp.constant(x.clone());
            let out = pose.forward(tp, vx, None)?;
            let sq = tp.square(out.pooled);
            tp.sum_all(sq)
        };

        let mut tape = Tape::new();
        let loss = f(&mut tape).unwrap();
        tape.backward(loss).unwrap();
        for p in set.iter() {
            let g = p.grad().expect("gradient reaches every parameter");
            assert!(g.data().iter().any(|&v| v != 0.0), "{} has zero grad", p.name());
        }
        set.zero_grad();

        // thousands of ReLU units: a small step keeps probes off the kinks
        let gc = GradCheck {
            h: 1e-7,
            max_entries_per_param: Some(3),
            ..GradCheck::default()
        };
        let r = finite_diff_check(set.as_slice(), &gc, f).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn lip_path_gradcheck_and_inputs_stay_constant() {
        let mut init = Init::new(6);
        let cfg = BackboneConfig::toy();
        let lip = LipBackbone::new(&mut init, "lip", &cfg).unwrap();
        let clip = LipClip::new(6, 16, init.uniform(&[96], 1.0).into_data()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(clip.to_tensor().reshaped(&[1, 6, 16]).unwrap());
        let out = lip.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out), &[1, 8]);
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());

        let bad = LipClip::new(6, 15, vec![0.0; 90]).unwrap();
        assert!(matches!(lip.forward_clips(&mut tape, &[&bad]), Err(Error::Shape { .. })));

        let mut set = ParamSet::new();
        lip.collect(&mut set);
        set.zero_grad();
        let f = |tp: &mut Tape| {
            let o = lip.forward_clips(tp, &[&clip])?;
            let sq = tp.square(o);
            tp.sum_all(sq)
        };
        let gc = GradCheck {
            max_entries_per_param: Some(3),
            ..GradCheck::default()
        };
        let r = finite_diff_check(set.as_slice(), &gc, f).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_count(500, 24, 2), 239);
        assert_eq!(window_count(24, 24, 2), 1);
        assert_eq!(window_count(23, 24, 2), 0);
    }

    #[test]
    fn dense_windows_match_isolated_forward_with_local_receptive_field() {
        // Kernel 1 and no SE make every frame independent, so full-clip and
        // per-window AGCN passes agree exactly.
        let mut init = Init::new(7);
        let cfg = BackboneConfig {
            temporal_kernel: 1,
            se_reduction: None,
            dense_frames: 40,
            window: 8,
            stride: 4,
            ..BackboneConfig::toy()
        };
        let pose = PoseBackbone::new(&mut init, "pose", &cfg).unwrap();
        let lip = LipBackbone::new(&mut init, "lip", &cfg).unwrap();
        let clip = random_clip(&mut init, 40);
        let lip_clip = LipClip::new(40, 16, init.uniform(&[640], 1.0).into_data()).unwrap();
        let mut tape = Tape::new();
        let x = dense_extract(&mut tape, &pose, &lip, &clip, &lip_clip, &cfg).unwrap();
        assert_eq!(tape.shape(x), &[9, 16]);

        let normed = normalize_keypoints(&clip).unwrap();
        for k in 0..9 {
            let win = normed.window(k * 4, 8);
            let vx = tape.constant(clips_tensor(&[&win]).unwrap());
            let fp = pose.forward(&mut tape, vx, None).unwrap().pooled;
            let lw = lip_clip.window(k * 4, 8);
            let fl = lip.forward_clips(&mut tape, &[&lw]).unwrap();
            let row = &tape.value(x).data()[k * 16..(k + 1) * 16];
            let want: Vec<f64> = tape.value(fp).data().iter().chain(tape.value(fl).data()).copied().collect();
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_extract_rejects_other_lengths() {
        let mut init = Init::new(8);
        let cfg = BackboneConfig::toy();
        let pose = PoseBackbone::new(&mut init, "pose", &cfg).unwrap();
        let lip = LipBackbone::new(&mut init, "lip", &cfg).unwrap();
        let clip = random_clip(&mut init, 30);
        let lip_clip = LipClip::new(30, 16, vec![0.0; 480]).unwrap();
        let mut tape = Tape::new();
        let r = dense_extract(&mut tape, &pose, &lip, &clip, &lip_clip, &cfg);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
