//! Sliding Perceiver: one learned latent cross-attends to each window of the
//! projected feature sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Init, Param, ParamSet, Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PerceiverConfig {
    pub in_dim: usize,
    pub window: usize,
    pub stride: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        PerceiverConfig {
            in_dim: 1024,
            window: 8,
            stride: 2,
            layers: 2,
            dim: 2048,
            heads: 8,
            ff_mult: 4,
            max_len: 250,
        }
    }
}

impl PerceiverConfig {
    pub fn toy() -> Self {
        PerceiverConfig {
            in_dim: 16,
            window: 4,
            stride: 2,
            layers: 2,
            dim: 16,
            heads: 2,
            ff_mult: 2,
            max_len: 250,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.window < self.stride {
            return Err(Error::config(format!(
                "perceiver needs window ≥ stride ≥ 1, got {}/{}",
                self.window, self.stride
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "perceiver width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// `[start, start + w)` ranges with stride `s`; a trailing partial window is
/// dropped.
pub fn enumerate_windows(t: usize, w: usize, s: usize) -> Result<Vec<(usize, usize)>> {
    if w == 0 || s == 0 {
        return Err(Error::contract("window and stride must be positive"));
    }
    if t < w {
        return Err(Error::contract(format!("{t} frames are shorter than a {w}-frame window")));
    }
    Ok((0..=(t - w) / s).map(|k| (k * s, k * s + w)).collect())
}

pub fn output_len(t: usize, w: usize, s: usize) -> usize {
    (t - w) / s + 1
}

pub struct PerceiverLayer {
    pub latent_norm: LayerNorm,
    pub context_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
}

impl PerceiverLayer {
    fn new(init: &mut Init, name: &str, cfg: &PerceiverConfig) -> Result<Self> {
        Ok(PerceiverLayer {
            latent_norm: LayerNorm::new(&format!("{name}.ln_q"), cfg.dim),
            context_norm: LayerNorm::new(&format!("{name}.ln_kv"), cfg.dim),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), cfg.dim, cfg.ff_mult),
        })
    }

    /// `latent [K, 1, D]` over `segments [K, w, D]`.
    fn forward(&self, tape: &mut Tape, latent: Var, segments: Var) -> Result<(Var, Var)> {
        let q = self.latent_norm.forward(tape, latent)?;
        let kv = self.context_norm.forward(tape, segments)?;
        let (a, probs) = self.attn.forward(tape, q, kv, None)?;
        let latent = tape.add(latent, a)?;
        let f = self.ff.forward(tape, latent)?;
        Ok((tape.add(latent, f)?, probs))
    }

    fn collect(&self, set: &mut ParamSet) {
        self.latent_norm.collect(set);
        self.context_norm.collect(set);
        self.attn.collect(set);
        self.ff.collect(set);
    }
}

pub struct LatentSequence {
    /// `[T', D]`.
    pub latents: Var,
    pub windows: Vec<(usize, usize)>,
    /// Last layer's attention, `[T', H, 1, w]`.
    pub attention: Var,
}

pub struct SlidingPerceiver {
    pub cfg: PerceiverConfig,
    pub proj: Linear,
    pub pos: Param,
    pub latent: Param,
    pub layers: Vec<PerceiverLayer>,
}

impl SlidingPerceiver {
    pub fn new(init: &mut Init, name: &str, cfg: &PerceiverConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| PerceiverLayer::new(init, &format!("{name}.layer{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(SlidingPerceiver {
            cfg: cfg.clone(),
            proj: Linear::new(init, &format!("{name}.proj"), cfg.in_dim, cfg.dim, true),
            pos: Param::new(format!("{name}.pos"), init.normal(&[cfg.max_len, cfg.dim], 0.02)),
            latent: Param::new(format!("{name}.latent"), init.normal(&[1, cfg.dim], 1.0)),
            layers,
        })
    }

    pub fn out_len(&self, t: usize) -> usize {
        output_len(t, self.cfg.window, self.cfg.stride)
    }

    /// `X [T, C] → X' [T, D]` with the global positional rows `0..T` added.
    pub fn project_and_position(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.cfg.in_dim {
            return Err(Error::shape("perceiver input", &s, &[0, self.cfg.in_dim]));
        }
        if s[0] > self.cfg.max_len {
            return Err(Error::contract(format!(
                "{} frames exceed the {}-entry positional table",
                s[0], self.cfg.max_len
            )));
        }
        let h = self.proj.forward(tape, x)?;
        let pos = tape.param(&self.pos);
        let pos = tape.slice(pos, 0, 0, s[0])?;
        tape.add(h, pos)
    }

    /// Run the layers for a batch of segments `[K, w, D]`.
    pub fn attend(&self, tape: &mut Tape, segments: Var) -> Result<(Var, Var)> {
        let s = tape.shape(segments).to_vec();
        if s.len() != 3 || s[2] != self.cfg.dim {
            return Err(Error::shape("perceiver segments", &s, &[0, 0, self.cfg.dim]));
        }
        let k = s[0];
        let l = tape.param(&self.latent);
        let l = tape.gather_rows(l, &vec![0; k])?;
        let mut latent = tape.reshape(l, &[k, 1, self.cfg.dim])?;
        let mut probs = None;
        for layer in &self.layers {
            let (next, p) = layer.forward(tape, latent, segments)?;
            latent = next;
            probs = Some(p);
        }
        let latents = tape.reshape(latent, &[k, self.cfg.dim])?;
        let probs = probs.ok_or_else(|| Error::config("perceiver has no layers"))?;
        Ok((latents, probs))
    }

    /// One window `[w, D]` of already projected features to a `[1, D]` latent.
    pub fn window_forward(&self, tape: &mut Tape, segment: Var) -> Result<Var> {
        let s = tape.shape(segment).to_vec();
        let seg = tape.reshape(segment, &[1, s[0], s[1]])?;
        Ok(self.attend(tape, seg)?.0)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<LatentSequence> {
        let t = tape.shape(x)[0];
        let windows = enumerate_windows(t, self.cfg.window, self.cfg.stride)?;
        let xp = self.project_and_position(tape, x)?;
        let idx: Vec<usize> = windows.iter().flat_map(|&(a, b)| a..b).collect();
        let seg = tape.gather_rows(xp, &idx)?;
        let seg = tape.reshape(seg, &[windows.len(), self.cfg.window, self.cfg.dim])?;
        let (latents, attention) = self.attend(tape, seg)?;
        Ok(LatentSequence {
            latents,
            windows,
            attention,
        })
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.proj.collect(set);
        set.push(&self.pos);
        set.push(&self.latent);
        for l in &self.layers {
            l.collect(set);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheck, Tensor};
    use proptest::prelude::*;

    #[test]
    fn window_counts() {
        assert_eq!(enumerate_windows(250, 8, 2).unwrap().len(), 122);
        assert_eq!(enumerate_windows(24, 24, 2).unwrap(), vec![(0, 24)]);
        assert_eq!(enumerate_windows(11, 4, 3).unwrap(), vec![(0, 4), (3, 7), (6, 10)]);
        assert!(enumerate_windows(3, 4, 1).is_err());
    }

    #[test]
    fn paper_shapes() {
        // Full width, one layer to keep the test quick.
        let cfg = PerceiverConfig {
            layers: 1,
            ..PerceiverConfig::default()
        };
        let mut init = Init::new(0);
        let p = SlidingPerceiver::new(&mut init, "p", &cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(init.normal(&[250, 1024], 1.0));
        let out = p.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.latents), &[122, 2048]);
        let long = tape.constant(Tensor::zeros(&[251, 1024]));
        assert!(matches!(p.forward(&mut tape, long), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_projection_gives_the_positional_rows() {
        let cfg = PerceiverConfig::toy();
        let mut init = Init::new(1);
        let p = SlidingPerceiver::new(&mut init, "p", &cfg).unwrap();
        p.proj.weight.set_value(Tensor::zeros(&[16, 16])).unwrap();
        p.proj.bias.as_ref().unwrap().set_value(Tensor::zeros(&[16])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(init.normal(&[10, 16], 1.0));
        let xp = p.project_and_position(&mut tape, x).unwrap();
        let pos = p.pos.value();
        assert_eq!(tape.value(xp).data(), &pos.data()[..10 * 16]);
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let cfg = PerceiverConfig::toy();
        let mut init = Init::new(2);
        let p = SlidingPerceiver::new(&mut init, "p", &cfg).unwrap();
        let row = init.normal(&[1, 16], 1.0);
        let seg = Tensor::new(&[1, 4, 16], row.data().repeat(4)).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(seg);
        let (_, probs) = p.attend(&mut tape, s).unwrap();
        for v in tape.value(probs).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_windows_match_single_windows_and_are_local() {
        let cfg = PerceiverConfig::toy();
        let mut init = Init::new(3);
        let p = SlidingPerceiver::new(&mut init, "p", &cfg).unwrap();
        let x = init.normal(&[20, 16], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = p.forward(&mut tape, xv).unwrap();
        let lat = tape.value(out.latents).clone();
        assert_eq!(out.windows.len(), 9);

        let xp = p.project_and_position(&mut tape, xv).unwrap();
        for (k, &(a, b)) in out.windows.iter().enumerate() {
            let seg = tape.slice(xp, 0, a, b).unwrap();
            let one = p.window_forward(&mut tape, seg).unwrap();
            assert_eq!(tape.value(one).data(), lat.row(k));
        }

        // Perturb frame 13: only windows containing it may change.
        let mut y = x.clone();
        y.data_mut()[13 * 16 + 5] += 1.0;
        let mut tape = Tape::new();
        let yv = tape.constant(y);
        let out2 = p.forward(&mut tape, yv).unwrap();
        let lat2 = tape.value(out2.latents).clone();
        for (k, &(a, b)) in out.windows.iter().enumerate() {
            if (a..b).contains(&13) {
                assert_ne!(lat.row(k), lat2.row(k));
            } else {
                assert_eq!(lat.row(k), lat2.row(k), "window {k}");
            }
        }
    }

    #[test]
    fn swapping_disjoint_windows_swaps_latents() {
        // With a zero positional table, window content alone decides the latent.
        let cfg = PerceiverConfig::toy();
        let mut init = Init::new(4);
        let p = SlidingPerceiver::new(&mut init, "p", &cfg).unwrap();
        p.pos.set_value(Tensor::zeros(&[250, 16])).unwrap();
        let x = init.normal(&[12, 16], 1.0);
        let mut y = x.clone();
        for f in 0..4 {
            let (a, b) = (f * 16, (8 + f) * 16);
            for d in 0..16 {
                y.data_mut().swap(a + d, b + d);
            }
        }
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(t.clone());
            let out = p.forward(&mut tape, v).unwrap();
            tape.value(out.latents).clone()
        };
        let (lx, ly) = (run(&x), run(&y));
        assert_eq!(lx.row(0), ly.row(4));
        assert_eq!(lx.row(4), ly.row(0));
    }

    #[test]
    fn gradcheck_one_window() {
        let cfg = PerceiverConfig::toy();
        let mut init = Init::new(5);
        let p = SlidingPerceiver::new(&mut init, "p", &cfg).unwrap();
        let x = init.normal(&[4, 16], 1.0);
        let target = init.normal(&[1, 16], 1.0);
        let mut set = ParamSet::new();
        p.collect(&mut set);
        let cfg = GradCheck {
            max_entries_per_param: Some(12),
            ..GradCheck::default()
        };
        let r = finite_diff_check(set.as_slice(), &cfg, |t| {
            let xv = t.constant(x.clone());
            let out = p.forward(t, xv)?;
            let tv = t.constant(target.clone());
            let d = t.sub(out.latents, tv)?;
            let sq = t.square(d);
            t.sum_all(sq)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn all_weights_receive_gradient() {
        let cfg = PerceiverConfig::toy();
        let mut init = Init::new(6);
        let p = SlidingPerceiver::new(&mut init, "p", &cfg).unwrap();
        let mut set = ParamSet::new();
        p.collect(&mut set);
        let mut tape = Tape::new();
        let x = tape.constant(init.normal(&[14, 16], 1.0));
        let out = p.forward(&mut tape, x).unwrap();
        let w = tape.constant(init.normal(&[6, 16], 1.0));
        let m = tape.mul(out.latents, w).unwrap();
        let l = tape.sum_all(m).unwrap();
        tape.backward(l).unwrap();
        for q in set.iter() {
            let g = q.grad().unwrap_or_else(|| panic!("{} has no gradient", q.name()));
            assert!(g.data().iter().any(|v| *v != 0.0), "{}", q.name());
        }
    }

    proptest! {
        #[test]
        fn count_formula_matches_enumeration(w in 1usize..=8, s in 1usize..=4, extra in 0usize..=56) {
            let t = w + extra;
            let ws = enumerate_windows(t, w, s).unwrap();
            prop_assert_eq!(ws.len(), output_len(t, w, s));
            prop_assert!(ws.iter().all(|&(a, b)| b - a == w && b <= t));
            let last = ws.last().unwrap().0;
            prop_assert!(last + s + w > t);
        }
    }
}
