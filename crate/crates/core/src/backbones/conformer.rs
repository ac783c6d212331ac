//! Conformer encoder with attentive pooling over its attention maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Init, Param, ParamSet, Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub conv_expansion: usize,
    pub conv_kernel: usize,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        ConformerConfig {
            dim: 512,
            blocks: 4,
            heads: 8,
            ff_mult: 4,
            conv_expansion: 2,
            conv_kernel: 5,
        }
    }
}

/// Pointwise expansion, GLU, depthwise conv, norm, SiLU, pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise: Param,
    pub inner_norm: LayerNorm,
    pub project: Linear,
}

impl ConvModule {
    pub fn new(init: &mut Init, name: &str, dim: usize, expansion: usize, kernel: usize) -> Self {
        let inner = dim * expansion / 2;
        ConvModule {
            norm: LayerNorm::new(&format!("{name}.ln"), dim),
            expand: Linear::new(init, &format!("{name}.pw1"), dim, 2 * inner, true),
            depthwise: Param::new(
                format!("{name}.dw"),
                init.uniform(&[kernel, inner], (1.0 / kernel as f64).sqrt()),
            ),
            inner_norm: LayerNorm::new(&format!("{name}.ln_inner"), inner),
            project: Linear::new(init, &format!("{name}.pw2"), inner, dim, true),
        }
    }

    /// `x: [B, T, d]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, x)?;
        let h = self.expand.forward(tape, h)?;
        let r = tape.shape(h).len();
        let width = tape.shape(h)[r - 1];
        let value = tape.slice(h, r - 1, 0, width / 2)?;
        let gate = tape.slice(h, r - 1, width / 2, width)?;
        let gate = tape.sigmoid(gate);
        let h = tape.mul(value, gate)?;
        let k = self.depthwise.shape()[0];
        let w = tape.param(&self.depthwise);
        let h = tape.depthwise_conv(h, w, (k - 1) / 2, k / 2)?;
        let h = self.inner_norm.forward(tape, h)?;
        let h = tape.silu(h);
        self.project.forward(tape, h)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.norm.collect(set);
        self.expand.collect(set);
        set.push(&self.depthwise);
        self.inner_norm.collect(set);
        self.project.collect(set);
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub out_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(init: &mut Init, name: &str, cfg: &ConformerConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(ConformerBlock {
            ff1: FeedForward::new(init, &format!("{name}.ff1"), d, cfg.ff_mult),
            attn_norm: LayerNorm::new(&format!("{name}.attn_ln"), d),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, cfg.heads)?,
            conv: ConvModule::new(init, &format!("{name}.conv"), d, cfg.conv_expansion, cfg.conv_kernel),
            ff2: FeedForward::new(init, &format!("{name}.ff2"), d, cfg.ff_mult),
            out_norm: LayerNorm::new(&format!("{name}.ln_out"), d),
        })
    }

    /// `x: [B, T, d]` to the block output and its attention `[B, H, T, T]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let f = self.ff1.forward(tape, x)?;
        let f = tape.scale(f, 0.5);
        let x = tape.add(x, f)?;
        let n = self.attn_norm.forward(tape, x)?;
        let (a, probs) = self.attn.forward(tape, n, n, None)?;
        let x = tape.add(x, a)?;
        let c = self.conv.forward(tape, x)?;
        let x = tape.add(x, c)?;
        let f = self.ff2.forward(tape, x)?;
        let f = tape.scale(f, 0.5);
        let x = tape.add(x, f)?;
        Ok((self.out_norm.forward(tape, x)?, probs))
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.ff1.collect(set);
        self.attn_norm.collect(set);
        self.attn.collect(set);
        self.conv.collect(set);
        self.ff2.collect(set);
        self.out_norm.collect(set);
    }
}

#[derive(Clone, Debug)]
pub struct ConformerEncoder {
    pub input: Linear,
    pub blocks: Vec<ConformerBlock>,
}

pub struct ConformerOutput {
    /// `[B, T, d]`
    pub hidden: Var,
    /// One `[B, H, T, T]` map per block.
    pub maps: Vec<Var>,
}

impl ConformerEncoder {
    pub fn new(init: &mut Init, name: &str, c_in: usize, cfg: &ConformerConfig) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::config("conformer needs at least one block"));
        }
        let blocks = (0..cfg.blocks)
            .map(|i| ConformerBlock::new(init, &format!("{name}.block{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(ConformerEncoder {
            input: Linear::new(init, &format!("{name}.proj"), c_in, cfg.dim, true),
            blocks,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.input.in_dim()
    }

    pub fn dim(&self) -> usize {
        self.input.out_dim()
    }

    /// `x: [B, T, C_in]` or `[T, C_in]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<ConformerOutput> {
        let s = tape.shape(x).to_vec();
        let x = match s.len() {
            2 => tape.reshape(x, &[1, s[0], s[1]])?,
            3 => x,
            _ => return Err(Error::shape("conformer", &s, &[0, 0, self.in_dim()])),
        };
        if s[s.len() - 1] != self.in_dim() || s[s.len() - 2] == 0 {
            return Err(Error::shape("conformer", &s, &[1, self.in_dim()]));
        }
        let mut h = self.input.forward(tape, x)?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, probs) = b.forward(tape, h)?;
            h = out;
            maps.push(probs);
        }
        Ok(ConformerOutput { hidden: h, maps })
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.input.collect(set);
        for b in &self.blocks {
            b.collect(set);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PoolOrder {
    /// Renormalized per-key weights, then a weighted sum over time.
    #[default]
    WeightThenAverage,
    /// Mean map applied to the hidden states, then a plain temporal mean.
    MapThenAverage,
}

/// Mean over blocks, heads and queries of the attention to each key,
/// renormalized to sum to one. `[B, T]`.
pub fn key_weights(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    let first = *maps
        .first()
        .ok_or_else(|| Error::contract("attentive pooling needs attention maps"))?;
    let mut acc = first;
    for &m in &maps[1..] {
        acc = tape.add(acc, m)?;
    }
    let acc = tape.scale(acc, 1.0 / maps.len() as f64);
    let heads = tape.mean_axis(acc, 1)?;
    let w = tape.mean_axis(heads, 1)?;
    let b = tape.shape(w)[0];
    let total = tape.sum_axis(w, 1)?;
    let total = tape.reshape(total, &[b, 1])?;
    tape.div(w, total)
}

/// `hidden: [B, T, d]` to `[B, d]`.
pub fn attentive_pool(tape: &mut Tape, hidden: Var, maps: &[Var], order: PoolOrder) -> Result<Var> {
    let s = tape.shape(hidden).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    match order {
        PoolOrder::WeightThenAverage => {
            let w = key_weights(tape, maps)?;
            let w = tape.reshape(w, &[b, 1, t])?;
            let p = tape.matmul(w, hidden)?;
            tape.reshape(p, &[b, d])
        }
        PoolOrder::MapThenAverage => {
            let mut acc = maps[0];
            for &m in &maps[1..] {
                acc = tape.add(acc, m)?;
            }
            let acc = tape.scale(acc, 1.0 / maps.len() as f64);
            let m = tape.mean_axis(acc, 1)?;
            let y = tape.matmul(m, hidden)?;
            tape.mean_axis(y, 1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheck, Tensor};

    fn toy() -> ConformerConfig {
        ConformerConfig {
            dim: 16,
            blocks: 1,
            heads: 2,
            ff_mult: 2,
            conv_expansion: 2,
            conv_kernel: 5,
        }
    }

    #[test]
    fn paper_pose_input_width() {
        let mut init = Init::new(0);
        let cfg = ConformerConfig {
            blocks: 1,
            ..ConformerConfig::default()
        };
        let enc = ConformerEncoder::new(&mut init, "c", 1536, &cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(init.uniform(&[24, 1536], 1.0));
        let out = enc.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.hidden), &[1, 24, 512]);
        assert_eq!(tape.shape(out.maps[0]), &[1, 8, 24, 24]);
    }

    #[test]
    fn attention_rows_normalize_in_every_block() {
        let mut init = Init::new(1);
        let cfg = ConformerConfig { blocks: 3, ..toy() };
        let enc = ConformerEncoder::new(&mut init, "c", 6, &cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(init.uniform(&[2, 7, 6], 1.0));
        let out = enc.forward(&mut tape, x).unwrap();
        for &m in &out.maps {
            let m = tape.value(m);
            for r in m.data().chunks(7) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_block_gradcheck() {
        let mut init = Init::new(2);
        let enc = ConformerEncoder::new(&mut init, "c", 16, &toy()).unwrap();
        let x = init.uniform(&[4, 16], 1.0);
        let mut set = ParamSet::new();
        enc.collect(&mut set);
        let f = |tp: &mut Tape| {
            let vx = tp.constant(x.clone());
            let out = enc.forward(tp, vx)?;
            let p = attentive_pool(tp, out.hidden, &out.maps, PoolOrder::default())?;
            let sq = tp.square(p);
            tp.sum_all(sq)
        };
        let cfg = GradCheck {
            max_entries_per_param: Some(6),
            ..GradCheck::default()
        };
        let r = finite_diff_check(set.as_slice(), &cfg, f).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn uniform_attention_pools_to_temporal_mean() {
        let mut init = Init::new(3);
        let h = init.uniform(&[1, 5, 3], 1.0);
        let mut tape = Tape::new();
        let vh = tape.constant(h.clone());
        let maps: Vec<Var> = (0..2)
            .map(|_| tape.constant(Tensor::full(&[1, 2, 5, 5], 0.2)))
            .collect();
        let want = tape.mean_axis(vh, 1).unwrap();
        for order in [PoolOrder::WeightThenAverage, PoolOrder::MapThenAverage] {
            let p = attentive_pool(&mut tape, vh, &maps, order).unwrap();
            assert!(tape.value(p).max_abs_diff(tape.value(want)) < 1e-12);
        }
        let w = key_weights(&mut tape, &maps).unwrap();
        assert!((tape.value(w).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pool_orders_agree_on_random_maps() {
        let mut init = Init::new(4);
        let mut tape = Tape::new();
        let h = tape.constant(init.uniform(&[2, 6, 3], 1.0));
        let maps: Vec<Var> = (0..3)
            .map(|_| {
                let raw = tape.constant(init.uniform(&[2, 2, 6, 6], 2.0));
                tape.softmax(raw, 3).unwrap()
            })
            .collect();
        let a = attentive_pool(&mut tape, h, &maps, PoolOrder::WeightThenAverage).unwrap();
        let b = attentive_pool(&mut tape, h, &maps, PoolOrder::MapThenAverage).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
    }

    #[test]
    fn key_weights_are_time_equivariant() {
        let mut init = Init::new(5);
        let t = 5;
        let perm = [3, 0, 4, 1, 2];
        let raw = init.uniform(&[1, 2, t, t], 2.0);
        let mut permuted = Tensor::zeros(&[1, 2, t, t]);
        for h in 0..2 {
            for i in 0..t {
                for j in 0..t {
                    permuted.data_mut()[(h * t + i) * t + j] =
                        raw.data()[(h * t + perm[i]) * t + perm[j]];
                }
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(raw);
        let a = tape.softmax(a, 3).unwrap();
        let b = tape.constant(permuted);
        let b = tape.softmax(b, 3).unwrap();
        let wa = key_weights(&mut tape, &[a]).unwrap();
        let wb = key_weights(&mut tape, &[b]).unwrap();
        for j in 0..t {
            let x = tape.value(wb).data()[j];
            let y = tape.value(wa).data()[perm[j]];
            assert!((x - y).abs() < 1e-12);
        }
    }
}
