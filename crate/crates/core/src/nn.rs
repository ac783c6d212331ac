//! Layers shared by the backbones, the perceiver and the decoder.

use crate::decoder::dora::Dora;
use crate::error::{Error, Result};
use crate::tensor::{Init, Param, ParamSet, Tape, Tensor, Var};

/// `y = x·W + b` with `W` stored `[in, out]`, optionally DoRA-adapted.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub dora: Option<Dora>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: init.weight(format!("{name}.w"), fan_in, fan_out),
            bias: bias.then(|| init.bias(format!("{name}.b"), fan_out)),
            dora: None,
        }
    }

    /// He-uniform weights, for layers followed by a ReLU.
    pub fn he(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Linear {
            weight: Param::new(format!("{name}.w"), init.uniform(&[fan_in, fan_out], bound)),
            bias: bias.then(|| init.bias(format!("{name}.b"), fan_out)),
            dora: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = match &self.dora {
            Some(d) => d.effective_weight(tape, &self.weight)?,
            None => tape.param(&self.weight),
        };
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.linear(x, w, b)
    }

    /// Freeze the base weight and bias and route the forward pass through a
    /// fresh adapter.
    pub fn attach_dora(&mut self, init: &mut Init, rank: usize, alpha: f64) {
        let name = self.weight.name();
        let name = name.strip_suffix(".w").unwrap_or(&name);
        self.dora = Some(Dora::new(init, name, &self.weight, rank, alpha));
        self.weight.set_requires_grad(false);
        if let Some(b) = &self.bias {
            b.set_requires_grad(false);
        }
    }

    pub fn collect(&self, set: &mut ParamSet) {
        set.push(&self.weight);
        if let Some(b) = &self.bias {
            set.push(b);
        }
        if let Some(d) = &self.dora {
            d.collect(set);
        }
    }
}

/// Last-axis normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.g"), Tensor::full(&[dim], 1.0)),
            bias: Param::new(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        set.push(&self.gain);
        set.push(&self.bias);
    }
}

/// Pre-normalized two-layer MLP with a Swish hidden activation. The caller
/// adds the residual.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, dim: usize, mult: usize) -> Self {
        FeedForward {
            norm: LayerNorm::new(&format!("{name}.ln"), dim),
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, dim * mult, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), dim * mult, dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.silu(h);
        self.fc2.forward(tape, h)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        self.norm.collect(set);
        self.fc1.collect(set);
        self.fc2.collect(set);
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 2] {
        [&mut self.fc1, &mut self.fc2]
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Self::with_context(init, name, dim, dim, heads)
    }

    /// Queries of width `dim`, keys/values projected from `ctx_dim`.
    pub fn with_context(
        init: &mut Init,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(init, &format!("{name}.k"), ctx_dim, dim, true),
            v: Linear::new(init, &format!("{name}.v"), ctx_dim, dim, true),
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true),
            heads,
        })
    }

    /// Scaled dot-product attention. `query` is `[B, Tq, d]` or `[Tq, d]`,
    /// `context` likewise. `mask` is an additive `[Tq, Tk]` bias (use
    /// `-inf` to block a pair). Returns the output and the attention
    /// probabilities `[B, H, Tq, Tk]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        query: Var,
        context: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let unbatched = tape.shape(query).len() == 2;
        let (query, context) = if unbatched {
            let sq = tape.shape(query).to_vec();
            let sc = tape.shape(context).to_vec();
            (
                tape.reshape(query, &[1, sq[0], sq[1]])?,
                tape.reshape(context, &[1, sc[0], sc[1]])?,
            )
        } else {
            (query, context)
        };
        let sq = tape.shape(query).to_vec();
        let sc = tape.shape(context).to_vec();
        if sq.len() != 3 || sc.len() != 3 || sq[0] != sc[0] {
            return Err(Error::shape("attention", &sq, &sc));
        }
        let (b, tq, tk) = (sq[0], sq[1], sc[1]);
        let h = self.heads;
        let d = self.q.out_dim();
        let dh = d / h;

        let split = |tape: &mut Tape, x: Var, t: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, t, h, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * h, t, dh])
        };
        let q = self.q.forward(tape, query)?;
        let q = split(tape, q, tq)?;
        let k = self.k.forward(tape, context)?;
        let k = split(tape, k, tk)?;
        let v = self.v.forward(tape, context)?;
        let v = split(tape, v, tk)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(Error::shape("attention mask", m.shape(), &[tq, tk]));
            }
            let m = tape.constant(m.clone());
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax(scores, 2)?;
        let out = tape.matmul(probs, v)?;
        let out = tape.reshape(out, &[b, h, tq, dh])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, tq, d])?;
        let out = self.o.forward(tape, out)?;
        let out = if unbatched {
            tape.reshape(out, &[tq, d])?
        } else {
            out
        };
        let probs = tape.reshape(probs, &[b, h, tq, tk])?;
        Ok((out, probs))
    }

    pub fn collect(&self, set: &mut ParamSet) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.collect(set);
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

/// `[T, T]` additive mask blocking attention to future positions.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = f64::NEG_INFINITY;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheck};

    #[test]
    fn attention_rows_sum_to_one_and_grad_checks() {
        let mut init = Init::new(3);
        let att = MultiHeadAttention::new(&mut init, "att", 8, 2).unwrap();
        let x = init.uniform(&[2, 5, 8], 1.0);
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let (_, p) = att.forward(&mut tape, vx, vx, Some(&causal_mask(5))).unwrap();
        let probs = tape.value(p);
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // causal: row 0 attends only to key 0
        assert_eq!(probs.row(0)[1..], [0.0; 4]);

        let mut set = ParamSet::new();
        att.collect(&mut set);
        let c = init.uniform(&[2, 5, 8], 1.0);
        let err = finite_diff_check(set.as_slice(), &GradCheck::default(), |tp| {
            let vx = tp.constant(x.clone());
            let (y, _) = att.forward(tp, vx, vx, None)?;
            let vc = tp.constant(c.clone());
            let y = tp.mul(y, vc)?;
            tp.sum_all(y)
        })
        .unwrap();
        assert!(err.max_rel_err < 1e-6, "{err:?}");
    }

    #[test]
    fn unbatched_matches_batched() {
        let mut init = Init::new(4);
        let att = MultiHeadAttention::with_context(&mut init, "x", 4, 6, 2).unwrap();
        let q = init.uniform(&[3, 4], 1.0);
        let c = init.uniform(&[5, 6], 1.0);
        let mut tape = Tape::new();
        let vq = tape.constant(q.clone());
        let vc = tape.constant(c.clone());
        let (y1, _) = att.forward(&mut tape, vq, vc, None).unwrap();
        let vq3 = tape.constant(q.reshaped(&[1, 3, 4]).unwrap());
        let vc3 = tape.constant(c.reshaped(&[1, 5, 6]).unwrap());
        let (y3, _) = att.forward(&mut tape, vq3, vc3, None).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(y3).data());
    }
}
