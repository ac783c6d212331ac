//! Pre-norm transformer encoder-decoder with a shared embedding table whose
//! width matches the perceiver latents.

use serde::{Deserialize, Serialize};

use super::tokenizer::PAD;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Init, Param, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Embedding width, equal to the perceiver latent width.
    pub embed_dim: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    pub dora_rank: usize,
    pub dora_alpha: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embed_dim: 2048,
            d_model: 256,
            enc_layers: 2,
            dec_layers: 2,
            heads: 8,
            ff_mult: 4,
            max_len: 512,
            dora_rank: super::dora::DEFAULT_RANK,
            dora_alpha: super::dora::DEFAULT_ALPHA,
        }
    }
}

impl DecoderConfig {
    pub fn toy() -> Self {
        DecoderConfig {
            embed_dim: 32,
            d_model: 32,
            heads: 4,
            ff_mult: 2,
            max_len: 256,
            dora_rank: 4,
            dora_alpha: 8.0,
            ..DecoderConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct ToyEncDec {
    pub config: DecoderConfig,
    pub embed: Param,
    input_proj: Option<Linear>,
    enc_pos: Param,
    dec_pos: Param,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl ToyEncDec {
    pub fn new(init: &mut Init, name: &str, vocab: usize, cfg: &DecoderConfig) -> Result<Self> {
        if cfg.d_model % cfg.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                cfg.d_model, cfg.heads
            )));
        }
        let d = cfg.d_model;
        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("{name}.enc{i}");
                Ok(EncoderLayer {
                    norm: LayerNorm::new(&format!("{n}.ln"), d),
                    attn: MultiHeadAttention::new(init, &format!("{n}.attn"), d, cfg.heads)?,
                    ff: FeedForward::new(init, &format!("{n}.ff"), d, cfg.ff_mult),
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("{name}.dec{i}");
                Ok(DecoderLayer {
                    self_norm: LayerNorm::new(&format!("{n}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(init, &format!("{n}.self"), d, cfg.heads)?,
                    cross_norm: LayerNorm::new(&format!("{n}.ln_cross"), d),
                    cross_attn: MultiHeadAttention::new(init, &format!("{n}.cross"), d, cfg.heads)?,
                    ff: FeedForward::new(init, &format!("{n}.ff"), d, cfg.ff_mult),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ToyEncDec {
            embed: Param::new(format!("{name}.embed"), init.normal(&[vocab, cfg.embed_dim], 1.0)),
            input_proj: (cfg.embed_dim != d)
                .then(|| Linear::new(init, &format!("{name}.in_proj"), cfg.embed_dim, d, true)),
            enc_pos: Param::new(format!("{name}.enc_pos"), init.normal(&[cfg.max_len, d], 0.02)),
            dec_pos: Param::new(format!("{name}.dec_pos"), init.normal(&[cfg.max_len, d], 0.02)),
            encoder,
            enc_norm: LayerNorm::new(&format!("{name}.enc_ln"), d),
            decoder,
            dec_norm: LayerNorm::new(&format!("{name}.dec_ln"), d),
            head: Linear::new(init, &format!("{name}.head"), d, vocab, true),
            config: cfg.clone(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let table = tape.param(&self.embed);
        tape.gather_rows(table, ids)
    }

    fn into_model_width(&self, tape: &mut Tape, x: Var, pos: &Param) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.config.embed_dim {
            return Err(Error::shape("decoder input", &s, &[0, self.config.embed_dim]));
        }
        if s[0] > self.config.max_len || s[0] == 0 {
            return Err(Error::contract(format!(
                "sequence length {} outside 1..={}",
                s[0], self.config.max_len
            )));
        }
        let h = match &self.input_proj {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        let p = tape.param(pos);
        let p = tape.slice(p, 0, 0, s[0])?;
        tape.add(h, p)
    }

    /// `inputs: [S, embed_dim]` to memory `[S, d_model]`.
    pub fn encode(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let mut x = self.into_model_width(tape, inputs, &self.enc_pos)?;
        for l in &self.encoder {
            let n = l.norm.forward(tape, x)?;
            let (a, _) = l.attn.forward(tape, n, n, None)?;
            x = tape.add(x, a)?;
            let f = l.ff.forward(tape, x)?;
            x = tape.add(x, f)?;
        }
        self.enc_norm.forward(tape, x)
    }

    /// Next-token logits `[L, V]` for every prefix position.
    pub fn decode_logits(&self, tape: &mut Tape, memory: Var, prefix: &[usize]) -> Result<Var> {
        let e = self.embed_tokens(tape, prefix)?;
        let mut x = self.into_model_width(tape, e, &self.dec_pos)?;
        let mask = causal_mask(prefix.len());
        for l in &self.decoder {
            let n = l.self_norm.forward(tape, x)?;
            let (a, _) = l.self_attn.forward(tape, n, n, Some(&mask))?;
            x = tape.add(x, a)?;
            let n = l.cross_norm.forward(tape, x)?;
            let (c, _) = l.cross_attn.forward(tape, n, memory, None)?;
            x = tape.add(x, c)?;
            let f = l.ff.forward(tape, x)?;
            x = tape.add(x, f)?;
        }
        let x = self.dec_norm.forward(tape, x)?;
        self.head.forward(tape, x)
    }

    /// Logits aligned with `target`: the decoder reads `<pad>` then
    /// `target[..n-1]`.
    pub fn teacher_forced(&self, tape: &mut Tape, memory: Var, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::contract("empty target"));
        }
        let mut prefix = vec![PAD];
        prefix.extend_from_slice(&target[..target.len() - 1]);
        self.decode_logits(tape, memory, &prefix)
    }

    fn adapted_linears(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = Vec::new();
        for l in &mut self.encoder {
            out.extend(l.attn.linears_mut());
            out.extend(l.ff.linears_mut());
        }
        for l in &mut self.decoder {
            out.extend(l.self_attn.linears_mut());
            out.extend(l.cross_attn.linears_mut());
            out.extend(l.ff.linears_mut());
        }
        out
    }

    /// Freeze every attention and feed-forward projection and route it
    /// through a fresh adapter.
    pub fn attach_dora(&mut self, init: &mut Init) {
        let (r, a) = (self.config.dora_rank, self.config.dora_alpha);
        for l in self.adapted_linears() {
            l.attach_dora(init, r, a);
        }
    }

    pub fn has_dora(&self) -> bool {
        self.encoder.first().map(|l| l.attn.q.dora.is_some()).unwrap_or(false)
    }

    /// Parameters outside the adapted projections: embeddings, positions,
    /// norms, input projection and output head.
    pub fn base_params(&self) -> ParamSet {
        let mut s = ParamSet::new();
        s.push(&self.embed);
        if let Some(p) = &self.input_proj {
            p.collect(&mut s);
        }
        s.push(&self.enc_pos);
        s.push(&self.dec_pos);
        for l in &self.encoder {
            l.norm.collect(&mut s);
            l.ff.norm.collect(&mut s);
        }
        self.enc_norm.collect(&mut s);
        for l in &self.decoder {
            l.self_norm.collect(&mut s);
            l.cross_norm.collect(&mut s);
            l.ff.norm.collect(&mut s);
        }
        self.dec_norm.collect(&mut s);
        self.head.collect(&mut s);
        s
    }

    /// Adapter factors and magnitudes only.
    pub fn adapter_params(&self) -> ParamSet {
        let mut s = ParamSet::new();
        let mut take = |l: &Linear| {
            if let Some(d) = &l.dora {
                d.collect(&mut s);
            }
        };
        for l in &self.encoder {
            [&l.attn.q, &l.attn.k, &l.attn.v, &l.attn.o, &l.ff.fc1, &l.ff.fc2]
                .into_iter()
                .for_each(&mut take);
        }
        for l in &self.decoder {
            [
                &l.self_attn.q, &l.self_attn.k, &l.self_attn.v, &l.self_attn.o,
                &l.cross_attn.q, &l.cross_attn.k, &l.cross_attn.v, &l.cross_attn.o,
                &l.ff.fc1, &l.ff.fc2,
            ]
            .into_iter()
            .for_each(&mut take);
        }
        s
    }

    pub fn collect(&self, set: &mut ParamSet) {
        set.push(&self.embed);
        if let Some(p) = &self.input_proj {
            p.collect(set);
        }
        set.push(&self.enc_pos);
        set.push(&self.dec_pos);
        for l in &self.encoder {
            l.norm.collect(set);
            l.attn.collect(set);
            l.ff.collect(set);
        }
        self.enc_norm.collect(set);
        for l in &self.decoder {
            l.self_norm.collect(set);
            l.self_attn.collect(set);
            l.cross_norm.collect(set);
            l.cross_attn.collect(set);
            l.ff.collect(set);
        }
        self.dec_norm.collect(set);
        self.head.collect(set);
    }

    /// Encode a prompt with `latents: [T', embed_dim]` spliced in.
    pub fn encode_prompt(&self, tape: &mut Tape, prompt: &[usize], splice: usize, latents: Var) -> Result<Var> {
        let e = self.embed_tokens(tape, prompt)?;
        let x = super::prompt::splice_latents(tape, e, splice, latents)?;
        self.encode(tape, x)
    }

    /// Memory tensor for decoding, evaluated outside any training tape.
    pub fn memory_value(&self, prompt: &[usize], splice: usize, latents: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = tape.constant(latents.clone());
        let m = self.encode_prompt(&mut tape, prompt, splice, l)?;
        Ok(tape.value(m).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheck};

    fn model(seed: u64) -> (Init, ToyEncDec) {
        let mut init = Init::new(seed);
        let cfg = DecoderConfig {
            embed_dim: 12,
            d_model: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_mult: 2,
            max_len: 32,
            dora_rank: 2,
            dora_alpha: 4.0,
        };
        let m = ToyEncDec::new(&mut init, "lm", 20, &cfg).unwrap();
        (init, m)
    }

    #[test]
    fn shapes_and_causality() {
        let (mut init, m) = model(0);
        let mut tape = Tape::new();
        let lat = tape.constant(init.uniform(&[5, 12], 1.0));
        let mem = m.encode_prompt(&mut tape, &[15, 17, 3], 2, lat).unwrap();
        assert_eq!(tape.shape(mem), &[7, 8]);
        let full = m.decode_logits(&mut tape, mem, &[0, 4, 9, 1]).unwrap();
        let part = m.decode_logits(&mut tape, mem, &[0, 4]).unwrap();
        assert_eq!(tape.shape(full), &[4, 20]);
        let a = &tape.value(full).data()[..40];
        let b = tape.value(part).data();
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn dora_identity_then_adapter_only_training() {
        let (mut init, mut m) = model(1);
        let lat = init.uniform(&[3, 12], 1.0);
        let prompt = [15, 3, 1];
        let target = [5, 6, 1];
        let run = |m: &ToyEncDec| {
            let mut tape = Tape::new();
            let l = tape.constant(lat.clone());
            let mem = m.encode_prompt(&mut tape, &prompt, 1, l).unwrap();
            let y = m.teacher_forced(&mut tape, mem, &target).unwrap();
            tape.value(y).clone()
        };
        let before = run(&m);
        m.attach_dora(&mut init);
        assert!(m.has_dora());
        assert_eq!(run(&m), before);

        let adapters = m.adapter_params();
        assert_eq!(adapters.len(), 3 * (6 + 10));
        let mut all = ParamSet::new();
        m.collect(&mut all);
        m.base_params().set_requires_grad(false);
        let mut tape = Tape::new();
        let l = tape.constant(lat.clone());
        let mem = m.encode_prompt(&mut tape, &prompt, 1, l).unwrap();
        let y = m.teacher_forced(&mut tape, mem, &target).unwrap();
        let loss = tape.cross_entropy(y, &target).unwrap();
        tape.backward(loss).unwrap();
        for p in all.iter() {
            assert_eq!(p.grad().is_some(), adapters.contains(p), "{}", p.name());
        }
    }

    #[test]
    fn gradcheck_teacher_forced_loss() {
        let (mut init, m) = model(2);
        let lat = init.uniform(&[3, 12], 1.0);
        let mut set = ParamSet::new();
        m.collect(&mut set);
        let f = |tp: &mut Tape| {
            let l = tp.constant(lat.clone());
            let mem = m.encode_prompt(tp, &[15, 3, 7], 1, l)?;
            let y = m.teacher_forced(tp, mem, &[5, 6, 1])?;
            tp.cross_entropy(y, &[5, 6, 1])
        };
        let gc = GradCheck {
            max_entries_per_param: Some(4),
            ..GradCheck::default()
        };
        let r = finite_diff_check(set.as_slice(), &gc, f).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn rejects_overlong_input() {
        let (mut init, m) = model(3);
        let mut tape = Tape::new();
        let x = tape.constant(init.uniform(&[33, 12], 1.0));
        assert!(matches!(m.encode(&mut tape, x), Err(Error::Contract(_))));
    }
}
