//! Weight-decomposed low-rank adaptation.

use crate::error::Result;
use crate::tensor::{Init, Param, ParamSet, Tape, Tensor, Var};

/// Adapter over a frozen `[in, out]` weight `W0`:
///
/// `W = W0 + (alpha / r)·A·B`, `W' = W · (m / ‖W‖_col)`
///
/// with `A: [in, r]`, `B: [r, out]` (zero at init) and `m: [out]` starting
/// at the column norms of `W0`, so that `W' == W0` bit for bit at init.
#[derive(Clone, Debug)]
pub struct Dora {
    pub a: Param,
    pub b: Param,
    pub magnitude: Param,
    pub rank: usize,
    pub alpha: f64,
}

pub const DEFAULT_RANK: usize = 32;
pub const DEFAULT_ALPHA: f64 = 64.0;

/// `sqrt(Σ_rows w²)` per column, in the exact arithmetic order used by the
/// tape in [`Dora::effective_weight`].
pub fn column_norms(w: &Tensor) -> Tensor {
    let sq = Tensor::new(w.shape(), w.data().iter().map(|v| v * v).collect()).expect("shape");
    let s = sq.sum_axis(0);
    let n = w.shape()[1];
    Tensor::new(&[n], s.data().iter().map(|v| v.sqrt()).collect()).expect("shape")
}

impl Dora {
    pub fn new(init: &mut Init, name: &str, base: &Param, rank: usize, alpha: f64) -> Self {
        let shape = base.shape();
        let (fan_in, fan_out) = (shape[0], shape[1]);
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        Dora {
            a: Param::new(format!("{name}.dora_a"), init.uniform(&[fan_in, rank], bound)),
            b: Param::new(format!("{name}.dora_b"), Tensor::zeros(&[rank, fan_out])),
            magnitude: Param::new(format!("{name}.dora_m"), base.with_value(column_norms)),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn effective_weight(&self, tape: &mut Tape, base: &Param) -> Result<Var> {
        let w0 = tape.param(base);
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let m = tape.param(&self.magnitude);
        let ab = tape.matmul(a, b)?;
        let delta = tape.scale(ab, self.scale());
        let w = tape.add(w0, delta)?;
        let sq = tape.square(w);
        let ss = tape.sum_axis(sq, 0)?;
        let norms = tape.sqrt(ss);
        let ratio = tape.div(m, norms)?;
        tape.mul(w, ratio)
    }

    pub fn collect(&self, set: &mut ParamSet) {
        set.push(&self.a);
        set.push(&self.b);
        set.push(&self.magnitude);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::tensor::{finite_diff_check, GradCheck};

    #[test]
    fn identity_at_init_is_exact() {
        let mut init = Init::new(9);
        let base = Linear::new(&mut init, "l", 6, 5, true);
        let mut adapted = base.clone();
        // clone shares storage; give the adapted layer its own copy
        adapted.weight = Param::new("l.w", base.weight.value());
        adapted.bias = Some(Param::new("l.b", Tensor::full(&[5], 0.0)));
        base.bias.as_ref().unwrap().set_value(Tensor::full(&[5], 0.0)).unwrap();
        adapted.attach_dora(&mut init, DEFAULT_RANK, DEFAULT_ALPHA);
        for s in 0..20 {
            let x = Init::new(100 + s).uniform(&[3, 6], 2.0);
            let mut tape = Tape::new();
            let vx = tape.constant(x);
            let y0 = base.forward(&mut tape, vx).unwrap();
            let y1 = adapted.forward(&mut tape, vx).unwrap();
            assert_eq!(tape.value(y0).data(), tape.value(y1).data());
        }
    }

    #[test]
    fn only_adapter_params_train_and_grads_check() {
        let mut init = Init::new(10);
        let mut lin = Linear::new(&mut init, "l", 4, 3, true);
        lin.attach_dora(&mut init, 2, 4.0);
        lin.dora
            .as_ref()
            .unwrap()
            .b
            .set_value(init.uniform(&[2, 3], 0.5))
            .unwrap();
        let x = init.uniform(&[5, 4], 1.0);
        let c = init.uniform(&[5, 3], 1.0);
        let mut set = ParamSet::new();
        lin.collect(&mut set);
        let f = |tp: &mut Tape| {
            let vx = tp.constant(x.clone());
            let y = lin.forward(tp, vx)?;
            let vc = tp.constant(c.clone());
            let y = tp.mul(y, vc)?;
            tp.sum_all(y)
        };
        let mut tape = Tape::new();
        let l = f(&mut tape).unwrap();
        tape.backward(l).unwrap();
        assert!(lin.weight.grad().is_none());
        assert!(lin.bias.as_ref().unwrap().grad().is_none());
        let d = lin.dora.as_ref().unwrap();
        assert!(d.a.grad().is_some() && d.b.grad().is_some() && d.magnitude.grad().is_some());
        set.zero_grad();
        let r = finite_diff_check(set.as_slice(), &GradCheck::default(), f).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn defaults_match_configuration() {
        assert_eq!(DEFAULT_RANK, 32);
        assert_eq!(DEFAULT_ALPHA, 64.0);
    }
}
