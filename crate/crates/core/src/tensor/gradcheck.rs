use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Param, Tape, Var};
use crate::error::{Error, Result};

/// Central-difference settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked entries.
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare tape gradients against central differences.
///
/// `f` builds the scalar loss on a fresh tape from the current parameter
/// values. Frozen parameters are skipped.
pub fn finite_diff_check(
    params: &[Param],
    cfg: &GradCheck,
    f: impl Fn(&mut Tape) -> Result<Var>,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    tape.backward(loss)?;
    drop(tape);

    let eval = |f: &dyn Fn(&mut Tape) -> Result<Var>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t)?;
        let v = t.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("non-finite loss under perturbation".into()))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for p in params.iter().filter(|p| p.requires_grad()) {
        let n = p.numel();
        let analytic = p.grad().map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let original = p.value();
        for i in entries {
            let x = original.data()[i];
            p.set_element(i, x + cfg.h);
            let up = eval(&f);
            p.set_element(i, x - cfg.h);
            let down = eval(&f);
            p.set_element(i, x);
            let numeric = (up? - down?) / (2.0 * cfg.h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((p.name(), i));
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(report)
}
