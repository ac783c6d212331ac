//! Seeded per-batch task mixing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::prompt::Task;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: Task,
    /// Indices into the task's pool.
    pub indices: Vec<usize>,
}

/// Each batch comes from one task, chosen by a coin that lands on SLT with
/// probability `ratio`. Within a task, samples cycle through reshuffled
/// passes over the pool.
pub struct MixedSampler {
    ratio: f64,
    batch: usize,
    rng: ChaCha8Rng,
    pools: [Cycle; 2],
}

struct Cycle {
    len: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

impl MixedSampler {
    /// A pool may be empty only when the ratio never selects it.
    pub fn new(slt: usize, ssa: usize, ratio: f64, batch: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::config(format!("task ratio {ratio} outside [0, 1]")));
        }
        if batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if (ratio > 0.0 && slt == 0) || (ratio < 1.0 && ssa == 0) {
            return Err(Error::contract(format!(
                "mixed sampling at ratio {ratio} needs both pools, got {slt} translation and {ssa} alignment samples"
            )));
        }
        let cycle = |len| Cycle {
            len,
            order: Vec::new(),
            pos: 0,
        };
        Ok(MixedSampler {
            ratio,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pools: [cycle(slt), cycle(ssa)],
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let task = if self.ratio >= 1.0 || (self.ratio > 0.0 && self.rng.gen_bool(self.ratio)) {
            Task::Slt
        } else {
            Task::Ssa
        };
        let pool = &mut self.pools[(task == Task::Ssa) as usize];
        let indices = (0..self.batch).map(|_| pool.next(&mut self.rng)).collect();
        Batch { task, indices }
    }
}

impl Iterator for MixedSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_one_is_translation_only() {
        let s = MixedSampler::new(5, 0, 1.0, 2, 0).unwrap();
        assert!(s.take(200).all(|b| b.task == Task::Slt));
    }

    #[test]
    fn long_run_fraction_within_binomial_bound() {
        // sd = sqrt(.8 * .2 / 1e4) = 0.004, so ±0.02 is five sigma
        let s = MixedSampler::new(10, 10, 0.8, 1, 7).unwrap();
        let slt = s.take(10_000).filter(|b| b.task == Task::Slt).count();
        let frac = slt as f64 / 1e4;
        assert!((frac - 0.8).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<Batch> = MixedSampler::new(7, 3, 0.8, 4, 11).unwrap().take(50).collect();
        let b: Vec<Batch> = MixedSampler::new(7, 3, 0.8, 4, 11).unwrap().take(50).collect();
        assert_eq!(a, b);
        let c: Vec<Batch> = MixedSampler::new(7, 3, 0.8, 4, 12).unwrap().take(50).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_pool_is_a_contract_error() {
        assert!(matches!(MixedSampler::new(0, 4, 0.8, 1, 0), Err(Error::Contract(_))));
        assert!(matches!(MixedSampler::new(4, 0, 0.8, 1, 0), Err(Error::Contract(_))));
        assert!(matches!(MixedSampler::new(4, 4, 1.5, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn every_sample_visited_each_pass() {
        let mut s = MixedSampler::new(6, 0, 1.0, 3, 2).unwrap();
        let mut seen: Vec<usize> = (0..2).flat_map(|_| s.next_batch().indices).collect();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }
}
