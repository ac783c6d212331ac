use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Param, Tensor};

/// Seeded source for parameter initialization.
///
/// Every model constructor draws from one `Init`, so a seed fixes all weights.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("shape")
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Tensor::new(shape, data).expect("shape")
    }

    /// `[fan_in, fan_out]` weight drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> Param {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        Param::new(name, self.uniform(&[fan_in, fan_out], bound))
    }

    pub fn bias(&mut self, name: impl Into<String>, n: usize) -> Param {
        Param::new(name, Tensor::zeros(&[n]))
    }
}
