//! Seeded random workloads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::AttnConfig;
use crate::fp::{f32_to_f16, Half};
use crate::tensor::Tensor;

/// Standard-normal entries rounded to binary16. Each `stream` draws from an
/// independent ChaCha stream of `seed`.
pub fn normal_half(shape: &[usize], seed: u64, stream: u64) -> Tensor<Half> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| f32_to_f16(StandardNormal.sample(&mut rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Attention inputs of one run.
#[derive(Clone, Debug)]
pub struct Workload {
    pub q: Tensor<Half>,
    pub k: Tensor<Half>,
    pub v: Tensor<Half>,
    pub d_o: Tensor<Half>,
}

impl Workload {
    pub fn generate(cfg: &AttnConfig, seed: u64) -> Self {
        let shape = cfg.qkv_shape();
        Self {
            q: normal_half(&shape, seed, 0),
            k: normal_half(&shape, seed, 1),
            v: normal_half(&shape, seed, 2),
            d_o: normal_half(&shape, seed, 3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_independent_streams() {
        let a = normal_half(&[4, 16], 7, 0);
        assert_eq!(a, normal_half(&[4, 16], 7, 0));
        assert_ne!(a, normal_half(&[4, 16], 7, 1));
        assert_ne!(a, normal_half(&[4, 16], 8, 0));
    }

    #[test]
    fn roughly_standard_normal() {
        let t = normal_half(&[100_000], 1, 0).to_f64();
        let n = t.len() as f64;
        let mean = t.as_slice().iter().sum::<f64>() / n;
        let var = t.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }
}
