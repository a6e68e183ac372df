use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::rng::rng_from;

/// Glorot-uniform draws: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// i.e. variance `2 / (fan_in + fan_out)`.
pub fn glorot_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}

/// A `[fan_out, fan_in]` Glorot-initialized matrix from `seed`.
pub fn glorot_init(fan_in: usize, fan_out: usize, seed: u64) -> Tensor {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    glorot_uniform(&[fan_out, fan_in], fan_in, fan_out, &mut rng_from(seed))
}

/// Target standard deviation of [`glorot_init`].
pub fn glorot_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}
