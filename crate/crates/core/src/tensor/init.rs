use super::{Rng, Tensor};

/// Uniform Kaiming initialization for a LeakyReLU network:
/// `U(-b, b)` with `b = sqrt(6 / ((1 + slope^2) * fan_in))`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, slope: f64, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual bias draw.
pub fn bias_uniform(len: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(&[len], -bound, bound, rng)
}
