use rand::Rng;

use super::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shaped `[fan_in, fan_out]`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}
