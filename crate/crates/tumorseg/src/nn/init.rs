//! Xavier/Glorot uniform initialization.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Uniform(−a, a) with `a = sqrt(6 / (fan_in + fan_out))`, giving weight
/// variance `2 / (fan_in + fan_out)`.
pub fn xavier_uniform(
    rng: &mut ChaCha20Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-a..a)).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/product mismatch")
}
