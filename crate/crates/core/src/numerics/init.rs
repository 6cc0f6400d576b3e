use rand::Rng;

use super::tensor::Tensor;

/// Uniform(−bound, bound) entries.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, v).expect("shape product")
}

/// Glorot-uniform `fan_in × fan_out` matrix.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}
