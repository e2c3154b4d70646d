use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

/// Glorot/Xavier uniform: `U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// He/Kaiming normal with standard deviation `√(2/fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}
