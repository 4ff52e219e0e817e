//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let d = Uniform::new_inclusive(-bound, bound).expect("valid uniform bound");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Kaiming-uniform style bound `1/sqrt(fan_in)`, as used for conv and linear layers.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}
