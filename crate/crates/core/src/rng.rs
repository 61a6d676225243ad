//! Seed derivation and array sampling.
//!
//! Every random draw in the crate flows through a ChaCha stream derived from
//! an explicit seed plus a purpose path, so runs replay bitwise and resuming
//! a training run mid-stage needs no serialized generator state.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a stream seed from a base seed and a purpose path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = mix64(seed ^ 0xd1b54a32d192ed03);
    for &p in path {
        h = mix64(h ^ p);
    }
    h
}

pub fn rng_from(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn rand_uniform(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}
