//! Parameter initializers and per-name random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

/// Independent generator for `(seed, label)`.
///
/// Each parameter draws from its own stream keyed by name, so adding or
/// removing a component leaves every other tensor's initial values intact.
pub fn named_rng(seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))` for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    assert_eq!(shape.len(), 2, "xavier init expects a matrix");
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let n = shape[0] * shape[1];
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect())
}
