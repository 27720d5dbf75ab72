#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vimf::autodiff::{self as ad, Var};
use vimf::params::stream_rng;
use vimf::Tensor;

pub fn rng(tag: &str) -> ChaCha8Rng {
    stream_rng(0, tag)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ y ⊙ r` for a fixed random `r`, so no output entry cancels another.
pub fn probe(y: &Var, seed: u64) -> vimf::Result<Var> {
    let mut g = stream_rng(seed, "probe");
    let r = random(&mut g, &y.shape());
    Ok(ad::sum(&ad::mul(y, &y.tape().constant(r))?))
}
