//! Geometric augmentation applied identically to every image of a sample.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use twostream_autograd::Tensor;

pub const FLIP_PROBABILITY: f64 = 0.5;

/// Mirror along the width axis.
pub fn hflip(t: &Tensor<f64>) -> Tensor<f64> {
    let w = t.shape().w();
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.get([n, c, y, w - 1 - x]))
}

/// Draws one flip decision.
pub fn draw_flip(rng: &mut ChaCha8Rng) -> bool {
    rng.gen_bool(FLIP_PROBABILITY)
}
