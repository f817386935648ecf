//! Procedural test images: a smooth two-color gradient, a few flat shapes
//! and a faint periodic texture.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostream_autograd::Tensor;

use crate::data::image_io::{from_unit, save_image, to_unit};
use crate::error::Result;

const TEXTURE_AMPLITUDE: f64 = 0.04;

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(-0.9..0.9))
}

/// `(1, 3, H, W)` image quantized to the 8-bit grid, so it survives a PNG
/// round trip unchanged.
pub fn synthetic_image(rng: &mut ChaCha8Rng, [h, w]: [usize; 2]) -> Tensor<f64> {
    let (c0, c1) = (color(rng), color(rng));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let count = rng.gen_range(2..=4);
    let side = h.min(w) as f64;
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                let (y0, x0) = (rng.gen_range(0.0..h as f64 * 0.7), rng.gen_range(0.0..w as f64 * 0.7));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(side * 0.15..side * 0.45),
                    x1: x0 + rng.gen_range(side * 0.15..side * 0.45),
                }
            } else {
                Shape::Disc {
                    cy: rng.gen_range(0.0..h as f64),
                    cx: rng.gen_range(0.0..w as f64),
                    r: rng.gen_range(side * 0.1..side * 0.3),
                }
            };
            (shape, color(rng))
        })
        .collect();
    let freq = rng.gen_range(0.6..1.4);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = ((yf / h as f64 - 0.5) * dy + (xf / w as f64 - 0.5) * dx + 0.5).clamp(0.0, 1.0);
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for (shape, col) in &shapes {
            if shape.contains(yf, xf) {
                v = col[c];
            }
        }
        v += TEXTURE_AMPLITUDE * (freq * xf + phase).sin() * (freq * yf).cos();
        to_unit(from_unit(v.clamp(-1.0, 1.0)))
    })
}

/// Writes `count` images named `img_000.png`, ... into `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: [usize; 2], seed: u64) -> Result<Vec<PathBuf>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:03}.png"));
            save_image(&synthetic_image(&mut rng, size), &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_image(&mut ChaCha8Rng::seed_from_u64(4), [32, 48]);
        let b = synthetic_image(&mut ChaCha8Rng::seed_from_u64(4), [32, 48]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.data().iter().all(|&v| to_unit(from_unit(v)) == v));
    }
}
