//! Free-form brush-stroke masks and hole-ratio bins.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use twostream_autograd::Tensor;

use crate::error::{Error, Result};

pub const MAX_TRIES: usize = 100;

/// Hole-to-image area ratio interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskBin {
    pub lower: f64,
    pub upper: f64,
}

impl MaskBin {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lower) || !(upper > lower && upper <= 1.0) {
            return Err(Error::Config(format!("mask bin [{lower}, {upper}]")));
        }
        Ok(Self { lower, upper })
    }

    /// Closed-interval membership.
    pub fn contains(&self, ratio: f64) -> bool {
        ratio >= self.lower && ratio <= self.upper
    }

    pub fn label(&self) -> String {
        format!("{:.0}-{:.0}%", self.lower * 100.0, self.upper * 100.0)
    }
}

impl std::str::FromStr for MaskBin {
    type Err = Error;

    /// `"0.1-0.2"` or `"10-20%"`.
    fn from_str(s: &str) -> Result<Self> {
        let (body, denom) = match s.strip_suffix('%') {
            Some(b) => (b, 100.0),
            None => (s, 1.0),
        };
        let (a, b) = body
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("mask bin {s:?} is not lower-upper")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("mask bin {s:?}")))
        };
        MaskBin::new(parse(a)? / denom, parse(b)? / denom)
    }
}

/// The four evaluation bins 10-20% .. 40-50%.
pub fn default_bins() -> Vec<MaskBin> {
    (1..=4)
        .map(|i| MaskBin {
            lower: i as f64 / 10.0,
            upper: (i + 1) as f64 / 10.0,
        })
        .collect()
}

/// Index of the bin holding `ratio`, using half-open `[lower, upper)`
/// intervals except that the last bin also holds its upper edge.
pub fn bin_index(bins: &[MaskBin], ratio: f64) -> Option<usize> {
    let last = bins.len().checked_sub(1)?;
    bins.iter().enumerate().position(|(i, b)| {
        ratio >= b.lower && (ratio < b.upper || (i == last && ratio <= b.upper))
    })
}

pub fn hole_ratio(mask: &Tensor<f64>) -> f64 {
    mask.data().iter().filter(|&&v| v > 0.5).count() as f64 / mask.numel() as f64
}

pub fn is_binary(mask: &Tensor<f64>) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<bool>,
    holes: usize,
}

impl Canvas {
    fn ratio(&self) -> f64 {
        self.holes as f64 / (self.h * self.w) as f64
    }

    fn stamp(&mut self, cy: f64, cx: f64, r: f64) {
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, (cy + r).ceil().min(self.h as f64 - 1.0));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, (cx + r).ceil().min(self.w as f64 - 1.0));
        if y1 < 0.0 || x1 < 0.0 {
            return;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r * r {
                    let p = &mut self.px[y * self.w + x];
                    if !*p {
                        *p = true;
                        self.holes += 1;
                    }
                }
            }
        }
    }
}

/// One attempt: strokes of disc stamps along random polylines, stopping as
/// soon as the hole ratio reaches `bin.lower` (and is nonzero).
fn attempt(rng: &mut ChaCha8Rng, [h, w]: [usize; 2], bin: &MaskBin) -> Canvas {
    let mut c = Canvas {
        h,
        w,
        px: vec![false; h * w],
        holes: 0,
    };
    let side = h.min(w) as f64;
    let max_r = (side / 12.0).max(1.0);
    let done = |c: &Canvas| c.holes > 0 && c.ratio() >= bin.lower;
    while !done(&c) {
        let mut y = rng.gen_range(0.0..h as f64);
        let mut x = rng.gen_range(0.0..w as f64);
        let r = rng.gen_range(1.0..=max_r);
        let vertices = rng.gen_range(3..10);
        let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
        'stroke: for _ in 0..vertices {
            angle += rng.gen_range(-1.2..1.2);
            let len = rng.gen_range(side / 16.0..side / 4.0);
            let steps = len.ceil() as usize;
            for _ in 0..steps {
                c.stamp(y, x, r);
                if done(&c) {
                    break 'stroke;
                }
                y = (y + angle.sin()).clamp(0.0, h as f64 - 1.0);
                x = (x + angle.cos()).clamp(0.0, w as f64 - 1.0);
            }
        }
    }
    c
}

/// Binary `(1, 1, H, W)` mask whose hole ratio lies in `bin` and in `(0, 1)`.
pub fn generate_irregular_mask(rng: &mut ChaCha8Rng, size: [usize; 2], bin: &MaskBin) -> Result<Tensor<f64>> {
    let [h, w] = size;
    if h == 0 || w == 0 {
        return Err(Error::Input(format!("mask size {h}x{w}")));
    }
    let mut last = 0.0;
    for _ in 0..MAX_TRIES {
        let c = attempt(rng, size, bin);
        last = c.ratio();
        if bin.contains(last) && last > 0.0 && last < 1.0 {
            return Ok(Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| {
                if c.px[y * w + x] {
                    1.0
                } else {
                    0.0
                }
            }));
        }
    }
    Err(Error::Generation(format!(
        "no mask in [{}, {}] after {MAX_TRIES} tries on {h}x{w} (last ratio {last:.4})",
        bin.lower, bin.upper
    )))
}
