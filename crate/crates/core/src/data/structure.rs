//! Structure labels: edge-preserving smoothing by iterated joint bilateral
//! filtering, `J_0 = I`, `J_{t+1} = JBF(I, guide = J_t)`.

use twostream_autograd::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    pub iterations: usize,
    pub sigma_spatial: f64,
    /// Range sigma on the `[-1, 1]` pixel scale, applied to RGB Euclidean distance.
    pub sigma_range: f64,
    pub radius: usize,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            iterations: 3,
            sigma_spatial: 3.0,
            sigma_range: 0.1,
            radius: 9,
        }
    }
}

pub fn structure_label(image: &Tensor<f64>) -> Result<Tensor<f64>> {
    smooth(image, &SmoothingParams::default())
}

pub fn smooth(image: &Tensor<f64>, p: &SmoothingParams) -> Result<Tensor<f64>> {
    let s = image.shape();
    if s.n() != 1 {
        return Err(Error::Input(format!("structure label of batch {s:?}")));
    }
    let mut guide = image.clone();
    for _ in 0..p.iterations {
        guide = joint_bilateral(image, &guide, p);
    }
    Ok(guide)
}

/// One joint bilateral pass filtering `src` with range weights from `guide`.
pub fn joint_bilateral(src: &Tensor<f64>, guide: &Tensor<f64>, p: &SmoothingParams) -> Tensor<f64> {
    let s = src.shape();
    let (c, h, w) = (s.c(), s.h(), s.w());
    let r = p.radius as isize;
    let side = 2 * p.radius + 1;
    let spatial: Vec<f64> = (0..side * side)
        .map(|k| {
            let (dy, dx) = ((k / side) as f64 - r as f64, (k % side) as f64 - r as f64);
            (-(dy * dy + dx * dx) / (2.0 * p.sigma_spatial * p.sigma_spatial)).exp()
        })
        .collect();
    let inv_range = 1.0 / (2.0 * p.sigma_range * p.sigma_range);
    let plane = h * w;
    let (sd, gd) = (src.data(), guide.data());
    let mut out = vec![0.0; c * plane];
    let mut acc = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let centre = y * w + x;
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut norm = 0.0;
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let q = yy as usize * w + xx as usize;
                    let d2: f64 = (0..c)
                        .map(|ch| {
                            let d = gd[ch * plane + centre] - gd[ch * plane + q];
                            d * d
                        })
                        .sum();
                    let k = ((dy + r) as usize) * side + (dx + r) as usize;
                    let wgt = spatial[k] * (-d2 * inv_range).exp();
                    norm += wgt;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wgt * (sd[ch * plane + q] - sd[ch * plane + centre]);
                    }
                }
            }
            // accumulated relative to the centre so flat regions are reproduced exactly
            for (ch, a) in acc.iter().enumerate() {
                out[ch * plane + centre] = sd[ch * plane + centre] + a / norm;
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// Anisotropic total variation: sum of absolute neighbor differences.
pub fn total_variation(t: &Tensor<f64>) -> f64 {
    let s = t.shape();
    let mut tv = 0.0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            let p = t.plane(n, c);
            for y in 0..s.h() {
                for x in 0..s.w() {
                    let v = p[y * s.w() + x];
                    if x + 1 < s.w() {
                        tv += (p[y * s.w() + x + 1] - v).abs();
                    }
                    if y + 1 < s.h() {
                        tv += (p[(y + 1) * s.w() + x] - v).abs();
                    }
                }
            }
        }
    }
    tv
}
