//! Tensor-to-pixel conversions for the diagnostic images.

use twostream_core::Tensor;

/// Channel mean of the first batch item, min-max normalized to [0, 255].
/// A constant map renders as flat 128.
pub fn gate_pixels(gate: &Tensor<f64>) -> (Vec<u8>, [usize; 2]) {
    let s = gate.shape();
    let (h, w, c) = (s.h(), s.w(), s.c());
    let mean: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| gate.get([0, ch, i / w, i % w])).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi - lo > 1e-12 {
        mean.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    } else {
        vec![128; h * w]
    };
    (pixels, [h, w])
}

pub fn clamp_unit(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.clamp(-1.0, 1.0))
}

pub fn gate_file(level: usize) -> String {
    format!("gate_level{level}.png")
}

pub fn pyramid_file(stream: &str, level: usize) -> String {
    format!("{stream}_level{level}.png")
}
