//! Central finite differences, used as an oracle for analytic gradients.

use crate::tensor::Tensor;

/// Numerical gradient of `f` with respect to each tensor in `inputs`.
///
/// `skip(input, flat_index)` may exclude coordinates (e.g. max-pool ties);
/// excluded entries are reported as NaN.
pub fn central_difference(
    inputs: &[Tensor<f64>],
    step: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
    skip: impl Fn(usize, usize) -> bool,
) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].numel() {
            if skip(t, i) {
                grad.data_mut()[i] = f64::NAN;
                continue;
            }
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let up = f(&work);
            work[t].data_mut()[i] = orig - step;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm, ignoring NaN entries of
/// `numeric`. Two all-zero gradients compare as 0.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        if n.is_nan() {
            continue;
        }
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
