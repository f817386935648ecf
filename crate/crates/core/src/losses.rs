//! Training objectives: pyramid reconstruction, perceptual, style and
//! relativistic average least-squares adversarial losses.
//!
//! All norms are means over elements.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use twostream_autograd::{ConvSpec, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

/// Seed of the default random-convolution extractor.
pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;
/// Widths of the default extractor's five stages.
pub const RANDOM_WIDTHS: [usize; 5] = [16, 32, 64, 64, 64];
/// VGG16 `features` indices whose ReLU outputs are tapped (relu1_1 .. relu5_1).
pub const VGG_TAPS: [usize; 5] = [1, 6, 11, 18, 25];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Any loss above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_py: f64,
    pub w_per: f64,
    pub w_sty: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_py: 1.0,
            w_per: 0.1,
            w_sty: 250.0,
            w_adv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_py", self.w_py),
            ("w_per", self.w_per),
            ("w_sty", self.w_sty),
            ("w_adv", self.w_adv),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }
}

/// One operation of a frozen feature extractor.
#[derive(Debug, Clone)]
pub enum ExtractorOp<T: Real> {
    /// 3x3 same-padded convolution.
    Conv { weight: Tensor<T>, bias: Tensor<T> },
    Relu,
    MaxPool,
    /// Per-channel `x * scale + shift`.
    Affine { scale: Tensor<T>, shift: Tensor<T> },
}

/// Frozen multi-stage feature extractor; stage `i` continues from stage `i-1`
/// and its output is the feature map `phi_i`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T: Real> {
    pub stages: Vec<Vec<ExtractorOp<T>>>,
}

impl<T: Real> FeatureExtractor<T> {
    /// A single stage `phi(x) = x`.
    pub fn identity() -> Self {
        Self { stages: vec![Vec::new()] }
    }

    /// Deterministic five-stage random-convolution pyramid. Stage `i >= 2`
    /// begins with a 2x2 max pool, mirroring the VGG tap layout.
    pub fn random(seed: u64) -> Self {
        Self::random_with_widths(seed, &RANDOM_WIDTHS)
    }

    pub fn random_with_widths(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut stages = Vec::with_capacity(widths.len());
        for (i, &cout) in widths.iter().enumerate() {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let weight = Tensor::from_fn([cout, cin, 3, 3], |_| T::of(rng.gen_range(-bound..bound)));
            let bias = Tensor::zeros([1, cout, 1, 1]);
            let mut ops = Vec::new();
            if i > 0 {
                ops.push(ExtractorOp::MaxPool);
            }
            ops.push(ExtractorOp::Conv { weight, bias });
            ops.push(ExtractorOp::Relu);
            stages.push(ops);
            cin = cout;
        }
        Self { stages }
    }

    /// VGG16 convolutional trunk from a tensor container holding
    /// `features.{i}.weight` / `features.{i}.bias` in torchvision numbering.
    /// Inputs in `[-1, 1]` are mapped to `[0, 1]` and ImageNet-normalized.
    pub fn vgg16(path: &Path) -> Result<Self> {
        let file = crate::container::read_file(path)?;
        let tensors = file.tensors::<T>()?;
        let find = |name: String| -> Result<Tensor<T>> {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("{}: missing tensor {name}", path.display())))
        };
        // torchvision indices of the max pools
        let pools = [4usize, 9, 16, 23];
        let mut stages = Vec::new();
        let mut ops = vec![ExtractorOp::Affine {
            scale: Tensor::from_fn([1, 3, 1, 1], |[_, c, _, _]| T::of(0.5 / IMAGENET_STD[c])),
            shift: Tensor::from_fn([1, 3, 1, 1], |[_, c, _, _]| {
                T::of((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
            }),
        }];
        for idx in 0..=VGG_TAPS[4] {
            if pools.contains(&idx) {
                ops.push(ExtractorOp::MaxPool);
            } else if VGG_TAPS.contains(&idx) || is_vgg_relu(idx) {
                ops.push(ExtractorOp::Relu);
                if VGG_TAPS.contains(&idx) {
                    stages.push(std::mem::take(&mut ops));
                }
            } else {
                let weight = find(format!("features.{idx}.weight"))?;
                let b = find(format!("features.{idx}.bias"))?;
                let n = b.numel();
                let bias = b.reshape([1, n, 1, 1]).map_err(Error::Graph)?;
                ops.push(ExtractorOp::Conv { weight, bias });
            }
        }
        Ok(Self { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// All parameter tensors, for freeze checks.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for op in self.stages.iter().flatten() {
            match op {
                ExtractorOp::Conv { weight, bias } => out.extend([weight, bias]),
                ExtractorOp::Affine { scale, shift } => out.extend([scale, shift]),
                _ => {}
            }
        }
        out
    }

    /// Stage outputs `phi_1(x) .. phi_n(x)`. Extractor weights enter `g` as constants.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for op in stage {
                h = match op {
                    ExtractorOp::Conv { weight, bias } => {
                        let w = g.constant(weight.clone());
                        let b = g.constant(bias.clone());
                        g.conv2d(h, w, Some(b), ConvSpec::same(3, 1))?
                    }
                    ExtractorOp::Relu => g.relu(h)?,
                    ExtractorOp::MaxPool => g.max_pool2(h)?,
                    ExtractorOp::Affine { scale, shift } => {
                        let s = g.constant(scale.clone());
                        let t = g.constant(shift.clone());
                        let y = g.mul(h, s)?;
                        g.add(y, t)?
                    }
                };
            }
            out.push(h);
        }
        Ok(out)
    }
}

fn is_vgg_relu(idx: usize) -> bool {
    const RELUS: [usize; 13] = [1, 3, 6, 8, 11, 13, 15, 18, 20, 22, 25, 27, 29];
    RELUS.contains(&idx)
}

/// `mean |a - b|`.
pub fn mean_abs<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Input(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    Ok(g.mean_all(d)?)
}

fn sum_vars<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant(Tensor::scalar(T::zero()))),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Sum over scales of `mean |h_l - gt_l|` for both streams. Level 1 is
/// compared as is; coarser predictions are clamped to `[-1, 1]` first.
/// Pass empty structure slices when the structure stream is absent.
pub fn pyramid_loss<T: Real>(
    g: &mut Graph<T>,
    detailed: &[Var],
    structure: &[Var],
    gt: &[Var],
    structure_gt: &[Var],
) -> Result<Var> {
    let mut terms = Vec::new();
    for (preds, targets, which) in [(detailed, gt, "detailed"), (structure, structure_gt, "structure")] {
        if preds.len() != targets.len() {
            return Err(Error::Input(format!(
                "{which} pyramid has {} scales, ground truth {}",
                preds.len(),
                targets.len()
            )));
        }
        for (l, (&p, &t)) in preds.iter().zip(targets).enumerate() {
            let p = if l == 0 { p } else { g.clamp(p, -1.0, 1.0)? };
            if g.shape(p) != g.shape(t) {
                return Err(Error::Input(format!(
                    "{which} pyramid level {}: {:?} vs {:?}",
                    l + 1,
                    g.shape(p),
                    g.shape(t)
                )));
            }
            terms.push(mean_abs(g, p, t)?);
        }
    }
    sum_vars(g, &terms)
}

/// `sum_i mean |phi_i(pred) - phi_i(gt)|` from precomputed features.
pub fn perceptual_from_features<T: Real>(g: &mut Graph<T>, pred: &[Var], gt: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(gt) {
        terms.push(mean_abs(g, p, t)?);
    }
    sum_vars(g, &terms)
}

/// `sum_i mean |G(phi_i(pred)) - G(phi_i(gt))|` from precomputed features.
pub fn style_from_features<T: Real>(g: &mut Graph<T>, pred: &[Var], gt: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(gt) {
        let gp = g.gram(p)?;
        let gt = g.gram(t)?;
        terms.push(mean_abs(g, gp, gt)?);
    }
    sum_vars(g, &terms)
}

pub fn perceptual_loss<T: Real>(g: &mut Graph<T>, ext: &FeatureExtractor<T>, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::Input(format!("{:?} vs {:?}", g.shape(pred), g.shape(gt))));
    }
    let fp = ext.features(g, pred)?;
    let ft = ext.features(g, gt)?;
    perceptual_from_features(g, &fp, &ft)
}

pub fn style_loss<T: Real>(g: &mut Graph<T>, ext: &FeatureExtractor<T>, pred: Var, gt: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::Input(format!("{:?} vs {:?}", g.shape(pred), g.shape(gt))));
    }
    let fp = ext.features(g, pred)?;
    let ft = ext.features(g, gt)?;
    style_from_features(g, &fp, &ft)
}

/// Normalized Gram matrices `(N, 1, C, C)`.
pub fn gram_matrix<T: Real>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    Ok(g.gram(f)?)
}

/// Relativistic average least-squares losses `(l_g, l_d)`:
///
/// ```text
/// l_d = E[(D_r - mean D_f - 1)^2] + E[(D_f - mean D_r + 1)^2]
/// l_g = E[(D_f - mean D_r - 1)^2] + E[(D_r - mean D_f + 1)^2]
/// ```
pub fn adversarial_losses<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    if g.shape(d_real) != g.shape(d_fake) {
        return Err(Error::Input(format!(
            "score maps {:?} vs {:?}",
            g.shape(d_real),
            g.shape(d_fake)
        )));
    }
    let mr = g.mean_all(d_real)?;
    let mf = g.mean_all(d_fake)?;
    let rel_r = g.sub(d_real, mf)?;
    let rel_f = g.sub(d_fake, mr)?;
    let sq_mean = |g: &mut Graph<T>, x: Var, off: f64| -> Result<Var> {
        let y = g.offset(x, off)?;
        let y = g.square(y)?;
        Ok(g.mean_all(y)?)
    };
    let d1 = sq_mean(g, rel_r, -1.0)?;
    let d2 = sq_mean(g, rel_f, 1.0)?;
    let l_d = g.add(d1, d2)?;
    let g1 = sq_mean(g, rel_f, -1.0)?;
    let g2 = sq_mean(g, rel_r, 1.0)?;
    let l_g = g.add(g1, g2)?;
    Ok((l_g, l_d))
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_py: f64,
    pub l_per_ms: f64,
    pub l_per_ss: f64,
    pub l_sty: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_py: f64,
    pub l_per_ms: f64,
    pub l_per_ss: f64,
    pub l_sty: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("l_py", self.l_py),
            ("l_per_ms", self.l_per_ms),
            ("l_per_ss", self.l_per_ss),
            ("l_sty", self.l_sty),
            ("l_adv_g", self.l_adv_g),
            ("l_adv_d", self.l_adv_d),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }
}

/// Weighted generator total and discriminator total, with a finiteness and
/// divergence check naming the offending term.
pub fn total_losses(w: &LossWeights, c: &LossComponents) -> Result<LossReport> {
    let report = LossReport {
        l_py: c.l_py,
        l_per_ms: c.l_per_ms,
        l_per_ss: c.l_per_ss,
        l_sty: c.l_sty,
        l_adv_g: c.l_adv_g,
        l_adv_d: c.l_adv_d,
        total_g: w.w_py * c.l_py + w.w_per * (c.l_per_ms + c.l_per_ss) + w.w_sty * c.l_sty + w.w_adv * c.l_adv_g,
        total_d: c.l_adv_d,
    };
    check_report(&report)?;
    Ok(report)
}

pub fn check_report(report: &LossReport) -> Result<()> {
    for (name, v) in report.terms() {
        if v.is_nan() {
            return Err(Error::Training(format!("loss term {name} is NaN")));
        }
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Training(format!("loss term {name} diverged: {v}")));
        }
    }
    Ok(())
}

/// Graph handles of every generator loss term.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub l_py: Var,
    pub l_per_ms: Var,
    pub l_per_ss: Option<Var>,
    pub l_sty: Var,
    pub l_adv_g: Var,
    pub total: Var,
}

/// Records the weighted generator objective.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    ext: &FeatureExtractor<T>,
    detailed: &[Var],
    structure: &[Var],
    gt_pyramid: &[Var],
    structure_gt_pyramid: &[Var],
    l_adv_g: Var,
) -> Result<GeneratorTerms> {
    let l_py = pyramid_loss(g, detailed, structure, gt_pyramid, structure_gt_pyramid)?;
    let pred = *detailed.first().ok_or_else(|| Error::Internal("empty detailed pyramid".into()))?;
    let gt = gt_pyramid[0];
    let fp = ext.features(g, pred)?;
    let ft = ext.features(g, gt)?;
    let l_per_ms = perceptual_from_features(g, &fp, &ft)?;
    let l_sty = style_from_features(g, &fp, &ft)?;
    let l_per_ss = match structure.first() {
        Some(&s) => Some(perceptual_loss(g, ext, s, structure_gt_pyramid[0])?),
        None => None,
    };
    let mut total = g.scale(l_py, weights.w_py)?;
    let per = match l_per_ss {
        Some(s) => g.add(l_per_ms, s)?,
        None => l_per_ms,
    };
    for (term, w) in [(per, weights.w_per), (l_sty, weights.w_sty), (l_adv_g, weights.w_adv)] {
        let t = g.scale(term, w)?;
        total = g.add(total, t)?;
    }
    Ok(GeneratorTerms {
        l_py,
        l_per_ms,
        l_per_ss,
        l_sty,
        l_adv_g,
        total,
    })
}
