//! Image-quality metrics on the [0, 1] display range, per-bin evaluation and
//! the Fréchet distance between feature sets.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use twostream_autograd::Tensor;

use crate::data::mask::{bin_index, hole_ratio, MaskBin};
use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Maps network range [-1, 1] to display range [0, 1].
pub fn to_display(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| (v + 1.0) * 0.5)
}

fn same_shape(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Input(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::Input("empty images".into()));
    }
    Ok(())
}

/// `100 * mean |pred - gt|` over every pixel and channel.
pub fn l1_percent(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    same_shape(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(100.0 * s / pred.numel() as f64)
}

/// `100 * mean |pred - gt|` over hole pixels only, all channels.
pub fn masked_l1_percent(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (s, m) = (pred.shape(), mask.shape());
    if m.n() != s.n() || m.c() != 1 || m.h() != s.h() || m.w() != s.w() {
        return Err(Error::Input(format!("mask {m:?} for images {s:?}")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for n in 0..s.n() {
        let hole = mask.plane(n, 0);
        for c in 0..s.c() {
            for ((&a, &b), &k) in pred.plane(n, c).iter().zip(gt.plane(n, c)).zip(hole) {
                num += k * (a - b).abs();
                den += k;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Input("mask has no hole pixels".into()));
    }
    Ok(100.0 * num / den)
}

pub fn mse(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    same_shape(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(if m > 0.0 { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) } else { PSNR_CAP })
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable weighted filtering over the valid region.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..n).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean local SSIM with an 11x11 Gaussian window over the valid region,
/// averaged over channels and images.
pub fn ssim(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    same_shape(pred, gt)?;
    let s = pred.shape();
    if s.h() < SSIM_WINDOW || s.w() < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "images of {}x{} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            s.h(),
            s.w()
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            total += ssim_plane(pred.plane(n, c), gt.plane(n, c), s.h(), s.w(), &k);
        }
    }
    Ok(total / (s.n() * s.c()) as f64)
}

/// Anything that fills holes: takes an image in [-1, 1] and a binary mask,
/// both with batch size 1, and returns its raw prediction in [-1, 1].
pub trait Inpainter {
    fn inpaint(&self, image: &Tensor<f64>, mask: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Known pixels from `image`, predicted pixels inside the hole.
pub fn composite(image: &Tensor<f64>, mask: &Tensor<f64>, pred: &Tensor<f64>) -> Result<Tensor<f64>> {
    same_shape(image, pred)?;
    let s = image.shape();
    let m = mask.shape();
    if m.n() != s.n() || m.c() != 1 || m.h() != s.h() || m.w() != s.w() {
        return Err(Error::Input(format!("mask {m:?} for images {s:?}")));
    }
    Ok(Tensor::from_fn(s, |[n, c, y, x]| {
        let k = mask.get([n, 0, y, x]);
        (1.0 - k) * image.get([n, c, y, x]) + k * pred.get([n, c, y, x])
    }))
}

/// Averages for one group of images; metrics are `None` when it is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub label: String,
    pub n_images: usize,
    pub l1_percent: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct Accumulator {
    n: usize,
    l1: f64,
    psnr: f64,
    ssim: f64,
}

impl Accumulator {
    fn add(&mut self, l1: f64, psnr: f64, ssim: f64) {
        self.n += 1;
        self.l1 += l1;
        self.psnr += psnr;
        self.ssim += ssim;
    }

    fn report(&self, label: String) -> BinReport {
        let avg = |s: f64| (self.n > 0).then(|| s / self.n as f64);
        BinReport {
            label,
            n_images: self.n,
            l1_percent: avg(self.l1),
            psnr_db: avg(self.psnr),
            ssim: avg(self.ssim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bins: Vec<BinReport>,
    pub overall: BinReport,
    /// Masks whose hole ratio falls outside every bin; counted in `overall` only.
    pub unbinned: usize,
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl EvalReport {
    /// Rows are metrics, columns are hole-ratio bins.
    pub fn to_table(&self) -> String {
        let cols: Vec<&BinReport> = self.bins.iter().chain(std::iter::once(&self.overall)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "metric");
        for c in &cols {
            let _ = write!(out, "{:>12}", c.label);
        }
        out.push('\n');
        let rows: [(&str, fn(&BinReport) -> String); 4] = [
            ("L1 (%)", |b| cell(b.l1_percent, 3)),
            ("PSNR", |b| cell(b.psnr_db, 2)),
            ("SSIM", |b| cell(b.ssim, 4)),
            ("images", |b| b.n_images.to_string()),
        ];
        for (name, f) in rows {
            let _ = write!(out, "{name:<10}");
            for c in &cols {
                let _ = write!(out, "{:>12}", f(c));
            }
            out.push('\n');
        }
        out
    }

    /// One `key = value` line per figure, `null` for empty bins.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let v = |x: Option<f64>| x.map_or_else(|| "null".to_string(), |x| format!("{x}"));
        for b in self.bins.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(out, "{}.n_images = {}", b.label, b.n_images);
            let _ = writeln!(out, "{}.l1_percent = {}", b.label, v(b.l1_percent));
            let _ = writeln!(out, "{}.psnr_db = {}", b.label, v(b.psnr_db));
            let _ = writeln!(out, "{}.ssim = {}", b.label, v(b.ssim));
        }
        let _ = writeln!(out, "unbinned = {}", self.unbinned);
        out
    }
}

/// Scores the composited output for each image/mask pair and averages per
/// hole-ratio bin. Images are in [-1, 1]; metrics use the display range.
pub fn evaluate(
    model: &dyn Inpainter,
    images: &[Tensor<f64>],
    masks: &[Tensor<f64>],
    bins: &[MaskBin],
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Input("no images to evaluate".into()));
    }
    if images.len() != masks.len() {
        return Err(Error::Input(format!("{} images and {} masks", images.len(), masks.len())));
    }
    let mut per_bin = vec![Accumulator::default(); bins.len()];
    let mut overall = Accumulator::default();
    let mut unbinned = 0;
    for (image, mask) in images.iter().zip(masks) {
        let pred = model.inpaint(image, mask)?;
        let out = to_display(&composite(image, mask, &pred)?);
        let gt = to_display(image);
        let (l1, p, s) = (l1_percent(&out, &gt)?, psnr(&out, &gt)?, ssim(&out, &gt)?);
        overall.add(l1, p, s);
        match bin_index(bins, hole_ratio(mask)) {
            Some(i) => per_bin[i].add(l1, p, s),
            None => unbinned += 1,
        }
    }
    Ok(EvalReport {
        bins: per_bin.iter().zip(bins).map(|(a, b)| a.report(b.label())).collect(),
        overall: overall.report("all".into()),
        unbinned,
    })
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    /// Rows are samples; the covariance uses the `n - 1` normalization.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Input(format!("{n} feature vectors; at least 2 are needed")));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Input("feature vectors must share a nonzero length".into()));
        }
        let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = sym.symmetric_eigen();
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Input(format!(
            "feature dimensions {} and {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = sqrt_psd(&a.cov);
    let cross = sqrt_psd(&(&sa * &b.cov * &sa));
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace()).max(0.0))
}
