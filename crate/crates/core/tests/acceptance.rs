//! One test per acceptance criterion; each prints a PASS/FAIL line before asserting.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{check_gradients, no_skip, random_tensor, worst, GradError};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twostream_autograd::{Graph, Tensor, Var};
use twostream_core::blocks::{
    AdaptiveFusion, ChannelAttention, GatedUnit, NormKind, ResidualDilatedBlock, SpatialAttention,
};
use twostream_core::data::image_io::{load_mask, save_mask};
use twostream_core::data::mask::is_binary;
use twostream_core::data::synthetic::synthetic_image;
use twostream_core::data::{default_bins, generate_irregular_mask, hole_ratio, Dataset, MaskBin, MaskSource};
use twostream_core::losses::{
    adversarial_losses, gram_matrix, perceptual_loss, pyramid_loss, style_loss, ExtractorOp, FeatureExtractor,
    LossReport,
};
use twostream_core::metrics::{self, evaluate, l1_percent, masked_l1_percent, psnr, ssim, to_display};
use twostream_core::network::{Discriminator, ForwardOptions, Generator, NetworkConfig};
use twostream_core::params::{Bound, Init, ParamStore};
use twostream_core::training::{load_checkpoint, save_checkpoint, Sampling, TrainConfig, TrainState};

/// Written straight to stdout so the line survives the test harness's output capture.
fn report(n: usize, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {n} ({name}): {} | {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes()).and_then(|_| out.flush());
}

/// Builds a block into a fresh store and replaces every parameter with
/// uniform noise in [-0.5, 0.5].
fn random_block<B>(seed: u64, build: impl FnOnce(&mut Init<'_, f64>) -> B) -> (B, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = build(&mut Init::new(&mut store, &mut rng));
    for t in store.tensors_mut() {
        *t = random_tensor(&mut rng, t.shape()).map(|v| v * 0.5);
    }
    (block, store)
}

fn inputs(seed: u64, shapes: &[[usize; 4]]) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|&s| random_tensor(&mut rng, s)).collect()
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut results: Vec<(&str, Vec<GradError>, f64)> = Vec::new();
    let strict = 1e-5;

    let (gu, p) = random_block(1, |i| GatedUnit::new(i, 2).unwrap());
    let e = check_gradients(&p, &inputs(11, &[[1, 2, 4, 4]]), 21, no_skip, |g, b, x| {
        let r = gu.forward(g, b, x[0]).unwrap();
        g.concat(&[r.gated, r.gate]).unwrap()
    });
    results.push(("gated unit", e, strict));

    // positive squeeze bias keeps the hidden units active
    let (ca, mut p) = random_block(2, |i| ChannelAttention::new(i, 8, 4).unwrap());
    let sb = ca.squeeze.bias.unwrap();
    *p.get_mut(sb) = p.get(sb).map(|v| v.abs() + 0.2);
    let e = check_gradients(&p, &inputs(12, &[[1, 8, 4, 4]]), 22, no_skip, |g, b, x| {
        ca.forward(g, b, x[0]).unwrap()
    });
    results.push(("channel attention", e, strict));

    // channel-max ties within the difference step are excluded
    let (sa, p) = random_block(3, |i| SpatialAttention::new(i).unwrap());
    let x = inputs(13, &[[1, 2, 4, 4]]);
    let np = p.len();
    let tied: Vec<usize> = (0..16).filter(|&k| (x[0].data()[k] - x[0].data()[16 + k]).abs() < 4.0 * common::FD_STEP).collect();
    let e = check_gradients(
        &p,
        &x,
        23,
        |t, i| t == np && tied.contains(&(i % 16)),
        |g, b, x| sa.forward(g, b, x[0]).unwrap(),
    );
    results.push(("spatial attention", e, strict));

    let (afb, p) = random_block(4, |i| AdaptiveFusion::new(i, 2, 2, 4, 4).unwrap());
    let e = check_gradients(&p, &inputs(14, &[[1, 2, 4, 4], [1, 2, 4, 4]]), 24, no_skip, |g, b, x| {
        afb.forward(g, b, x[0], x[1]).unwrap()
    });
    results.push(("adaptive fusion", e, strict));

    let (res, p) = random_block(5, |i| ResidualDilatedBlock::new(i, 2, NormKind::Instance).unwrap());
    let e = check_gradients(&p, &inputs(15, &[[1, 2, 8, 8]]), 25, no_skip, |g, b, x| {
        res.forward(g, b, x[0]).unwrap()
    });
    results.push(("residual dilated block", e, strict));

    let mut cfg = NetworkConfig::tiny(8, 2, 4);
    cfg.disc_channels = vec![2, 2, 2, 2, 2];
    let (disc, p) = random_block(6, |i| Discriminator::build(&cfg, i).unwrap());
    let mut spectral = disc.init_spectral(&mut ChaCha8Rng::seed_from_u64(7));
    disc.power_iterate(&p, &mut spectral, 5);
    let e = check_gradients(&p, &inputs(16, &[[1, 3, 8, 8], [1, 1, 8, 8]]), 26, no_skip, |g, b, x| {
        disc.forward(g, b, &spectral, x[0], x[1]).unwrap()
    });
    results.push(("discriminator", e, strict));

    let empty = ParamStore::<f64>::new();
    let pyr = inputs(17, &[[1, 3, 8, 8], [1, 3, 4, 4], [1, 3, 8, 8], [1, 3, 4, 4]]);
    let pyr: Vec<Tensor<f64>> = pyr.into_iter().map(|t| t.map(|v| v * 0.9)).collect();
    let gts = inputs(18, &[[1, 3, 8, 8], [1, 3, 4, 4], [1, 3, 8, 8], [1, 3, 4, 4]]);
    let e = check_gradients(&empty, &pyr, 27, no_skip, |g, _, x| {
        let t: Vec<Var> = gts.iter().map(|t| g.constant(t.clone())).collect();
        pyramid_loss(g, &x[..2], &x[2..], &t[..2], &t[2..]).unwrap()
    });
    results.push(("pyramid loss", e, strict));

    let ext = FeatureExtractor::<f64>::random_with_widths(31, &[4, 4, 4]);
    let gt = inputs(19, &[[1, 3, 8, 8]]).remove(0);
    let pred = inputs(20, &[[1, 3, 8, 8]]);
    let e = check_gradients(&empty, &pred, 28, no_skip, |g, _, x| {
        let t = g.constant(gt.clone());
        perceptual_loss(g, &ext, x[0], t).unwrap()
    });
    results.push(("perceptual loss", e, strict));
    let e = check_gradients(&empty, &pred, 29, no_skip, |g, _, x| {
        let t = g.constant(gt.clone());
        style_loss(g, &ext, x[0], t).unwrap()
    });
    results.push(("style loss", e, strict));

    let scores = inputs(21, &[[1, 1, 2, 2], [1, 1, 2, 2]]);
    let e = check_gradients(&empty, &scores, 30, no_skip, |g, _, x| {
        let (l_g, l_d) = adversarial_losses(g, x[0], x[1]).unwrap();
        g.concat(&[l_g, l_d]).unwrap()
    });
    results.push(("adversarial losses", e, strict));

    let e = check_gradients(&empty, &inputs(22, &[[1, 4, 8, 8]]), 31, no_skip, |g, _, x| {
        gram_matrix(g, x[0]).unwrap()
    });
    results.push(("gram matrix", e, strict));

    let elapsed = start.elapsed();
    let mut ok = elapsed < Duration::from_secs(60);
    let mut parts = Vec::new();
    let mut vanishing = Vec::new();
    for (name, errs, tol) in &results {
        ok &= !errs.is_empty() && errs.iter().all(|e| e.passes(*tol));
        parts.push(format!("{name} {:.1e}", worst(errs)));
        vanishing.extend(errs.iter().filter(|e| e.vanishes()).map(|e| format!("{name}/{}", e.name)));
    }
    ok &= vanishing.is_empty();
    report(
        1,
        "gradient suite",
        ok,
        &format!(
            "worst relative error per check: {}; identically zero gradients (both norms < {:.0e}): [{}]; {:.1}s",
            parts.join(", "),
            common::ZERO_GRAD,
            vanishing.join(", "),
            elapsed.as_secs_f64()
        ),
    );
    for (name, errs, tol) in &results {
        for e in errs {
            assert!(e.passes(*tol), "{name}/{}: {:.3e}", e.name, e.rel_error);
        }
    }
    assert!(ok);
}

fn unrolled(w: &Tensor<f64>) -> DMatrix<f64> {
    let s = w.shape();
    let cols = s.c() * s.h() * s.w();
    DMatrix::from_fn(s.n(), cols, |r, c| w.data()[r * cols + c])
}

#[test]
fn criterion_2_invariant_suite() {
    let start = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40);

    // gate range, on block inputs of growing magnitude and inside a forward pass
    let (gu, p) = random_block(41, |i| GatedUnit::new(i, 3).unwrap());
    let mut gate_extremes = (1.0f64, 0.0f64);
    for scale in [0.1, 1.0, 5.0] {
        let mut g = Graph::<f64>::new();
        let b = Bound::new(&mut g, &p, false);
        let x = g.constant(random_tensor(&mut rng, [2, 3, 6, 6]).map(|v| v * scale));
        let r = gu.forward(&mut g, &b, x).unwrap();
        for &v in g.value(r.gate).data() {
            gate_extremes = (gate_extremes.0.min(v), gate_extremes.1.max(v));
        }
    }
    let cfg = NetworkConfig::tiny(32, 3, 4);
    let (gen, gp) = Generator::init::<f64>(&cfg, 42).unwrap();
    let mut g = Graph::<f64>::new();
    let b = Bound::new(&mut g, &gp, false);
    let img = g.constant(random_tensor(&mut rng, [1, 3, 32, 32]));
    let mask = g.constant(common::random_mask(&mut rng, [32, 32]));
    let r = gen.forward(&mut g, &b, img, mask, ForwardOptions::default()).unwrap();
    for &gm in r.gate_maps() {
        for &v in g.value(gm).data() {
            gate_extremes = (gate_extremes.0.min(v), gate_extremes.1.max(v));
        }
    }
    if !(gate_extremes.0 > 0.0 && gate_extremes.1 < 1.0) {
        failures.push(format!("gate range {gate_extremes:?}"));
    }

    // fusion output between its two attention branches, entrywise
    let mut fusion_violation = 0.0f64;
    for seed in 0..4 {
        let (afb, mut p) = random_block(43 + seed, |i| AdaptiveFusion::new(i, 3, 2, 4, 4).unwrap());
        *p.get_mut(afb.alpha_raw) = Tensor::scalar(seed as f64 - 1.5);
        let mut g = Graph::<f64>::new();
        let b = Bound::new(&mut g, &p, false);
        let x = g.constant(random_tensor(&mut rng, [2, 3, 5, 5]));
        let s = g.constant(random_tensor(&mut rng, [2, 2, 5, 5]));
        let parts = afb.forward_parts(&mut g, &b, x, s).unwrap();
        let (c, sp, o) = (g.value(parts.channel), g.value(parts.spatial), g.value(parts.output));
        for ((&a, &bb), &y) in c.data().iter().zip(sp.data()).zip(o.data()) {
            let slack = 1e-15 * a.abs().max(bb.abs());
            fusion_violation = fusion_violation.max(a.min(bb) - y - slack).max(y - a.max(bb) - slack);
        }
    }
    if fusion_violation > 0.0 {
        failures.push(format!("fusion bound exceeded by {fusion_violation:e}"));
    }

    // Gram symmetry and positive semi-definiteness
    let mut g = Graph::<f64>::new();
    let f = g.constant(random_tensor(&mut rng, [2, 6, 5, 7]));
    let gram = gram_matrix(&mut g, f).unwrap();
    let gv = g.value(gram).clone();
    let (mut asym, mut min_eig) = (0.0f64, f64::INFINITY);
    for n in 0..2 {
        let m = DMatrix::from_fn(6, 6, |i, j| gv.get([n, 0, i, j]));
        asym = asym.max((&m - m.transpose()).abs().max());
        min_eig = min_eig.min(m.symmetric_eigenvalues().min());
    }
    if asym > 1e-12 || min_eig < -1e-10 {
        failures.push(format!("gram asymmetry {asym:e}, min eigenvalue {min_eig:e}"));
    }

    // shape ladder
    for levels in [2, 3, 4] {
        let cfg = NetworkConfig::tiny(32, levels, 4);
        let (gen, gp) = Generator::init::<f64>(&cfg, 44).unwrap();
        let mut g = Graph::<f64>::new();
        let b = Bound::new(&mut g, &gp, false);
        let img = g.constant(random_tensor(&mut rng, [1, 3, 32, 32]));
        let mask = g.constant(common::random_mask(&mut rng, [32, 32]));
        let r = gen.forward(&mut g, &b, img, mask, ForwardOptions::default()).unwrap();
        let enc = r.structure.as_ref().unwrap();
        let dec = r.ss_decoder.as_ref().unwrap();
        for l in 0..levels {
            if g.shape(enc.features[l]) != g.shape(r.ms_features[l]) {
                failures.push(format!("L={levels}: S^{} vs X^{}", l + 1, l + 1));
            }
            if g.shape(dec.features[l]) != g.shape(r.ms_decoder.features[l]) {
                failures.push(format!("L={levels}: S'^{} vs X'^{}", l + 1, l + 1));
            }
        }
    }

    // metric identities
    for _ in 0..3 {
        let x = random_tensor(&mut rng, [1, 3, 16, 16]).map(|v| (v + 1.0) * 0.5);
        let (s, l) = (ssim(&x, &x).unwrap(), l1_percent(&x, &x).unwrap());
        if (s - 1.0).abs() > 1e-12 || l != 0.0 {
            failures.push(format!("metric identities ssim {s} l1 {l}"));
        }
    }

    // spectral norm of every discriminator layer after power iteration
    let mut cfg = NetworkConfig::tiny(64, 4, 8);
    cfg.disc_channels = vec![8, 16, 16, 16, 16];
    let (disc, dp, mut spectral) = Discriminator::init::<f64>(&cfg, 45).unwrap();
    disc.power_iterate(&dp, &mut spectral, 200);
    let mut g = Graph::<f64>::new();
    let b = Bound::new(&mut g, &dp, false);
    let mut top = 0.0f64;
    for i in 0..disc.layers.len() {
        let w = disc.normalized_weight(&mut g, &b, &spectral, i).unwrap();
        let sv = unrolled(g.value(w)).singular_values();
        top = top.max(sv.max());
    }
    if top > 1.0 + 1e-3 {
        failures.push(format!("spectral norm {top}"));
    }

    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(120) {
        failures.push(format!("runtime {:.1}s", elapsed.as_secs_f64()));
    }
    let ok = failures.is_empty();
    report(
        2,
        "invariant suite",
        ok,
        &format!(
            "gates in [{:.4}, {:.4}], fusion slack {fusion_violation:.1e}, gram asym {asym:.1e} min eig {min_eig:.1e}, top singular value {top:.6}, {:.1}s{}",
            gate_extremes.0,
            gate_extremes.1,
            elapsed.as_secs_f64(),
            if ok { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );
    assert!(ok, "{failures:?}");
}

#[test]
fn criterion_3_causality_probe() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let cfg = NetworkConfig::tiny(32, 4, 4);
    let (gen, gp) = Generator::init::<f64>(&cfg, 51).unwrap();
    let image = random_tensor(&mut rng, [1, 3, 32, 32]);
    let mask = common::random_mask(&mut rng, [32, 32]);

    // structure-stream parameters perturbed: main-stream encoder unchanged
    let mut perturbed = gp.clone();
    let mut touched = 0;
    for prefix in ["ss.", "gu"] {
        perturbed.update_prefix(prefix, |_, t| {
            touched += 1;
            *t = t.map(|v| v + 0.3);
        });
    }
    let encode = |store: &ParamStore<f64>| {
        let mut g = Graph::<f64>::new();
        let b = Bound::new(&mut g, store, false);
        let (i, m) = (g.constant(image.clone()), g.constant(mask.clone()));
        let input = gen.network_input(&mut g, i, m).unwrap();
        let x = gen.ms_encode(&mut g, &b, input).unwrap();
        let s = gen.ss_encode(&mut g, &b, input, &x, ForwardOptions::default()).unwrap();
        let vals = |v: &[Var]| v.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
        (vals(&x), vals(&s.features))
    };
    let (x0, s0) = encode(&gp);
    let (x1, s1) = encode(&perturbed);
    let ms_identical = x0 == x1;
    let ss_moved = s0.iter().zip(&s1).all(|(a, b)| a != b);
    if touched == 0 || !ms_identical || !ss_moved {
        failures.push(format!("SS perturbation: {touched} tensors, MS identical {ms_identical}, SS moved {ss_moved}"));
    }

    // gradients of the main-stream encoder output never reach structure parameters
    let mut g = Graph::<f64>::new();
    let b = Bound::new(&mut g, &gp, true);
    let (i, m) = (g.constant(image.clone()), g.constant(mask.clone()));
    let input = gen.network_input(&mut g, i, m).unwrap();
    let x = gen.ms_encode(&mut g, &b, input).unwrap();
    let _ = gen.ss_encode(&mut g, &b, input, &x, ForwardOptions::default()).unwrap();
    let mut total = x[0];
    for &f in &x[1..] {
        let s = g.sum_all(f).unwrap();
        let t = g.sum_all(total).unwrap();
        total = g.add(s, t).unwrap();
    }
    let grads = g.backward(total).unwrap();
    let mut leaked = 0;
    for (id, name, _) in gp.iter() {
        if name.starts_with("ss.") || name.starts_with("gu") {
            if let Some(t) = grads.get(b[id]) {
                if t.data().iter().any(|&v| v != 0.0) {
                    leaked += 1;
                }
            }
        }
    }
    if leaked > 0 {
        failures.push(format!("{leaked} structure parameters receive main-stream encoder gradient"));
    }

    // perturbing X^l changes S^m exactly when m > l
    let levels = cfg.num_levels;
    let mut matrix = Vec::new();
    for l in 1..=levels {
        let mut g = Graph::<f64>::new();
        let b = Bound::new(&mut g, &gp, false);
        let (i, m) = (g.constant(image.clone()), g.constant(mask.clone()));
        let input = gen.network_input(&mut g, i, m).unwrap();
        let x = gen.ms_encode(&mut g, &b, input).unwrap();
        let base = gen.ss_encode(&mut g, &b, input, &x, ForwardOptions::default()).unwrap();
        let mut xp = x.clone();
        let noise = g.constant(random_tensor(&mut rng, g.shape(x[l - 1])));
        xp[l - 1] = g.add(x[l - 1], noise).unwrap();
        let moved = gen.ss_encode(&mut g, &b, input, &xp, ForwardOptions::default()).unwrap();
        let mut row = Vec::new();
        for mlev in 1..=levels {
            let (a, bb) = (g.value(base.features[mlev - 1]), g.value(moved.features[mlev - 1]));
            let diff = a.max_abs_diff(bb);
            row.push(diff);
            let expected_change = mlev > l;
            if expected_change != (diff != 0.0) {
                failures.push(format!("X^{l} -> S^{mlev}: max change {diff:e}"));
            }
        }
        matrix.push(row);
    }

    let ok = failures.is_empty();
    let rows: Vec<String> = matrix
        .iter()
        .enumerate()
        .map(|(l, r)| format!("X^{}:[{}]", l + 1, r.iter().map(|d| if *d == 0.0 { "0".into() } else { format!("{d:.1e}") }).collect::<Vec<_>>().join(" ")))
        .collect();
    report(
        3,
        "causality probe",
        ok,
        &format!("MS encoder bit-identical under SS perturbation {ms_identical}; change in S^1..S^L per perturbed X^l: {}", rows.join(" ")),
    );
    assert!(ok, "{failures:?}");
}

const OVERFIT_IMAGES: usize = 8;
const OVERFIT_SIZE: usize = 64;
const OVERFIT_STEPS: u64 = 500;
const OVERFIT_BASE: usize = 16;
const DATA_SEED: u64 = 0xda7a;
const HELD_OUT_SEED: u64 = 0x0e1d;

struct OverfitData {
    dataset: Dataset,
    masks: Vec<Tensor<f64>>,
}

fn overfit_data() -> &'static OverfitData {
    static DATA: OnceLock<OverfitData> = OnceLock::new();
    DATA.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(DATA_SEED);
        let size = [OVERFIT_SIZE, OVERFIT_SIZE];
        let images = (0..OVERFIT_IMAGES).map(|_| synthetic_image(&mut rng, size)).collect();
        let bin = MaskBin::new(0.1, 0.2).unwrap();
        let masks = (0..OVERFIT_IMAGES).map(|_| generate_irregular_mask(&mut rng, size, &bin).unwrap()).collect();
        OverfitData {
            dataset: Dataset::from_images(images).unwrap(),
            masks,
        }
    })
}

/// 8 images with one fixed mask each, full batch every step, no flips.
fn overfit_config(seed: u64, ms_only: bool) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.network = NetworkConfig::tiny(OVERFIT_SIZE, 4, OVERFIT_BASE);
    c.network.ablation.ms_only = ms_only;
    c.batch_size = OVERFIT_IMAGES;
    c.max_steps = OVERFIT_STEPS;
    c.data.flip = false;
    c.data.sampling = Sampling::Sequential;
    c
}

struct OverfitRun {
    reports: Vec<LossReport>,
    state: TrainState<f32>,
    elapsed: Duration,
    masked_l1: f64,
}

fn overfit_run(seed: u64, ms_only: bool) -> OverfitRun {
    let data = overfit_data();
    let masks = MaskSource::Fixed(data.masks.clone());
    let mut state = TrainState::<f32>::new(overfit_config(seed, ms_only)).unwrap();
    let start = Instant::now();
    let mut reports = Vec::new();
    while state.step < OVERFIT_STEPS {
        let batch = state.next_batch(&data.dataset, &masks).unwrap();
        reports.push(state.train_step(&batch).unwrap().report);
    }
    let elapsed = start.elapsed();
    let model = state.inference_model();
    let image = Tensor::cat_batch(&data.dataset.images.iter().collect::<Vec<_>>()).unwrap();
    let mask = Tensor::cat_batch(&data.masks.iter().collect::<Vec<_>>()).unwrap();
    let pred = model.predict(&image, &mask).unwrap();
    let masked_l1 = masked_l1_percent(&to_display(&pred.composited), &to_display(&image), &mask).unwrap();
    OverfitRun {
        reports,
        state,
        elapsed,
        masked_l1,
    }
}

fn full_seed_zero() -> &'static OverfitRun {
    static RUN: OnceLock<OverfitRun> = OnceLock::new();
    RUN.get_or_init(|| overfit_run(0, false))
}

#[test]
fn criterion_4_overfit_run() {
    let a = full_seed_zero();
    let b = overfit_run(0, false);
    let first = a.reports[0].l_py;
    let last = a.reports.last().unwrap().l_py;
    let ratio = last / first;
    let identical = a.reports == b.reports && a.state.gen_params == b.state.gen_params && a.state.disc_params == b.state.disc_params;
    let fast = a.elapsed < Duration::from_secs(15 * 60);
    let ok = ratio < 0.25 && a.masked_l1 < 5.0 && identical && fast;
    report(
        4,
        "overfit run",
        ok,
        &format!(
            "l_py {first:.4} -> {last:.4} (ratio {ratio:.4}, need < 0.25); masked L1% {:.3} (need < 5.0); repeat bit-identical {identical}; {:.0}s per run on one core",
            a.masked_l1,
            a.elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

struct TrainedInpainter(twostream_core::training::InferenceModel<f32>);

impl metrics::Inpainter for TrainedInpainter {
    fn inpaint(&self, image: &Tensor<f64>, mask: &Tensor<f64>) -> twostream_core::Result<Tensor<f64>> {
        self.0.inpaint(image, mask)
    }
}

fn held_out() -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(HELD_OUT_SEED);
    let size = [OVERFIT_SIZE, OVERFIT_SIZE];
    let bin = MaskBin::new(0.1, 0.2).unwrap();
    let images = (0..16).map(|_| synthetic_image(&mut rng, size)).collect();
    let masks = (0..16).map(|_| generate_irregular_mask(&mut rng, size, &bin).unwrap()).collect();
    (images, masks)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_5_ablation_ordering() {
    let (images, masks) = held_out();
    let bins = default_bins();
    let score = |run: &OverfitRun| {
        let model = TrainedInpainter(run.state.inference_model());
        evaluate(&model, &images, &masks, &bins).unwrap().overall.l1_percent.unwrap()
    };
    let (mut full, mut ms_only) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        full.push(if seed == 0 { score(full_seed_zero()) } else { score(&overfit_run(seed, false)) });
        ms_only.push(score(&overfit_run(seed, true)));
    }
    let (mf, mm) = (median(full.clone()), median(ms_only.clone()));
    let ok = mf <= mm;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    report(
        5,
        "ablation ordering",
        ok,
        &format!(
            "held-out L1% median full {mf:.4} vs ms_only {mm:.4}; per seed full [{}] ms_only [{}]",
            fmt(&full),
            fmt(&ms_only)
        ),
    );
    assert!(ok);
}

fn oracle_conv3x3(x: &[Vec<Vec<f64>>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = w.shape();
    let (h, wd) = (x[0].len(), x[0][0].len());
    let mut out = vec![vec![vec![0.0; wd]; h]; s.n()];
    for (o, plane) in out.iter_mut().enumerate() {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[o];
                for (c, xc) in x.iter().enumerate() {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.get([o, c, ky, kx]) * xc[iy as usize][ix as usize];
                            }
                        }
                    }
                }
                plane[y][xx] = acc;
            }
        }
    }
    out
}

fn oracle_features(ext: &FeatureExtractor<f64>, img: &Tensor<f64>) -> Vec<Vec<Vec<Vec<f64>>>> {
    let s = img.shape();
    let mut h: Vec<Vec<Vec<f64>>> =
        (0..s.c()).map(|c| (0..s.h()).map(|y| (0..s.w()).map(|x| img.get([0, c, y, x])).collect()).collect()).collect();
    let mut out = Vec::new();
    for stage in &ext.stages {
        for op in stage {
            h = match op {
                ExtractorOp::Conv { weight, bias } => oracle_conv3x3(&h, weight, bias),
                ExtractorOp::Relu => h.iter().map(|p| p.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()).collect(),
                ExtractorOp::MaxPool => h
                    .iter()
                    .map(|p| {
                        (0..p.len() / 2)
                            .map(|y| {
                                (0..p[0].len() / 2)
                                    .map(|x| p[2 * y][2 * x].max(p[2 * y][2 * x + 1]).max(p[2 * y + 1][2 * x]).max(p[2 * y + 1][2 * x + 1]))
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
                ExtractorOp::Affine { .. } => unreachable!(),
            };
        }
        out.push(h.clone());
    }
    out
}

fn oracle_gram(f: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let c = f.len();
    let n = (c * f[0].len() * f[0][0].len()) as f64;
    let mut g = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            let mut acc = 0.0;
            for y in 0..f[0].len() {
                for x in 0..f[0][0].len() {
                    acc += f[i][y][x] * f[j][y][x];
                }
            }
            g[i][j] = acc / n;
        }
    }
    g
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

#[test]
fn criterion_6_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut lines = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        let err = (got - want).abs();
        ok &= err <= tol;
        lines.push(format!("{name} {err:.1e}"));
    };

    // pyramid loss over two scales of both streams
    let shapes = [[1, 3, 8, 8], [1, 3, 4, 4]];
    let mk = |rng: &mut ChaCha8Rng| shapes.iter().map(|&s| random_tensor(rng, s).map(|v| v * 1.2)).collect::<Vec<_>>();
    let (dp, sp, dg, sg) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let mut g = Graph::<f64>::new();
    let cv = |g: &mut Graph<f64>, ts: &[Tensor<f64>]| ts.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>();
    let (a, b, c, d) = (cv(&mut g, &dp), cv(&mut g, &sp), cv(&mut g, &dg), cv(&mut g, &sg));
    let lp = pyramid_loss(&mut g, &a, &b, &c, &d).unwrap();
    let mut want = 0.0;
    for (preds, gts) in [(&dp, &dg), (&sp, &sg)] {
        for (l, (p, t)) in preds.iter().zip(gts.iter()).enumerate() {
            let mut acc = 0.0;
            for i in 0..p.numel() {
                let v = if l == 0 { p.data()[i] } else { p.data()[i].clamp(-1.0, 1.0) };
                acc += (v - t.data()[i]).abs();
            }
            want += acc / p.numel() as f64;
        }
    }
    check("pyramid", scalar(&g, lp), want, 1e-10);

    // perceptual and style losses with a fixed-seed random extractor
    let ext = FeatureExtractor::<f64>::random_with_widths(61, &[4, 6, 8]);
    let pred = random_tensor(&mut rng, [1, 3, 8, 8]);
    let gt = random_tensor(&mut rng, [1, 3, 8, 8]);
    let mut g = Graph::<f64>::new();
    let (pv, gv) = (g.constant(pred.clone()), g.constant(gt.clone()));
    let lper = perceptual_loss(&mut g, &ext, pv, gv).unwrap();
    let lsty = style_loss(&mut g, &ext, pv, gv).unwrap();
    let (fp, fg) = (oracle_features(&ext, &pred), oracle_features(&ext, &gt));
    let (mut want_per, mut want_sty) = (0.0, 0.0);
    for (a, b) in fp.iter().zip(&fg) {
        let n = (a.len() * a[0].len() * a[0][0].len()) as f64;
        let mut acc = 0.0;
        for c in 0..a.len() {
            for y in 0..a[0].len() {
                for x in 0..a[0][0].len() {
                    acc += (a[c][y][x] - b[c][y][x]).abs();
                }
            }
        }
        want_per += acc / n;
        let (ga, gb) = (oracle_gram(a), oracle_gram(b));
        let k = ga.len();
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                acc += (ga[i][j] - gb[i][j]).abs();
            }
        }
        want_sty += acc / (k * k) as f64;
    }
    check("perceptual", scalar(&g, lper), want_per, 1e-10);
    check("style", scalar(&g, lsty), want_sty, 1e-10);

    // L1% and PSNR on display-range images
    let x = random_tensor(&mut rng, [2, 3, 16, 16]).map(|v| (v + 1.0) * 0.5);
    let y = random_tensor(&mut rng, [2, 3, 16, 16]).map(|v| (v + 1.0) * 0.5);
    let (mut abs, mut sq) = (0.0, 0.0);
    let s = x.shape();
    for n in 0..s.n() {
        for c in 0..s.c() {
            for i in 0..s.h() {
                for j in 0..s.w() {
                    let d = x.get([n, c, i, j]) - y.get([n, c, i, j]);
                    abs += d.abs();
                    sq += d * d;
                }
            }
        }
    }
    let count = x.numel() as f64;
    check("L1%", l1_percent(&x, &y).unwrap(), 100.0 * abs / count, 1e-10);
    check("PSNR", psnr(&x, &y).unwrap(), 10.0 * (count / sq).log10(), 1e-10);

    // SSIM against scikit-image (gaussian_weights, sigma 1.5, data_range 1)
    let (h, w) = (24usize, 20usize);
    let lcg_a = |c: usize, y: usize, x: usize| ((y * w + x) * 7919 + c * 104729) as f64 % 1000.0 / 999.0;
    let lcg_b = |c: usize, y: usize, x: usize| {
        (lcg_a(c, y, x) * 0.6 + 0.2 + (((y * w + x) * 13 + c) % 7) as f64 * 0.05 - 0.15).clamp(0.0, 1.0)
    };
    let smooth = |c: usize, y: usize, x: usize| 0.5 + 0.4 * (0.3 * x as f64 + c as f64).sin() * (0.2 * y as f64).cos();
    let noisy = |c: usize, y: usize, x: usize| {
        (smooth(c, y, x) + (((y * w + x + c * 5) * 37 % 11) as f64 - 5.0) * 0.01).clamp(0.0, 1.0)
    };
    let img = |f: &dyn Fn(usize, usize, usize) -> f64| Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| f(c, y, x));
    check("SSIM lcg", ssim(&img(&lcg_a), &img(&lcg_b)).unwrap(), 0.8079784852572738, 1e-6);
    check("SSIM smooth", ssim(&img(&smooth), &img(&noisy)).unwrap(), 0.9440001198310105, 1e-6);

    // hand-derived relativistic average LS values
    let mut g = Graph::<f64>::new();
    let dr = g.constant(Tensor::full([2, 1, 3, 3], 1.0));
    let df = g.constant(Tensor::full([2, 1, 3, 3], -1.0));
    let (l_g, l_d) = adversarial_losses(&mut g, dr, df).unwrap();
    let (vg, vd) = (scalar(&g, l_g), scalar(&g, l_d));
    check("RaLSGAN l_d", vd, 2.0, 0.0);
    check("RaLSGAN l_g", vg, 18.0, 0.0);

    report(6, "oracle equivalences", ok, &format!("absolute errors: {}", lines.join(", ")));
    assert!(ok);
}

fn resume_config(dir: &std::path::Path) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = 70;
    c.network = NetworkConfig::tiny(32, 3, 8);
    c.batch_size = 2;
    c.max_steps = 13;
    c.checkpoint_every = 0;
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn criterion_7_resume_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let images = (0..4).map(|_| synthetic_image(&mut rng, [32, 32])).collect();
    let ds = Dataset::from_images(images).unwrap();
    let masks = MaskSource::Generated(default_bins());
    let k = 3;
    let steps = 10;

    let mut full = TrainState::<f32>::new(resume_config(dir.path())).unwrap();
    let mut uninterrupted = Vec::new();
    for _ in 0..k + steps {
        let batch = full.next_batch(&ds, &masks).unwrap();
        uninterrupted.push(full.train_step(&batch).unwrap().report);
    }

    let mut first = TrainState::<f32>::new(resume_config(dir.path())).unwrap();
    for _ in 0..k {
        let batch = first.next_batch(&ds, &masks).unwrap();
        first.train_step(&batch).unwrap();
    }
    let path = dir.path().join("resume.tstc");
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let mut resumed = load_checkpoint::<f32>(&path).unwrap();
    let mut after = Vec::new();
    for _ in 0..steps {
        let batch = resumed.next_batch(&ds, &masks).unwrap();
        after.push(resumed.train_step(&batch).unwrap().report);
    }
    let matching = after.iter().zip(&uninterrupted[k..]).take_while(|(a, b)| a == b).count();
    let params_equal = resumed.gen_params == full.gen_params && resumed.disc_params == full.disc_params;
    let ok = matching == steps && params_equal;
    report(
        7,
        "resume equivalence",
        ok,
        &format!("checkpoint at step {k}; {matching}/{steps} resumed step reports bit-identical; final parameters identical {params_equal}"),
    );
    assert!(ok);
}

#[test]
fn criterion_8_mask_binning() {
    let size = [64, 64];
    let per_bin = 1000;
    let mut worst: Vec<String> = Vec::new();
    let mut ok = true;
    for (b, bin) in default_bins().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(80 + b as u64);
        let (mut lo, mut hi, mut inside) = (1.0f64, 0.0f64, 0);
        for _ in 0..per_bin {
            let m = generate_irregular_mask(&mut rng, size, bin).unwrap();
            let r = hole_ratio(&m);
            lo = lo.min(r);
            hi = hi.max(r);
            if bin.contains(r) && is_binary(&m) {
                inside += 1;
            }
        }
        ok &= inside == per_bin;
        worst.push(format!("{} {inside}/{per_bin} in [{lo:.4}, {hi:.4}]", bin.label()));
    }

    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    let bin = MaskBin::new(0.0, 1.0).unwrap();
    let mut round_trips = 0;
    for i in 0..20 {
        let m = generate_irregular_mask(&mut rng, size, &bin).unwrap();
        let path = dir.path().join(format!("mask_{i}.png"));
        save_mask(&m, &path).unwrap();
        let back = load_mask(&path, size).unwrap();
        if back == m && is_binary(&back) {
            round_trips += 1;
        }
    }
    ok &= round_trips == 20;
    report(
        8,
        "mask binning",
        ok,
        &format!("{}; external PNG round trips binary and exact {round_trips}/20", worst.join(", ")),
    );
    assert!(ok);
}
