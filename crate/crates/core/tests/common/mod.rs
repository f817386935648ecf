#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostream_autograd::numeric::{central_difference, relative_error};
use twostream_autograd::{Graph, Shape, Tensor, Var};
use twostream_core::network::NetworkConfig;
use twostream_core::params::{Bound, ParamStore};

pub const FD_STEP: f64 = 1e-5;
/// Gradient norms below this in both analytic and numeric form count as an
/// identically zero gradient.
pub const ZERO_GRAD: f64 = 1e-8;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Relative error of one parameter or input tensor.
#[derive(Debug, Clone)]
pub struct GradError {
    pub name: String,
    pub rel_error: f64,
    /// Larger of the analytic and numeric gradient norms.
    pub scale: f64,
}

impl GradError {
    pub fn vanishes(&self) -> bool {
        self.scale < ZERO_GRAD
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol || self.vanishes()
    }
}

/// Worst relative error among tensors with a non-vanishing gradient.
pub fn worst(errors: &[GradError]) -> f64 {
    errors.iter().filter(|e| !e.vanishes()).map(|e| e.rel_error).fold(0.0, f64::max)
}

fn norm_ignoring_nan(t: &Tensor<f64>, mask: &Tensor<f64>) -> f64 {
    t.data().iter().zip(mask.data()).filter(|(_, m)| !m.is_nan()).map(|(v, _)| v * v).sum::<f64>().sqrt()
}

/// Compares analytic and central-difference gradients of
/// `sum(f(params, inputs) * R)` for a fixed random projection `R`, with
/// respect to every parameter and input. `skip(tensor, index)` excludes
/// coordinates; tensors are numbered parameters first, then inputs.
pub fn check_gradients(
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    seed: u64,
    skip: impl Fn(usize, usize) -> bool,
    f: impl Fn(&mut Graph<f64>, &Bound, &[Var]) -> Var,
) -> Vec<GradError> {
    let np = params.len();
    let projection = {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params, false);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &p, &xs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_tensor(&mut rng, g.shape(out))
    };
    let run = |store: &ParamStore<f64>, ins: &[Tensor<f64>], grads: bool| {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, store, grads);
        let xs: Vec<Var> = ins
            .iter()
            .map(|t| if grads { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &p, &xs);
        let r = g.constant(projection.clone());
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let value = g.value(loss).item();
        let analytic = grads.then(|| {
            let gr = g.backward(loss).unwrap();
            p.vars()
                .iter()
                .chain(&xs)
                .map(|&v| gr.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                .collect::<Vec<_>>()
        });
        (value, analytic)
    };
    let analytic = run(params, inputs, true).1.unwrap();
    let mut all: Vec<Tensor<f64>> = params.tensors().to_vec();
    all.extend(inputs.iter().cloned());
    let numeric = central_difference(
        &all,
        FD_STEP,
        |ts| {
            let mut store = params.clone();
            for (dst, src) in store.tensors_mut().iter_mut().zip(&ts[..np]) {
                *dst = src.clone();
            }
            run(&store, &ts[np..], false).0
        },
        skip,
    );
    let names: Vec<String> = params
        .iter()
        .map(|(_, n, _)| n.to_string())
        .chain((0..inputs.len()).map(|i| format!("input{i}")))
        .collect();
    names
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(name, (a, n))| GradError {
            name,
            rel_error: relative_error(a, n),
            scale: norm_ignoring_nan(a, n).max(norm_ignoring_nan(n, n)),
        })
        .collect()
}

pub fn no_skip(_: usize, _: usize) -> bool {
    false
}

/// Small network used by structural tests.
pub fn small_config(size: usize, levels: usize, base: usize) -> NetworkConfig {
    NetworkConfig::tiny(size, levels, base)
}

pub fn random_mask(rng: &mut ChaCha8Rng, [h, w]: [usize; 2]) -> Tensor<f64> {
    let (y0, x0) = (rng.gen_range(0..h / 2), rng.gen_range(0..w / 2));
    let (dy, dx) = (rng.gen_range(2..=h / 2), rng.gen_range(2..=w / 2));
    Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| {
        if y >= y0 && y < y0 + dy && x >= x0 && x < x0 + dx {
            1.0
        } else {
            0.0
        }
    })
}
