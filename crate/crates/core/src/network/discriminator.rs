//! Spectrally normalized patch discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostream_autograd::{ConvSpec, Graph, Real, Shape, Tensor, Var};

use crate::blocks::{Conv2d, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::network::config::NetworkConfig;
use crate::params::{Bound, Init, ParamStore};

pub const KERNEL: usize = 5;
const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub layers: Vec<Conv2d>,
}

/// Left singular vector estimates, one per layer, carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<T: Real> {
    pub u: Vec<Tensor<T>>,
}

impl Discriminator {
    pub fn init<T: Real>(config: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>, SpectralState<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disc = Self::build(config, &mut Init::new(&mut store, &mut rng))?;
        let state = disc.init_spectral(&mut rng);
        Ok((disc, store, state))
    }

    pub fn build<T: Real>(config: &NetworkConfig, init: &mut Init<'_, T>) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![4];
        widths.extend_from_slice(&config.disc_channels);
        widths.push(1);
        let spec = ConvSpec::new(2, KERNEL / 2, 1);
        let mut layers = Vec::with_capacity(NetworkConfig::DISC_LAYERS);
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Conv2d::new(&mut init.scope(&format!("layer{}", i + 1)), pair[0], pair[1], KERNEL, spec, true)?);
        }
        Ok(Self { layers })
    }

    /// Random unit vectors.
    pub fn init_spectral<T: Real>(&self, rng: &mut ChaCha8Rng) -> SpectralState<T> {
        let u = self
            .layers
            .iter()
            .map(|l| {
                let raw: Vec<f64> = (0..l.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(SIGMA_FLOOR);
                let data = raw.iter().map(|v| T::of(v / norm)).collect();
                Tensor::from_vec([1, l.out_channels, 1, 1], data).expect("shape")
            })
            .collect();
        SpectralState { u }
    }

    /// Refines every `u` by `iters` rounds of `u <- W v / |W v|`, `v = W^T u / |W^T u|`.
    pub fn power_iterate<T: Real>(&self, store: &ParamStore<T>, state: &mut SpectralState<T>, iters: usize) {
        for (layer, u) in self.layers.iter().zip(state.u.iter_mut()) {
            let w = store.get(layer.weight);
            let mut uf: Vec<f64> = u.data().iter().map(|v| v.as_f64()).collect();
            for _ in 0..iters {
                let v = left_to_right(w, &uf);
                let wv = matvec(w, &v);
                let n = norm(&wv);
                if n < SIGMA_FLOOR {
                    break;
                }
                uf = wv.iter().map(|x| x / n).collect();
            }
            *u = Tensor::from_vec(u.shape(), uf.into_iter().map(T::of).collect()).expect("shape");
        }
    }

    /// Current spectral-norm estimate `u^T W v` of each layer's weight matrix.
    pub fn sigma<T: Real>(&self, store: &ParamStore<T>, state: &SpectralState<T>) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&state.u)
            .map(|(layer, u)| {
                let w = store.get(layer.weight);
                let uf: Vec<f64> = u.data().iter().map(|v| v.as_f64()).collect();
                let v = left_to_right(w, &uf);
                let wv = matvec(w, &v);
                uf.iter().zip(&wv).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// Weight divided by its spectral-norm estimate, recorded on `g` so the
    /// estimate is differentiated through `W` with `u, v` held fixed.
    pub fn normalized_weight<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        state: &SpectralState<T>,
        index: usize,
    ) -> Result<Var> {
        let layer = &self.layers[index];
        let w_var = p[layer.weight];
        let w = g.value(w_var).clone();
        let uf: Vec<f64> = state.u[index].data().iter().map(|v| v.as_f64()).collect();
        if uf.len() != layer.out_channels {
            return Err(Error::Internal(format!(
                "spectral state of layer {} has {} entries for {} outputs",
                index + 1,
                uf.len(),
                layer.out_channels
            )));
        }
        let v = left_to_right(&w, &uf);
        let cols = v.len();
        let outer = Tensor::from_vec(
            w.shape(),
            (0..uf.len() * cols).map(|k| T::of(uf[k / cols] * v[k % cols])).collect(),
        )?;
        let outer = g.constant(outer);
        let prod = g.mul(w_var, outer)?;
        let sigma = g.sum_all(prod)?;
        let sigma = g.clamp(sigma, SIGMA_FLOOR, f64::MAX)?;
        Ok(g.div(w_var, sigma)?)
    }

    /// Patch scores for `[image; mask]`, shape `(B, 1, H/64, W/64)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        state: &SpectralState<T>,
        image: Var,
        mask: Var,
    ) -> Result<Var> {
        let (is, ms) = (g.shape(image), g.shape(mask));
        if is.c() != 3 || ms.c() != 1 || is.n() != ms.n() || is.h() != ms.h() || is.w() != ms.w() {
            return Err(Error::Input(format!("discriminator input {is:?} with mask {ms:?}")));
        }
        if state.u.len() != self.layers.len() {
            return Err(Error::Internal("spectral state does not match the discriminator".into()));
        }
        let mut x = g.concat(&[image, mask])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = self.normalized_weight(g, p, state, i)?;
            let b = layer.bias.map(|id| p[id]);
            x = g.conv2d(x, w, b, layer.spec)?;
            if i < last {
                x = g.leaky_relu(x, LEAKY_SLOPE)?;
            }
        }
        Ok(x)
    }

    /// Spatial size of the score map for an `h x w` input.
    pub fn score_size(&self, h: usize, w: usize) -> Option<[usize; 2]> {
        self.layers.iter().try_fold([h, w], |[h, w], l| {
            Some([l.spec.output_len(h, l.kernel)?, l.spec.output_len(w, l.kernel)?])
        })
    }
}

impl<T: Real> SpectralState<T> {
    pub fn shapes(&self) -> Vec<Shape> {
        self.u.iter().map(|t| t.shape()).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `W v` for `W` viewed as `(out, in*k*k)`.
fn matvec<T: Real>(w: &Tensor<T>, v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    w.data()
        .chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a.as_f64() * b).sum())
        .collect()
}

/// `W^T u / |W^T u|`, or zeros when `W^T u` vanishes.
fn left_to_right<T: Real>(w: &Tensor<T>, u: &[f64]) -> Vec<f64> {
    let rows = u.len();
    let cols = w.numel() / rows;
    let mut v = vec![0.0; cols];
    for (row, &ui) in w.data().chunks(cols).zip(u) {
        for (acc, x) in v.iter_mut().zip(row) {
            *acc += ui * x.as_f64();
        }
    }
    let n = norm(&v);
    if n < SIGMA_FLOOR {
        return vec![0.0; cols];
    }
    v.iter_mut().for_each(|x| *x /= n);
    v
}
