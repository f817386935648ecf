//! Checkpoints in the tensor container format.
//!
//! Tensor names: `gen/<param>`, `disc/<param>`, `sn_u/<layer>`,
//! `adam_g/m/<param>`, `adam_g/v/<param>`, `adam_d/m/<param>`,
//! `adam_d/v/<param>`. Metadata holds the step, the full training
//! configuration, the RNG position, Adam step counts and the best pyramid loss.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use twostream_autograd::{Real, Tensor};

use crate::container::{read_file, Container};
use crate::error::{Error, Result};
use crate::network::{Discriminator, Generator, SpectralState};
use crate::params::ParamStore;
use crate::training::config::TrainConfig;
use crate::training::state::TrainState;

pub const KIND: &str = "twostream-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngMeta {
    /// Hex-encoded 32-byte seed.
    seed: String,
    stream: u64,
    /// Decimal `u128` word position.
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kind: String,
    step: u64,
    config: TrainConfig,
    rng: RngMeta,
    adam_g_t: u64,
    adam_d_t: u64,
    best_l_py: Option<f64>,
}

fn rng_meta(rng: &ChaCha8Rng) -> RngMeta {
    RngMeta {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(m: &RngMeta) -> Result<ChaCha8Rng> {
    let bad = || Error::Format(format!("rng state {m:?}"));
    if m.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&m.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(m.stream);
    rng.set_word_pos(m.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

pub fn to_container<T: Real>(state: &TrainState<T>) -> Result<Container> {
    let meta = Meta {
        kind: KIND.into(),
        step: state.step,
        config: state.config.clone(),
        rng: rng_meta(&state.rng),
        adam_g_t: state.adam_g.t,
        adam_d_t: state.adam_d.t,
        best_l_py: state.best_l_py,
    };
    let mut c = Container::new(serde_json::to_value(&meta).map_err(|e| Error::Format(e.to_string()))?);
    for (_, name, t) in state.gen_params.iter() {
        c.push(format!("gen/{name}"), t);
    }
    for (_, name, t) in state.disc_params.iter() {
        c.push(format!("disc/{name}"), t);
    }
    for (i, u) in state.spectral.u.iter().enumerate() {
        c.push(format!("sn_u/{}", i + 1), u);
    }
    for (prefix, adam, store) in [
        ("adam_g", &state.adam_g, &state.gen_params),
        ("adam_d", &state.adam_d, &state.disc_params),
    ] {
        for (i, (_, name, _)) in store.iter().enumerate() {
            c.push(format!("{prefix}/m/{name}"), &adam.m[i]);
            c.push(format!("{prefix}/v/{name}"), &adam.v[i]);
        }
    }
    Ok(c)
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    to_container(state)?.write_file(path)
}

/// Overwrites every tensor of `store` from `prefix<name>` entries, checking
/// that names and shapes match exactly.
fn fill<T: Real>(c: &Container, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
    let found = c.with_prefix(prefix).count();
    if found != store.len() {
        return Err(Error::Format(format!(
            "{found} tensors under {prefix:?}, the configuration expects {}",
            store.len()
        )));
    }
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    for (t, name) in store.tensors_mut().iter_mut().zip(&names) {
        let loaded: Tensor<T> = c.tensor(&format!("{prefix}{name}"))?;
        if loaded.shape() != t.shape() {
            return Err(Error::Format(format!(
                "{prefix}{name}: shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded;
    }
    Ok(())
}

fn fill_vec<T: Real>(c: &Container, prefix: &str, like: &ParamStore<T>, out: &mut [Tensor<T>]) -> Result<()> {
    let mut tmp = like.clone();
    fill(c, prefix, &mut tmp)?;
    for (o, t) in out.iter_mut().zip(tmp.tensors()) {
        o.clone_from(t);
    }
    Ok(())
}

fn read_meta(c: &Container) -> Result<Meta> {
    let meta: Meta = serde_json::from_value(c.metadata.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.kind != KIND {
        return Err(Error::Format(format!("not a checkpoint (kind {:?})", meta.kind)));
    }
    Ok(meta)
}

pub fn from_container<T: Real>(c: &Container) -> Result<TrainState<T>> {
    let meta = read_meta(c)?;
    let mut state = TrainState::<T>::new(meta.config.clone())?;
    fill(c, "gen/", &mut state.gen_params)?;
    fill(c, "disc/", &mut state.disc_params)?;
    let layers = state.spectral.u.len();
    if c.with_prefix("sn_u/").count() != layers {
        return Err(Error::Format("spectral state does not match the discriminator".into()));
    }
    for i in 0..layers {
        let u: Tensor<T> = c.tensor(&format!("sn_u/{}", i + 1))?;
        if u.shape() != state.spectral.u[i].shape() {
            return Err(Error::Format(format!("sn_u/{}: shape {:?}", i + 1, u.shape())));
        }
        state.spectral.u[i] = u;
    }
    let (gp, dp) = (state.gen_params.clone(), state.disc_params.clone());
    fill_vec(c, "adam_g/m/", &gp, &mut state.adam_g.m)?;
    fill_vec(c, "adam_g/v/", &gp, &mut state.adam_g.v)?;
    fill_vec(c, "adam_d/m/", &dp, &mut state.adam_d.m)?;
    fill_vec(c, "adam_d/v/", &dp, &mut state.adam_d.v)?;
    state.adam_g.t = meta.adam_g_t;
    state.adam_d.t = meta.adam_d_t;
    state.step = meta.step;
    state.rng = restore_rng(&meta.rng)?;
    state.best_l_py = meta.best_l_py;
    Ok(state)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>> {
    from_container(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Generator-only view of a checkpoint, for inference.
pub struct InferenceModel<T: Real> {
    pub config: TrainConfig,
    pub generator: Generator,
    pub params: ParamStore<T>,
    pub discriminator: Discriminator,
    pub disc_params: ParamStore<T>,
    pub spectral: SpectralState<T>,
}

pub fn load_inference<T: Real>(path: &Path) -> Result<InferenceModel<T>> {
    let c = read_file(path)?;
    let meta = read_meta(&c)?;
    let cfg = meta.config;
    cfg.validate()?;
    let (generator, mut params) = Generator::init::<T>(&cfg.network, 0)?;
    fill(&c, "gen/", &mut params)?;
    let (discriminator, mut disc_params, mut spectral) = Discriminator::init::<T>(&cfg.network, 0)?;
    fill(&c, "disc/", &mut disc_params)?;
    for (i, u) in spectral.u.iter_mut().enumerate() {
        *u = c.tensor(&format!("sn_u/{}", i + 1))?;
    }
    Ok(InferenceModel {
        config: cfg,
        generator,
        params,
        discriminator,
        disc_params,
        spectral,
    })
}

impl<T: Real> TrainState<T> {
    /// Inference view of the current parameters.
    pub fn inference_model(&self) -> InferenceModel<T> {
        InferenceModel {
            config: self.config.clone(),
            generator: self.generator.clone(),
            params: self.gen_params.clone(),
            discriminator: self.discriminator.clone(),
            disc_params: self.disc_params.clone(),
            spectral: self.spectral.clone(),
        }
    }
}
