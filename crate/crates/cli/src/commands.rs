use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twostream_core::data::dataset::list_images;
use twostream_core::data::image_io::save_gray;
use twostream_core::data::{
    generate_irregular_mask, image_dimensions, load_image, load_mask, save_image, save_mask, Dataset, MaskBin,
    MaskSource,
};
use twostream_core::metrics::evaluate;
use twostream_core::network::Ablation;
use twostream_core::training::{
    checkpoint_path, load_checkpoint, load_inference, save_checkpoint, train_loop, InferenceModel, LossLog,
    TrainConfig, TrainState, LATEST, LOG_FILE,
};
use twostream_core::{Error, Tensor};

use crate::render::{clamp_unit, gate_file, gate_pixels, pyramid_file};
use crate::{EvalArgs, MakeMasksArgs, ModelIo, TrainArgs};

pub const CONFIG_FILE: &str = "config.toml";

fn parse_bins(text: &str) -> Result<Vec<MaskBin>> {
    let bins = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<twostream_core::Result<Vec<MaskBin>>>()?;
    if bins.is_empty() {
        return Err(Error::Config(format!("no mask bins in {text:?}")).into());
    }
    Ok(bins)
}

fn resolve_config(a: &TrainArgs) -> Result<(TrainConfig, Option<TrainState<f32>>)> {
    let (mut cfg, resumed) = match (&a.resume, &a.config) {
        (Some(path), _) => {
            let state = load_checkpoint::<f32>(path).with_context(|| format!("resuming from {}", path.display()))?;
            (state.config.clone(), Some(state))
        }
        (None, Some(path)) => (TrainConfig::load(path)?, None),
        (None, None) => (TrainConfig::default(), None),
    };
    if resumed.is_some() && (a.seed.is_some() || a.batch_size.is_some() || a.ablation.is_some() || a.learning_rate.is_some()) {
        return Err(Error::Config("seed, batch size, ablation and learning rate come from the resumed checkpoint".into()).into());
    }
    if let Some(v) = &a.dataset {
        cfg.data.dataset = Some(v.clone());
    }
    if let Some(v) = &a.masks {
        cfg.data.masks = Some(v.clone());
    }
    if let Some(v) = &a.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.optimizer.learning_rate = v;
    }
    if let Some(v) = &a.ablation {
        cfg.network.ablation = Ablation::parse(v)?;
    }
    cfg.validate()?;
    let resumed = resumed.map(|mut s| {
        s.config = cfg.clone();
        s
    });
    Ok((cfg, resumed))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (cfg, resumed) = resolve_config(&a)?;
    let text = cfg.to_toml()?;
    println!("# resolved configuration\n{text}");
    log::info!("structure stream {}", if cfg.network.ablation.ms_only { "disabled" } else { "enabled" });

    let dataset_dir = cfg
        .data
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --dataset or set data.dataset".into()))?;
    let size = cfg.network.input_size;
    let ds = Dataset::from_dir(&dataset_dir, size)?;
    let masks = match &cfg.data.masks {
        Some(dir) => MaskSource::from_dir(dir, size)?,
        None => MaskSource::Generated(cfg.data.mask_bins.clone()),
    };
    log::info!("{} training images from {}", ds.len(), dataset_dir.display());

    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join(CONFIG_FILE), &text).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;

    let state = match resumed {
        Some(s) => s,
        None => TrainState::<f32>::new(cfg.clone())?,
    };
    if state.step >= cfg.max_steps {
        save_checkpoint(&state, &checkpoint_path(&dir, state.step))?;
        save_checkpoint(&state, &dir.join(LATEST))?;
        log::info!("step {} already reaches max_steps {}; checkpoint written", state.step, cfg.max_steps);
        return Ok(());
    }
    let mut log_file = LossLog::open(&dir.join(LOG_FILE))?;
    let every = a.log_every.max(1);
    let state = train_loop(state, &ds, &masks, Some(&mut log_file), |step, r| {
        if step % every == 0 {
            let terms: Vec<String> = r.terms().iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
            log::info!("step {step}: {}", terms.join(" "));
        }
    })?;
    log::info!("finished at step {}; checkpoints in {}", state.step, dir.display());
    Ok(())
}

fn load_model(a: &ModelIo) -> Result<(InferenceModel<f32>, Tensor<f64>, Tensor<f64>)> {
    let model = load_inference::<f32>(&a.checkpoint)?;
    log::info!("checkpoint configuration\n{}", model.config.to_toml()?);
    let size = model.input_size();
    if !a.resize {
        for path in [&a.image, &a.mask] {
            let found = image_dimensions(path)?;
            if found != size {
                return Err(Error::Input(format!(
                    "{} is {}x{}, the model expects {}x{} (pass --resize to fit it)",
                    path.display(),
                    found[0],
                    found[1],
                    size[0],
                    size[1]
                ))
                .into());
            }
        }
    }
    let image = load_image(&a.image, size)?;
    let mask = load_mask(&a.mask, size)?;
    Ok((model, image, mask))
}

pub fn inpaint(a: ModelIo) -> Result<()> {
    let (model, image, mask) = load_model(&a)?;
    let p = model.predict(&image, &mask)?;
    let out = &a.out_dir;
    save_image(&p.composited, &out.join("result.png"))?;
    save_image(&clamp_unit(&p.raw), &out.join("raw.png"))?;
    match &p.structure {
        Some(s) => save_image(&clamp_unit(s), &out.join("structure.png"))?,
        None => log::warn!("model has no structure stream; structure.png not written"),
    }
    log::info!("wrote results to {}", out.display());
    Ok(())
}

pub fn viz_gates(a: ModelIo) -> Result<()> {
    let (model, image, mask) = load_model(&a)?;
    let p = model.predict(&image, &mask)?;
    if p.gates.is_empty() {
        return Err(Error::Config("model has no gated units".into()).into());
    }
    for (i, gate) in p.gates.iter().enumerate() {
        let (pixels, size) = gate_pixels(gate);
        save_gray(&pixels, size, &a.out_dir.join(gate_file(i + 1)))?;
    }
    log::info!("wrote {} gate maps to {}", p.gates.len(), a.out_dir.display());
    Ok(())
}

pub fn viz_pyramid(a: ModelIo) -> Result<()> {
    let (model, image, mask) = load_model(&a)?;
    let p = model.predict(&image, &mask)?;
    let streams = [("detailed", &p.detailed_pyramid), ("structure", &p.structure_pyramid)];
    let mut written = 0;
    for (stream, levels) in streams {
        for (i, t) in levels.iter().enumerate() {
            save_image(&clamp_unit(t), &a.out_dir.join(pyramid_file(stream, i + 1)))?;
            written += 1;
        }
    }
    if p.structure_pyramid.is_empty() {
        log::warn!("model has no structure stream; only detailed images written");
    }
    log::info!("wrote {written} pyramid images to {}", a.out_dir.display());
    Ok(())
}

fn load_masks(dir: &Path, size: [usize; 2]) -> Result<Vec<Tensor<f64>>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Input(format!("no masks in {}", dir.display())).into());
    }
    Ok(paths.iter().map(|p| load_mask(p, size)).collect::<twostream_core::Result<_>>()?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let bins = parse_bins(&a.bins)?;
    let model = load_inference::<f32>(&a.checkpoint)?;
    log::info!("checkpoint configuration\n{}", model.config.to_toml()?);
    let size = model.input_size();
    let paths = list_images(&a.dataset)?;
    if paths.is_empty() {
        return Err(Error::Input(format!("no images in {}", a.dataset.display())).into());
    }
    let images = paths.iter().map(|p| load_image(p, size)).collect::<twostream_core::Result<Vec<_>>>()?;
    let masks = match &a.masks {
        Some(dir) => {
            let pool = load_masks(dir, size)?;
            (0..images.len()).map(|i| pool[i % pool.len()].clone()).collect()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            (0..images.len())
                .map(|i| generate_irregular_mask(&mut rng, size, &bins[i % bins.len()]))
                .collect::<twostream_core::Result<Vec<_>>>()?
        }
    };
    let report = evaluate(&model, &images, &masks, &bins)?;
    println!("{}", report.to_table());
    if report.unbinned > 0 {
        log::warn!("{} masks fall outside every bin and count only towards \"all\"", report.unbinned);
    }
    if let Some(path) = &a.report {
        std::fs::write(path, report.to_key_values()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn make_masks(a: MakeMasksArgs) -> Result<()> {
    let bins = parse_bins(&a.bins)?;
    if a.height == 0 || a.width == 0 {
        return Err(Error::Config("mask size must be positive".into()).into());
    }
    let size = [a.height, a.width];
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for bin in &bins {
        let dir = a.out_dir.join(bin.label().trim_end_matches('%'));
        for i in 0..a.count {
            let m = generate_irregular_mask(&mut rng, size, bin)?;
            save_mask(&m, &dir.join(format!("mask_{i:05}.png")))?;
        }
        log::info!("{} masks for {} in {}", a.count, bin.label(), dir.display());
    }
    Ok(())
}
