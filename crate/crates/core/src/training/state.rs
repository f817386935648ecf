use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostream_autograd::{Gradients, Graph, Real, Tensor, Var};

use crate::data::{make_sample, Batch, Dataset, MaskSource};
use crate::error::{Error, Result};
use crate::losses::{adversarial_losses, check_report, generator_objective, total_losses, FeatureExtractor, LossComponents, LossReport, EXTRACTOR_SEED};
use crate::network::{Discriminator, ForwardOptions, Generator, SpectralState};
use crate::params::{Bound, ParamStore};
use crate::training::adam::Adam;
use crate::training::config::{Sampling, TrainConfig};

/// Seed offsets so the two networks and the data stream draw independent randomness.
const DISC_SEED_OFFSET: u64 = 0x0d15_c0de;
const DATA_STREAM: u64 = 7;

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub step: u64,
    pub config: TrainConfig,
    pub generator: Generator,
    pub gen_params: ParamStore<T>,
    pub discriminator: Discriminator,
    pub disc_params: ParamStore<T>,
    pub spectral: SpectralState<T>,
    pub adam_g: Adam<T>,
    pub adam_d: Adam<T>,
    pub rng: ChaCha8Rng,
    /// Lowest pyramid loss seen so far.
    pub best_l_py: Option<f64>,
    pub extractor: FeatureExtractor<T>,
}

/// A batch already converted to the training precision.
pub struct DeviceBatch<T: Real> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
    pub image_pyramid: Vec<Tensor<T>>,
    pub structure_pyramid: Vec<Tensor<T>>,
}

impl<T: Real> From<&Batch> for DeviceBatch<T> {
    fn from(b: &Batch) -> Self {
        Self {
            image: b.image.cast(),
            mask: b.mask.cast(),
            image_pyramid: b.image_pyramid.iter().map(Tensor::cast).collect(),
            structure_pyramid: b.structure_pyramid.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Values of one generator step kept for inspection by tests and tools.
#[derive(Debug, Clone)]
pub struct StepOutcome<T: Real> {
    pub report: LossReport,
    pub composited: Tensor<T>,
}

pub fn build_extractor<T: Real>(config: &TrainConfig) -> Result<FeatureExtractor<T>> {
    match &config.extractor.vgg16 {
        Some(path) => FeatureExtractor::vgg16(path),
        None => Ok(FeatureExtractor::random(EXTRACTOR_SEED)),
    }
}

impl<T: Real> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (generator, gen_params) = Generator::init::<T>(&config.network, config.seed)?;
        let (discriminator, disc_params, spectral) =
            Discriminator::init::<T>(&config.network, config.seed.wrapping_add(DISC_SEED_OFFSET))?;
        let adam_g = Adam::new(config.optimizer, &gen_params);
        let adam_d = Adam::new(config.optimizer, &disc_params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        let extractor = build_extractor(&config)?;
        Ok(Self {
            step: 0,
            config,
            generator,
            gen_params,
            discriminator,
            disc_params,
            spectral,
            adam_g,
            adam_d,
            rng,
            best_l_py: None,
            extractor,
        })
    }

    /// Draws the next batch; all randomness comes from the state's RNG.
    pub fn next_batch(&mut self, ds: &Dataset, masks: &MaskSource) -> Result<Batch> {
        if ds.is_empty() {
            return Err(Error::Input("empty dataset".into()));
        }
        let b = self.config.batch_size;
        let levels = self.config.network.num_levels;
        let mut samples = Vec::with_capacity(b);
        for i in 0..b {
            let index = match self.config.data.sampling {
                Sampling::Random => self.rng.gen_range(0..ds.len()),
                Sampling::Sequential => ((self.step as usize) * b + i) % ds.len(),
            };
            let seed = self.rng.next_u64();
            samples.push(make_sample(ds, masks, index, seed, levels, self.config.data.flip)?);
        }
        Batch::collate(&samples)
    }

    /// One discriminator update followed by one joint generator update of
    /// both streams, gated units and fusion blocks. On error the state is
    /// left unchanged.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome<T>> {
        if !batch.image.is_finite() || !batch.mask.is_finite() {
            return Err(Error::Input("non-finite batch".into()));
        }
        let step = self.step + 1;
        self.step_inner(batch).map_err(|e| match e {
            Error::NonFinite(what) => Error::Training(format!("non-finite values in {what} at step {step}")),
            other => other,
        })
    }

    fn step_inner(&mut self, batch: &Batch) -> Result<StepOutcome<T>> {
        let data = DeviceBatch::<T>::from(batch);
        let weights = self.config.losses;

        let mut gg = Graph::<T>::new();
        let gp = Bound::new(&mut gg, &self.gen_params, true);
        let image = gg.constant(data.image.clone());
        let mask = gg.constant(data.mask.clone());
        let fwd = self.generator.forward(&mut gg, &gp, image, mask, ForwardOptions::default())?;
        let composited = gg.value(fwd.composited).clone();

        // discriminator step on a separate graph, generator output held fixed
        let mut spectral = self.spectral.clone();
        self.discriminator.power_iterate(&self.disc_params, &mut spectral, 1);
        let mut gd = Graph::<T>::new();
        let dp = Bound::new(&mut gd, &self.disc_params, true);
        let (real_d, fake_d, mask_d) = (
            gd.constant(data.image.clone()),
            gd.constant(composited.clone()),
            gd.constant(data.mask.clone()),
        );
        let d_real = self.discriminator.forward(&mut gd, &dp, &spectral, real_d, mask_d)?;
        let d_fake = self.discriminator.forward(&mut gd, &dp, &spectral, fake_d, mask_d)?;
        let (_, l_d) = adversarial_losses(&mut gd, d_real, d_fake)?;
        let l_adv_d = gd.value(l_d).item().as_f64();
        check_report(&LossReport {
            l_adv_d,
            ..LossReport::default()
        })?;
        let d_grads = collect(&gd.backward(l_d)?, dp.vars());
        let mut disc_params = self.disc_params.clone();
        let mut adam_d = self.adam_d.clone();
        adam_d.step(&mut disc_params, &d_grads)?;

        // generator step against the updated discriminator
        let dc = Bound::new(&mut gg, &disc_params, false);
        let d_fake = self.discriminator.forward(&mut gg, &dc, &spectral, fwd.composited, mask)?;
        let d_real = self.discriminator.forward(&mut gg, &dc, &spectral, image, mask)?;
        let (l_adv_g, _) = adversarial_losses(&mut gg, d_real, d_fake)?;
        let gt: Vec<Var> = data.image_pyramid.iter().map(|t| gg.constant(t.clone())).collect();
        let has_ss = !fwd.structure_pyramid().is_empty();
        let sgt: Vec<Var> = if has_ss {
            data.structure_pyramid.iter().map(|t| gg.constant(t.clone())).collect()
        } else {
            Vec::new()
        };
        let terms = generator_objective(
            &mut gg,
            &weights,
            &self.extractor,
            fwd.detailed_pyramid(),
            fwd.structure_pyramid(),
            &gt,
            &sgt,
            l_adv_g,
        )?;
        let val = |v: Var| gg.value(v).item().as_f64();
        let components = LossComponents {
            l_py: val(terms.l_py),
            l_per_ms: val(terms.l_per_ms),
            l_per_ss: terms.l_per_ss.map(val).unwrap_or(0.0),
            l_sty: val(terms.l_sty),
            l_adv_g: val(terms.l_adv_g),
            l_adv_d,
        };
        let report = total_losses(&weights, &components)?;
        let g_grads = collect(&gg.backward(terms.total)?, gp.vars());
        let finite = |grads: &[Option<Tensor<T>>]| grads.iter().flatten().all(|t| t.is_finite());
        if !finite(&g_grads) || !finite(&d_grads) {
            return Err(Error::Training(format!("non-finite gradients at step {}", self.step + 1)));
        }

        let mut gen_params = self.gen_params.clone();
        let mut adam_g = self.adam_g.clone();
        adam_g.step(&mut gen_params, &g_grads)?;
        let params_finite = |s: &ParamStore<T>| s.tensors().iter().all(|t| t.is_finite());
        if !params_finite(&gen_params) || !params_finite(&disc_params) {
            return Err(Error::Training(format!("non-finite parameters after step {}", self.step + 1)));
        }

        self.gen_params = gen_params;
        self.adam_g = adam_g;
        self.disc_params = disc_params;
        self.adam_d = adam_d;
        self.spectral = spectral;
        self.step += 1;
        self.best_l_py = Some(self.best_l_py.map_or(report.l_py, |b| b.min(report.l_py)));
        Ok(StepOutcome { report, composited })
    }
}

fn collect<T: Real>(grads: &Gradients<T>, vars: &[Var]) -> Vec<Option<Tensor<T>>> {
    vars.iter().map(|&v| grads.get(v).cloned()).collect()
}
