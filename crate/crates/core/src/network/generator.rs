//! Main stream (MS) and structure stream (SS) generators with their links.
//!
//! Level indices are 1-based in names and docs; every per-level `Vec` below
//! stores level 1 (highest resolution) at index 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twostream_autograd::{ConvSpec, Graph, Real, Tensor, Var};

use crate::blocks::{AdaptiveFusion, Conv2d, GatedUnit, Norm, NormKind, ResidualDilatedBlock, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::network::config::NetworkConfig;
use crate::params::{Bound, Init, ParamStore};

/// Image plus mask channels entering the first encoder layer of both streams.
pub const INPUT_CHANNELS: usize = 4;

/// Stride-2 4x4 convolution, normalization, LeakyReLU. The first level is
/// built without normalization.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl EncoderLayer {
    fn new<T: Real>(init: &mut Init<'_, T>, cin: usize, cout: usize, norm: NormKind) -> Result<Self> {
        let bias = norm == NormKind::None;
        let conv = Conv2d::new(&mut init.scope("conv"), cin, cout, 4, ConvSpec::new(2, 1, 1), bias)?;
        let norm = Norm::new(&mut init.scope("norm"), norm, cout)?;
        Ok(Self { conv, norm })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, p, x)?;
        let h = self.norm.forward(g, p, h)?;
        Ok(g.leaky_relu(h, LEAKY_SLOPE)?)
    }
}

/// Nearest x2 upsampling, concatenation with the skip, 3x3 conv, LeakyReLU.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub conv: Conv2d,
}

impl DecoderLayer {
    fn new<T: Real>(init: &mut Init<'_, T>, cin: usize, cout: usize) -> Result<Self> {
        let conv = Conv2d::new(&mut init.scope("conv"), cin, cout, 3, ConvSpec::same(3, 1), true)?;
        Ok(Self { conv })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, prev: Var, skip: Var) -> Result<Var> {
        let up = g.upsample2x(prev)?;
        let cat = g.concat(&[up, skip])?;
        let h = self.conv.forward(g, p, cat)?;
        Ok(g.leaky_relu(h, LEAKY_SLOPE)?)
    }
}

/// How a main-stream decoder layer absorbs the structure feature of its level.
#[derive(Debug, Clone)]
pub enum Fusion {
    Adaptive(AdaptiveFusion),
    /// `leaky_relu(conv1x1([x; s]))`, the fusion-free ablation.
    Concat(Conv2d),
}

/// Structure stream: encoder fed through gated units, decoder and RGB heads.
#[derive(Debug, Clone)]
pub struct StructureStream {
    pub encoder: Vec<EncoderLayer>,
    /// One gated unit per main-stream encoder level; empty without gating.
    pub gates: Vec<GatedUnit>,
    pub decoder: Vec<DecoderLayer>,
    pub heads: Vec<Conv2d>,
}

/// Test and diagnostics switches for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace every gate map with this constant.
    pub gate_override: Option<f64>,
}

/// Structure-stream encoder outputs.
#[derive(Debug, Clone)]
pub struct StructureEncoding {
    /// `S^1..S^L`.
    pub features: Vec<Var>,
    /// Gate maps `G^1..G^L`; empty when gating is ablated.
    pub gates: Vec<Var>,
    /// Main-stream features as they enter the structure stream (`O^l`).
    pub links: Vec<Var>,
}

/// Decoder outputs of one stream.
#[derive(Debug, Clone)]
pub struct Decoding {
    /// `X'^l` or `S'^l`, level 1 first.
    pub features: Vec<Var>,
    /// RGB image synthesized at each decoder level, level 1 (full size) first.
    pub pyramid: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Network input: hole-zeroed image concatenated with the mask.
    pub input: Var,
    pub ms_features: Vec<Var>,
    pub bottleneck: Var,
    pub structure: Option<StructureEncoding>,
    pub ss_decoder: Option<Decoding>,
    pub ms_decoder: Decoding,
    /// Full-resolution detailed image, `tanh`-bounded.
    pub final_image: Var,
    /// Known pixels from the input, generated pixels inside the hole.
    pub composited: Var,
}

impl ForwardResult {
    pub fn gate_maps(&self) -> &[Var] {
        self.structure.as_ref().map(|s| s.gates.as_slice()).unwrap_or(&[])
    }

    pub fn detailed_pyramid(&self) -> &[Var] {
        &self.ms_decoder.pyramid
    }

    pub fn structure_pyramid(&self) -> &[Var] {
        self.ss_decoder.as_ref().map(|d| d.pyramid.as_slice()).unwrap_or(&[])
    }

    /// Full-resolution structure image when the structure stream exists.
    pub fn structure_image(&self) -> Option<Var> {
        self.structure_pyramid().first().copied()
    }
}

/// Both generator streams and their cross-stream links.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: NetworkConfig,
    pub ms_encoder: Vec<EncoderLayer>,
    pub bottleneck: Vec<ResidualDilatedBlock>,
    pub ms_decoder: Vec<DecoderLayer>,
    /// Per-level fusion; empty when the structure stream is ablated.
    pub fusion: Vec<Fusion>,
    pub ms_heads: Vec<Conv2d>,
    pub ss: Option<StructureStream>,
}

impl Generator {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn init<T: Real>(config: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = Self::build(config, &mut Init::new(&mut store, &mut rng))?;
        Ok((gen, store))
    }

    pub fn build<T: Real>(config: &NetworkConfig, init: &mut Init<'_, T>) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let levels = cfg.num_levels;
        let ch = |l: usize| cfg.channels(l);
        let dch = |l: usize| cfg.decoder_channels(l);
        let skip_ch = |l: usize| if l >= 2 { ch(l - 1) } else { INPUT_CHANNELS };
        let ablation = cfg.ablation;
        let enc_norm = |l: usize| if l == 1 { NormKind::None } else { cfg.norm };

        let mut ms = init.scope("ms");
        let mut ms_encoder = Vec::with_capacity(levels);
        for l in 1..=levels {
            let cin = if l == 1 { INPUT_CHANNELS } else { ch(l - 1) };
            ms_encoder.push(EncoderLayer::new(&mut ms.scope(&format!("enc{l}")), cin, ch(l), enc_norm(l))?);
        }
        let mut bottleneck = Vec::with_capacity(cfg.bottleneck_blocks);
        for i in 1..=cfg.bottleneck_blocks {
            bottleneck.push(ResidualDilatedBlock::new(
                &mut ms.scope(&format!("bottleneck{i}")),
                ch(levels),
                cfg.norm,
            )?);
        }
        let mut ms_decoder = Vec::with_capacity(levels);
        let mut ms_heads = Vec::with_capacity(levels);
        for l in 1..=levels {
            let up = if l == levels { ch(levels) } else { dch(l + 1) };
            ms_decoder.push(DecoderLayer::new(&mut ms.scope(&format!("dec{l}")), up + skip_ch(l), dch(l))?);
            ms_heads.push(head(&mut ms.scope(&format!("head{l}")), dch(l))?);
        }
        drop(ms);

        let ss = if ablation.has_structure_stream() {
            let mut gates = Vec::new();
            if !ablation.no_gu {
                for l in 1..=levels {
                    gates.push(GatedUnit::new(&mut init.scope(&format!("gu{l}")), ch(l))?);
                }
            }
            let mut ss = init.scope("ss");
            let mut encoder = Vec::with_capacity(levels);
            for l in 1..=levels {
                let cin = if l == 1 { INPUT_CHANNELS } else { 2 * ch(l - 1) };
                encoder.push(EncoderLayer::new(&mut ss.scope(&format!("enc{l}")), cin, ch(l), enc_norm(l))?);
            }
            let mut decoder = Vec::with_capacity(levels);
            let mut heads = Vec::with_capacity(levels);
            for l in 1..=levels {
                let up = if l == levels { 2 * ch(levels) } else { dch(l + 1) };
                decoder.push(DecoderLayer::new(&mut ss.scope(&format!("dec{l}")), up + skip_ch(l), dch(l))?);
                heads.push(head(&mut ss.scope(&format!("head{l}")), dch(l))?);
            }
            Some(StructureStream {
                encoder,
                gates,
                decoder,
                heads,
            })
        } else {
            None
        };

        let mut fusion = Vec::new();
        if ss.is_some() {
            for l in 1..=levels {
                let mut scope = init.scope(&format!("afb{l}"));
                fusion.push(if ablation.no_afblk {
                    Fusion::Concat(Conv2d::new(
                        &mut scope.scope("entry"),
                        2 * dch(l),
                        dch(l),
                        1,
                        ConvSpec::new(1, 0, 1),
                        true,
                    )?)
                } else {
                    Fusion::Adaptive(AdaptiveFusion::new(
                        &mut scope,
                        dch(l),
                        dch(l),
                        dch(l),
                        cfg.attention_reduction,
                    )?)
                });
            }
        }

        Ok(Self {
            config: config.clone(),
            ms_encoder,
            bottleneck,
            ms_decoder,
            fusion,
            ms_heads,
            ss,
        })
    }

    fn levels(&self) -> usize {
        self.config.num_levels
    }

    /// Checks image/mask shapes against the configuration.
    pub fn check_inputs<T: Real>(&self, g: &Graph<T>, image: Var, mask: Var) -> Result<()> {
        let (is, ms) = (g.shape(image), g.shape(mask));
        let [h, w] = [is.h(), is.w()];
        let step = 1usize << self.levels();
        if h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 2^{} = {step}",
                self.levels()
            )));
        }
        if is.c() != 3 || ms.c() != 1 || is.n() != ms.n() || is.h() != ms.h() || is.w() != ms.w() {
            return Err(Error::Input(format!("image {is:?} with mask {ms:?}")));
        }
        Ok(())
    }

    /// `[image * (1 - mask); mask]` with holes zeroed.
    pub fn network_input<T: Real>(&self, g: &mut Graph<T>, image: Var, mask: Var) -> Result<Var> {
        self.check_inputs(g, image, mask)?;
        let neg = g.scale(mask, -1.0)?;
        let keep = g.offset(neg, 1.0)?;
        let masked = g.mul(image, keep)?;
        Ok(g.concat(&[masked, mask])?)
    }

    /// Main-stream encoder: `X^1..X^L`.
    pub fn ms_encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.levels());
        let mut x = input;
        for layer in &self.ms_encoder {
            x = layer.forward(g, p, x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    fn link<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ss: &StructureStream,
        level: usize,
        x: Var,
        opts: ForwardOptions,
        gates: &mut Vec<Var>,
    ) -> Result<Var> {
        if ss.gates.is_empty() {
            return Ok(x);
        }
        if let Some(v) = opts.gate_override {
            let gate = g.constant(Tensor::full(g.shape(x), T::of(v)));
            gates.push(gate);
            return Ok(g.mul(gate, x)?);
        }
        let out = ss.gates[level - 1].forward(g, p, x)?;
        gates.push(out.gate);
        Ok(out.gated)
    }

    /// Structure-stream encoder. Level 1 sees only the network input; level
    /// `l >= 2` sees `[S^(l-1); O^(l-1)]` where `O` is the gated main-stream feature.
    pub fn ss_encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: Var,
        ms_features: &[Var],
        opts: ForwardOptions,
    ) -> Result<StructureEncoding> {
        let ss = self
            .ss
            .as_ref()
            .ok_or_else(|| Error::Internal("structure stream is disabled".into()))?;
        let levels = self.levels();
        if ms_features.len() != levels {
            return Err(Error::Internal(format!(
                "{} main-stream features for {levels} levels",
                ms_features.len()
            )));
        }
        let mut features = Vec::with_capacity(levels);
        let mut gates = Vec::with_capacity(levels);
        let mut links = Vec::with_capacity(levels);
        let mut s = ss.encoder[0].forward(g, p, input)?;
        features.push(s);
        for l in 2..=levels {
            let x = ms_features[l - 2];
            if g.shape(x) != g.shape(s) {
                return Err(Error::Internal(format!(
                    "MS level {} is {:?} but SS level {} is {:?}",
                    l - 1,
                    g.shape(x),
                    l - 1,
                    g.shape(s)
                )));
            }
            let o = self.link(g, p, ss, l - 1, x, opts, &mut gates)?;
            links.push(o);
            let cat = g.concat(&[s, o])?;
            s = ss.encoder[l - 1].forward(g, p, cat)?;
            features.push(s);
        }
        let top = ms_features[levels - 1];
        let o = self.link(g, p, ss, levels, top, opts, &mut gates)?;
        links.push(o);
        Ok(StructureEncoding {
            features,
            gates,
            links,
        })
    }

    /// Stacked residual dilated blocks on `X^L`.
    pub fn ms_bottleneck<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.bottleneck {
            h = block.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// Structure-stream decoder, entered from `[S^L; O^L]`.
    pub fn ss_decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: Var,
        enc: &StructureEncoding,
    ) -> Result<Decoding> {
        let ss = self
            .ss
            .as_ref()
            .ok_or_else(|| Error::Internal("structure stream is disabled".into()))?;
        let levels = self.levels();
        let top_s = *enc.features.last().ok_or_else(|| Error::Internal("empty SS encoding".into()))?;
        let top_o = *enc.links.last().ok_or_else(|| Error::Internal("missing SS top link".into()))?;
        let mut prev = g.concat(&[top_s, top_o])?;
        let mut features = vec![prev; levels];
        let mut pyramid = vec![prev; levels];
        for l in (1..=levels).rev() {
            let skip = if l >= 2 { enc.features[l - 2] } else { input };
            let d = ss.decoder[l - 1].forward(g, p, prev, skip)?;
            features[l - 1] = d;
            pyramid[l - 1] = emit(g, p, &ss.heads[l - 1], d, l == 1)?;
            prev = d;
        }
        Ok(Decoding { features, pyramid })
    }

    /// Main-stream decoder; each level fuses the structure feature `S'^l`
    /// after its own upsample/skip/conv step.
    pub fn ms_decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: Var,
        bottleneck_out: Var,
        ms_features: &[Var],
        ss_features: Option<&[Var]>,
    ) -> Result<Decoding> {
        let levels = self.levels();
        if !self.fusion.is_empty() {
            match ss_features {
                Some(f) if f.len() == levels => {}
                _ => {
                    return Err(Error::Internal(
                        "main-stream decoder needs one structure feature per level".into(),
                    ))
                }
            }
        }
        let mut prev = bottleneck_out;
        let mut features = vec![prev; levels];
        let mut pyramid = vec![prev; levels];
        for l in (1..=levels).rev() {
            let skip = if l >= 2 { ms_features[l - 2] } else { input };
            let d = self.ms_decoder[l - 1].forward(g, p, prev, skip)?;
            let x = match (self.fusion.get(l - 1), ss_features) {
                (Some(Fusion::Adaptive(afb)), Some(s)) => afb.forward(g, p, d, s[l - 1])?,
                (Some(Fusion::Concat(conv)), Some(s)) => {
                    let cat = g.concat(&[d, s[l - 1]])?;
                    let h = conv.forward(g, p, cat)?;
                    g.leaky_relu(h, LEAKY_SLOPE)?
                }
                _ => d,
            };
            features[l - 1] = x;
            pyramid[l - 1] = emit(g, p, &self.ms_heads[l - 1], x, l == 1)?;
            prev = x;
        }
        Ok(Decoding { features, pyramid })
    }

    /// End-to-end forward pass.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        mask: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardResult> {
        let input = self.network_input(g, image, mask)?;
        let ms_features = self.ms_encode(g, p, input)?;
        let structure = match self.ss {
            Some(_) => Some(self.ss_encode(g, p, input, &ms_features, opts)?),
            None => None,
        };
        let bottleneck = self.ms_bottleneck(g, p, ms_features[self.levels() - 1])?;
        let ss_decoder = match &structure {
            Some(enc) => Some(self.ss_decode(g, p, input, enc)?),
            None => None,
        };
        let ms_decoder = self.ms_decode(
            g,
            p,
            input,
            bottleneck,
            &ms_features,
            ss_decoder.as_ref().map(|d| d.features.as_slice()),
        )?;
        let final_image = ms_decoder.pyramid[0];
        let composited = composite(g, image, mask, final_image)?;
        Ok(ForwardResult {
            input,
            ms_features,
            bottleneck,
            structure,
            ss_decoder,
            ms_decoder,
            final_image,
            composited,
        })
    }
}

fn head<T: Real>(init: &mut Init<'_, T>, channels: usize) -> Result<Conv2d> {
    Conv2d::new(init, channels, 3, 1, ConvSpec::new(1, 0, 1), true)
}

/// RGB head output; the full-resolution level is squashed by `tanh`.
fn emit<T: Real>(g: &mut Graph<T>, p: &Bound, head: &Conv2d, x: Var, full_res: bool) -> Result<Var> {
    let rgb = head.forward(g, p, x)?;
    if full_res {
        Ok(g.tanh(rgb)?)
    } else {
        Ok(rgb)
    }
}

/// `(1 - mask) * image + mask * generated`.
pub fn composite<T: Real>(g: &mut Graph<T>, image: Var, mask: Var, generated: Var) -> Result<Var> {
    let neg = g.scale(mask, -1.0)?;
    let keep = g.offset(neg, 1.0)?;
    let known = g.mul(keep, image)?;
    let filled = g.mul(mask, generated)?;
    Ok(g.add(known, filled)?)
}
