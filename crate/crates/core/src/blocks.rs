//! Parameterized building blocks shared by both streams.
//!
//! Every block is a pure function of `(parameters, inputs)`: it records its
//! computation on the caller's [`Graph`] and holds no mutable state.

use twostream_autograd::{ConvSpec, Graph, Real, Shape, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Channel-attention bottleneck ratio.
pub const REDUCTION: usize = 4;
pub const NORM_EPS: f64 = 1e-5;

/// Convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(Error::Config(format!(
                "conv {in_channels}->{out_channels} with kernel {kernel}"
            )));
        }
        let weight = init.kaiming("weight", [out_channels, in_channels, kernel, kernel], LEAKY_SLOPE)?;
        let bias = if bias {
            Some(init.constant("bias", [1, out_channels, 1, 1], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x).c();
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        Ok(g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.spec)?)
    }

    /// Parameter ids owned by this layer.
    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Normalization applied inside encoder, decoder and residual layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Instance,
    /// Identity; only useful for locality probes since instance statistics
    /// couple every spatial position.
    None,
}

#[derive(Debug, Clone)]
pub struct Norm {
    affine: Option<(ParamId, ParamId)>,
}

impl Norm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, kind: NormKind, channels: usize) -> Result<Self> {
        let affine = match kind {
            NormKind::Instance => {
                let gamma = init.constant("gamma", [1, channels, 1, 1], 1.0)?;
                let beta = init.constant("beta", [1, channels, 1, 1], 0.0)?;
                Some((gamma, beta))
            }
            NormKind::None => None,
        };
        Ok(Self { affine })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match self.affine {
            Some((gamma, beta)) => Ok(g.instance_norm(x, p[gamma], p[beta], NORM_EPS)?),
            None => Ok(x),
        }
    }
}

fn finite_input<T: Real>(g: &Graph<T>, x: Var, what: &str) -> Result<()> {
    if g.value(x).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} input")))
    }
}

/// Output of [`GatedUnit::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Gated {
    pub gated: Var,
    pub gate: Var,
}

/// `G = sigmoid(leaky_relu(conv3x3(X)))`, `O = G * X`.
#[derive(Debug, Clone)]
pub struct GatedUnit {
    pub conv: Conv2d,
}

impl GatedUnit {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize) -> Result<Self> {
        let conv = Conv2d::new(&mut init.scope("conv"), channels, channels, 3, ConvSpec::same(3, 1), true)?;
        Ok(Self { conv })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Gated> {
        finite_input(g, x, "gated unit")?;
        let pre = self.conv.forward(g, p, x)?;
        let act = g.leaky_relu(pre, LEAKY_SLOPE)?;
        let gate = g.sigmoid(act)?;
        let gated = g.mul(gate, x)?;
        Ok(Gated { gated, gate })
    }
}

/// `sigmoid(MLP(AvgPool(F)))` over the spatial axes, shaped (B, C, 1, 1).
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel attention: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let pointwise = ConvSpec::new(1, 0, 1);
        let squeeze = Conv2d::new(&mut init.scope("squeeze"), channels, hidden, 1, pointwise, true)?;
        let excite = Conv2d::new(&mut init.scope("excite"), hidden, channels, 1, pointwise, true)?;
        Ok(Self { squeeze, excite })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        let pooled = g.spatial_mean(f)?;
        let hidden = self.squeeze.forward(g, p, pooled)?;
        let hidden = g.relu(hidden)?;
        let logits = self.excite.forward(g, p, hidden)?;
        Ok(g.sigmoid(logits)?)
    }
}

/// `sigmoid(conv5x5([mean_c(F); max_c(F)]))`, shaped (B, 1, H, W).
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>) -> Result<Self> {
        let conv = Conv2d::new(&mut init.scope("conv"), 2, 1, 5, ConvSpec::same(5, 1), true)?;
        Ok(Self { conv })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        let s = g.shape(f);
        if s.h() < 1 || s.w() < 1 {
            return Err(Error::Input(format!("spatial attention on {s:?}")));
        }
        let mean = g.channel_mean(f)?;
        let max = g.channel_max(f)?;
        let pooled = g.concat(&[mean, max])?;
        let logits = self.conv.forward(g, p, pooled)?;
        Ok(g.sigmoid(logits)?)
    }
}

/// Intermediate tensors of one adaptive fusion evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FusionParts {
    pub fused: Var,
    pub channel: Var,
    pub spatial: Var,
    pub output: Var,
}

/// Adaptive fusion of a main-stream decoder feature with the matching
/// structure-stream decoder feature:
///
/// ```text
/// F    = leaky_relu(conv1x1([x; s]))
/// F_ch = CA(F) * F,  F_sp = SA(F) * F
/// Y    = alpha * F_ch + (1 - alpha) * F_sp,  alpha = sigmoid(a_raw)
/// ```
#[derive(Debug, Clone)]
pub struct AdaptiveFusion {
    pub entry: Conv2d,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub alpha_raw: ParamId,
}

impl AdaptiveFusion {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        main_channels: usize,
        structure_channels: usize,
        out_channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let entry = Conv2d::new(
            &mut init.scope("entry"),
            main_channels + structure_channels,
            out_channels,
            1,
            ConvSpec::new(1, 0, 1),
            true,
        )?;
        let channel = ChannelAttention::new(&mut init.scope("channel"), out_channels, reduction)?;
        let spatial = SpatialAttention::new(&mut init.scope("spatial"))?;
        let alpha_raw = init.constant("alpha_raw", Shape::SCALAR, 0.0)?;
        Ok(Self {
            entry,
            channel,
            spatial,
            alpha_raw,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x_dec: Var, s_dec: Var) -> Result<Var> {
        Ok(self.forward_parts(g, p, x_dec, s_dec)?.output)
    }

    pub fn forward_parts<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_dec: Var,
        s_dec: Var,
    ) -> Result<FusionParts> {
        let (xs, ss) = (g.shape(x_dec), g.shape(s_dec));
        if xs.n() != ss.n() || xs.h() != ss.h() || xs.w() != ss.w() {
            return Err(Error::Input(format!(
                "adaptive fusion of {xs:?} with {ss:?}"
            )));
        }
        let cat = g.concat(&[x_dec, s_dec])?;
        let pre = self.entry.forward(g, p, cat)?;
        let fused = g.leaky_relu(pre, LEAKY_SLOPE)?;
        let ca = self.channel.forward(g, p, fused)?;
        let sa = self.spatial.forward(g, p, fused)?;
        let channel = g.mul(ca, fused)?;
        let spatial = g.mul(sa, fused)?;
        let alpha = g.sigmoid(p[self.alpha_raw])?;
        let neg = g.scale(alpha, -1.0)?;
        let beta = g.offset(neg, 1.0)?;
        let from_channel = g.mul(alpha, channel)?;
        let from_spatial = g.mul(beta, spatial)?;
        let output = g.add(from_channel, from_spatial)?;
        Ok(FusionParts {
            fused,
            channel,
            spatial,
            output,
        })
    }

    /// Current blend weight `sigmoid(a_raw)`.
    pub fn alpha<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        twostream_autograd::sigmoid(store.get(self.alpha_raw).item()).as_f64()
    }
}

/// `x + conv_d2(leaky_relu(norm(conv_d2(x))))` with 3x3 kernels at dilation 2.
/// The first conv carries a bias only when no normalization follows it.
#[derive(Debug, Clone)]
pub struct ResidualDilatedBlock {
    pub conv1: Conv2d,
    pub norm: Norm,
    pub conv2: Conv2d,
    pub channels: usize,
}

impl ResidualDilatedBlock {
    pub const DILATION: usize = 2;

    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, norm: NormKind) -> Result<Self> {
        let spec = ConvSpec::same(3, Self::DILATION);
        let bias = norm == NormKind::None;
        let conv1 = Conv2d::new(&mut init.scope("conv1"), channels, channels, 3, spec, bias)?;
        let norm = Norm::new(&mut init.scope("norm"), norm, channels)?;
        let conv2 = Conv2d::new(&mut init.scope("conv2"), channels, channels, 3, spec, true)?;
        Ok(Self {
            conv1,
            norm,
            conv2,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x).c();
        if c != self.channels {
            return Err(Error::Config(format!(
                "residual block built for {} channels, got {c}",
                self.channels
            )));
        }
        let h = self.conv1.forward(g, p, x)?;
        let h = self.norm.forward(g, p, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv2.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}
