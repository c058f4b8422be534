//! Multi-scale attention feature extraction block.
//!
//! Data flow for an input map `I` (N×K×H×W):
//!
//! ```text
//! C_i = ReLU(conv_{i×i}(I))               i ∈ branch_kernels, dilated + grouped
//! D_i = ASPP(C_i)                          1×1 @ rate 1, 3×3 @ rates 6/12/18
//! G_i = GAP(C_i)
//! E   = attention(ReLU(conv_1×1(I ⊕ D_1 ⊕ D_2 ⊕ D_3)))
//! G   = GAP(BN(E))
//! F   = G ⊕ G_1 ⊕ G_2 ⊕ G_3
//! ```
//!
//! Every convolution uses same-zero padding at stride 1, so all maps keep the
//! input's H×W and can be concatenated with `I`.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, ConvSpec, Conv2d, Ctx, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Identity,
    ChannelGate,
    ChannelThenSpatial,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Identity => "identity",
            AttentionVariant::ChannelGate => "channel_gate",
            AttentionVariant::ChannelThenSpatial => "channel_then_spatial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "channel_gate" => Ok(Self::ChannelGate),
            "channel_then_spatial" => Ok(Self::ChannelThenSpatial),
            other => Err(Error::Config(format!("unknown attention variant {other:?}"))),
        }
    }
}

/// Attention stage applied after the fusion convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionKind {
    pub variant: AttentionVariant,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for AttentionKind {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::ChannelThenSpatial,
            reduction_ratio: 8,
            spatial_kernel: 7,
        }
    }
}

impl AttentionKind {
    pub fn identity() -> Self {
        Self {
            variant: AttentionVariant::Identity,
            ..Self::default()
        }
    }

    fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction_ratio).max(1)
    }

    pub fn param_count(&self, channels: usize) -> usize {
        let channel_gate = {
            let h = self.hidden(channels);
            (channels * h + h) + (h * channels + channels)
        };
        let spatial = 2 * self.spatial_kernel * self.spatial_kernel + 1;
        match self.variant {
            AttentionVariant::Identity => 0,
            AttentionVariant::ChannelGate => channel_gate,
            AttentionVariant::ChannelThenSpatial => channel_gate + spatial,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsafebConfig {
    pub input_channels: usize,
    pub branch_kernels: Vec<usize>,
    pub branch_filters: usize,
    pub branch_dilation: usize,
    pub branch_groups: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_branch_channels: usize,
    pub fusion_channels: usize,
    pub attention: AttentionKind,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl Default for MsafebConfig {
    /// Full-size geometry: 1920 input channels, 480 filters, dilation 4,
    /// 8 groups, ASPP rates 1/6/12/18.
    fn default() -> Self {
        Self {
            input_channels: 1920,
            branch_kernels: vec![1, 3, 5],
            branch_filters: 480,
            branch_dilation: 4,
            branch_groups: 8,
            aspp_rates: vec![1, 6, 12, 18],
            aspp_branch_channels: 120,
            fusion_channels: 480,
            attention: AttentionKind::default(),
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl MsafebConfig {
    /// Reduced geometry for training at desk scale on a 64-channel backbone.
    pub fn desk() -> Self {
        Self {
            input_channels: 64,
            branch_filters: 32,
            aspp_branch_channels: 8,
            fusion_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.branch_kernels.is_empty() {
            return fail("branch_kernels is empty".into());
        }
        if self.branch_kernels.iter().any(|&k| k % 2 == 0) {
            return fail(format!("branch kernels must be odd: {:?}", self.branch_kernels));
        }
        if self.branch_groups == 0 || self.branch_filters % self.branch_groups != 0 {
            return fail(format!(
                "branch_filters {} not divisible by branch_groups {}",
                self.branch_filters, self.branch_groups
            ));
        }
        if self.input_channels % self.branch_groups != 0 {
            return fail(format!(
                "input_channels {} not divisible by branch_groups {}",
                self.input_channels, self.branch_groups
            ));
        }
        if self.aspp_rates.first() != Some(&1) || self.aspp_rates.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "aspp_rates must start at 1 and increase strictly: {:?}",
                self.aspp_rates
            ));
        }
        if self.branch_dilation == 0 || self.aspp_branch_channels == 0 || self.fusion_channels == 0 {
            return fail("dilation and channel counts must be positive".into());
        }
        if self.attention.reduction_ratio == 0 || self.attention.spatial_kernel % 2 == 0 {
            return fail(format!("invalid attention settings {:?}", self.attention));
        }
        Ok(())
    }

    pub fn aspp_out_channels(&self) -> usize {
        self.aspp_rates.len() * self.aspp_branch_channels
    }

    pub fn fusion_in_channels(&self) -> usize {
        self.input_channels + self.branch_kernels.len() * self.aspp_out_channels()
    }

    /// Length of the output feature vector F.
    pub fn output_len(&self) -> usize {
        self.fusion_channels + self.branch_kernels.len() * self.branch_filters
    }

    fn branch_spec(&self, kernel: usize) -> ConvSpec {
        ConvSpec::new(self.input_channels, self.branch_filters, kernel)
            .dilation(self.branch_dilation)
            .groups(self.branch_groups)
    }

    fn aspp_spec(&self, rate: usize) -> ConvSpec {
        let kernel = if rate == 1 { 1 } else { 3 };
        ConvSpec::new(self.branch_filters, self.aspp_branch_channels, kernel).dilation(rate)
    }

    fn fusion_spec(&self) -> ConvSpec {
        ConvSpec::new(self.fusion_in_channels(), self.fusion_channels, 1)
    }
}

/// Analytic learnable-parameter counts per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub branches: usize,
    pub aspp: usize,
    pub fusion: usize,
    pub attention: usize,
    pub batch_norm: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.branches + self.aspp + self.fusion + self.attention + self.batch_norm
    }
}

pub fn param_count(cfg: &MsafebConfig) -> ParamBreakdown {
    let per_stack: usize = cfg.aspp_rates.iter().map(|&r| cfg.aspp_spec(r).param_count()).sum();
    ParamBreakdown {
        branches: cfg.branch_kernels.iter().map(|&k| cfg.branch_spec(k).param_count()).sum(),
        aspp: cfg.branch_kernels.len() * per_stack,
        fusion: cfg.fusion_spec().param_count(),
        attention: cfg.attention.param_count(cfg.fusion_channels),
        batch_norm: 2 * cfg.fusion_channels,
    }
}

#[derive(Clone, Debug)]
struct Attention {
    kind: AttentionKind,
    squeeze: Option<(Linear, Linear)>,
    spatial: Option<Conv2d>,
}

impl Attention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, kind: AttentionKind, channels: usize, rng: &mut R) -> Result<Self> {
        let with_channel = kind.variant != AttentionVariant::Identity;
        let with_spatial = kind.variant == AttentionVariant::ChannelThenSpatial;
        let squeeze = with_channel.then(|| {
            let h = kind.hidden(channels);
            (
                Linear::new(store, &format!("{name}.fc1"), channels, h, rng),
                Linear::new(store, &format!("{name}.fc2"), h, channels, rng),
            )
        });
        let spatial = if with_spatial {
            Some(Conv2d::new(store, &format!("{name}.spatial"), ConvSpec::new(2, 1, kind.spatial_kernel), rng)?)
        } else {
            None
        };
        Ok(Self { kind, squeeze, spatial })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some((fc1, fc2)) = &self.squeeze {
            let pooled = ctx.tape.global_avg_pool(y)?;
            let h = fc1.forward(ctx, pooled)?;
            let h = ctx.tape.relu(h)?;
            let s = fc2.forward(ctx, h)?;
            let gate = ctx.tape.sigmoid(s)?;
            y = ctx.tape.mul_channel(y, gate)?;
        }
        if let Some(conv) = &self.spatial {
            let desc = ctx.tape.channel_mean_max(y)?;
            let s = conv.forward(ctx, desc)?;
            let gate = ctx.tape.sigmoid(s)?;
            y = ctx.tape.mul_spatial(y, gate)?;
        }
        debug_assert!(self.kind.variant != AttentionVariant::Identity || y == x);
        Ok(y)
    }
}

/// The block with its parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Msafeb {
    pub cfg: MsafebConfig,
    branches: Vec<Conv2d>,
    aspp: Vec<Vec<Conv2d>>,
    fusion: Conv2d,
    attention: Attention,
    bn: BatchNorm,
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct MsafebOutputs {
    pub branches: Vec<Var>,
    pub aspp: Vec<Var>,
    pub branch_pools: Vec<Var>,
    pub fused: Var,
    pub attended: Var,
    pub aggregated: Var,
    pub features: Var,
}

impl Msafeb {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: MsafebConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .branch_kernels
            .iter()
            .map(|&k| Conv2d::new(store, &format!("{prefix}.branch{k}"), cfg.branch_spec(k), rng))
            .collect::<Result<Vec<_>>>()?;
        let aspp = cfg
            .branch_kernels
            .iter()
            .map(|&k| {
                cfg.aspp_rates
                    .iter()
                    .map(|&r| Conv2d::new(store, &format!("{prefix}.aspp{k}.rate{r}"), cfg.aspp_spec(r), rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = Conv2d::new(store, &format!("{prefix}.fusion"), cfg.fusion_spec(), rng)?;
        let attention = Attention::new(store, &format!("{prefix}.attention"), cfg.attention, cfg.fusion_channels, rng)?;
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), cfg.fusion_channels, cfg.bn_momentum, cfg.bn_eps)?;
        Ok(Self {
            cfg,
            branches,
            aspp,
            fusion,
            attention,
            bn,
        })
    }

    fn check_input(&self, ctx: &Ctx, input: Var) -> Result<()> {
        let (_, c, _, _) = ctx.tape.value(input).nchw()?;
        if c != self.cfg.input_channels {
            return Err(Error::Shape(format!(
                "block expects {} input channels, got {c}",
                self.cfg.input_channels
            )));
        }
        Ok(())
    }

    /// `C_i = ReLU(conv_{i×i}(I))` for each branch kernel.
    pub fn multi_scale_conv(&self, ctx: &mut Ctx, input: Var) -> Result<Vec<Var>> {
        self.check_input(ctx, input)?;
        self.branches
            .iter()
            .map(|conv| {
                let y = conv.forward(ctx, input)?;
                ctx.tape.relu(y)
            })
            .collect()
    }

    /// Atrous pyramid on branch `index`: parallel dilated convs, concatenated.
    pub fn aspp(&self, ctx: &mut Ctx, index: usize, branch: Var) -> Result<Var> {
        let stack = self
            .aspp
            .get(index)
            .ok_or_else(|| Error::Config(format!("no ASPP stack for branch {index}")))?;
        let parts = stack
            .iter()
            .map(|conv| {
                let y = conv.forward(ctx, branch)?;
                ctx.tape.relu(y)
            })
            .collect::<Result<Vec<_>>>()?;
        ctx.tape.concat_channels(&parts)
    }

    pub fn gap_branches(&self, ctx: &mut Ctx, branches: &[Var]) -> Result<Vec<Var>> {
        branches.iter().map(|&c| ctx.tape.global_avg_pool(c)).collect()
    }

    /// Concatenates `I, D_1, …`, mixes with a 1×1 conv and applies attention.
    /// Returns (pre-attention map, attended map E).
    pub fn fuse_attend(&self, ctx: &mut Ctx, input: Var, pyramids: &[Var]) -> Result<(Var, Var)> {
        let (n, _, h, w) = ctx.tape.value(input).nchw()?;
        for (k, &d) in pyramids.iter().enumerate() {
            let (dn, _, dh, dw) = ctx.tape.value(d).nchw()?;
            if (dn, dh, dw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "D_{} has batch/spatial extent {:?}, expected {:?}",
                    k + 1,
                    (dn, dh, dw),
                    (n, h, w)
                )));
            }
        }
        let mut parts = Vec::with_capacity(pyramids.len() + 1);
        parts.push(input);
        parts.extend_from_slice(pyramids);
        let cat = ctx.tape.concat_channels(&parts)?;
        let mixed = self.fusion.forward(ctx, cat)?;
        let fused = ctx.tape.relu(mixed)?;
        let attended = self.attention.forward(ctx, fused)?;
        Ok((fused, attended))
    }

    /// `G = GAP(BN(E))`.
    pub fn aggregate(&self, ctx: &mut Ctx, attended: Var) -> Result<Var> {
        let normed = self.bn.forward(ctx, attended)?;
        ctx.tape.global_avg_pool(normed)
    }

    /// Full block. Records stages `C1.., D1.., E` on the context for
    /// saliency lookups.
    pub fn forward(&self, ctx: &mut Ctx, input: Var) -> Result<MsafebOutputs> {
        let branches = self.multi_scale_conv(ctx, input)?;
        let aspp = branches
            .iter()
            .enumerate()
            .map(|(i, &c)| self.aspp(ctx, i, c))
            .collect::<Result<Vec<_>>>()?;
        let branch_pools = self.gap_branches(ctx, &branches)?;
        let (fused, attended) = self.fuse_attend(ctx, input, &aspp)?;
        let aggregated = self.aggregate(ctx, attended)?;
        let mut parts = vec![aggregated];
        parts.extend_from_slice(&branch_pools);
        let features = ctx.tape.concat_channels(&parts)?;

        for (i, (&c, &d)) in branches.iter().zip(&aspp).enumerate() {
            ctx.record_stage(format!("C{}", i + 1), c);
            ctx.record_stage(format!("D{}", i + 1), d);
        }
        ctx.record_stage("fused", fused);
        ctx.record_stage("E", attended);
        Ok(MsafebOutputs {
            branches,
            aspp,
            branch_pools,
            fused,
            attended,
            aggregated,
            features,
        })
    }
}
