//! Strided convolutional feature extractor producing K×H×W maps.

pub mod features;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, ConvSpec, Conv2d, Ctx, ParamStore};

pub use features::{read_features, write_features};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub out_channels: usize,
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            out_channels: 64,
            input_size: (64, 64),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) || self.out_channels == 0 {
            return Err(Error::Config(format!("invalid backbone channels {:?}", self)));
        }
        let f = 1usize << self.stage_channels.len();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} not divisible by {f} ({} stride-2 stages)",
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    pub fn output_size(&self) -> (usize, usize) {
        let f = 1usize << self.stage_channels.len();
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = 3;
        for &c in &self.stage_channels {
            total += ConvSpec::new(cin, c, 3).bias(false).param_count() + 2 * c;
            cin = c;
        }
        total + ConvSpec::new(cin, self.out_channels, 1).param_count()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<(Conv2d, BatchNorm)>,
    head: Conv2d,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let spec = ConvSpec::new(cin, c, 3).stride(2).bias(false);
            let conv = Conv2d::new(store, &format!("{prefix}.stage{i}.conv"), spec, rng)?;
            let bn = BatchNorm::new(store, &format!("{prefix}.stage{i}.bn"), c, 0.9, 1e-5)?;
            stages.push((conv, bn));
            cin = c;
        }
        let head = Conv2d::new(store, &format!("{prefix}.head"), ConvSpec::new(cin, cfg.out_channels, 1), rng)?;
        Ok(Self { cfg, stages, head })
    }

    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let (_, c, h, w) = ctx.tape.value(images).nchw()?;
        if c != 3 || (h, w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "backbone expects 3×{}×{} images, got {c}×{h}×{w}",
                self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        let mut x = images;
        for (conv, bn) in &self.stages {
            x = conv.forward(ctx, x)?;
            x = bn.forward(ctx, x)?;
            x = ctx.tape.relu(x)?;
        }
        let y = self.head.forward(ctx, x)?;
        ctx.record_stage("backbone", y);
        Ok(y)
    }
}
