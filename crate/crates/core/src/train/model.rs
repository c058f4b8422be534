use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::layers::{Ctx, Linear, Mode, ParamStore};
use crate::msafeb::{AttentionKind, AttentionVariant, Msafeb, MsafebConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub msafeb: MsafebConfig,
    pub n_classes: usize,
    pub with_msafeb: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 64×64 input, 64-channel backbone, reduced block.
    pub fn desk(n_classes: usize, with_msafeb: bool, seed: u64) -> Self {
        Self {
            backbone: BackboneConfig::default(),
            msafeb: MsafebConfig::desk(),
            n_classes,
            with_msafeb,
            seed,
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut kv = KvConfig::default();
        kv.set("n_classes", self.n_classes);
        kv.set("with_msafeb", self.with_msafeb);
        kv.set("model_seed", self.seed);
        kv.set("backbone.stage_channels", join(&self.backbone.stage_channels));
        kv.set("backbone.out_channels", self.backbone.out_channels);
        kv.set("backbone.input_size", format!("{}x{}", self.backbone.input_size.0, self.backbone.input_size.1));
        apply_msafeb_kv(&self.msafeb, &mut kv);
        kv
    }

    /// Reads a model description; absent keys keep the desk defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let n_classes = kv
            .get::<usize>("n_classes")?
            .ok_or_else(|| Error::Config("missing key \"n_classes\"".into()))?;
        let mut cfg = Self::desk(n_classes, kv.get_or("with_msafeb", true)?, kv.get_or("model_seed", 0)?);
        if let Some(v) = kv.get_list("backbone.stage_channels")? {
            cfg.backbone.stage_channels = v;
        }
        if let Some(v) = kv.get("backbone.out_channels")? {
            cfg.backbone.out_channels = v;
        }
        if let Some(s) = kv.get_str("backbone.input_size") {
            cfg.backbone.input_size = parse_size(s)?;
        }
        cfg.msafeb = msafeb_from_kv(kv, cfg.msafeb)?;
        Ok(cfg)
    }
}

/// Parses `HxW` (or a single number for square sizes).
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("cannot parse size {s:?}, expected HxW"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

pub fn apply_msafeb_kv(m: &MsafebConfig, kv: &mut KvConfig) {
    let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    kv.set("msafeb.input_channels", m.input_channels);
    kv.set("msafeb.branch_kernels", join(&m.branch_kernels));
    kv.set("msafeb.branch_filters", m.branch_filters);
    kv.set("msafeb.branch_dilation", m.branch_dilation);
    kv.set("msafeb.branch_groups", m.branch_groups);
    kv.set("msafeb.aspp_rates", join(&m.aspp_rates));
    kv.set("msafeb.aspp_branch_channels", m.aspp_branch_channels);
    kv.set("msafeb.fusion_channels", m.fusion_channels);
    kv.set("msafeb.attention", m.attention.variant.name());
    kv.set("msafeb.reduction_ratio", m.attention.reduction_ratio);
    kv.set("msafeb.spatial_kernel", m.attention.spatial_kernel);
    kv.set("msafeb.bn_momentum", m.bn_momentum);
    kv.set("msafeb.bn_eps", m.bn_eps);
}

/// Overlays `msafeb.*` keys onto `base`.
pub fn msafeb_from_kv(kv: &KvConfig, base: MsafebConfig) -> Result<MsafebConfig> {
    let mut m = base;
    if let Some(v) = kv.get("msafeb.input_channels")? {
        m.input_channels = v;
    }
    if let Some(v) = kv.get_list("msafeb.branch_kernels")? {
        m.branch_kernels = v;
    }
    if let Some(v) = kv.get("msafeb.branch_filters")? {
        m.branch_filters = v;
    }
    if let Some(v) = kv.get("msafeb.branch_dilation")? {
        m.branch_dilation = v;
    }
    if let Some(v) = kv.get("msafeb.branch_groups")? {
        m.branch_groups = v;
    }
    if let Some(v) = kv.get_list("msafeb.aspp_rates")? {
        m.aspp_rates = v;
    }
    if let Some(v) = kv.get("msafeb.aspp_branch_channels")? {
        m.aspp_branch_channels = v;
    }
    if let Some(v) = kv.get("msafeb.fusion_channels")? {
        m.fusion_channels = v;
    }
    if let Some(s) = kv.get_str("msafeb.attention") {
        m.attention = AttentionKind {
            variant: AttentionVariant::parse(s)?,
            ..m.attention
        };
    }
    if let Some(v) = kv.get("msafeb.reduction_ratio")? {
        m.attention.reduction_ratio = v;
    }
    if let Some(v) = kv.get("msafeb.spatial_kernel")? {
        m.attention.spatial_kernel = v;
    }
    if let Some(v) = kv.get("msafeb.bn_momentum")? {
        m.bn_momentum = v;
    }
    if let Some(v) = kv.get("msafeb.bn_eps")? {
        m.bn_eps = v;
    }
    m.validate()?;
    Ok(m)
}

/// Backbone → (block | GAP) → dropout → dense classifier.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    block: Option<Msafeb>,
    classifier: Linear,
}

pub fn assemble_model(
    backbone_cfg: BackboneConfig,
    msafeb_cfg: MsafebConfig,
    n_classes: usize,
    with_msafeb: bool,
    seed: u64,
) -> Result<Model> {
    Model::new(ModelConfig {
        backbone: backbone_cfg,
        msafeb: msafeb_cfg,
        n_classes,
        with_msafeb,
        seed,
    })
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.n_classes < 2 {
            return Err(Error::Config(format!("need ≥ 2 classes, got {}", cfg.n_classes)));
        }
        if cfg.with_msafeb && cfg.backbone.out_channels != cfg.msafeb.input_channels {
            return Err(Error::Config(format!(
                "backbone produces {} channels but the block expects {}",
                cfg.backbone.out_channels, cfg.msafeb.input_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", cfg.backbone.clone(), &mut rng)?;
        let block = if cfg.with_msafeb {
            Some(Msafeb::new(&mut store, "msafeb", cfg.msafeb.clone(), &mut rng)?)
        } else {
            None
        };
        let feature_len = if cfg.with_msafeb {
            cfg.msafeb.output_len()
        } else {
            cfg.backbone.out_channels
        };
        let classifier = Linear::new(&mut store, "classifier", feature_len, cfg.n_classes, &mut rng);
        Ok(Self {
            cfg,
            store,
            backbone,
            block,
            classifier,
        })
    }

    /// Length of the vector fed to the classifier.
    pub fn feature_len(&self) -> usize {
        self.classifier.in_features
    }

    pub fn block(&self) -> Option<&Msafeb> {
        self.block.as_ref()
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.store.freeze_prefix("backbone.", frozen);
    }

    /// Runs the network on `images` (already on `tape`) and returns the bound
    /// context together with the N×classes logits.
    pub fn forward<'a, R: Rng + ?Sized>(
        &'a mut self,
        tape: &'a mut Tape,
        images: Var,
        mode: Mode,
        dropout_rate: f32,
        rng: &mut R,
    ) -> Result<(Ctx<'a>, Var)> {
        let Model {
            store,
            backbone,
            block,
            classifier,
            ..
        } = self;
        let mut ctx = Ctx::new(tape, store, mode);
        let features = backbone.forward(&mut ctx, images)?;
        let pooled = match block {
            Some(b) => b.forward(&mut ctx, features)?.features,
            None => ctx.tape.global_avg_pool(features)?,
        };
        ctx.record_stage("F", pooled);
        let dropped = ctx.tape.dropout(pooled, dropout_rate, mode, rng)?;
        let logits = classifier.forward(&mut ctx, dropped)?;
        Ok((ctx, logits))
    }

    /// Eval-mode logits for a batch of images.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ctx, logits) = self.forward(&mut tape, x, Mode::Eval, 0.0, &mut rng)?;
        Ok(ctx.tape.value(logits).clone())
    }
}
