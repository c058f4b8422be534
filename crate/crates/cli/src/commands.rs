use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::rngs::StdRng;
use rand::SeedableRng;

use msafeb_core::backbone::write_features;
use msafeb_core::config::KvConfig;
use msafeb_core::data::{load_image_dataset, synth_dataset, write_image_dataset, AugmentFlags, Image};
use msafeb_core::explain::{grad_cam, render_heatmap, DEFAULT_LAYER};
use msafeb_core::layers::ParamStore;
use msafeb_core::msafeb::{param_count, Msafeb, MsafebConfig};
use msafeb_core::train::{
    load_checkpoint, msafeb_from_kv, parse_size, run_protocol, save_checkpoint, welch_t_test, Model, ModelConfig,
    ProtocolRun, TrainConfig,
};

use crate::manifest::RunManifest;
use crate::CliError;

type CliResult<T> = Result<T, CliError>;

/// Parameter delta the block adds at full geometry in the reference report
/// (34.9 M with the block, 18.1 M without).
const REFERENCE_BLOCK_DELTA: f64 = 16.8e6;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Refuses to write into an existing non-empty directory unless forced.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn read_config(path: &Path) -> CliResult<KvConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    KvConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, env = "MSAFEB_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    if a.classes < 2 {
        return Err(usage("need ≥ 2 classes"));
    }
    if a.per_class < 1 {
        return Err(usage("need ≥ 1 image per class"));
    }
    let size = parse_size(&a.size)?;
    prepare_out(&a.out, a.force)?;
    let mut manifest = RunManifest::new("synth");
    let ds = synth_dataset(a.classes, a.per_class, size, a.seed)?;
    let written = write_image_dataset(&ds, &a.out)?;
    manifest.set("classes", a.classes);
    manifest.set("per_class", a.per_class);
    manifest.set("size", format!("{}x{}", size.0, size.1));
    manifest.set("seed", a.seed);
    manifest.set("out", a.out.display());
    manifest.set("files", written);
    manifest.write(&a.out)?;
    println!("wrote {written} images in {} classes to {}", a.classes, a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    with_msafeb: Option<bool>,
    #[arg(long, env = "MSAFEB_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f32>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    augment: Option<bool>,
    /// Horizontal flips; they relabel orientation-defined classes, so
    /// orientation tasks should turn them off.
    #[arg(long, action = clap::ArgAction::Set)]
    hflip: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    freeze_backbone: Option<bool>,
    /// Input size images are resized to.
    #[arg(long)]
    size: Option<String>,
    /// Train this many splits concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    force: bool,
}

/// Fully resolved `train` settings. Its key=value form is what the manifest
/// stores and what `--config` reads back.
struct TrainPlan {
    data: PathBuf,
    out: PathBuf,
    ratio: f64,
    splits: usize,
    with_msafeb: bool,
    seed: u64,
    size: (usize, usize),
    train: TrainConfig,
    msafeb: MsafebConfig,
}

impl TrainPlan {
    fn resolve(a: &TrainArgs) -> CliResult<Self> {
        let file = match &a.config {
            Some(p) => read_config(p)?,
            None => KvConfig::default(),
        };
        let defaults = TrainConfig::default();
        let pick = |flag: Option<String>, key: &str| flag.or_else(|| file.get_str(key).map(str::to_string));
        fn parse<T: std::str::FromStr>(v: Option<String>, key: &str, default: T) -> CliResult<T> {
            match v {
                None => Ok(default),
                Some(s) => s
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("invalid value {s:?} for {key}"))),
            }
        }
        fn s<T: ToString>(v: Option<T>) -> Option<String> {
            v.map(|v| v.to_string())
        }

        let data = pick(a.data.as_ref().map(|p| p.display().to_string()), "data")
            .ok_or_else(|| usage("missing --data"))?;
        let out = pick(a.out.as_ref().map(|p| p.display().to_string()), "out").ok_or_else(|| usage("missing --out"))?;
        let ratio: f64 = parse(pick(s(a.ratio), "ratio"), "ratio", 0.5)?;
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(usage(format!("invalid ratio {ratio}: must lie strictly between 0 and 1")));
        }
        let splits: usize = parse(pick(s(a.splits), "splits"), "splits", 5)?;
        if splits == 0 {
            return Err(usage("--splits must be ≥ 1"));
        }
        let with_msafeb: bool = parse(pick(s(a.with_msafeb), "with_msafeb"), "with_msafeb", true)?;
        let seed: u64 = parse(pick(s(a.seed), "seed"), "seed", 0)?;
        let size = parse_size(&pick(a.size.clone(), "size").unwrap_or_else(|| "64x64".into()))?;

        let augment_on: bool = parse(pick(s(a.augment), "augment"), "augment", true)?;
        let train = TrainConfig {
            learning_rate: parse(pick(s(a.lr), "lr"), "lr", defaults.learning_rate)?,
            weight_decay: parse(pick(s(a.weight_decay), "weight_decay"), "weight_decay", defaults.weight_decay)?,
            batch_size: parse(pick(s(a.batch_size), "batch_size"), "batch_size", defaults.batch_size)?,
            max_epochs: parse(pick(s(a.max_epochs), "max_epochs"), "max_epochs", defaults.max_epochs)?,
            patience: parse(pick(s(a.patience), "patience"), "patience", defaults.patience)?,
            dropout_rate: parse(pick(s(a.dropout), "dropout"), "dropout", defaults.dropout_rate)?,
            val_fraction: parse(pick(s(a.val_fraction), "val_fraction"), "val_fraction", defaults.val_fraction)?,
            seed,
            augment: AugmentFlags {
                enabled: augment_on,
                hflip: parse(pick(s(a.hflip), "hflip"), "hflip", defaults.augment.hflip)?,
                ..defaults.augment
            },
            freeze_backbone: parse(
                pick(s(a.freeze_backbone), "freeze_backbone"),
                "freeze_backbone",
                defaults.freeze_backbone,
            )?,
            checked: defaults.checked,
        };
        train.validate()?;
        let msafeb = msafeb_from_kv(&file, MsafebConfig::desk())?;
        Ok(Self {
            data: PathBuf::from(data),
            out: PathBuf::from(out),
            ratio,
            splits,
            with_msafeb,
            seed,
            size,
            train,
            msafeb,
        })
    }

    fn model_config(&self, n_classes: usize, with_msafeb: bool) -> ModelConfig {
        let mut cfg = ModelConfig::desk(n_classes, with_msafeb, self.seed);
        cfg.backbone.input_size = self.size;
        cfg.msafeb = self.msafeb.clone();
        cfg
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        let t = &self.train;
        kv.set("data", self.data.display());
        kv.set("out", self.out.display());
        kv.set("ratio", self.ratio);
        kv.set("splits", self.splits);
        kv.set("with_msafeb", self.with_msafeb);
        kv.set("seed", self.seed);
        kv.set("size", format!("{}x{}", self.size.0, self.size.1));
        kv.set("lr", t.learning_rate);
        kv.set("weight_decay", t.weight_decay);
        kv.set("batch_size", t.batch_size);
        kv.set("max_epochs", t.max_epochs);
        kv.set("patience", t.patience);
        kv.set("dropout", t.dropout_rate);
        kv.set("val_fraction", t.val_fraction);
        kv.set("augment", t.augment.enabled);
        kv.set("hflip", t.augment.hflip);
        kv.set("freeze_backbone", t.freeze_backbone);
        msafeb_core::train::apply_msafeb_kv(&self.msafeb, &mut kv);
        kv
    }
}

fn run_variant(
    plan: &TrainPlan,
    ds: &msafeb_core::data::Dataset,
    with_msafeb: bool,
    jobs: usize,
    dir: &Path,
) -> CliResult<ProtocolRun> {
    fs::create_dir_all(dir)?;
    let model_cfg = plan.model_config(ds.n_classes(), with_msafeb);
    let freeze = plan.train.freeze_backbone;
    let make = || {
        let mut m = Model::new(model_cfg.clone())?;
        m.set_backbone_frozen(freeze);
        Ok(m)
    };
    let run = run_protocol(ds, &[plan.ratio], plan.splits, plan.seed, &plan.train, jobs, make)?
        .pop()
        .expect("one ratio requested");

    let cfg_text = model_cfg.to_kv().render();
    for (k, r) in run.runs.iter().enumerate() {
        let ckpt = dir.join(format!("split{k}.ckpt"));
        save_checkpoint(&r.model, &ckpt)?;
        fs::write(sidecar_path(&ckpt), &cfg_text)?;
        let mut hist = String::from("epoch,train_loss,val_loss,val_oa\n");
        for e in &r.outcome.history {
            let _ = writeln!(hist, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_oa);
        }
        let _ = writeln!(
            hist,
            "# best_epoch={} stopped_early={}",
            r.outcome.best_epoch, r.outcome.stopped_early
        );
        fs::write(dir.join(format!("history_split{k}.csv")), hist)?;
    }
    let m = &run.metrics;
    fs::write(dir.join("metrics.txt"), m.kv_lines())?;
    fs::write(dir.join("report.txt"), human_report(&run, with_msafeb))?;
    Ok(run)
}

fn human_report(run: &ProtocolRun, with_msafeb: bool) -> String {
    let m = &run.metrics;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "model: {} | {}",
        if with_msafeb { "with MSAFEB" } else { "without MSAFEB" },
        m.setting()
    );
    for (k, (oa, r)) in m.per_split_oa.iter().zip(&run.runs).enumerate() {
        let _ = writeln!(
            s,
            "  split {k}: OA {:.2}%  (best epoch {}, {} epochs run)",
            100.0 * oa,
            r.outcome.best_epoch,
            r.outcome.history.len()
        );
    }
    let _ = writeln!(s, "  mean ± SD: {}", m.summary());
    s
}

/// Model description stored next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn train(a: TrainArgs, ablate: bool) -> CliResult<()> {
    let plan = TrainPlan::resolve(&a)?;
    if a.jobs == 0 {
        return Err(usage("--jobs must be ≥ 1"));
    }
    if !plan.data.is_dir() {
        return Err(CliError::Data(format!("data directory {} is not readable", plan.data.display())));
    }
    prepare_out(&plan.out, a.force)?;
    let mut manifest = RunManifest::new(if ablate { "ablate" } else { "train" });
    manifest.merge(&plan.to_kv());
    manifest.set("jobs", a.jobs);

    let ds = load_image_dataset(&plan.data, plan.size)?;
    manifest.set("images", ds.len());
    manifest.set("classes", ds.class_names.join(","));

    if ablate {
        let with = run_variant(&plan, &ds, true, a.jobs, &plan.out.join("with_msafeb"))?;
        let without = run_variant(&plan, &ds, false, a.jobs, &plan.out.join("without_msafeb"))?;
        let mut table = String::new();
        let _ = writeln!(table, "{:<14}{:>18}{:>18}", "Setting", "w/ MSAFEB", "w/o MSAFEB");
        let _ = writeln!(
            table,
            "{:<14}{:>18}{:>18}",
            with.metrics.setting(),
            with.metrics.summary(),
            without.metrics.summary()
        );
        let mut kv = String::new();
        for (tag, r) in [("with", &with), ("without", &without)] {
            for line in r.metrics.kv_lines().lines() {
                let _ = writeln!(kv, "{tag}.{line}");
            }
        }
        fs::write(plan.out.join("ablation.txt"), &table)?;
        fs::write(plan.out.join("metrics.txt"), &kv)?;
        manifest.set("artifacts", "with_msafeb/,without_msafeb/,ablation.txt,metrics.txt");
        manifest.write(&plan.out)?;
        print!("{table}\n{kv}");
    } else {
        let run = run_variant(&plan, &ds, plan.with_msafeb, a.jobs, &plan.out)?;
        manifest.set(
            "artifacts",
            "split<k>.ckpt,split<k>.ckpt.cfg,history_split<k>.csv,metrics.txt,report.txt",
        );
        manifest.write(&plan.out)?;
        print!("{}\n{}", human_report(&run, plan.with_msafeb), run.metrics.kv_lines());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// key=value file of `msafeb.*` settings; the desk configuration when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn params(a: ParamsArgs) -> CliResult<()> {
    let cfg = match &a.config {
        Some(p) => msafeb_from_kv(&read_config(p)?, MsafebConfig::desk())?,
        None => MsafebConfig::desk(),
    };
    cfg.validate()?;
    let b = param_count(&cfg);
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(0);
    let _block = Msafeb::new(&mut store, "msafeb", cfg.clone(), &mut rng)?;
    let enumerated = store.learnable_scalars();
    let analytic = b.total();

    println!("multi-scale branches  {:>12}", b.branches);
    println!("ASPP                  {:>12}", b.aspp);
    println!("fusion                {:>12}", b.fusion);
    println!("attention             {:>12}", b.attention);
    println!("batch norm            {:>12}", b.batch_norm);
    println!("total (analytic)      {:>12}", analytic);
    println!("total (enumerated)    {:>12}", enumerated);
    if cfg.input_channels == 1920 {
        println!(
            "note: reference block delta is {:.1} M (34.9 M - 18.1 M); this configuration adds {:.2} M ({:+.2} M)",
            REFERENCE_BLOCK_DELTA / 1e6,
            analytic as f64 / 1e6,
            (analytic as f64 - REFERENCE_BLOCK_DELTA) / 1e6
        );
    }
    println!("params_total={analytic}");
    println!("params_enumerated={enumerated}");
    if analytic != enumerated {
        return Err(CliError::Numeric(format!(
            "analytic count {analytic} differs from enumerated count {enumerated}"
        )));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: usize,
    #[arg(long, default_value = DEFAULT_LAYER)]
    layer: String,
    #[arg(long)]
    out: PathBuf,
}

pub fn gradcam(a: GradcamArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("gradcam");
    let cfg = ModelConfig::from_kv(&read_config(&sidecar_path(&a.checkpoint))?)?;
    let mut model = Model::new(cfg)?;
    load_checkpoint(&mut model, &a.checkpoint)?;
    let image = Image::read_ppm(&a.image)?;
    let (h, w) = model.cfg.backbone.input_size;
    let input = if (image.height, image.width) == (h, w) {
        image.clone()
    } else {
        image.resize(w, h)
    };
    let map = grad_cam(&mut model, &input, a.class, &a.layer)?;
    render_heatmap(&map, &image, &a.out)?;
    let map_path = {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".map");
        PathBuf::from(s)
    };
    write_features(&map_path, &map.to_tensor())?;

    manifest.set("checkpoint", a.checkpoint.display());
    manifest.set("image", a.image.display());
    manifest.set("class", a.class);
    manifest.set("layer", &a.layer);
    manifest.set("out", a.out.display());
    manifest.set("map", map_path.display());
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    manifest.write(dir)?;
    println!("wrote {} ({}x{}) and {}", a.out.display(), image.width, image.height, map_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TtestArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

fn read_values(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Data(format!("{}: line {}: not a number: {l:?}", path.display(), i + 1)))
        })
        .collect()
}

pub fn ttest(a: TtestArgs) -> CliResult<()> {
    let xs = read_values(&a.a)?;
    let ys = read_values(&a.b)?;
    let r = welch_t_test(&xs, &ys)?;
    println!("t={}", r.t_statistic);
    println!("df={}", r.degrees_of_freedom);
    println!("p={}", r.p_value);
    Ok(())
}
