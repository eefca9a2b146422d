//! Command-line front end: train the small CNN, audit gradients, count
//! parameters/FLOPs, and export per-sample mixture ratios.
//!
//! Exit codes: 0 success, 2 usage or data errors, 3 numeric failures
//! (non-finite losses, failed gradient checks).

mod manifest;

use clap::{Args, Parser, Subcommand};
use exnorm::arch::{count_report, micro_spec, resnet50_spec, ArchSpec, NormChoice};
use exnorm::checkpoint::{load_checkpoint, load_checkpoint_meta, save_checkpoint, CheckpointMeta};
use exnorm::en::{EnConfig, EnLayer, Variant};
use exnorm::error::{ExnError, Result};
use exnorm::gradcheck::{gradient_check, GradCheckConfig};
use exnorm::graph::Graph;
use exnorm::micro::{MicroCnn, MicroConfig};
use exnorm::normalizers::{NormalizerKind, PlainNormLayer};
use exnorm::params::{uniform_init, Mode, ParamStore};
use exnorm::ratios::{
    aggregate, concat_vectors, record_ratios, write_aggregates_json, write_records_csv,
    write_vectors_csv, Grouping,
};
use exnorm::scalar::Scalar;
use exnorm::sn::SnLayer;
use exnorm::trainer::{
    gen_synthetic, load_cifar10, train, train_with_hook, Dataset, Precision, SyntheticCfg,
    TrainConfig,
};
use manifest::{
    default_seed, parse_config_file, parse_data, parse_decay_epochs, parse_pool, DataSource,
    Layered, ResolvedTrain, RunManifest,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "exnorm",
    version,
    about = "Normalization-layer lab: per-sample mixture normalizers, a small CNN harness, \
             and parameter/FLOP audits"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the small CNN and write history, checkpoint, and manifest
    Train(TrainArgs),
    /// Compare analytic gradients of one normalization layer against central differences
    Gradcheck(GradcheckArgs),
    /// Emit a per-layer parameter and FLOP report as JSON
    Count(CountArgs),
    /// Record per-sample mixture ratios from a trained checkpoint
    Ratios(RatiosArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Normalization choice: bn, sn, or en
    #[arg(long)]
    norm: Option<String>,
    /// Data source: synthetic or cifar10:PATH
    #[arg(long)]
    data: Option<String>,
    /// Cap on samples loaded from a binary dataset
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Comma-separated epochs at which the learning rate is scaled
    #[arg(long)]
    decay_epochs: Option<String>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64
    #[arg(long)]
    precision: Option<String>,
    /// Channel reduction of the grouped projection inside the ratio subnet
    #[arg(long)]
    r: Option<usize>,
    /// Expansion multiplier of the ratio subnet head
    #[arg(long)]
    pi: Option<usize>,
    /// Mixture ablation: none, a, b, c, or d
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated mixture members: in, ln, bn, gn<groups>
    #[arg(long)]
    pool: Option<String>,
    /// Tie the dataset-global mixture weights across mean and variance
    #[arg(long)]
    sn_tied: Option<bool>,
    /// Synthetic data: number of classes
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic data: samples per class
    #[arg(long)]
    per_class: Option<usize>,
    /// Synthetic data: square image side (multiple of 4)
    #[arg(long)]
    image_size: Option<usize>,
    /// Synthetic data: additive uniform noise amplitude
    #[arg(long)]
    noise: Option<f64>,
    /// Record mixture ratios over the whole set after every epoch
    #[arg(long)]
    record_ratios: Option<bool>,
    /// key = value file consulted for any flag not given on the command line
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reuse the materialized config of a previous run as the defaults
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// Output directory for history.csv, model.ck, manifest.json
    #[arg(long, default_value = "exnorm-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Layer under audit: bn, in, ln, gn, sn, en, en-a, en-b, en-c, en-d
    #[arg(long, default_value = "en")]
    layer: String,
    /// Input shape as N,C,H,W
    #[arg(long, default_value = "2,4,3,3")]
    shape: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Group count when layer = gn
    #[arg(long, default_value_t = 2)]
    groups: usize,
}

#[derive(Args)]
struct CountArgs {
    /// micro or resnet50
    #[arg(long)]
    arch: String,
    /// Normalization choice: bn, sn, or en
    #[arg(long, default_value = "en")]
    norm: String,
    #[arg(long, default_value_t = 8)]
    r: usize,
    #[arg(long, default_value_t = 50)]
    pi: usize,
    /// Mixture ablation: none, a, b, c, or d
    #[arg(long, default_value = "none")]
    variant: String,
    /// Classifier width of the micro architecture
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Square input resolution; defaults to 224 (resnet50) or 32 (micro)
    #[arg(long)]
    input: Option<usize>,
    /// Also write the JSON report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RatiosArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data source: synthetic or cifar10:PATH
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long)]
    subset: Option<usize>,
    /// Synthetic data seed; defaults to the seed recorded in the checkpoint
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic data: samples per class
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Synthetic data: square image side (multiple of 4)
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    /// Synthetic data: additive uniform noise amplitude
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    /// Aggregate grouping: layer, class, or epoch
    #[arg(long, default_value = "layer")]
    group: String,
    /// Also export per-sample ratio vectors concatenated across layers
    #[arg(long, default_value_t = false)]
    concat: bool,
    /// Output directory for ratios.csv, aggregates.json, vectors.csv
    #[arg(long, default_value = "exnorm-out")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ExnError::Numeric(_) => 3,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Count(args) => cmd_count(args),
        Cmd::Ratios(args) => cmd_ratios(args),
    }
}

fn builtin_defaults() -> Result<ResolvedTrain> {
    Ok(ResolvedTrain {
        norm: "en".into(),
        data: "synthetic".into(),
        subset: None,
        epochs: 30,
        batch: 32,
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        warmup_epochs: 1,
        decay_epochs: vec![80, 120],
        decay_factor: 0.1,
        seed: default_seed()?,
        precision: "f64".into(),
        r: 8,
        pi: 50,
        variant: "none".into(),
        pool: "in,ln,bn".into(),
        sn_tied: false,
        classes: 3,
        per_class: 100,
        image_size: 16,
        noise: 0.25,
        record_ratios: false,
    })
}

/// Flags > config file > manifest (if given) > built-ins.
fn resolve_train(args: &TrainArgs) -> Result<ResolvedTrain> {
    let base = match &args.from_manifest {
        Some(p) => RunManifest::read(p)?.config,
        None => builtin_defaults()?,
    };
    let file = match &args.config {
        Some(p) => parse_config_file(p)?,
        None => HashMap::new(),
    };
    let l = Layered::new(&file);
    let decay_epochs = match args
        .decay_epochs
        .clone()
        .or_else(|| file.get("decay_epochs").cloned())
    {
        Some(s) => parse_decay_epochs(&s)?,
        None => base.decay_epochs.clone(),
    };
    let subset = l.pick_opt(args.subset, "subset")?.or(base.subset);
    Ok(ResolvedTrain {
        norm: l.pick_string(args.norm.clone(), "norm", &base.norm),
        data: l.pick_string(args.data.clone(), "data", &base.data),
        subset,
        epochs: l.pick(args.epochs, "epochs", base.epochs)?,
        batch: l.pick(args.batch, "batch", base.batch)?,
        lr: l.pick(args.lr, "lr", base.lr)?,
        momentum: l.pick(args.momentum, "momentum", base.momentum)?,
        weight_decay: l.pick(args.weight_decay, "weight_decay", base.weight_decay)?,
        warmup_epochs: l.pick(args.warmup_epochs, "warmup_epochs", base.warmup_epochs)?,
        decay_epochs,
        decay_factor: l.pick(args.decay_factor, "decay_factor", base.decay_factor)?,
        seed: l.pick(args.seed, "seed", base.seed)?,
        precision: l.pick_string(args.precision.clone(), "precision", &base.precision),
        r: l.pick(args.r, "r", base.r)?,
        pi: l.pick(args.pi, "pi", base.pi)?,
        variant: l.pick_string(args.variant.clone(), "variant", &base.variant),
        pool: l.pick_string(args.pool.clone(), "pool", &base.pool),
        sn_tied: l.pick(args.sn_tied, "sn_tied", base.sn_tied)?,
        classes: l.pick(args.classes, "classes", base.classes)?,
        per_class: l.pick(args.per_class, "per_class", base.per_class)?,
        image_size: l.pick(args.image_size, "image_size", base.image_size)?,
        noise: l.pick(args.noise, "noise", base.noise)?,
        record_ratios: l.pick(args.record_ratios, "record_ratios", base.record_ratios)?,
    })
}

fn en_config_from(res: &ResolvedTrain) -> Result<EnConfig> {
    Ok(EnConfig {
        pool: parse_pool(&res.pool)?,
        r: res.r,
        pi: res.pi,
        variant: Variant::parse(&res.variant)?,
        ..EnConfig::default()
    })
}

fn load_dataset<T: Scalar>(res: &ResolvedTrain) -> Result<Dataset<T>> {
    match parse_data(&res.data)? {
        DataSource::Synthetic => gen_synthetic(&SyntheticCfg {
            classes: res.classes,
            per_class: res.per_class,
            hw: res.image_size,
            seed: res.seed,
            noise: res.noise,
        }),
        DataSource::Cifar10(path) => load_cifar10(&path, res.subset),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let res = resolve_train(&args)?;
    let precision = Precision::parse(&res.precision)?;
    std::fs::create_dir_all(&args.out)?;
    let artifacts = match precision {
        Precision::F32 => run_train::<f32>(&res, &args.out)?,
        Precision::F64 => run_train::<f64>(&res, &args.out)?,
    };
    let manifest = RunManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: res.seed,
        config: res,
        artifacts,
    };
    manifest.write(&args.out.join("manifest.json"))?;
    println!("manifest {}", args.out.join("manifest.json").display());
    Ok(())
}

fn run_train<T: Scalar>(res: &ResolvedTrain, out: &Path) -> Result<BTreeMap<String, String>> {
    let data: Dataset<T> = load_dataset(res)?;
    let model_cfg = MicroConfig {
        classes: data.classes,
        norm: NormChoice::parse(&res.norm)?,
        en: en_config_from(res)?,
        sn_tied: res.sn_tied,
        ..MicroConfig::default()
    };
    let train_cfg = TrainConfig {
        lr: res.lr,
        decay_epochs: res.decay_epochs.clone(),
        decay_factor: res.decay_factor,
        warmup_epochs: res.warmup_epochs,
        momentum: res.momentum,
        weight_decay: res.weight_decay,
        batch: res.batch,
        epochs: res.epochs,
        seed: res.seed,
        precision: Precision::parse(&res.precision)?,
    };
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(res.seed);
    let model = MicroCnn::new(&mut store, &model_cfg, &mut rng)?;
    println!(
        "training {} norm={} on {} samples ({} classes), {} trainable scalars",
        model_cfg.norm.tag(),
        res.pool,
        data.len(),
        data.classes,
        store.num_trainable_scalars()
    );
    let mut trajectory = Vec::new();
    let result = if res.record_ratios {
        let idx: Vec<usize> = (0..data.len()).collect();
        train_with_hook(&model, &mut store, &data, None, &train_cfg, |epoch, store| {
            trajectory.extend(record_ratios(&model, store, &data, &idx, epoch, Mode::Eval)?);
            Ok(())
        })?
    } else {
        train(&model, &mut store, &data, None, &train_cfg)?
    };
    for row in &result.history {
        println!(
            "epoch {:>3} {} loss {:.6} top1 {:.4}",
            row.epoch, row.split, row.loss, row.top1
        );
    }
    exnorm::trainer::write_history_csv(&out.join("history.csv"), &result.history)?;
    let meta = CheckpointMeta {
        model: model_cfg,
        precision: Precision::parse(&res.precision)?.tag().to_string(),
        seed: res.seed,
        epochs_trained: res.epochs,
    };
    save_checkpoint(&out.join("model.ck"), &meta, &store)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("history".to_string(), "history.csv".to_string());
    artifacts.insert("checkpoint".to_string(), "model.ck".to_string());
    println!("history  {}", out.join("history.csv").display());
    println!("checkpoint {}", out.join("model.ck").display());
    if res.record_ratios {
        write_records_csv(&out.join("ratio_trajectories.csv"), &trajectory)?;
        artifacts.insert(
            "ratio_trajectories".to_string(),
            "ratio_trajectories.csv".to_string(),
        );
        println!(
            "trajectories {}",
            out.join("ratio_trajectories.csv").display()
        );
    }
    Ok(artifacts)
}

fn parse_shape(s: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| ExnError::invalid(format!("bad shape component {p:?}")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 4 || parts.iter().any(|&d| d == 0) {
        return Err(ExnError::invalid(format!(
            "shape must be four positive integers N,C,H,W, got {s:?}"
        )));
    }
    Ok([parts[0], parts[1], parts[2], parts[3]])
}

/// Largest grouped-projection reduction ≤ 8 that divides the channel count.
fn reduction_for(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|r| c % r == 0).unwrap_or(1)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let shape = parse_shape(&args.shape)?;
    let [_, c, _, _] = shape;
    let seed = match args.seed {
        Some(s) => s,
        None => default_seed()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let x = uniform_init::<f64>(&shape, 2.0, &mut rng);
    let eps = 1e-5;
    let pool = vec![
        NormalizerKind::Instance,
        NormalizerKind::Layer,
        NormalizerKind::Batch,
    ];

    enum Layer {
        Plain(PlainNormLayer),
        Sn(SnLayer),
        En(EnLayer),
    }
    let layer = match args.layer.as_str() {
        "bn" => Layer::Plain(PlainNormLayer::new(
            &mut store,
            "norm",
            c,
            NormalizerKind::Batch,
            eps,
        )?),
        "in" => Layer::Plain(PlainNormLayer::new(
            &mut store,
            "norm",
            c,
            NormalizerKind::Instance,
            eps,
        )?),
        "ln" => Layer::Plain(PlainNormLayer::new(
            &mut store,
            "norm",
            c,
            NormalizerKind::Layer,
            eps,
        )?),
        "gn" => Layer::Plain(PlainNormLayer::new(
            &mut store,
            "norm",
            c,
            NormalizerKind::Group(args.groups),
            eps,
        )?),
        "sn" => Layer::Sn(SnLayer::new(&mut store, "norm", c, &pool, false, eps)?),
        other => {
            let variant = match other {
                "en" => Variant::None,
                _ => other
                    .strip_prefix("en-")
                    .map(Variant::parse)
                    .transpose()?
                    .ok_or_else(|| {
                        ExnError::invalid(format!(
                            "unknown layer {other:?}, expected bn|in|ln|gn|sn|en|en-a..en-d"
                        ))
                    })?,
            };
            let cfg = EnConfig {
                pool: pool.clone(),
                r: reduction_for(c),
                variant,
                eps,
                ..EnConfig::default()
            };
            let en = EnLayer::new(&mut store, "norm", c, &cfg, &mut rng)?;
            // The final FC starts at zero, which would leave the subnet
            // invisible to the check; nudge it to a nontrivial point.
            if let Some(id) = store.id("norm.fc2_w") {
                for (i, v) in store.value_mut(id).data_mut().iter_mut().enumerate() {
                    *v = 0.05 * ((i % 7) as f64 - 3.0);
                }
            }
            if let Some(id) = store.id("norm.fc2_b") {
                for (i, v) in store.value_mut(id).data_mut().iter_mut().enumerate() {
                    *v = 0.1 * i as f64 - 0.1;
                }
            }
            Layer::En(en)
        }
    };

    let report = gradient_check(
        &mut store,
        |g: &mut Graph<f64>, store, binds| {
            let xv = g.input(x.clone());
            match &layer {
                Layer::Plain(l) => l.forward(g, store, binds, xv, Mode::Train),
                Layer::Sn(l) => l.forward(g, store, binds, xv, Mode::Train),
                Layer::En(l) => l
                    .forward(g, store, binds, xv, Mode::Train, None)
                    .map(|(out, _)| out),
            }
        },
        &GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        },
    )?;

    println!(
        "layer {} input {:?} seed {}",
        args.layer, shape, seed
    );
    for grp in &report.groups {
        println!(
            "  {:<24} coords {:>5} max rel err {:.3e}",
            grp.name, grp.checked, grp.max_rel_err
        );
    }
    let verdict = if report.passes(GRADCHECK_TOL) {
        "PASS"
    } else {
        "FAIL"
    };
    println!(
        "overall max rel err {:.3e} (tolerance {GRADCHECK_TOL:.0e}): {verdict}",
        report.max_rel_err
    );
    if !report.passes(GRADCHECK_TOL) {
        return Err(ExnError::numeric(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOL:.0e}",
            report.max_rel_err
        )));
    }
    Ok(())
}

fn cmd_count(args: CountArgs) -> Result<()> {
    let arch: ArchSpec = match args.arch.as_str() {
        "micro" => micro_spec([16, 32, 64], args.classes),
        "resnet50" => resnet50_spec(),
        other => {
            return Err(ExnError::invalid(format!(
                "unknown arch {other:?}, expected micro or resnet50"
            )))
        }
    };
    let choice = NormChoice::parse(&args.norm)?;
    let en = EnConfig {
        r: args.r,
        pi: args.pi,
        variant: Variant::parse(&args.variant)?,
        ..EnConfig::default()
    };
    let input = args.input.unwrap_or(match args.arch.as_str() {
        "resnet50" => 224,
        _ => 32,
    });
    let report = count_report(&arch, choice, &en, input)?;
    let js = serde_json::to_string_pretty(&report)?;
    println!("{js}");
    if let Some(path) = &args.out {
        std::fs::write(path, js)?;
    }
    Ok(())
}

fn cmd_ratios(args: RatiosArgs) -> Result<()> {
    let meta = load_checkpoint_meta(&args.checkpoint)?;
    if meta.model.norm != NormChoice::En {
        return Err(ExnError::invalid(format!(
            "checkpoint holds a {} model; per-sample ratios require the mixture normalizer",
            meta.model.norm.tag()
        )));
    }
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let model = MicroCnn::new(&mut store, &meta.model, &mut rng)?;
    load_checkpoint(&args.checkpoint, &mut store)?;

    let res = ResolvedTrain {
        data: args.data.clone(),
        subset: args.subset,
        seed: args.seed.unwrap_or(meta.seed),
        classes: meta.model.classes,
        per_class: args.per_class,
        image_size: args.image_size,
        noise: args.noise,
        ..builtin_defaults()?
    };
    let data: Dataset<f64> = load_dataset(&res)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let records = record_ratios(&model, &mut store, &data, &idx, meta.epochs_trained, Mode::Eval)?;

    std::fs::create_dir_all(&args.out)?;
    write_records_csv(&args.out.join("ratios.csv"), &records)?;
    let grouping = Grouping::parse(&args.group)?;
    let aggs = aggregate(&records, grouping)?;
    write_aggregates_json(&args.out.join("aggregates.json"), &aggs)?;
    println!(
        "recorded {} ratios over {} samples x {} sites",
        records.len(),
        data.len(),
        model.en_site_names().len()
    );
    println!("ratios     {}", args.out.join("ratios.csv").display());
    println!("aggregates {}", args.out.join("aggregates.json").display());
    if args.concat {
        let vectors = concat_vectors(&records, model.en_site_names().len())?;
        write_vectors_csv(&args.out.join("vectors.csv"), &vectors)?;
        println!("vectors    {}", args.out.join("vectors.csv").display());
    }
    Ok(())
}
