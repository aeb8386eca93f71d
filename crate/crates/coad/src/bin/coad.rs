//! Co-AD command line.
//!
//! Thin plumbing over the `coad` library: `train`, `detect`, `evaluate`,
//! `embed-cache`, plus `synth` for the bundled synthetic dataset.
//!
//! Exit codes: `0` success (for `detect`: anomaly flagged), `3` clean row
//! (`detect` only), `2` usage error, `1` runtime failure. Verdicts and
//! machine-readable results go to stdout; logs and the resolved-config echo
//! go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use coad::detector::Method;
use coad::embed::{features_with_cache, EmbeddingCache, FeatureSelection};
use coad::error::{Error, Result};
use coad::eval::{
    build_eval_sets, crop_row, emit_boxplot_data, evaluate, generate_synthetic,
    write_boxplot_json, BaselineDetector, BoundingBox, DatasetIndex, DummyDetector,
    ModelDetector, OracleDetector, PretrainedBackbone, RowDetector, SyntheticConfig,
};
use coad::model::{checkpoint, train, TrainConfig, TrainOptions, Variant};
use coad::object_image::ObjectImage;

/// Clean-row exit code for `detect` (0 = flagged, 2 = usage, 1 = error).
const EXIT_CLEAN: u8 = 3;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "coad",
    version,
    about = "Planogram-free anomaly detection for retail shelf rows"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an auto-encoder variant on manifest-listed object images.
    Train(TrainArgs),
    /// Flag the odd object in one shelf row.
    Detect(DetectArgs),
    /// Run the detector grid over seeded evaluation sets and write reports.
    Evaluate(EvaluateArgs),
    /// Precompute and cache object embeddings for a checkpoint.
    EmbedCache(EmbedCacheArgs),
    /// Generate the bundled synthetic colored-shapes dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest (JSON-lines or CSV) listing training images.
    #[arg(long)]
    manifest: PathBuf,
    /// Flat TOML config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: vit-cm-dwt | vit-cm | vit-ae.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Concept dimension M.
    #[arg(long, visible_alias = "m")]
    concept_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_width: Option<usize>,
    /// Compute device (only "cpu" is built in this configuration).
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Use only the first N manifest records (smoke runs).
    #[arg(long)]
    limit: Option<usize>,
    /// Write checkpoints and loss.csv here.
    #[arg(long, default_value = "runs/train")]
    out_dir: PathBuf,
    /// Additionally checkpoint every N epochs.
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DetectArgs {
    /// Trained model checkpoint (.safetensors).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of crop images; row order is sorted file names.
    #[arg(long)]
    crops: Option<PathBuf>,
    /// Whole shelf-row image; requires --layout.
    #[arg(long, requires = "layout", conflicts_with = "crops")]
    shelf: Option<PathBuf>,
    /// JSON file with an array of [x, y, w, h] boxes for --shelf.
    #[arg(long, requires = "shelf", conflicts_with = "crops")]
    layout: Option<PathBuf>,
    /// Feature selection: color | content | both.
    #[arg(long, default_value = "both")]
    features: String,
    /// Outlier method: boxplot | cluster.
    #[arg(long, default_value = "boxplot")]
    method: String,
    /// Row identifier echoed into the verdict.
    #[arg(long)]
    row_id: Option<String>,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Manifest (JSON-lines or CSV) of labeled object images.
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint; repeat for several models.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Comma-separated feature selections.
    #[arg(long, default_value = "color,content,both")]
    selections: String,
    /// Comma-separated outlier methods.
    #[arg(long, default_value = "boxplot,cluster")]
    methods: String,
    /// Number of evaluation sets (trials per grid cell).
    #[arg(long, default_value_t = 72)]
    count: usize,
    /// Majority objects per set (set size = n_majority + 1).
    #[arg(long, default_value_t = 9)]
    n_majority: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional pretrained backbone asset; adds baseline rows to the grid.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    baseline_input_size: usize,
    /// Add the chance-level fixed-index dummy row.
    #[arg(long)]
    with_dummy: bool,
    /// Add the oracle upper-bound row.
    #[arg(long)]
    with_oracle: bool,
    #[arg(long, default_value = "runs/eval")]
    out_dir: PathBuf,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct EmbedCacheArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Feature selection: color | content | both.
    #[arg(long, default_value = "both")]
    features: String,
    /// Cache directory; defaults to $COAD_CACHE_DIR.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Embed only the first N manifest records.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "runs/synthetic")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 12)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Detect(a) => cmd_detect(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::EmbedCache(a) => cmd_embed_cache(a),
        Cmd::Synth(a) => cmd_synth(a),
    }
}

fn parse_device(name: &str) -> Result<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => Err(Error::config(format!(
            "unknown device '{other}'; this build supports: cpu"
        ))),
    }
}

fn usage(msg: &str) -> Result<u8> {
    eprintln!("usage error: {msg}");
    Ok(EXIT_USAGE)
}

/// The reproducibility echo every command emits on stderr.
fn echo_config(command: &str, value: &serde_json::Value) {
    eprintln!("resolved-config [{command}]: {value}");
}

fn cmd_train(args: TrainArgs) -> Result<u8> {
    let device = parse_device(&args.device)?;
    let mut config = match &args.config {
        Some(path) => TrainConfig::from_toml_path(path)?,
        None => {
            let variant = args.variant.as_deref().ok_or_else(|| {
                Error::config("pass --variant or a --config file naming one")
            })?;
            Variant::from_str(variant)?; // clear message before TOML parsing
            TrainConfig::from_toml_str(&format!("variant = \"{variant}\""))?
        }
    };
    if let Some(v) = &args.variant {
        config.variant = Variant::from_str(v)?;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.input_size {
        config.input_size = v;
    }
    if let Some(v) = args.concept_dim {
        config.m = v;
    }
    if let Some(v) = args.heads {
        config.heads = v;
    }
    if let Some(v) = args.ff_width {
        config.ff_width = v;
    }
    config.validate()?;
    echo_config(
        "train",
        &serde_json::json!({
            "manifest": args.manifest,
            "out_dir": args.out_dir,
            "limit": args.limit,
            "device": args.device,
            "config": serde_json::from_str::<serde_json::Value>(
                &serde_json::to_string(&config)?
            )?,
        }),
    );

    let index = DatasetIndex::load(&args.manifest)?;
    let take = args.limit.unwrap_or(usize::MAX).min(index.len());
    let mut images = Vec::with_capacity(take);
    for record in &index.records()[..take] {
        images.push(index.load_image(&record.id)?);
    }
    eprintln!("training on {} images", images.len());
    let opts = TrainOptions {
        out_dir: Some(args.out_dir.clone()),
        checkpoint_interval: args.checkpoint_interval,
        log: !args.quiet,
    };
    let started = std::time::Instant::now();
    let (_model, report) = train::train_on_device(&images, &config, &opts, &device)?;
    let checkpoint = report
        .final_checkpoint
        .as_ref()
        .expect("out_dir was set, so a checkpoint was written");
    eprintln!(
        "trained {} steps over {} epochs in {:.1}s",
        report.steps,
        report.epochs,
        started.elapsed().as_secs_f64()
    );
    println!("{}", checkpoint.display());
    Ok(0)
}

/// Crop files in a directory, row-ordered by file name.
fn load_crop_dir(dir: &Path) -> Result<Vec<ObjectImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::io(dir, e))?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                Some(ref ext) if ["png", "jpg", "jpeg", "bmp"].contains(&ext.as_str())
            )
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| ObjectImage::from_path(p).map_err(|e| e.at_crop(i)))
        .collect()
}

fn cmd_detect(args: DetectArgs) -> Result<u8> {
    let device = parse_device(&args.device)?;
    let (selection, method) = match (
        FeatureSelection::from_str(&args.features),
        Method::from_str(&args.method),
    ) {
        (Ok(s), Ok(m)) => (s, m),
        (Err(e), _) | (_, Err(e)) => return usage(&e.to_string()),
    };
    echo_config(
        "detect",
        &serde_json::json!({
            "checkpoint": args.checkpoint,
            "crops": args.crops,
            "shelf": args.shelf,
            "layout": args.layout,
            "features": args.features,
            "method": args.method,
            "row_id": args.row_id,
            "device": args.device,
        }),
    );

    let model = checkpoint::load(&args.checkpoint, &device)?;
    let input_size = model.config().input_size;
    let crops = match (&args.crops, &args.shelf, &args.layout) {
        (Some(dir), None, None) => {
            let raw = load_crop_dir(dir)?;
            raw.iter()
                .enumerate()
                .map(|(i, c)| c.resize(input_size).map_err(|e| e.at_crop(i)))
                .collect::<Result<Vec<_>>>()?
        }
        (None, Some(shelf), Some(layout)) => {
            let image = ObjectImage::from_path(shelf)?;
            let text =
                std::fs::read_to_string(layout).map_err(|e| Error::io(layout, e))?;
            let boxes: Vec<BoundingBox> = serde_json::from_str(&text)?;
            crop_row(&image, &boxes, input_size)?
        }
        _ => return usage("pass either --crops DIR or --shelf IMAGE --layout BOXES.json"),
    };
    if crops.len() < 2 {
        return usage(&format!("a row needs at least 2 crops, found {}", crops.len()));
    }

    let mut verdict = coad::detector::detect(&crops, &model, selection, method)?;
    verdict.row_id = args.row_id.clone();
    println!("{}", verdict.to_json()?);
    Ok(if verdict.flagged { 0 } else { EXIT_CLEAN })
}

fn parse_list<T: FromStr<Err = Error>>(csv: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<T> = csv
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(T::from_str)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(format!("no {what} given")));
    }
    Ok(items)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<u8> {
    let device = parse_device(&args.device)?;
    let selections: Vec<FeatureSelection> = match parse_list(&args.selections, "selections") {
        Ok(v) => v,
        Err(e) => return usage(&e.to_string()),
    };
    let methods: Vec<Method> = match parse_list(&args.methods, "methods") {
        Ok(v) => v,
        Err(e) => return usage(&e.to_string()),
    };
    echo_config(
        "evaluate",
        &serde_json::json!({
            "manifest": args.manifest,
            "checkpoints": args.checkpoints,
            "selections": args.selections,
            "methods": args.methods,
            "count": args.count,
            "n_majority": args.n_majority,
            "seed": args.seed,
            "baseline": args.baseline,
            "with_dummy": args.with_dummy,
            "with_oracle": args.with_oracle,
            "out_dir": args.out_dir,
            "device": args.device,
        }),
    );

    // Every referenced asset is checked before any compute happens.
    let mut missing: Vec<&Path> = args
        .checkpoints
        .iter()
        .map(PathBuf::as_path)
        .filter(|p| !p.is_file())
        .collect();
    if let Some(b) = &args.baseline {
        if !b.is_file() {
            missing.push(b);
        }
    }
    if !missing.is_empty() {
        let listed: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::config(format!(
            "missing checkpoint files: {}",
            listed.join(", ")
        )));
    }

    let index = DatasetIndex::load(&args.manifest)?;
    let sets = build_eval_sets(&index, args.count, args.n_majority, args.seed)?;

    // Model detectors over the requested grid. Selections a variant cannot
    // provide (color/content on vit-ae) are dropped with a visible note.
    let mut detectors: Vec<Box<dyn RowDetector>> = Vec::new();
    let mut models: Vec<(String, coad::model::Model)> = Vec::new();
    for path in &args.checkpoints {
        let model = checkpoint::load(path, &device)?;
        let mut name = model.variant().to_string();
        if models.iter().any(|(n, _)| *n == name) {
            let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
            name = format!("{name}:{stem}");
        }
        models.push((name, model));
    }
    for (name, model) in &models {
        for &selection in &selections {
            if selection.kinds_for(model.variant()).is_err() {
                eprintln!(
                    "note: {} does not provide selection '{selection}'; cell skipped",
                    model.variant()
                );
                continue;
            }
            for &method in &methods {
                let detector =
                    ModelDetector::new(model.clone(), selection, method)?.with_name(name);
                detectors.push(Box::new(detector));
            }
        }
    }
    if let Some(asset) = &args.baseline {
        for &method in &methods {
            let backbone = PretrainedBackbone::load(asset, args.baseline_input_size)?;
            detectors.push(Box::new(BaselineDetector::new(backbone, method)));
        }
    }
    if args.with_dummy {
        detectors.push(Box::new(DummyDetector { index: 0 }));
    }
    if args.with_oracle {
        detectors.push(Box::new(OracleDetector));
    }

    let refs: Vec<&dyn RowDetector> = detectors.iter().map(Box::as_ref).collect();
    let report = evaluate(&index, &sets, &refs)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let csv_path = args.out_dir.join("report.csv");
    let jsonl_path = args.out_dir.join("trials.jsonl");
    report.write_csv(&csv_path)?;
    report.write_trials_jsonl(&jsonl_path)?;

    // Boxplot data (Fig.-style): first loadable set, per model, per valid
    // selection.
    if let Some(set) = sets
        .iter()
        .find(|s| !report.failed_sets.iter().any(|f| f.set_id == s.set_id))
    {
        let crops: Vec<ObjectImage> = set
            .object_ids
            .iter()
            .map(|id| index.load_image(id))
            .collect::<Result<_>>()?;
        for (name, model) in &models {
            let valid: Vec<FeatureSelection> = selections
                .iter()
                .copied()
                .filter(|s| s.kinds_for(model.variant()).is_ok())
                .collect();
            if valid.is_empty() {
                continue;
            }
            let series = emit_boxplot_data(&crops, model, &valid)?;
            let path = args
                .out_dir
                .join(format!("boxplot-{}.json", name.replace([':', '/'], "-")));
            write_boxplot_json(&path, &series)?;
        }
    }

    for line in report.to_csv_string().lines() {
        println!("{line}");
    }
    eprintln!("wrote {}", csv_path.display());
    eprintln!("wrote {}", jsonl_path.display());
    if !report.failed_sets.is_empty() {
        eprintln!("{} set(s) failed to load:", report.failed_sets.len());
        for f in &report.failed_sets {
            eprintln!("  {}: {}", f.set_id, f.error);
        }
    }
    Ok(0)
}

fn cmd_embed_cache(args: EmbedCacheArgs) -> Result<u8> {
    let device = parse_device(&args.device)?;
    let selection = match FeatureSelection::from_str(&args.features) {
        Ok(s) => s,
        Err(e) => return usage(&e.to_string()),
    };
    let dir = match args.cache_dir.clone().or_else(EmbeddingCache::dir_from_env) {
        Some(d) => d,
        None => return usage("pass --cache-dir or set COAD_CACHE_DIR"),
    };
    echo_config(
        "embed-cache",
        &serde_json::json!({
            "checkpoint": args.checkpoint,
            "manifest": args.manifest,
            "features": args.features,
            "cache_dir": dir,
            "limit": args.limit,
            "device": args.device,
        }),
    );

    let model = checkpoint::load(&args.checkpoint, &device)?;
    let hash = checkpoint::sha256_hex(&args.checkpoint)?;
    let mut cache = EmbeddingCache::open(&dir, &hash, selection)?;
    let index = DatasetIndex::load(&args.manifest)?;
    let take = args.limit.unwrap_or(usize::MAX).min(index.len());
    let size = model.config().input_size;
    let mut items = Vec::with_capacity(take);
    for record in &index.records()[..take] {
        let image = index.load_image(&record.id)?.resize(size)?;
        items.push((record.id.clone(), image));
    }
    let (features, hits) = features_with_cache(&mut cache, &items, &model, selection)?;
    cache.save()?;
    println!(
        "{}",
        serde_json::json!({
            "cache_file": cache.path(),
            "objects": features.len(),
            "cache_hits": hits,
            "computed": features.len() - hits,
        })
    );
    Ok(0)
}

fn cmd_synth(args: SynthArgs) -> Result<u8> {
    let config = SyntheticConfig {
        classes: args.classes,
        per_class: args.per_class,
        image_size: args.image_size,
        seed: args.seed,
    };
    echo_config(
        "synth",
        &serde_json::json!({
            "out_dir": args.out_dir,
            "classes": config.classes,
            "per_class": config.per_class,
            "image_size": config.image_size,
            "seed": config.seed,
        }),
    );
    let index = generate_synthetic(&args.out_dir, &config)?;
    eprintln!(
        "generated {} images over {} classes",
        index.len(),
        index.classes().len()
    );
    println!("{}", args.out_dir.join("manifest.jsonl").display());
    Ok(0)
}
