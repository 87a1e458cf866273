use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttsn_core::data::{self, motion_classes, partner, ClipRecord, SynthConfig};
use ttsn_core::model::Model;
use ttsn_core::train::{self, MetricsRecord, TrainConfig};
use ttsn_core::tss::TssAlgorithm;
use ttsn_core::{attnmap, checkpoint};

const MANIFEST: &str = "manifest.json";
const METRICS: &str = "metrics.jsonl";
const CHECKPOINT: &str = "model.ttsn";

#[derive(Parser)]
#[command(name = "ttsn", version, about = "Temporal transformer + sequence self-supervision on synthetic motion clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a directed-motion clip dataset.
    Generate(GenerateArgs),
    /// Train a model and write manifest, metrics and checkpoint to a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset.
    Eval(EvalArgs),
    /// Export per-frame attention maps for one clip as PGM images.
    Attn(AttnArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Frame height and width.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the matching held-out split here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = data::DEFAULT_TEST_PER_CLASS)]
    test_per_class: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out set evaluated after every epoch.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    theta1: Option<f64>,
    #[arg(long)]
    theta2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated 0-based epochs at which the learning rate drops by 10x.
    #[arg(long, value_delimiter = ',')]
    lr_steps: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Token length l of the temporal transformer.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Self-supervision variant, or "off".
    #[arg(long, value_parser = ["aa", "ra", "ar", "rr", "off"])]
    tss: Option<String>,
    /// Disable the temporal transformer (temporal-mean baseline).
    #[arg(long)]
    no_ett: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Accept θ₁/θ₂ outside [10, 100].
    #[arg(long)]
    allow_theta_override: bool,
    /// Do not mirror metrics lines to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to load instead of the run directory's own.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Index of the clip within the dataset file.
    #[arg(long, default_value_t = 0)]
    clip: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Write maps at feature resolution without blending over the input frame.
    #[arg(long)]
    no_overlay: bool,
}

#[derive(Serialize, Deserialize)]
struct DatasetRef {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    version: String,
    config: TrainConfig,
    config_hash: String,
    dataset: DatasetRef,
    test_dataset: Option<DatasetRef>,
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct MetricsHeader<'a> {
    kind: &'static str,
    config_hash: &'a str,
    version: &'a str,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn config_hash(config: &TrainConfig) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

fn dataset_ref(path: &Path) -> Result<(Vec<ClipRecord>, DatasetRef)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let clips = data::decode_clips(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let r = DatasetRef {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    };
    Ok((clips, r))
}

fn load_clips(path: &Path) -> Result<Vec<ClipRecord>> {
    data::read_clips(path).with_context(|| format!("reading {}", path.display()))
}

fn class_counts(clips: &[ClipRecord]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for c in clips {
        *counts.entry(c.label).or_insert(0) += 1;
    }
    counts
}

fn write_dataset(cfg: &SynthConfig, path: &Path) -> Result<()> {
    let clips = data::generate(cfg)?;
    data::write_clips(path, &clips).with_context(|| format!("writing {}", path.display()))?;
    let names: Vec<String> = motion_classes(cfg.classes)?
        .iter()
        .map(|m| format!("{:?}", m.direction).to_lowercase())
        .collect();
    println!("wrote {} clips to {}", clips.len(), path.display());
    println!("  dims: N={} C={} H={} W={}", cfg.frames, data::CHANNELS, cfg.height, cfg.width);
    for (label, count) in class_counts(&clips) {
        println!("  class {label} ({}): {count}", names[label]);
    }
    println!("  sha256: {}", sha256_hex(&fs::read(path)?));
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        frames: a.frames,
        height: a.size,
        width: a.size,
        noise_std: a.noise_std,
        seed: a.seed,
    };
    cfg.validate()?;
    write_dataset(&cfg, &a.out)?;
    if let Some(test_out) = &a.test_out {
        write_dataset(&cfg.test_split(a.test_per_class), test_out)?;
    }
    Ok(())
}

fn resolve_config(a: &TrainArgs, clips: &[ClipRecord]) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let Some(first) = clips.first() else {
        bail!("dataset {} is empty", a.data.display());
    };
    let &[frames, channels, height, width] = first.frames.shape() else {
        bail!("unexpected clip shape {:?}", first.frames.shape());
    };
    let classes = clips.iter().map(|c| c.label).max().unwrap_or(0) + 1;
    let tss = match a.tss.as_deref() {
        None => d.tss,
        Some("off") => None,
        Some(s) => Some(s.parse::<TssAlgorithm>()?),
    };
    Ok(TrainConfig {
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        frames,
        channels,
        height,
        width,
        classes: classes.max(2),
        theta1: a.theta1.unwrap_or(d.theta1),
        theta2: a.theta2.unwrap_or(if tss.is_some() { d.theta2 } else { 0.0 }),
        lr: a.lr.unwrap_or(d.lr),
        lr_steps: a.lr_steps.clone().unwrap_or(d.lr_steps),
        epochs: a.epochs.unwrap_or(d.epochs),
        hidden: a.hidden_dim.unwrap_or(d.hidden),
        embed_channels: d.embed_channels,
        backbone_channels: d.backbone_channels,
        use_ett: !a.no_ett,
        tss,
        seed: a.seed.unwrap_or(d.seed),
        allow_theta_override: a.allow_theta_override,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (train_set, dataset) = dataset_ref(&a.data)?;
    let test = a.test.as_deref().map(dataset_ref).transpose()?;
    let config = resolve_config(&a, &train_set)?;
    config.validate()?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let hash = config_hash(&config)?;
    let version = env!("CARGO_PKG_VERSION").to_string();
    let (test_set, test_dataset) = match test {
        Some((clips, r)) => (Some(clips), Some(r)),
        None => (None, None),
    };
    let manifest = RunManifest {
        version: version.clone(),
        config: config.clone(),
        config_hash: hash.clone(),
        dataset,
        test_dataset,
        out_dir: a.out_dir.clone(),
    };
    fs::write(a.out_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;

    let metrics_path = a.out_dir.join(METRICS);
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let header = serde_json::to_string(&MetricsHeader {
        kind: "header",
        config_hash: &hash,
        version: &version,
    })?;
    writeln!(metrics, "{header}")?;
    if !a.quiet {
        println!("{header}");
    }
    let mut io_error = None;
    let (model, _) = train::train_with(&config, &train_set, test_set.as_deref(), |rec: &MetricsRecord| {
        let line = serde_json::to_string(rec).expect("metrics serialise");
        if let Err(e) = writeln!(metrics, "{line}") {
            io_error.get_or_insert(e);
        }
        if !a.quiet {
            println!("{line}");
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing metrics");
    }
    metrics.flush()?;
    checkpoint::save(a.out_dir.join(CHECKPOINT), &model.params)?;
    eprintln!("run written to {}", a.out_dir.display());
    Ok(())
}

fn load_run(run_dir: &Path, checkpoint_path: Option<&Path>) -> Result<Model> {
    let manifest_path = run_dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    let mut model = Model::new(manifest.config.model_config(), manifest.config.seed)?;
    let path = checkpoint_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join(CHECKPOINT));
    let loaded = checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    checkpoint::restore_into(&mut model.params, &loaded)
        .with_context(|| format!("checkpoint {} does not match the run config", path.display()))?;
    Ok(model)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_run(&a.run_dir, a.checkpoint.as_deref())?;
    let clips = load_clips(&a.data)?;
    let report = train::evaluate(&model, &clips)?;
    let classes = model.config.classes;
    let names: Vec<String> = motion_classes(classes)
        .map(|m| m.iter().map(|c| format!("{:?}", c.direction).to_lowercase()).collect())
        .unwrap_or_else(|_| (0..classes).map(|k| k.to_string()).collect());

    println!("clips: {}", clips.len());
    println!("top-1 accuracy: {:.4}", report.accuracy);
    println!("per-class accuracy:");
    for (k, acc) in report.per_class_accuracy().iter().enumerate() {
        println!("  {:>2} {:<6} {acc:.4}", k, names[k]);
    }
    println!("confusion (rows = true, cols = predicted):");
    print!("{:>10}", "");
    for name in &names {
        print!("{name:>7}");
    }
    println!();
    for (k, row) in report.confusion.iter().enumerate() {
        print!("{:>10}", names[k]);
        for v in row {
            print!("{v:>7}");
        }
        println!();
    }
    println!("partner-pair confusions:");
    for k in (0..classes).step_by(2) {
        let p = partner(k);
        if p < classes {
            println!(
                "  {} <-> {}: {} + {} = {}",
                names[k],
                names[p],
                report.confusion[k][p],
                report.confusion[p][k],
                report.confusion[k][p] + report.confusion[p][k]
            );
        }
    }
    println!("total partner confusions: {}", report.partner_confusions());
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(())
}

fn cmd_attn(a: AttnArgs) -> Result<()> {
    let model = load_run(&a.run_dir, None)?;
    let clips = load_clips(&a.data)?;
    let Some(clip) = clips.get(a.clip) else {
        bail!("clip index {} out of range ({} clips)", a.clip, clips.len());
    };
    let Some(attention) = train::attention_for_clip(&model, clip)? else {
        bail!("run was trained without the temporal transformer; no attention map to export");
    };
    let overlay = (!a.no_overlay).then_some(&clip.frames);
    let paths = attnmap::write_maps(&a.out_dir, a.clip, &attention, overlay)?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("TTSN_THREADS") {
        let n: usize = value
            .parse()
            .with_context(|| format!("TTSN_THREADS must be a positive integer, got {value:?}"))?;
        if n == 0 {
            bail!("TTSN_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attn(a) => cmd_attn(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
