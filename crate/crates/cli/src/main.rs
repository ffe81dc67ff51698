use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use magma_core::config::{default_probe, preset, RunConfig};
use magma_core::data::{compute_norm_stats, eval_batch, generate_synthetic, Dataset, NormStats, SynthSpec};
use magma_core::eval::{
    attention_maps, davies_bouldin, extract_features, knn_accuracy, linear_probe, pca_layer_maps, write_matrix,
    write_pgm, EvalReport, FeatureKind,
};
use magma_core::model::VitMaeModel;
use magma_core::train::{pretrain, OnlineEval};
use magma_core::{MagmaError, Result};

#[derive(Parser)]
#[command(name = "magma", version, about = "Manifold-regularized MAE pretraining and evaluation")]
struct Cli {
    /// Run seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (gen-data) or directory (other commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Shipped preset applied before --config.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// key=value override, applied last; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset container.
    GenData(GenData),
    /// Pretrain an encoder.
    Pretrain(Pretrain),
    /// Linear probe on frozen features.
    Probe(Probe),
    /// k-nearest-neighbour accuracy on frozen features.
    Knn(Knn),
    /// Export PCA key maps or attention maps.
    Extract(Extract),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 20.0)]
    noise: f64,
}

#[derive(Args)]
struct Pretrain {
    /// Training container (sets train_data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Containers for the online kNN diagnostic.
    #[arg(long)]
    eval_train: Option<PathBuf>,
    #[arg(long)]
    eval_test: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    e_st: Option<usize>,
    #[arg(long)]
    e_dur: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Pooled,
    Cls,
}

#[derive(Args)]
struct EvalData {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value_t = Features::Pooled)]
    features: Features,
}

#[derive(Args)]
struct Probe {
    #[command(flatten)]
    data: EvalData,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct Knn {
    #[command(flatten)]
    data: EvalData,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Pca,
    Attention,
}

#[derive(Args)]
struct Extract {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    /// First image index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Number of consecutive images.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(g) => gen_data(&cli, g),
        Command::Pretrain(p) => cmd_pretrain(&cli, p),
        Command::Probe(p) => cmd_probe(&cli, p),
        Command::Knn(k) => cmd_knn(&cli, k),
        Command::Extract(x) => cmd_extract(&cli, x),
    }
}

fn config_error(msg: impl Into<String>) -> MagmaError {
    MagmaError::Config(msg.into())
}

/// Defaults, then preset, then config file, then `overrides`, then --set.
fn resolve_config(cli: &Cli, overrides: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(name) = &cli.preset {
        cfg.apply_text(preset(name)?)?;
    }
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects key=value, got '{s}'")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| config_error("--out is required"))?;
    std::fs::create_dir_all(dir)?;
    Ok(dir)
}

fn gen_data(cli: &Cli, g: &GenData) -> Result<()> {
    let spec = SynthSpec {
        class_count: g.classes,
        per_class: g.per_class,
        image_size: g.size,
        channels: g.channels,
        noise: g.noise,
        seed: cli.seed.unwrap_or(0),
    };
    spec.validate()?;
    let path = cli.out.as_deref().ok_or_else(|| config_error("--out is required"))?;
    let ds = generate_synthetic(&spec)?;
    ds.save(path)?;
    println!(
        "wrote {}: N={} shape={}x{}x{} classes={} histogram={:?}",
        path.display(),
        ds.len(),
        ds.channels,
        ds.height,
        ds.width,
        ds.class_count,
        ds.class_histogram()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

fn cmd_pretrain(cli: &Cli, p: &Pretrain) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(d) = &p.data {
        overrides.push(("train_data", d.display().to_string()));
    }
    if let Some(d) = &p.eval_train {
        overrides.push(("eval_train_data", d.display().to_string()));
    }
    if let Some(d) = &p.eval_test {
        overrides.push(("eval_test_data", d.display().to_string()));
    }
    if let Some(m) = &p.method {
        overrides.push(("method", m.clone()));
    }
    if let Some(e) = p.epochs {
        overrides.push(("epochs", e.to_string()));
    }
    if let Some(l) = p.lambda {
        overrides.push(("lambda", format!("{l:?}")));
    }
    if let Some(e) = p.e_st {
        overrides.push(("e_st", e.to_string()));
    }
    if let Some(e) = p.e_dur {
        overrides.push(("e_dur", e.to_string()));
    }
    let mut cfg = resolve_config(cli, &overrides)?;
    let train_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| config_error("train_data: no training container given (use --data)"))?;
    let dir = out_dir(cli)?;
    let ds = load_dataset(&train_path)?;
    check_geometry(&cfg, &ds)?;
    if cfg.norm_stats().is_none() {
        cfg.set_norm_stats(&compute_norm_stats(&ds)?);
    }
    std::fs::write(dir.join("resolved.cfg"), cfg.to_text())?;
    let eval_sets = match (&cfg.eval_train_data, &cfg.eval_test_data) {
        (Some(a), Some(b)) => Some((load_dataset(a)?, load_dataset(b)?)),
        (None, None) => None,
        _ => return Err(config_error("eval_train_data and eval_test_data must be given together")),
    };
    let online = eval_sets.as_ref().map(|(a, b)| OnlineEval { train: a, test: b });
    let tcfg = cfg.train_config()?;
    let mut model = VitMaeModel::init(&cfg.vit, cfg.seed)?;
    let started = Instant::now();
    let report = pretrain(&mut model, &ds, &tcfg, online, Some(dir))?;
    let last = report.metrics.last().expect("at least one epoch");
    println!(
        "{}: {} epochs, {} steps in {:.1}s; final loss_total={:.6} loss_rec={:.6} loss_reg={:.6} online_knn={}",
        cfg.method,
        cfg.epochs,
        report.steps,
        started.elapsed().as_secs_f64(),
        last.loss_total,
        last.loss_rec,
        last.loss_reg,
        last.online_knn.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn check_geometry(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.channels != cfg.vit.channels || ds.height != ds.width {
        return Err(MagmaError::Data(format!(
            "container holds {}x{}x{} images, config expects {} square channels",
            ds.channels, ds.height, ds.width, cfg.vit.channels
        )));
    }
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    model: VitMaeModel,
    stats: NormStats,
}

fn load_model(cli: &Cli, checkpoint: &Path, stats_from: &Dataset) -> Result<Loaded> {
    let cfg = resolve_config(cli, &[])?;
    check_geometry(&cfg, stats_from)?;
    let stats = match cfg.norm_stats() {
        Some(s) => s,
        None => compute_norm_stats(stats_from)?,
    };
    let model = VitMaeModel::load(&cfg.vit, checkpoint)?;
    Ok(Loaded { cfg, model, stats })
}

fn features(l: &Loaded, ds: &Dataset, kind: Features) -> Result<magma_tensor::Tensor> {
    let kind = match kind {
        Features::Pooled => FeatureKind::PooledPatches,
        Features::Cls => FeatureKind::ClassToken,
    };
    extract_features(&l.model, ds, &l.stats, kind)
}

fn emit_report(cli: &Cli, name: &str, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| MagmaError::Contract(e.to_string()))?;
    println!("{json}");
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), json + "\n")?;
    }
    Ok(())
}

fn cmd_probe(cli: &Cli, p: &Probe) -> Result<()> {
    let pcfg = magma_core::eval::ProbeConfig {
        epochs: p.epochs,
        lr: p.lr,
        batch_size: p.batch_size,
        milestones: [60, 80].into_iter().filter(|&m| m < p.epochs).collect(),
        ..default_probe(cli.seed.unwrap_or(0))
    };
    pcfg.validate()?;
    let train = load_dataset(&p.data.train)?;
    let test = load_dataset(&p.data.test)?;
    let l = load_model(cli, &p.data.checkpoint, &train)?;
    let started = Instant::now();
    let ftr = features(&l, &train, p.data.features)?;
    let fte = features(&l, &test, p.data.features)?;
    let ips = (train.len() + test.len()) as f64 / started.elapsed().as_secs_f64().max(1e-12);
    let acc = linear_probe(&ftr, &train.labels, &fte, &test.labels, train.class_count.max(test.class_count), &pcfg)?;
    let report = EvalReport {
        linear_acc: Some(acc),
        knn_acc: None,
        k: None,
        dbi: davies_bouldin(&fte, &test.labels)?,
        images_per_sec: l.cfg.log_timing.then_some(ips),
        loss_curve: Vec::new(),
    };
    emit_report(cli, "probe_report.json", &report)
}

fn cmd_knn(cli: &Cli, k: &Knn) -> Result<()> {
    if k.k == 0 {
        return Err(config_error("k: must be at least 1"));
    }
    let train = load_dataset(&k.data.train)?;
    let test = load_dataset(&k.data.test)?;
    let l = load_model(cli, &k.data.checkpoint, &train)?;
    let started = Instant::now();
    let ftr = features(&l, &train, k.data.features)?;
    let fte = features(&l, &test, k.data.features)?;
    let ips = (train.len() + test.len()) as f64 / started.elapsed().as_secs_f64().max(1e-12);
    let acc = knn_accuracy(&ftr, &train.labels, &fte, &test.labels, k.k)?;
    let report = EvalReport {
        linear_acc: None,
        knn_acc: Some(acc),
        k: Some(k.k),
        dbi: davies_bouldin(&fte, &test.labels)?,
        images_per_sec: l.cfg.log_timing.then_some(ips),
        loss_curve: Vec::new(),
    };
    emit_report(cli, "knn_report.json", &report)
}

fn cmd_extract(cli: &Cli, x: &Extract) -> Result<()> {
    let ds = load_dataset(&x.data)?;
    if x.count == 0 || x.index + x.count > ds.len() {
        return Err(config_error(format!(
            "images {}..{} outside the {} samples of {}",
            x.index,
            x.index + x.count,
            ds.len(),
            x.data.display()
        )));
    }
    let l = load_model(cli, &x.checkpoint, &ds)?;
    let dir = out_dir(cli)?;
    let ids: Vec<usize> = (x.index..x.index + x.count).collect();
    let size = l.cfg.vit.image_size;
    let mut written = 0;
    match x.kind {
        Kind::Pca => {
            let images = eval_batch(&ds, &ids, size, &l.stats)?;
            for layer in pca_layer_maps(&l.model, &images)? {
                for (i, map) in ids.iter().zip(&layer.maps) {
                    let stem = dir.join(format!("pca_layer{}_img{i}", layer.layer));
                    write_matrix(&stem.with_extension("txt"), map)?;
                    write_pgm(&stem.with_extension("pgm"), map)?;
                    written += 1;
                }
            }
        }
        Kind::Attention => {
            for &i in &ids {
                let image = eval_batch(&ds, &[i], size, &l.stats)?;
                let (maps, _) = attention_maps(&l.model, &image)?;
                let g = l.cfg.vit.grid();
                for (h, head) in maps.data().chunks(g * g).enumerate() {
                    let m = magma_tensor::Tensor::new(vec![g, g], head.to_vec())?;
                    let stem = dir.join(format!("attn_head{}_img{i}", h + 1));
                    write_matrix(&stem.with_extension("txt"), &m)?;
                    write_pgm(&stem.with_extension("pgm"), &m)?;
                    written += 1;
                }
            }
        }
    }
    println!("wrote {written} maps to {}", dir.display());
    Ok(())
}
