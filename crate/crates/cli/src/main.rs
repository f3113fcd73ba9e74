//! `rdpnet` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};
use image::{GrayImage, Luma};

use rdpnet::config::RunConfig;
use rdpnet::curriculum::{read_scores, score_samples, sort_scores, split, write_scores, DEFAULT_RATIO};
use rdpnet::data::{generate_synthetic, load_mask, mask_to_gray, read_manifest, save_gray, save_rgb, tile, write_manifest, Dataset, SyntheticConfig};
use rdpnet::loss::edge_weight_map;
use rdpnet::metrics::{confusion, render_error_map, MetricsReport};
use rdpnet::model::{load_checkpoint, predict_mask, RdpNet};
use rdpnet::train::{evaluate, Strategy, Trainer, EVAL_BATCH};
use rdpnet::{DType, Error, Rng, Scalar};

#[derive(Parser, Debug)]
#[command(name = "rdpnet", version, about = "RDP-Net change detection: data, training, evaluation and diagnostics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Threads used to decode images. Compute runs on one thread.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set depth=4`. Repeatable; applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset and its manifest.
    GenData {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Cut every pair of a manifest into square tiles.
    Tile {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        /// Defaults to the tile size (no overlap).
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train a model; writes checkpoints, metrics.jsonl and the resumable state to --out.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Initial weights; ignored with --resume.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue the run saved in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Eval-mode loss of every sample, written to scores.csv.
    Score {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Easy/medium/hard split (4:2:3) of a scores file, written to split.txt.
    Split {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Micro-averaged precision, recall and F1 as JSON.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also print a text table.
        #[arg(long)]
        table: bool,
    },
    /// Write predicted change masks as `<id>.png`.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Edge-weight raster of a mask, scaled by 1/alpha to [0, 255].
    EdgeMap {
        #[arg(long)]
        mask: PathBuf,
    },
    /// Red/green error raster comparing a prediction with ground truth.
    ErrorMap {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Closed-form and registry parameter counts of the configured model.
    ParamCount,
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand, Debug)]
enum ConfigAction {
    /// Print every key with its effective value.
    Dump,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

type CliResult<T = ()> = Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Domain { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Config file, then `--set` overrides, then `--seed`.
fn run_config(g: &Global) -> CliResult<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            // Validation waits until the overrides are in.
            let mut cfg = RunConfig::default();
            apply_lines(&mut cfg, &text, path)?;
            cfg
        }
        None => RunConfig::default(),
    };
    for item in &g.set {
        let Some((k, v)) = item.split_once('=') else {
            return Err(usage(format!("--set expects KEY=VALUE, got {item:?}")));
        };
        cfg.set(k.trim(), v).map_err(|e| Error::Config(format!("--set {item}: {e}")))?;
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn apply_lines(cfg: &mut RunConfig, text: &str, path: &Path) -> CliResult {
    // Parse strictly first (unknown and repeated keys, line numbers), then
    // keep the unvalidated values so flag overrides can still fix them.
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
        if !seen.insert(k.trim().to_string()) {
            return Err(err(format!("key {:?} set twice", k.trim())).into());
        }
        cfg.set(k.trim(), v).map_err(err)?;
    }
    Ok(())
}

fn out_dir(g: &Global, cfg: &RunConfig, fallback: &str) -> PathBuf {
    g.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| usage(format!("missing --{name} (or `{name}` in the config file)")))
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

macro_rules! with_dtype {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> CliResult {
    let g = &cli.global;
    if g.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let mut cfg = run_config(g)?;
    match cli.command {
        Command::GenData { count, height, width } => {
            let syn = SyntheticConfig {
                count,
                height,
                width,
                seed: cfg.train.seed,
                ..Default::default()
            };
            let dir = out_dir(g, &cfg, "data");
            let pairs = generate_synthetic(&syn, &dir)?;
            println!("wrote {} pairs to {}", pairs.len(), dir.join("manifest.jsonl").display());
        }
        Command::Tile { manifest, tile: size, stride } => {
            let dir = out_dir(g, &cfg, "tiles");
            let root = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
            let mut all = Vec::new();
            for pair in read_manifest(&manifest)? {
                all.extend(tile(&pair.resolved(&root), size, stride.unwrap_or(size), &dir)?);
            }
            let path = dir.join("manifest.jsonl");
            write_manifest(&all, &path)?;
            println!("wrote {} tiles to {}", all.len(), path.display());
        }
        Command::Train {
            manifest,
            val_manifest,
            strategy,
            epochs,
            checkpoint,
            resume,
        } => {
            if let Some(s) = strategy {
                cfg.train.strategy = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.schedule.total_epochs = e;
            }
            cfg.manifest = Some(required(manifest, &cfg.manifest, "manifest")?);
            cfg.val_manifest = val_manifest.or(cfg.val_manifest.clone());
            if !resume {
                cfg.checkpoint = checkpoint.or(cfg.checkpoint.clone());
            }
            cfg.out_dir = Some(out_dir(g, &cfg, "run"));
            cfg.validate()?;
            with_dtype!(cfg.dtype, train(&cfg, g.threads, resume))?;
        }
        Command::Score { checkpoint, manifest } => {
            let ckpt = required(checkpoint, &cfg.checkpoint, "checkpoint")?;
            let data = required(manifest, &cfg.manifest, "manifest")?;
            let dir = out_dir(g, &cfg, ".");
            with_dtype!(cfg.dtype, score(&cfg, &ckpt, &data, &dir, g.threads))?;
        }
        Command::Split { scores } => {
            let mut s = read_scores(&scores)?;
            sort_scores(&mut s);
            let parts = split(&s, DEFAULT_RATIO)?;
            let dir = out_dir(g, &cfg, ".");
            ensure_dir(&dir)?;
            let path = dir.join("split.txt");
            parts.save(&path)?;
            let [e, m, h] = parts.sizes();
            println!("easy {e} medium {m} hard {h} -> {}", path.display());
        }
        Command::Eval { checkpoint, manifest, table } => {
            let ckpt = required(checkpoint, &cfg.checkpoint, "checkpoint")?;
            let data = required(manifest, &cfg.manifest, "manifest")?;
            with_dtype!(cfg.dtype, eval(&cfg, &ckpt, &data, table, g.threads))?;
        }
        Command::Predict { checkpoint, manifest } => {
            let ckpt = required(checkpoint, &cfg.checkpoint, "checkpoint")?;
            let data = required(manifest, &cfg.manifest, "manifest")?;
            let dir = out_dir(g, &cfg, "predictions");
            with_dtype!(cfg.dtype, predict(&ckpt, &data, &dir, g.threads))?;
        }
        Command::EdgeMap { mask } => {
            cfg.loss.validate()?;
            let m = load_mask(&mask)?;
            let map = edge_weight_map(&m, cfg.loss.alpha, cfg.loss.neighborhood)?;
            let (h, w) = map.dims();
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                let v = map.get(y as usize, x as usize) / cfg.loss.alpha;
                Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
            });
            let dir = out_dir(g, &cfg, ".");
            let path = dir.join(format!("{}_edge.png", stem(&mask)));
            save_gray(&img, &path)?;
            let max = map.weights().iter().cloned().fold(0.0, f64::max);
            println!("max weight {max:.6} (alpha {}, neighborhood {}) -> {}", cfg.loss.alpha, cfg.loss.neighborhood, path.display());
        }
        Command::ErrorMap { pred, gt } => {
            let (p, t) = (load_mask(&pred)?, load_mask(&gt)?);
            let img = render_error_map(&p, &t)?;
            let dir = out_dir(g, &cfg, ".");
            let path = dir.join(format!("{}_error.png", stem(&pred)));
            save_rgb(&img, &path)?;
            let c = confusion(&p, &t)?;
            println!("{}", MetricsReport::from_confusion(&c).to_json());
        }
        Command::ParamCount => {
            cfg.model.validate()?;
            let registry = RdpNet::<f32>::build(cfg.model, &mut Rng::new(0))?.param_count();
            print!("{}", cfg.model.param_report());
            println!("registry: {registry}");
            println!("attention length: {}", cfg.model.attention_len());
        }
        Command::Config { action: ConfigAction::Dump } => {
            cfg.validate()?;
            print!("{}", cfg.dump());
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
}

fn train<T: Scalar>(cfg: &RunConfig, threads: usize, resume: bool) -> CliResult {
    let out = cfg.out_dir.clone().expect("set by caller");
    let data = Dataset::<T>::load_threads(cfg.manifest.as_ref().expect("set by caller"), threads)?;
    let val = match &cfg.val_manifest {
        Some(p) => Some(Dataset::<T>::load_threads(p, threads)?),
        None => None,
    };
    if data.is_empty() {
        return Err(Error::Data("training manifest lists no samples".into()).into());
    }
    let mut trainer = if resume {
        Trainer::<T>::resume(&out, cfg.train.clone(), cfg.schedule, cfg.loss.clone())?
    } else {
        let model = match &cfg.checkpoint {
            Some(p) => load_checkpoint::<T>(p)?,
            None => RdpNet::build(cfg.model, &mut Rng::new(cfg.train.seed))?,
        };
        Trainer::new(model, cfg.train.clone(), cfg.schedule, cfg.loss.clone(), Some(out.clone()))?
    };
    ensure_dir(&out)?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.dump()).map_err(|e| Error::Io { path: cfg_path, source: e })?;
    log::info!(
        "training {} samples for {} epochs ({} strategy, {})",
        data.len(),
        cfg.train.epochs,
        cfg.train.strategy,
        cfg.dtype.name()
    );
    let history = trainer.run(&data, val.as_ref(), None)?;
    let last = history.last().cloned();
    let processed = trainer.samples_processed();
    let fraction = processed as f64 / (cfg.train.epochs * data.len()) as f64;
    println!("epochs: {}", trainer.epoch());
    println!("samples processed: {processed} (fraction {fraction:.4} of full passes)");
    if let Some(l) = last {
        println!("final train loss: {:.6}", l.train_loss);
        if let Some(f1) = l.val_f1 {
            println!("final val F1: {f1:.4}");
        }
    }
    println!("outputs: {}", out.display());
    Ok(())
}

fn score<T: Scalar>(cfg: &RunConfig, ckpt: &Path, manifest: &Path, dir: &Path, threads: usize) -> CliResult {
    let model = load_checkpoint::<T>(ckpt)?;
    let data = Dataset::<T>::load_threads(manifest, threads)?;
    let scores = score_samples(&model, &data, &cfg.loss)?;
    ensure_dir(dir)?;
    let path = dir.join("scores.csv");
    write_scores(&scores, &path)?;
    if let (Some(lo), Some(hi)) = (scores.first(), scores.last()) {
        println!("scored {} samples, loss {:.6} .. {:.6} -> {}", scores.len(), lo.loss, hi.loss, path.display());
    }
    Ok(())
}

fn eval<T: Scalar>(cfg: &RunConfig, ckpt: &Path, manifest: &Path, table: bool, threads: usize) -> CliResult {
    let model = load_checkpoint::<T>(ckpt)?;
    let data = Dataset::<T>::load_threads(manifest, threads)?;
    let report = evaluate(&model, &data, &cfg.loss)?;
    println!("{}", report.metrics.to_json());
    if table {
        print!("{}", report.metrics.table());
    }
    Ok(())
}

fn predict<T: Scalar>(ckpt: &Path, manifest: &Path, dir: &Path, threads: usize) -> CliResult {
    let model = load_checkpoint::<T>(ckpt)?;
    let data = Dataset::<T>::load_threads(manifest, threads)?;
    ensure_dir(dir)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (a, b, _) = data.batch(chunk)?;
        let masks = predict_mask(&model.infer(&a, &b)?)?;
        for (&i, m) in chunk.iter().zip(&masks) {
            save_gray(&mask_to_gray(m), &dir.join(format!("{}.png", data.samples[i].id)))?;
        }
    }
    println!("wrote {} masks to {}", data.len(), dir.display());
    Ok(())
}
