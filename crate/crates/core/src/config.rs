//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! embed_dim = 64
//! strategy = efficient
//! manifest = data/manifest.jsonl
//! ```
//!
//! Every key is optional and falls back to the defaults in [`RunConfig::default`].
//! Unknown or repeated keys are errors. An empty value clears an optional path.
//! [`RunConfig::dump`] writes every key, and parsing a dump yields the same
//! configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::curriculum::StageSchedule;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::RdpNetConfig;
use crate::scalar::DType;
use crate::train::{Strategy, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: RdpNetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// `total_epochs` always mirrors `train.epochs`.
    pub schedule: StageSchedule,
    pub dtype: DType,
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: RdpNetConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            schedule: StageSchedule::default(),
            dtype: DType::F32,
            manifest: None,
            val_manifest: None,
            out_dir: None,
            checkpoint: None,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value {v:?} for {key}"))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key with its current value, in dump order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, l, s) = (&self.model, &self.train, &self.loss, &self.schedule);
        vec![
            ("patch_size", m.patch_size.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("depth", m.depth.to_string()),
            ("out_ch", m.out_ch.to_string()),
            ("dw_kernel", m.dw_kernel.to_string()),
            ("in_channels", m.in_channels.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("lr0", format!("{:?}", t.lr0)),
            ("decay", format!("{:?}", t.decay)),
            ("decay_every", t.decay_every.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("beta1", format!("{:?}", t.adamw.beta1)),
            ("beta2", format!("{:?}", t.adamw.beta2)),
            ("adam_eps", format!("{:?}", t.adamw.eps)),
            ("weight_decay", format!("{:?}", t.adamw.weight_decay)),
            ("strategy", t.strategy.to_string()),
            ("sample_fraction", format!("{:?}", t.sample_fraction)),
            ("seed", t.seed.to_string()),
            ("alpha", format!("{:?}", l.alpha)),
            ("neighborhood", l.neighborhood.to_string()),
            ("focal_gamma", format!("{:?}", l.focal_gamma)),
            ("dice_smooth", format!("{:?}", l.dice_smooth)),
            ("warmup_end", s.warmup_end.to_string()),
            ("medium_start", s.medium_start.to_string()),
            ("hard_start", s.hard_start.to_string()),
            ("cumulative", s.cumulative.to_string()),
            ("dtype", self.dtype.name().to_string()),
            ("manifest", show_path(&self.manifest)),
            ("val_manifest", show_path(&self.val_manifest)),
            ("out_dir", show_path(&self.out_dir)),
            ("checkpoint", show_path(&self.checkpoint)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text form. Does not validate cross-field rules.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        let (m, t, l, s) = (&mut self.model, &mut self.train, &mut self.loss, &mut self.schedule);
        match key {
            "patch_size" => m.patch_size = num(key, v)?,
            "embed_dim" => m.embed_dim = num(key, v)?,
            "depth" => m.depth = num(key, v)?,
            "out_ch" => m.out_ch = num(key, v)?,
            "dw_kernel" => m.dw_kernel = num(key, v)?,
            "in_channels" => m.in_channels = num(key, v)?,
            "num_classes" => m.num_classes = num(key, v)?,
            "height" => m.height = num(key, v)?,
            "width" => m.width = num(key, v)?,
            "lr0" => t.lr0 = num(key, v)?,
            "decay" => t.decay = num(key, v)?,
            "decay_every" => t.decay_every = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "beta1" => t.adamw.beta1 = num(key, v)?,
            "beta2" => t.adamw.beta2 = num(key, v)?,
            "adam_eps" => t.adamw.eps = num(key, v)?,
            "weight_decay" => t.adamw.weight_decay = num(key, v)?,
            "strategy" => t.strategy = v.parse::<Strategy>().map_err(|e| e.to_string())?,
            "sample_fraction" => t.sample_fraction = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "alpha" => l.alpha = num(key, v)?,
            "neighborhood" => l.neighborhood = num(key, v)?,
            "focal_gamma" => l.focal_gamma = num(key, v)?,
            "dice_smooth" => l.dice_smooth = num(key, v)?,
            "warmup_end" => s.warmup_end = num(key, v)?,
            "medium_start" => s.medium_start = num(key, v)?,
            "hard_start" => s.hard_start = num(key, v)?,
            "cumulative" => s.cumulative = num(key, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(format!("invalid value {v:?} for dtype (expected f32 or f64)")),
                }
            }
            "manifest" => self.manifest = path(v),
            "val_manifest" => self.val_manifest = path(v),
            "out_dir" => self.out_dir = path(v),
            "checkpoint" => self.checkpoint = path(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        self.schedule.total_epochs = self.train.epochs;
        Ok(())
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got {line:?}")));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key {key:?} set twice")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.schedule.total_epochs = cfg.train.epochs;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path)
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.train.strategy != Strategy::Plain {
            self.schedule.validate()?;
        }
        Ok(())
    }
}
