//! Optimization loop, evaluation and learning-rate schedule.

mod optimizer;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{sample_loss, LossConfig, LossTerms};
use crate::metrics::{confusion, Confusion, MetricsReport};
use crate::model::{predict_mask, RdpNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use optimizer::{AdamW, AdamWConfig};
pub use trainer::{EpochLog, Trainer, STATE_FILE, METRICS_FILE, SCORES_FILE, SPLIT_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Warmup, difficulty scoring, then staged easy-to-hard feeding.
    Efficient,
    /// Warmup, then a loss-weighted random subset each epoch.
    RandomSampling,
    /// Every sample every epoch.
    Plain,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efficient" => Ok(Strategy::Efficient),
            "random" | "random_sampling" => Ok(Strategy::RandomSampling),
            "plain" => Ok(Strategy::Plain),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (expected efficient, random or plain)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Efficient => "efficient",
            Strategy::RandomSampling => "random",
            Strategy::Plain => "plain",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adamw: AdamWConfig,
    pub strategy: Strategy,
    /// Share of samples drawn per epoch by the random-sampling baseline.
    pub sample_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay: 0.8,
            decay_every: 15,
            batch_size: 16,
            epochs: 200,
            adamw: AdamWConfig::default(),
            strategy: Strategy::Efficient,
            sample_fraction: 0.75,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "decay_every, batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "sample_fraction must lie in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        self.adamw.validate()
    }
}

/// Step decay: `lr0 * decay^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Samples per inference batch during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub metrics: MetricsReport,
    pub mean_loss: f64,
    /// Per-sample eval-mode losses, in dataset order.
    pub per_sample: Vec<(String, LossTerms)>,
}

/// Eval-mode pass over `dataset`: micro-averaged metrics plus per-sample losses.
pub fn evaluate<T: Scalar>(model: &RdpNet<T>, dataset: &Dataset<T>, loss: &LossConfig) -> Result<EvalReport> {
    let mut total = Confusion::default();
    let mut per_sample = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (a, b, masks) = dataset.batch(chunk)?;
        let logits = model.infer(&a, &b)?;
        let preds = predict_mask(&logits)?;
        let per = logits.numel() / chunk.len();
        let shape = &logits.shape()[1..];
        for (j, &i) in chunk.iter().enumerate() {
            let one = Tensor::new(shape, logits.data()[j * per..(j + 1) * per].to_vec())?;
            let terms = sample_loss(&one, &masks[j], loss)?;
            per_sample.push((dataset.samples[i].id.clone(), terms));
            total += confusion(&preds[j], &masks[j])?;
        }
    }
    let mean_loss = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().map(|(_, t)| t.total).sum::<f64>() / per_sample.len() as f64
    };
    Ok(EvalReport {
        confusion: total,
        metrics: MetricsReport::from_confusion(&total),
        mean_loss,
        per_sample,
    })
}

/// Per-sample eval-mode losses; the values difficulty scoring ranks by.
pub fn sample_losses<T: Scalar>(model: &RdpNet<T>, dataset: &Dataset<T>, loss: &LossConfig) -> Result<Vec<(String, LossTerms)>> {
    Ok(evaluate(model, dataset, loss)?.per_sample)
}
