use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate, lr_at, AdamW, Strategy, TrainConfig};
use crate::autodiff::Tape;
use crate::curriculum::{
    active_set, random_sampling_baseline, read_scores, score_samples, split, write_scores, DifficultyScore,
    StageSchedule, SubsetSplit, DEFAULT_RATIO,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{hybrid_loss, LossConfig};
use crate::model::{decode_header, encode_header, read_records, save_checkpoint, write_file, write_records, Record, RdpNet, RdpNetConfig};
use crate::nn::Mode;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const STATE_FILE: &str = "state.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const SPLIT_FILE: &str = "split.txt";

const STATE_MAGIC: &[u8; 4] = b"RDPS";
/// Offset of the per-epoch shuffle streams within the run seed.
const EPOCH_STREAM: u64 = 1 << 32;

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub edge_term: f64,
    pub focal_term: f64,
    pub dice_term: f64,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_f1: Option<f64>,
    /// Cumulative samples used for updates so far.
    pub samples_processed: u64,
}

/// Owns the model and optimizer state for one run.
pub struct Trainer<T: Scalar> {
    pub model: RdpNet<T>,
    pub config: TrainConfig,
    pub schedule: StageSchedule,
    pub loss: LossConfig,
    optimizer: AdamW<T>,
    epoch: usize,
    samples_processed: u64,
    scores: Option<Vec<DifficultyScore>>,
    split: Option<SubsetSplit>,
    pub history: Vec<EpochLog>,
    out_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: RdpNet<T>,
        config: TrainConfig,
        schedule: StageSchedule,
        loss: LossConfig,
        out_dir: Option<PathBuf>,
    ) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        if config.strategy != Strategy::Plain {
            schedule.validate()?;
            if schedule.total_epochs != config.epochs {
                return Err(Error::Config(format!(
                    "schedule covers {} epochs but training runs {}",
                    schedule.total_epochs, config.epochs
                )));
            }
        }
        let shapes: Vec<Vec<usize>> = model.registry().params().map(|(_, p)| p.value.shape().to_vec()).collect();
        let optimizer = AdamW::new(config.adamw, shapes.iter().map(|s| s.as_slice()));
        if let Some(dir) = &out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let log = dir.join(METRICS_FILE);
            fs::write(&log, b"").map_err(|e| Error::io(&log, e))?;
        }
        Ok(Trainer {
            model,
            config,
            schedule,
            loss,
            optimizer,
            epoch: 0,
            samples_processed: 0,
            scores: None,
            split: None,
            history: Vec::new(),
            out_dir,
        })
    }

    /// Next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn samples_processed(&self) -> u64 {
        self.samples_processed
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optimizer
    }

    pub fn scores(&self) -> Option<&[DifficultyScore]> {
        self.scores.as_deref()
    }

    pub fn split(&self) -> Option<&SubsetSplit> {
        self.split.as_ref()
    }

    fn uses_curriculum(&self) -> bool {
        self.config.strategy != Strategy::Plain
    }

    /// Scores the training set with the current model and fixes the split.
    fn prepare_curriculum(&mut self, train: &Dataset<T>) -> Result<()> {
        let scores = score_samples(&self.model, train, &self.loss)?;
        let parts = split(&scores, DEFAULT_RATIO)?;
        if let Some(dir) = &self.out_dir {
            write_scores(&scores, &dir.join(SCORES_FILE))?;
            parts.save(&dir.join(SPLIT_FILE))?;
        }
        log::info!("difficulty split easy/medium/hard = {:?}", parts.sizes());
        self.scores = Some(scores);
        self.split = Some(parts);
        Ok(())
    }

    /// Dataset indices used at `epoch`, before shuffling.
    fn epoch_indices(&self, train: &Dataset<T>, rng: &Rng) -> Result<Vec<usize>> {
        let all = || (0..train.len()).collect::<Vec<_>>();
        let e = self.epoch;
        let ids = match self.config.strategy {
            Strategy::Plain => return Ok(all()),
            _ if e < self.schedule.warmup_end => return Ok(all()),
            Strategy::Efficient => {
                let parts = self.split.as_ref().expect("split prepared at warmup end");
                active_set(e, &self.schedule, parts)?
            }
            Strategy::RandomSampling => {
                let scores = self.scores.as_ref().expect("scores prepared at warmup end");
                random_sampling_baseline(scores, self.config.sample_fraction, &mut rng.fork(0))?
            }
        };
        let mut idx = ids
            .iter()
            .map(|id| {
                train
                    .index_of(id)
                    .ok_or_else(|| Error::Data(format!("curriculum id {id:?} is not in the training set")))
            })
            .collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        Ok(idx)
    }

    /// Trains one epoch and validates on `val` when given.
    pub fn run_epoch(&mut self, train: &Dataset<T>, val: Option<&Dataset<T>>) -> Result<EpochLog> {
        let e = self.epoch;
        if e >= self.config.epochs {
            return Err(Error::Config(format!("training already finished {} epochs", self.config.epochs)));
        }
        if self.uses_curriculum() && e >= self.schedule.warmup_end && self.scores.is_none() {
            self.prepare_curriculum(train)?;
        }
        let mut rng = Rng::new(self.config.seed).fork(EPOCH_STREAM + e as u64);
        let mut order = self.epoch_indices(train, &rng)?;
        rng.shuffle(&mut order);

        let lr = lr_at(e, &self.config);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let (a, b, masks) = train.batch(batch)?;
            let tape = Tape::new();
            let bound = self.model.bind(&tape, true);
            let out = self.model.forward(&bound, tape.constant(a), tape.constant(b), Mode::Train)?;
            let loss = hybrid_loss(out.logits, &masks, &self.loss)?;
            let terms = loss.terms()?;
            if !terms.total.is_finite() {
                return Err(Error::NonFinite {
                    op: "hybrid_loss",
                    index: seen,
                });
            }
            let mut grads = tape.backward(loss.total)?;
            let grads = bound.grads(&mut grads);
            let stats = out.stats;
            drop(tape);
            self.optimizer
                .update(self.model.registry_mut().params_mut().map(|(_, p)| p), &grads, lr)?;
            self.model.apply_batch_stats(&stats);
            let k = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([terms.total, terms.edge, terms.focal, terms.dice]) {
                *s += v * k;
            }
            seen += batch.len();
        }
        self.samples_processed += seen as u64;

        let (vp, vr, vf) = match val {
            Some(v) if !v.is_empty() => {
                let m = evaluate(&self.model, v, &self.loss)?.metrics;
                (Some(m.precision), Some(m.recall), Some(m.f1))
            }
            _ => (None, None, None),
        };
        let n = seen.max(1) as f64;
        let log = EpochLog {
            epoch: e,
            lr,
            train_loss: sums[0] / n,
            edge_term: sums[1] / n,
            focal_term: sums[2] / n,
            dice_term: sums[3] / n,
            val_precision: vp,
            val_recall: vr,
            val_f1: vf,
            samples_processed: self.samples_processed,
        };
        log::info!(
            "epoch {e}: loss {:.5} lr {lr:.2e} val_f1 {}",
            log.train_loss,
            vf.map_or("-".to_string(), |f| format!("{f:.4}"))
        );
        self.epoch += 1;
        if let Some(dir) = self.out_dir.clone() {
            append_log(&dir.join(METRICS_FILE), &log)?;
            let done = self.epoch;
            if (self.uses_curriculum() && self.schedule.boundaries().contains(&done)) || done == self.config.epochs {
                save_checkpoint(&self.model, &dir.join(format!("epoch_{done:04}.ckpt")))?;
            }
            if done == self.config.epochs {
                save_checkpoint(&self.model, &dir.join("final.ckpt"))?;
            }
        }
        self.history.push(log.clone());
        Ok(log)
    }

    /// Runs until `stop_at` (or the configured epoch count), then saves the
    /// resumable state when an output directory is set.
    pub fn run(&mut self, train: &Dataset<T>, val: Option<&Dataset<T>>, stop_at: Option<usize>) -> Result<&[EpochLog]> {
        let end = stop_at.unwrap_or(self.config.epochs).min(self.config.epochs);
        while self.epoch < end {
            self.run_epoch(train, val)?;
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save_state(&dir)?;
        }
        Ok(&self.history)
    }

    /// Model, optimizer moments and counters in one file.
    pub fn state_bytes(&self) -> Vec<u8> {
        let step = self.optimizer.step;
        let mut fields = vec![
            self.epoch,
            (step & 0xffff_ffff) as usize,
            (step >> 32) as usize,
            (self.samples_processed & 0xffff_ffff) as usize,
            (self.samples_processed >> 32) as usize,
        ];
        fields.extend(self.model.config().fields());
        let mut out = encode_header(STATE_MAGIC, &fields);
        let reg = self.model.registry();
        let mut records = Vec::new();
        for (name, p) in reg.params() {
            records.push(Record::from_tensor(&format!("model/{name}"), &p.value));
        }
        for (name, b) in reg.buffers() {
            records.push(Record::from_tensor(&format!("model/{name}"), b));
        }
        for ((name, _), (m, v)) in reg.params().zip(self.optimizer.m.iter().zip(&self.optimizer.v)) {
            records.push(Record::from_tensor(&format!("adam.m/{name}"), m));
            records.push(Record::from_tensor(&format!("adam.v/{name}"), v));
        }
        write_records(&mut out, &records);
        out
    }

    pub fn save_state(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(STATE_FILE), &self.state_bytes())
    }

    /// Restores a run saved by [`Trainer::run`] in `dir`. Later epochs append
    /// to the same metric log.
    pub fn resume(dir: &Path, config: TrainConfig, schedule: StageSchedule, loss: LossConfig) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (fields, offset) = decode_header(&bytes, STATE_MAGIC, 14)?;
        let epoch = fields[0];
        let step = fields[1] as u64 | (fields[2] as u64) << 32;
        let samples = fields[3] as u64 | (fields[4] as u64) << 32;
        let mcfg = RdpNetConfig::from_fields(fields[5..14].try_into().expect("nine fields"));
        let mut model = RdpNet::<T>::build(mcfg, &mut Rng::new(0))?;
        let names: Vec<String> = model.registry().params().map(|(n, _)| n.to_string()).collect();
        let index = |n: &str| names.iter().position(|x| x == n);
        let mut m: Vec<Option<Tensor<T>>> = vec![None; names.len()];
        let mut v: Vec<Option<Tensor<T>>> = vec![None; names.len()];
        for rec in read_records(&bytes, offset)? {
            let bad = |what: &str| Error::Format {
                offset,
                msg: format!("{what} {}", rec.name),
            };
            if let Some(name) = rec.name.strip_prefix("model/") {
                let slot = model.registry_mut().slot_mut(name).ok_or_else(|| bad("unknown tensor"))?;
                if slot.shape() != rec.shape.as_slice() {
                    return Err(bad("shape mismatch for"));
                }
                *slot = rec.to_tensor()?;
            } else if let Some(name) = rec.name.strip_prefix("adam.m/") {
                m[index(name).ok_or_else(|| bad("unknown moment"))?] = Some(rec.to_tensor()?);
            } else if let Some(name) = rec.name.strip_prefix("adam.v/") {
                v[index(name).ok_or_else(|| bad("unknown moment"))?] = Some(rec.to_tensor()?);
            } else {
                return Err(bad("unexpected record"));
            }
        }
        let complete = |xs: Vec<Option<Tensor<T>>>| {
            xs.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| Error::Format {
                offset: bytes.len(),
                msg: "state is missing optimizer moments".into(),
            })
        };
        let optimizer = AdamW {
            config: config.adamw,
            step,
            m: complete(m)?,
            v: complete(v)?,
        };
        config.validate()?;
        let mut trainer = Trainer {
            model,
            config,
            schedule,
            loss,
            optimizer,
            epoch,
            samples_processed: samples,
            scores: None,
            split: None,
            history: Vec::new(),
            out_dir: Some(dir.to_path_buf()),
        };

        let log_path = dir.join(METRICS_FILE);
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for (i, line) in text.lines().take(epoch).enumerate() {
            let entry: EpochLog = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: log_path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            trainer.history.push(entry);
        }
        if trainer.history.len() != epoch {
            return Err(Error::Data(format!(
                "{} holds {} epochs, state expects {epoch}",
                log_path.display(),
                trainer.history.len()
            )));
        }
        // Drop any log lines past the saved state, keeping the rest verbatim.
        let mut kept = String::new();
        for line in text.lines().take(epoch) {
            kept.push_str(line);
            kept.push('\n');
        }
        fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;

        let scores_path = dir.join(SCORES_FILE);
        if trainer.uses_curriculum() && epoch >= trainer.schedule.warmup_end && scores_path.exists() {
            let scores = read_scores(&scores_path)?;
            trainer.split = Some(split(&scores, DEFAULT_RATIO)?);
            trainer.scores = Some(scores);
        }
        Ok(trainer)
    }

    pub fn into_model(self) -> RdpNet<T> {
        self.model
    }
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(entry).expect("plain struct");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}
