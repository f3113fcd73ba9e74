//! Easy-to-hard curriculum: difficulty scores, the easy/medium/hard split,
//! the staged schedule and the loss-weighted random-sampling baseline.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::RdpNet;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const DEFAULT_RATIO: [usize; 3] = [4, 2, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub sample_id: String,
    pub loss: f64,
}

/// Ascending by loss, ties by id.
pub fn sort_scores(scores: &mut [DifficultyScore]) {
    scores.sort_by(|a, b| a.loss.total_cmp(&b.loss).then_with(|| a.sample_id.cmp(&b.sample_id)));
}

/// Eval-mode hybrid loss of every sample, sorted by [`sort_scores`].
pub fn score_samples<T: Scalar>(model: &RdpNet<T>, dataset: &Dataset<T>, loss: &LossConfig) -> Result<Vec<DifficultyScore>> {
    let per_sample = crate::train::sample_losses(model, dataset, loss)?;
    let mut scores: Vec<DifficultyScore> = per_sample
        .into_iter()
        .map(|(sample_id, terms)| DifficultyScore {
            sample_id,
            loss: terms.total,
        })
        .collect();
    if let Some(bad) = scores.iter().find(|s| !s.loss.is_finite()) {
        return Err(Error::NonFinite {
            op: "score_samples",
            index: dataset.index_of(&bad.sample_id).unwrap_or(0),
        });
    }
    sort_scores(&mut scores);
    Ok(scores)
}

/// CSV with header `sample_id,loss`.
pub fn write_scores(scores: &[DifficultyScore], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::model::write_file(path, &bytes)
}

pub fn read_scores(path: &Path) -> Result<Vec<DifficultyScore>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let s: DifficultyScore = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubsetSplit {
    pub easy: Vec<String>,
    pub medium: Vec<String>,
    pub hard: Vec<String>,
}

impl SubsetSplit {
    pub fn sizes(&self) -> [usize; 3] {
        [self.easy.len(), self.medium.len(), self.hard.len()]
    }

    pub fn len(&self) -> usize {
        self.easy.len() + self.medium.len() + self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<String> {
        self.easy.iter().chain(&self.medium).chain(&self.hard).cloned().collect()
    }

    /// Text form: `[easy]`, `[medium]`, `[hard]` sections, one id per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, ids) in [("easy", &self.easy), ("medium", &self.medium), ("hard", &self.hard)] {
            let _ = writeln!(s, "[{name}]");
            for id in ids {
                let _ = writeln!(s, "{id}");
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut split = SubsetSplit::default();
        let mut current: Option<&mut Vec<String>> = None;
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if line.is_empty() {
                continue;
            }
            current = match line {
                "[easy]" => Some(&mut split.easy),
                "[medium]" => Some(&mut split.medium),
                "[hard]" => Some(&mut split.hard),
                id => {
                    let Some(list) = current else {
                        return Err(err(format!("id {id:?} before any section header")));
                    };
                    if !seen.insert(id.to_string()) {
                        return Err(err(format!("id {id:?} listed twice")));
                    }
                    list.push(id.to_string());
                    Some(list)
                }
            };
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SubsetSplit::parse(&text, path)
    }
}

/// Partitions sorted scores by `ratio`: the first two subsets take
/// `floor(r_i * n / sum)` samples and the hard subset takes the remainder.
pub fn split(scores: &[DifficultyScore], ratio: [usize; 3]) -> Result<SubsetSplit> {
    let total: usize = ratio.iter().sum();
    let n = scores.len();
    if total == 0 {
        return Err(Error::Config("split ratio must not be all zero".into()));
    }
    if n < total {
        return Err(Error::Data(format!(
            "cannot split {n} samples by {}:{}:{}; need at least {total}",
            ratio[0], ratio[1], ratio[2]
        )));
    }
    if let Some(w) = scores.windows(2).find(|w| {
        w[0].loss.total_cmp(&w[1].loss).then_with(|| w[0].sample_id.cmp(&w[1].sample_id)) == std::cmp::Ordering::Greater
    }) {
        return Err(Error::Data(format!(
            "scores are not sorted: {} ({}) precedes {} ({})",
            w[0].sample_id, w[0].loss, w[1].sample_id, w[1].loss
        )));
    }
    let n_easy = ratio[0] * n / total;
    let n_medium = ratio[1] * n / total;
    let ids: Vec<String> = scores.iter().map(|s| s.sample_id.clone()).collect();
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Data(format!("duplicate sample id {dup:?} in scores")));
    }
    Ok(SubsetSplit {
        easy: ids[..n_easy].to_vec(),
        medium: ids[n_easy..n_easy + n_medium].to_vec(),
        hard: ids[n_easy + n_medium..].to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub warmup_end: usize,
    pub medium_start: usize,
    pub hard_start: usize,
    pub total_epochs: usize,
    /// Later stages keep earlier subsets; otherwise each stage trains on its subset alone.
    pub cumulative: bool,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            warmup_end: 30,
            medium_start: 60,
            hard_start: 90,
            total_epochs: 200,
            cumulative: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Easy,
    Medium,
    Hard,
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = 0 < self.warmup_end
            && self.warmup_end <= self.medium_start
            && self.medium_start <= self.hard_start
            && self.hard_start <= self.total_epochs;
        if !ok {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup_end <= medium_start <= hard_start <= total_epochs, got {} / {} / {} / {}",
                self.warmup_end, self.medium_start, self.hard_start, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn stage(&self, epoch: usize) -> Result<Stage> {
        if epoch >= self.total_epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        Ok(if epoch < self.warmup_end {
            Stage::Warmup
        } else if epoch < self.medium_start {
            Stage::Easy
        } else if epoch < self.hard_start {
            Stage::Medium
        } else {
            Stage::Hard
        })
    }

    /// Epochs at which a new stage begins (checkpoint points).
    pub fn boundaries(&self) -> [usize; 3] {
        [self.warmup_end, self.medium_start, self.hard_start]
    }

    /// Sizes of the active set per stage, given subset sizes.
    fn stage_count(&self, stage: Stage, sizes: [f64; 3]) -> f64 {
        let full = sizes.iter().sum();
        match (stage, self.cumulative) {
            (Stage::Warmup, _) => full,
            (Stage::Easy, _) => sizes[0],
            (Stage::Medium, true) => sizes[0] + sizes[1],
            (Stage::Medium, false) => sizes[1],
            (Stage::Hard, true) => full,
            (Stage::Hard, false) => sizes[2],
        }
    }

    fn fraction_of(&self, sizes: [f64; 3]) -> f64 {
        let full: f64 = sizes.iter().sum();
        let mut acc = 0.0;
        for e in 0..self.total_epochs {
            let stage = self.stage(e).expect("epoch in range");
            acc += self.stage_count(stage, sizes) / full;
        }
        acc / self.total_epochs as f64
    }
}

/// Ids trained on at `epoch`.
pub fn active_set(epoch: usize, schedule: &StageSchedule, split: &SubsetSplit) -> Result<Vec<String>> {
    let stage = schedule.stage(epoch)?;
    let cat = |parts: &[&Vec<String>]| parts.iter().flat_map(|p| p.iter().cloned()).collect();
    Ok(match (stage, schedule.cumulative) {
        (Stage::Warmup, _) | (Stage::Hard, true) => split.all(),
        (Stage::Easy, _) => split.easy.clone(),
        (Stage::Medium, true) => cat(&[&split.easy, &split.medium]),
        (Stage::Medium, false) => split.medium.clone(),
        (Stage::Hard, false) => split.hard.clone(),
    })
}

/// Mean over epochs of the active fraction, using the ideal ratio fractions.
pub fn expected_sample_fraction(schedule: &StageSchedule, ratio: [usize; 3]) -> f64 {
    schedule.fraction_of(ratio.map(|r| r as f64))
}

/// Exact samples visited over the whole schedule for concrete subset sizes.
pub fn samples_per_schedule(schedule: &StageSchedule, sizes: [usize; 3]) -> usize {
    (0..schedule.total_epochs)
        .map(|e| schedule.stage_count(schedule.stage(e).expect("in range"), sizes.map(|s| s as f64)) as usize)
        .sum()
}

/// Weighted sampling without replacement of `round(fraction * n)` ids with
/// weight `exp(-loss)` (Efraimidis-Spirakis keys, compared in log space).
/// The result follows the order of `scores`.
pub fn random_sampling_baseline(scores: &[DifficultyScore], fraction: f64, rng: &mut Rng) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sampling fraction must lie in (0, 1], got {fraction}")));
    }
    let n = scores.len();
    let k = (fraction * n as f64).round() as usize;
    let min = scores.iter().map(|s| s.loss).fold(f64::INFINITY, f64::min);
    let mut keys: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let u = 1.0 - rng.uniform();
            let scale = if s.loss == f64::INFINITY { f64::INFINITY } else { (s.loss - min).exp() };
            let key = if u == 1.0 { 0.0 } else { u.ln() * scale };
            (key, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = keys[..k].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| scores[i].sample_id.clone()).collect())
}
