//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines are always shown.
//!
//! Criteria 7 and 8 train on the 200-pair synthetic set (160 train, 40 held
//! out) in single precision. The plain run goes to 45 epochs; its first 30
//! epochs are exactly a 30-epoch plain run, because the learning rate and
//! shuffling depend only on the epoch index.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use rdpnet::curriculum::{
    expected_sample_fraction, samples_per_schedule, split, DifficultyScore, StageSchedule, DEFAULT_RATIO,
};
use rdpnet::data::{synthetic_dataset, Dataset, SyntheticConfig};
use rdpnet::loss::{dice_loss, edge_loss, edge_weight_map, focal_loss, LossConfig};
use rdpnet::mask::Mask;
use rdpnet::metrics::f1_from;
use rdpnet::model::{RdpNet, RdpNetConfig};
use rdpnet::train::{EpochLog, Strategy, TrainConfig, Trainer, METRICS_FILE, STATE_FILE};
use rdpnet::{Rng, Tape, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, out: Outcome) -> Outcome {
    let took = start.elapsed();
    match out {
        Ok(d) if took <= limit => Ok(format!("{d}; {took:.1?}")),
        Ok(d) => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
        Err(d) => Err(format!("{d}; {took:.1?}")),
    }
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut names = Vec::new();
    let mut cases = 0;
    for (i, dims) in GRAD_SHAPES.iter().enumerate() {
        for (name, err) in check_cases(&primitive_cases(100 + i as u64, *dims)) {
            cases += 1;
            if err > worst.1 {
                worst = (name.clone(), err);
            }
            if !names.contains(&name) {
                names.push(name);
            }
        }
    }
    let (model_err, checked) = model_grad_check(5);
    let detail = format!(
        "{} primitives x {} shapes ({cases} checks), worst {:.2e} ({}); network+loss on 6x16x16 eval mode, {checked} scalars, worst {model_err:.2e}",
        names.len(),
        GRAD_SHAPES.len(),
        worst.1,
        worst.0
    );
    within(
        Duration::from_secs(120),
        start,
        check(worst.1 < GRAD_TOL && model_err < GRAD_TOL, detail),
    )
}

fn c2_convolution() -> Outcome {
    let start = Instant::now();
    let cases = 108;
    let worst = conv_oracle_sweep(2024, cases);
    within(
        Duration::from_secs(60),
        start,
        check(worst < 1e-10, format!("{cases} cases (dense, grouped, depthwise, transposed; strides 1/2/4, padding 0/1/2), max abs diff {worst:.2e}")),
    )
}

fn rotate(w: &[f64], n: usize) -> Vec<f64> {
    (0..n * n).map(|i| w[(i % n) * n + (n - 1 - i / n)]).collect()
}

fn c3_edge_weights() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(77);
    let (n, m) = (32, 7);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..100 {
        let mask = if i % 2 == 0 {
            let density = rng.uniform_range(0.05, 0.95);
            random_mask(&mut rng, n, n, density)
        } else {
            blocky_mask(&mut rng, n, n)
        };
        let map = edge_weight_map(&mask, 1.0, m).unwrap();
        for (g, w) in map.weights().iter().zip(brute_edge_weights(&mask, 1.0, m)) {
            worst = worst.max((g - w).abs());
        }
        if edge_weight_map(&mask.complement(), 1.0, m).unwrap().weights() != map.weights() {
            failures.push(format!("complement #{i}"));
        }
        let h: Vec<f64> = (0..n * n).map(|k| map.weights()[(k / n) * n + (n - 1 - k % n)]).collect();
        if edge_weight_map(&mask.flip_horizontal(), 1.0, m).unwrap().weights() != h.as_slice() {
            failures.push(format!("hflip #{i}"));
        }
        let v: Vec<f64> = (0..n * n).map(|k| map.weights()[(n - 1 - k / n) * n + k % n]).collect();
        if edge_weight_map(&mask.flip_vertical(), 1.0, m).unwrap().weights() != v.as_slice() {
            failures.push(format!("vflip #{i}"));
        }
        if edge_weight_map(&mask.rot90(), 1.0, m).unwrap().weights() != rotate(map.weights(), n).as_slice() {
            failures.push(format!("rot90 #{i}"));
        }
        let alpha = rng.uniform_range(0.1, 5.0);
        let scaled = edge_weight_map(&mask, alpha, m).unwrap();
        if scaled.weights().iter().zip(map.weights()).any(|(s, o)| *s != alpha * o) {
            failures.push(format!("alpha #{i}"));
        }
    }
    for v in [false, true] {
        if edge_weight_map(&Mask::filled(n, n, v), 1.0, m).unwrap().weights().iter().any(|&w| w != 0.0) {
            failures.push(format!("constant {v}"));
        }
    }
    within(
        Duration::from_secs(30),
        start,
        check(
            worst < 1e-12 && failures.is_empty(),
            format!("100 masks 32x32, m=7: max oracle diff {worst:.2e}; exact identities failed: {failures:?}"),
        ),
    )
}

fn scalar_of(f: impl for<'t> Fn(&'t Tape<f64>) -> rdpnet::Var<'t, f64>) -> f64 {
    let tape = Tape::new();
    f(&tape).item().unwrap()
}

fn c4_loss_values() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(4);
    let shape = [8, 8];
    let weights = Tensor::from_fn(&shape, |_| rng.uniform_range(0.0, 2.0));
    let p = Tensor::from_fn(&shape, |_| rng.uniform_range(0.05, 1.0));

    let edge_at_one = scalar_of(|t| edge_loss(t.constant(Tensor::ones(&shape)), t.constant(weights.clone())).unwrap());
    let edge_zero_w = scalar_of(|t| edge_loss(t.constant(p.clone()), t.constant(Tensor::zeros(&shape))).unwrap());
    let focal0 = scalar_of(|t| focal_loss(t.constant(p.clone()), 0.0).unwrap());
    let ce = p.data().iter().map(|v| -v.ln()).sum::<f64>() / p.numel() as f64;
    let focal_half = scalar_of(|t| focal_loss(t.constant(Tensor::full(&shape, 0.5)), 2.0).unwrap());
    let target = Mask::from_fn(8, 8, |y, x| (y * 3 + x) % 5 < 2).to_tensor::<f64>();
    let dice_match = scalar_of(|t| dice_loss(t.constant(target.clone()), t.constant(target.clone()), 1.0).unwrap());

    let quarter_ln2 = 0.25 * std::f64::consts::LN_2;
    let ok = edge_at_one == 0.0
        && edge_zero_w == 0.0
        && (focal0 - ce).abs() < 1e-12
        && (focal_half - quarter_ln2).abs() < 1e-12
        && dice_match == 0.0;
    within(
        Duration::from_secs(5),
        start,
        check(
            ok,
            format!(
                "edge(p_t=1)={edge_at_one:e} edge(w=0)={edge_zero_w:e} |focal0-CE|={:.1e} focal(0.5,2)-ln2/4={:.1e} dice(match)={dice_match:e}",
                (focal0 - ce).abs(),
                focal_half - quarter_ln2
            ),
        ),
    )
}

fn c5_curriculum() -> Outcome {
    let start = Instant::now();
    let scores: Vec<DifficultyScore> = (0..9000)
        .map(|i| DifficultyScore {
            sample_id: format!("s{i:05}"),
            loss: (i as f64 * 0.618).fract(),
        })
        .collect();
    let mut sorted = scores.clone();
    rdpnet::curriculum::sort_scores(&mut sorted);
    let sizes = split(&sorted, DEFAULT_RATIO).unwrap().sizes();
    let frac = expected_sample_fraction(&StageSchedule::default(), DEFAULT_RATIO);
    let ok = sizes == [4000, 2000, 3000] && (frac - 13.0 / 15.0).abs() < 1e-12 && (frac - 0.865).abs() <= 0.005;
    within(
        Duration::from_secs(5),
        start,
        check(ok, format!("split {sizes:?}; expected fraction {frac:.6} (13/15 = {:.6}, reference 0.865)", 13.0 / 15.0)),
    )
}

fn c6_metrics() -> Outcome {
    let start = Instant::now();
    let f1 = f1_from(0.967, 0.977);
    within(
        Duration::from_secs(1),
        start,
        check((f1 - 0.972).abs() <= 5e-4, format!("P=0.967 R=0.977 -> F1={f1:.5}")),
    )
}

const DESK_TRAIN: usize = 160;

fn desk_data() -> (Dataset<f32>, Dataset<f32>) {
    let cfg = SyntheticConfig {
        count: 200,
        height: 64,
        width: 64,
        seed: 7,
        ..Default::default()
    };
    synthetic_dataset::<f32>(&cfg).unwrap().split_at(DESK_TRAIN)
}

fn desk_model() -> RdpNet<f32> {
    let cfg = RdpNetConfig {
        patch_size: 4,
        embed_dim: 32,
        depth: 6,
        out_ch: 16,
        height: 64,
        width: 64,
        ..Default::default()
    };
    RdpNet::build(cfg, &mut Rng::new(1)).unwrap()
}

fn desk_schedule() -> StageSchedule {
    StageSchedule {
        warmup_end: 10,
        medium_start: 20,
        hard_start: 30,
        total_epochs: 45,
        cumulative: true,
    }
}

fn desk_run(strategy: Strategy, data: &(Dataset<f32>, Dataset<f32>)) -> (Vec<EpochLog>, Option<[usize; 3]>, u64, Duration) {
    let start = Instant::now();
    let cfg = TrainConfig {
        epochs: 45,
        batch_size: 16,
        strategy,
        seed: 1,
        ..Default::default()
    };
    let mut t = Trainer::new(desk_model(), cfg, desk_schedule(), LossConfig::default(), None).unwrap();
    for _ in 0..45 {
        let log = t.run_epoch(&data.0, Some(&data.1)).unwrap();
        eprintln!(
            "  [{strategy}] epoch {:2} loss {:.4} val_f1 {:.4}",
            log.epoch + 1,
            log.train_loss,
            log.val_f1.unwrap_or(f64::NAN)
        );
    }
    let sizes = t.split().map(|s| s.sizes());
    (t.history.clone(), sizes, t.samples_processed(), start.elapsed())
}

fn c7_desk_scale(plain: &[EpochLog], plain_time: Duration) -> Outcome {
    let first = plain[0].train_loss;
    let at30 = &plain[29];
    let fall = 1.0 - at30.train_loss / first;
    let f1 = at30.val_f1.unwrap_or(0.0);
    // 30 of the 45 measured epochs.
    let time30 = plain_time.mul_f64(30.0 / 45.0);
    let ok = fall >= 0.5 && f1 > 0.80 && time30 <= Duration::from_secs(20 * 60);
    check(
        ok,
        format!(
            "plain f32, 160/40 pairs: loss {first:.4} -> {:.4} (fall {:.1}%), val F1 {f1:.4} at epoch 30; ~{time30:.0?}",
            at30.train_loss,
            100.0 * fall
        ),
    )
}

fn c8_strategies(plain: &[EpochLog], efficient: &[EpochLog], sizes: Option<[usize; 3]>, processed: u64) -> Outcome {
    let Some(sizes) = sizes else {
        return Err("efficient run produced no split".into());
    };
    let n = DESK_TRAIN;
    let schedule = desk_schedule();
    let exact = samples_per_schedule(&schedule, sizes);
    let by_hand = 10 * n + 10 * sizes[0] + 10 * (sizes[0] + sizes[1]) + 15 * n;
    let ideal = (10.0 + 10.0 * 4.0 / 9.0 + 10.0 * 6.0 / 9.0 + 15.0) / 45.0;
    let fraction = processed as f64 / (45 * n) as f64;
    let f_plain = plain.last().unwrap().val_f1.unwrap_or(0.0);
    let f_eff = efficient.last().unwrap().val_f1.unwrap_or(0.0);
    let ok = sizes == [71, 35, 54]
        && processed as usize == exact
        && exact == by_hand
        && (fraction - ideal).abs() < 0.005
        && f_eff >= f_plain - 0.05;
    check(
        ok,
        format!(
            "split {sizes:?}; samples {processed} (schedule {exact}, by hand {by_hand}) = {fraction:.4} of plain vs ideal {ideal:.4}; val F1 efficient {f_eff:.4} vs plain {f_plain:.4}"
        ),
    )
}

fn small_run(dir: &Path, stop: Option<usize>, resume: bool) {
    let cfg = SyntheticConfig {
        count: 30,
        height: 16,
        width: 16,
        seed: 12,
        ..Default::default()
    };
    let (train, val) = synthetic_dataset::<f64>(&cfg).unwrap().split_at(24);
    let schedule = StageSchedule {
        warmup_end: 5,
        medium_start: 10,
        hard_start: 15,
        total_epochs: 20,
        cumulative: true,
    };
    let tc = TrainConfig {
        epochs: 20,
        batch_size: 8,
        decay_every: 5,
        strategy: Strategy::Efficient,
        seed: 31,
        ..Default::default()
    };
    let mut t = if resume {
        Trainer::resume(dir, tc, schedule, LossConfig::default()).unwrap()
    } else {
        let mcfg = RdpNetConfig {
            embed_dim: 8,
            depth: 2,
            out_ch: 4,
            dw_kernel: 3,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let model = RdpNet::<f64>::build(mcfg, &mut Rng::new(2)).unwrap();
        Trainer::new(model, tc, schedule, LossConfig::default(), Some(dir.to_path_buf())).unwrap()
    };
    t.run(&train, Some(&val), stop).unwrap();
}

fn c9_determinism() -> Outcome {
    let start = Instant::now();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    small_run(dirs[0].path(), None, false);
    small_run(dirs[1].path(), None, false);
    small_run(dirs[2].path(), Some(10), false);
    small_run(dirs[2].path(), None, true);
    let read = |i: usize, name: &str| std::fs::read(dirs[i].path().join(name)).unwrap();
    let mut mismatches = Vec::new();
    for name in [METRICS_FILE, "final.ckpt", STATE_FILE] {
        if read(0, name) != read(1, name) {
            mismatches.push(format!("double run {name}"));
        }
        if read(0, name) != read(2, name) {
            mismatches.push(format!("resume {name}"));
        }
    }
    let lines = String::from_utf8(read(0, METRICS_FILE)).unwrap().lines().count();
    within(
        Duration::from_secs(600),
        start,
        check(
            mismatches.is_empty() && lines == 20,
            format!("efficient strategy, 20 epochs; straight vs straight and straight vs 10+10 resumed, bitwise mismatches: {mismatches:?}"),
        ),
    )
}

fn c10_params() -> Outcome {
    let mut rng = Rng::new(10);
    let mut rows = Vec::new();
    let mut ok = true;
    let mut configs = vec![RdpNetConfig::default()];
    for _ in 0..8 {
        let p = [1, 2, 4, 8][rng.below(4)];
        configs.push(RdpNetConfig {
            patch_size: p,
            embed_dim: rng.int_in(1, 48),
            depth: rng.int_in(1, 8),
            out_ch: rng.int_in(1, 40),
            dw_kernel: [1, 3, 5, 7, 9][rng.below(5)],
            in_channels: 2 * rng.int_in(1, 4),
            num_classes: rng.int_in(2, 3),
            height: p * 4,
            width: p * 4,
        });
    }
    for cfg in &configs {
        let built = RdpNet::<f32>::build(*cfg, &mut Rng::new(0)).unwrap().param_count();
        ok &= built == cfg.param_count();
        rows.push(format!("{built}/{}", cfg.param_count()));
    }
    let report = RdpNetConfig::default().param_report();
    ok &= report.contains(&RdpNetConfig::default().param_count().to_string()) && report.contains("1.70M");
    check(
        ok,
        format!(
            "{} configs registry/closed-form: {}; default config reports {} with the 1.70M disclaimer",
            configs.len(),
            rows.join(" "),
            RdpNetConfig::default().param_count()
        ),
    )
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail, pass) = match out {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {id:2} {tag}  {name}: {detail}");
    pass
}

fn main() {
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let want = |id: usize| only.is_empty() || only.contains(&id);
    // `cargo test -- --list` and filters from other harnesses pass through here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    println!("running acceptance criteria");
    let mut all = true;
    if want(1) {
        all &= report(1, "gradient correctness", c1_gradients);
    }
    if want(2) {
        all &= report(2, "convolution oracle", c2_convolution);
    }
    if want(3) {
        all &= report(3, "edge-weight exactness", c3_edge_weights);
    }
    if want(4) {
        all &= report(4, "loss unit values", c4_loss_values);
    }
    if want(5) {
        all &= report(5, "curriculum arithmetic", c5_curriculum);
    }
    if want(6) {
        all &= report(6, "metric reproduction", c6_metrics);
    }
    if want(7) || want(8) {
        let data = desk_data();
        let plain = catch_unwind(AssertUnwindSafe(|| desk_run(Strategy::Plain, &data)));
        let efficient = if want(8) {
            Some(catch_unwind(AssertUnwindSafe(|| desk_run(Strategy::Efficient, &data))))
        } else {
            None
        };
        if want(7) {
            all &= report(7, "desk-scale end-to-end", || match &plain {
                Ok((h, _, _, took)) => c7_desk_scale(h, *took),
                Err(_) => Err("plain run panicked".into()),
            });
        }
        if let Some(eff) = efficient {
            all &= report(8, "strategy comparison", || match (&plain, &eff) {
                (Ok((p, _, _, _)), Ok((e, sizes, processed, _))) => c8_strategies(p, e, *sizes, *processed),
                _ => Err("a training run panicked".into()),
            });
        }
    }
    if want(9) {
        all &= report(9, "determinism and resume", c9_determinism);
    }
    if want(10) {
        all &= report(10, "parameter accounting", c10_params);
    }
    if !all {
        std::process::exit(1);
    }
}
