//! Synthetic bi-temporal scenes.
//!
//! Background pixels stay within [20, 120] on every channel, while change
//! shapes carry at least one channel of 150 or more and use pairwise distinct
//! colours. Change shapes are painted last, so the clean images differ
//! exactly on the union of their footprints.

use std::f64::consts::TAU;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{mask_to_gray, save_gray, save_rgb, write_manifest, Dataset, Sample, SamplePair};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Polygon,
    LineStrip,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Polygon, ShapeKind::LineStrip];
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of change shapes per pair.
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub kinds: Vec<ShapeKind>,
    /// Amplitude (intensity units) of the global per-channel shift.
    pub color_jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            count: 200,
            height: 64,
            width: 64,
            shapes_min: 1,
            shapes_max: 4,
            kinds: ShapeKind::ALL.to_vec(),
            color_jitter: 12.0,
            noise_sigma: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config(format!(
                "shapes range {}..={} is empty",
                self.shapes_min, self.shapes_max
            )));
        }
        if self.kinds.is_empty() && self.shapes_max > 0 {
            return Err(Error::Config("no shape kinds enabled".into()));
        }
        if !(self.color_jitter >= 0.0 && self.color_jitter <= 60.0) {
            return Err(Error::Config(format!(
                "color_jitter must lie in [0, 60], got {}",
                self.color_jitter
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma <= 30.0) {
            return Err(Error::Config(format!(
                "noise_sigma must lie in [0, 30], got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// A generated pair, with the noise-free images kept for inspection.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub id: String,
    pub clean_a: RgbImage,
    pub clean_b: RgbImage,
    pub image_a: RgbImage,
    pub image_b: RgbImage,
    pub mask: Mask,
}

fn sample_id(index: usize) -> String {
    format!("syn_{index:05}")
}

fn rectangle(rng: &mut Rng, h: usize, w: usize, lo: usize, hi: usize) -> Mask {
    let sh = rng.int_in(lo, hi.min(h));
    let sw = rng.int_in(lo, hi.min(w));
    let y0 = rng.below(h - sh + 1);
    let x0 = rng.below(w - sw + 1);
    Mask::from_fn(h, w, |y, x| (y0..y0 + sh).contains(&y) && (x0..x0 + sw).contains(&x))
}

fn polygon(rng: &mut Rng, h: usize, w: usize, lo: usize, hi: usize) -> Mask {
    let radius = rng.uniform_range(lo as f64 / 2.0, hi as f64 / 2.0);
    let cy = rng.uniform_range(0.0, h as f64);
    let cx = rng.uniform_range(0.0, w as f64);
    let n = rng.int_in(5, 7);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let pts: Vec<(f64, f64)> = angles
        .iter()
        .map(|&a| {
            let r = radius * rng.uniform_range(0.55, 1.0);
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    Mask::from_fn(h, w, |y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut inside = false;
        for i in 0..n {
            let (ay, ax) = pts[i];
            let (by, bx) = pts[(i + 1) % n];
            if (ay > py) != (by > py) && px < ax + (py - ay) / (by - ay) * (bx - ax) {
                inside = !inside;
            }
        }
        inside
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy - p.0, a.1 + t * dx - p.1);
    (qy * qy + qx * qx).sqrt()
}

/// Road-like polyline of a few segments.
fn line_strip(rng: &mut Rng, h: usize, w: usize) -> Mask {
    let n = rng.int_in(3, 4);
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.uniform_range(0.0, h as f64), rng.uniform_range(0.0, w as f64)))
        .collect();
    let half = rng.uniform_range(1.0, 2.0);
    Mask::from_fn(h, w, |y, x| {
        let p = (y as f64 + 0.5, x as f64 + 0.5);
        pts.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= half)
    })
}

fn draw_shape(rng: &mut Rng, kind: ShapeKind, h: usize, w: usize) -> Mask {
    let side = h.min(w);
    let (lo, hi) = ((side / 8).max(2), (side / 3).max(3));
    match kind {
        ShapeKind::Rectangle => rectangle(rng, h, w, lo, hi),
        ShapeKind::Polygon => polygon(rng, h, w, lo, hi),
        ShapeKind::LineStrip => line_strip(rng, h, w),
    }
}

fn paint(img: &mut RgbImage, footprint: &Mask, color: [u8; 3]) {
    for (x, y, px) in img.enumerate_pixels_mut() {
        if footprint.get(y as usize, x as usize) {
            *px = Rgb(color);
        }
    }
}

fn change_color(rng: &mut Rng, used: &[[u8; 3]]) -> [u8; 3] {
    loop {
        let mut c = [0u8; 3];
        for v in &mut c {
            *v = rng.int_in(0, 255) as u8;
        }
        let bright = rng.below(3);
        c[bright] = rng.int_in(150, 255) as u8;
        if !used.contains(&c) {
            return c;
        }
    }
}

fn background(rng: &mut Rng, cfg: &SyntheticConfig) -> RgbImage {
    let (h, w) = (cfg.height, cfg.width);
    let base: Vec<f64> = (0..3).map(|_| rng.uniform_range(45.0, 95.0)).collect();
    let dir = rng.uniform_range(0.0, TAU);
    let (gy, gx) = (dir.sin(), dir.cos());
    let amp = rng.uniform_range(5.0, 20.0);
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let t = (y as f64 * gy + x as f64 * gx) / diag;
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = (base[c] + amp * t).round().clamp(20.0, 120.0) as u8;
        }
        Rgb(px)
    });
    // Static clutter shared by both dates.
    for _ in 0..rng.int_in(2, 4) {
        let kind = [ShapeKind::Rectangle, ShapeKind::Polygon][rng.below(2)];
        let fp = draw_shape(rng, kind, h, w);
        let color = [0, 1, 2].map(|_| rng.int_in(20, 120) as u8);
        paint(&mut img, &fp, color);
    }
    img
}

fn observe(rng: &mut Rng, clean: &RgbImage, cfg: &SyntheticConfig) -> RgbImage {
    let j = cfg.color_jitter;
    let shift: Vec<f64> = (0..3).map(|_| rng.uniform_range(-j, j)).collect();
    let gain: Vec<f64> = (0..3).map(|_| 1.0 + rng.uniform_range(-j, j) / 200.0).collect();
    let mut out = clean.clone();
    for px in out.pixels_mut() {
        for c in 0..3 {
            let v = px.0[c] as f64 * gain[c] + shift[c] + cfg.noise_sigma * rng.normal();
            px.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Deterministic in `(cfg.seed, index)` alone.
pub fn generate_sample(cfg: &SyntheticConfig, index: usize) -> Result<SyntheticSample> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork(index as u64);
    let (h, w) = (cfg.height, cfg.width);
    let bg = background(&mut rng, cfg);
    let mut clean_a = bg.clone();
    let mut clean_b = bg;
    let mut mask = Mask::filled(h, w, false);
    let mut used = Vec::new();
    for _ in 0..rng.int_in(cfg.shapes_min, cfg.shapes_max) {
        let kind = cfg.kinds[rng.below(cfg.kinds.len())];
        let fp = draw_shape(&mut rng, kind, h, w);
        let color = change_color(&mut rng, &used);
        used.push(color);
        let added = rng.below(2) == 0;
        paint(if added { &mut clean_b } else { &mut clean_a }, &fp, color);
        for (i, &v) in fp.data().iter().enumerate() {
            if v == 1 {
                mask.set(i / w, i % w, true);
            }
        }
    }
    let image_a = observe(&mut rng, &clean_a, cfg);
    let image_b = observe(&mut rng, &clean_b, cfg);
    Ok(SyntheticSample {
        id: sample_id(index),
        clean_a,
        clean_b,
        image_a,
        image_b,
        mask,
    })
}

/// Generates the dataset in memory; identical to loading the files written
/// by [`generate_synthetic`].
pub fn synthetic_dataset<T: Scalar>(cfg: &SyntheticConfig) -> Result<Dataset<T>> {
    let samples = (0..cfg.count)
        .map(|i| {
            let s = generate_sample(cfg, i)?;
            Sample::from_images(&s.id, &s.image_a, &s.image_b, &mask_to_gray(&s.mask))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

/// Writes `a/`, `b/`, `mask/` PNGs and `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    let mut pairs = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let s = generate_sample(cfg, i)?;
        let pair = SamplePair {
            image_a: Path::new("a").join(format!("{}.png", s.id)),
            image_b: Path::new("b").join(format!("{}.png", s.id)),
            mask: Path::new("mask").join(format!("{}.png", s.id)),
            id: s.id.clone(),
        };
        save_rgb(&s.image_a, &out_dir.join(&pair.image_a))?;
        save_rgb(&s.image_b, &out_dir.join(&pair.image_b))?;
        save_gray(&mask_to_gray(&s.mask), &out_dir.join(&pair.mask))?;
        pairs.push(pair);
    }
    write_manifest(&pairs, &out_dir.join("manifest.jsonl"))?;
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            count: 6,
            height: 24,
            width: 32,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn mask_is_exact_difference_of_clean_images() {
        let cfg = small();
        for i in 0..20 {
            let s = generate_sample(&cfg, i).unwrap();
            for (x, y, pa) in s.clean_a.enumerate_pixels() {
                let differs = pa != s.clean_b.get_pixel(x, y);
                assert_eq!(differs, s.mask.get(y as usize, x as usize), "sample {i} at ({y}, {x})");
            }
        }
    }

    #[test]
    fn no_shapes_means_no_change() {
        let cfg = SyntheticConfig {
            shapes_min: 0,
            shapes_max: 0,
            ..small()
        };
        let s = generate_sample(&cfg, 0).unwrap();
        assert_eq!(s.mask.count_ones(), 0);
        assert_eq!(s.clean_a, s.clean_b);
        assert_ne!(s.image_a, s.image_b);
    }

    #[test]
    fn single_rectangle_footprint() {
        let cfg = SyntheticConfig {
            shapes_min: 1,
            shapes_max: 1,
            kinds: vec![ShapeKind::Rectangle],
            ..small()
        };
        let s = generate_sample(&cfg, 3).unwrap();
        let (h, w) = s.mask.dims();
        let ys: Vec<usize> = (0..h).filter(|&y| (0..w).any(|x| s.mask.get(y, x))).collect();
        let xs: Vec<usize> = (0..w).filter(|&x| (0..h).any(|y| s.mask.get(y, x))).collect();
        assert_eq!(s.mask.count_ones(), ys.len() * xs.len());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_sample(&small(), 2).unwrap();
        let b = generate_sample(&small(), 2).unwrap();
        assert_eq!(a.image_a, b.image_a);
        assert_eq!(a.image_b, b.image_b);
        assert_eq!(a.mask, b.mask);
        let c = generate_sample(&SyntheticConfig { seed: 6, ..small() }, 2).unwrap();
        assert_ne!(a.image_a, c.image_a);
    }

    #[test]
    fn files_load_back_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        generate_synthetic(&cfg, dir.path()).unwrap();
        let from_disk = Dataset::<f64>::load(&dir.path().join("manifest.jsonl")).unwrap();
        let in_memory = synthetic_dataset::<f64>(&cfg).unwrap();
        assert_eq!(from_disk.len(), 6);
        for (a, b) in from_disk.samples.iter().zip(&in_memory.samples) {
            assert_eq!(a.id, b.id);
            assert!(a.image_a.bitwise_eq(&b.image_a));
            assert!(a.image_b.bitwise_eq(&b.image_b));
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn rejects_tiny_images() {
        let cfg = SyntheticConfig {
            height: 8,
            ..small()
        };
        assert!(generate_sample(&cfg, 0).is_err());
    }
}
