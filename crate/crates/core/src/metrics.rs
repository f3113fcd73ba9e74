//! Pixel confusion counts, precision/recall/F1 and error-map rendering.
//! "Changed" is the positive class throughout.

use std::ops::AddAssign;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mask::{window, IntegralImage, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.r#fn += o.r#fn;
        self.tn += o.tn;
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    pred.check_same(gt, "confusion")?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.r#fn += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        log::warn!("{what} is 0/0; reported as 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(precision, recall, f1)`; every 0/0 resolves to 0.
pub fn prf1(c: &Confusion) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp, "precision");
    let r = ratio(c.tp, c.tp + c.r#fn, "recall");
    (p, r, f1_from(p, r))
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl MetricsReport {
    pub fn from_confusion(c: &Confusion) -> Self {
        let (precision, recall, f1) = prf1(c);
        MetricsReport {
            precision,
            recall,
            f1,
            tp: c.tp,
            fp: c.fp,
            r#fn: c.r#fn,
            tn: c.tn,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    pub fn table(&self) -> String {
        let rows = [
            ("precision", format!("{:.6}", self.precision)),
            ("recall", format!("{:.6}", self.recall)),
            ("f1", format!("{:.6}", self.f1)),
            ("tp", self.tp.to_string()),
            ("fp", self.fp.to_string()),
            ("fn", self.r#fn.to_string()),
            ("tn", self.tn.to_string()),
        ];
        let width = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<10} {v:>width$}\n"))
            .collect()
    }
}

/// Pixels within Chebyshev distance `band` of a pixel carrying the other label.
pub fn boundary_band(gt: &Mask, band: usize) -> Mask {
    let (h, w) = gt.dims();
    let ii = IntegralImage::new(gt);
    Mask::from_fn(h, w, |y, x| {
        let (y0, y1, x0, x1) = window(h, w, y, x, band);
        let ones = ii.count(y0, y1, x0, x1) as usize;
        if gt.get(y, x) {
            ones < (y1 - y0) * (x1 - x0)
        } else {
            ones > 0
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandF1 {
    pub f1: f64,
    /// Set when `gt` has no boundary and the score fell back to the whole image.
    pub full_image: bool,
}

pub fn boundary_band_f1(pred: &Mask, gt: &Mask, band: usize) -> Result<BandF1> {
    pred.check_same(gt, "boundary_band_f1")?;
    if band == 0 {
        return Err(crate::error::Error::Config("band must be at least 1".into()));
    }
    let region = boundary_band(gt, band);
    if region.count_ones() == 0 {
        if pred == gt {
            return Ok(BandF1 {
                f1: 1.0,
                full_image: false,
            });
        }
        let (_, _, f1) = prf1(&confusion(pred, gt)?);
        return Ok(BandF1 { f1, full_image: true });
    }
    if pred == gt {
        return Ok(BandF1 {
            f1: 1.0,
            full_image: false,
        });
    }
    let mut c = Confusion::default();
    for ((&p, &g), &inside) in pred.data().iter().zip(gt.data()).zip(region.data()) {
        if inside == 0 {
            continue;
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.r#fn += 1,
            _ => c.tn += 1,
        }
    }
    Ok(BandF1 {
        f1: prf1(&c).2,
        full_image: false,
    })
}

pub const COLOR_FP: [u8; 3] = [255, 0, 0];
pub const COLOR_FN: [u8; 3] = [0, 255, 0];
pub const COLOR_TP: [u8; 3] = [255, 255, 255];
pub const COLOR_TN: [u8; 3] = [0, 0, 0];

/// False positives red, false negatives green, true positives white, true negatives black.
pub fn render_error_map(pred: &Mask, gt: &Mask) -> Result<RgbImage> {
    pred.check_same(gt, "render_error_map")?;
    let (h, w) = pred.dims();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb(match (pred.get(y, x), gt.get(y, x)) {
            (true, true) => COLOR_TP,
            (true, false) => COLOR_FP,
            (false, true) => COLOR_FN,
            (false, false) => COLOR_TN,
        })
    }))
}

/// Counts of each error-map colour, in confusion form.
pub fn color_histogram(img: &RgbImage) -> Confusion {
    let mut c = Confusion::default();
    for px in img.pixels() {
        match px.0 {
            COLOR_TP => c.tp += 1,
            COLOR_FP => c.fp += 1,
            COLOR_FN => c.r#fn += 1,
            _ => c.tn += 1,
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_row() {
        let f1 = f1_from(0.967, 0.977);
        assert!((f1 - 0.972).abs() < 5e-4, "{f1}");
    }

    #[test]
    fn degenerate_rules() {
        assert_eq!(prf1(&Confusion::default()), (0.0, 0.0, 0.0));
        let c = Confusion { tp: 0, fp: 3, r#fn: 4, tn: 1 };
        assert_eq!(prf1(&c), (0.0, 0.0, 0.0));
        let all = Mask::filled(3, 4, true);
        let c = confusion(&all, &all).unwrap();
        assert_eq!(c, Confusion { tp: 12, ..Default::default() });
        assert_eq!(prf1(&c), (1.0, 1.0, 1.0));
    }

    #[test]
    fn complement_has_no_true_hits() {
        let gt = Mask::from_fn(5, 5, |y, x| (y * x) % 3 == 0);
        let c = confusion(&gt.complement(), &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 25);
    }

    #[test]
    fn square_band_is_ring() {
        let gt = Mask::from_fn(10, 10, |y, x| (3..7).contains(&y) && (3..7).contains(&x));
        let band = boundary_band(&gt, 1);
        let expected = Mask::from_fn(10, 10, |y, x| {
            let outer = (2..8).contains(&y) && (2..8).contains(&x);
            let inner = (4..6).contains(&y) && (4..6).contains(&x);
            outer && !inner
        });
        assert_eq!(band, expected);
    }

    #[test]
    fn band_empty_rules() {
        let gt = Mask::filled(6, 6, false);
        let r = boundary_band_f1(&gt, &gt, 2).unwrap();
        assert_eq!(r, BandF1 { f1: 1.0, full_image: false });
        let mut pred = gt.clone();
        pred.set(0, 0, true);
        let r = boundary_band_f1(&pred, &gt, 2).unwrap();
        assert!(r.full_image);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn error_map_colors() {
        let all = Mask::filled(2, 3, true);
        let none = Mask::filled(2, 3, false);
        let img = render_error_map(&all, &all).unwrap();
        assert!(img.pixels().all(|p| p.0 == COLOR_TP));
        let img = render_error_map(&all, &none).unwrap();
        assert!(img.pixels().all(|p| p.0 == COLOR_FP));
        assert_eq!((img.width(), img.height()), (3, 2));
    }

    #[test]
    fn json_uses_fn_key() {
        let r = MetricsReport::from_confusion(&Confusion { tp: 1, fp: 0, r#fn: 1, tn: 2 });
        let js = r.to_json();
        assert!(js.contains("\"fn\":1"), "{js}");
        assert!(r.table().contains("recall"));
    }
}
