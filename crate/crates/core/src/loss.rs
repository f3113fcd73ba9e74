//! Edge-weighted hybrid loss: edge + focal + dice.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{window, IntegralImage, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp applied to `p_t` before any logarithm.
pub const PT_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    /// Side of the square neighborhood window (odd).
    pub neighborhood: usize,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            neighborhood: 7,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.neighborhood < 3 || self.neighborhood % 2 == 0 {
            return Err(Error::Config(format!(
                "neighborhood must be odd and at least 3, got {}",
                self.neighborhood
            )));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal_gamma must be non-negative, got {}",
                self.focal_gamma
            )));
        }
        if !(self.dice_smooth >= 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::Config(format!(
                "dice_smooth must be non-negative, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

/// Per-pixel boundary emphasis `alpha * |mean(window) - label|`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeightMap {
    height: usize,
    width: usize,
    weights: Vec<f64>,
    pub alpha: f64,
    pub neighborhood: usize,
}

impl EdgeWeightMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width],
            self.weights.iter().map(|&w| T::of(w)).collect(),
        )
        .expect("map extent")
    }
}

/// Window mean is taken over the window clipped to the image, centre included.
/// The integer form `|count - n*L| / n` keeps complement and symmetry
/// identities exact in floating point.
pub fn edge_weight_map(mask: &Mask, alpha: f64, neighborhood: usize) -> Result<EdgeWeightMap> {
    if neighborhood < 3 || neighborhood % 2 == 0 {
        return Err(Error::Config(format!(
            "neighborhood must be odd and at least 3, got {neighborhood}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let (h, w) = mask.dims();
    let r = neighborhood / 2;
    let ii = IntegralImage::new(mask);
    let mut weights = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (y0, y1, x0, x1) = window(h, w, y, x, r);
            let n = ((y1 - y0) * (x1 - x0)) as i64;
            let count = ii.count(y0, y1, x0, x1) as i64;
            let label = mask.get(y, x) as i64;
            let base = (count - n * label).abs() as f64 / n as f64;
            weights.push(alpha * base);
        }
    }
    Ok(EdgeWeightMap {
        height: h,
        width: w,
        weights,
        alpha,
        neighborhood,
    })
}

fn same_shape<T: Scalar>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

/// `mean(-w * log(p_t))` over all pixels.
pub fn edge_loss<'t, T: Scalar>(p_t: Var<'t, T>, weights: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("edge_loss", p_t, weights)?;
    let log_pt = p_t.clamp(PT_FLOOR, 1.0)?.log()?;
    weights.mul(log_pt)?.neg()?.mean_all()
}

/// `mean(-(1 - p_t)^gamma * log(p_t))` over all pixels.
pub fn focal_loss<'t, T: Scalar>(p_t: Var<'t, T>, gamma: f64) -> Result<Var<'t, T>> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal_gamma must be non-negative, got {gamma}")));
    }
    let pt = p_t.clamp(PT_FLOOR, 1.0)?;
    let modulator = pt.neg()?.add_scalar(1.0)?.powf(gamma)?;
    modulator.mul(pt.log()?)?.neg()?.mean_all()
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)` for one `(H, W)` map, or
/// the batch mean of per-sample values for `(N, H, W)`.
pub fn dice_loss<'t, T: Scalar>(prob: Var<'t, T>, target: Var<'t, T>, smooth: f64) -> Result<Var<'t, T>> {
    same_shape("dice_loss", prob, target)?;
    let shape = prob.shape();
    let axes: Vec<usize> = match shape.len() {
        2 => vec![0, 1],
        3 => vec![1, 2],
        _ => {
            return Err(Error::invalid(
                "dice_loss",
                format!("expected (H, W) or (N, H, W), got {shape:?}"),
            ))
        }
    };
    let inter = prob.mul(target)?.sum(&axes, false)?;
    let num = inter.mul_scalar(2.0)?.add_scalar(smooth)?;
    let den = prob.sum(&axes, false)?.add(target.sum(&axes, false)?)?.add_scalar(smooth)?;
    num.div(den)?.neg()?.add_scalar(1.0)?.mean_all()
}

/// The three loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct HybridLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub edge: Var<'t, T>,
    pub focal: Var<'t, T>,
    pub dice: Var<'t, T>,
}

/// Plain values of a [`HybridLoss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub edge: f64,
    pub focal: f64,
    pub dice: f64,
}

impl<T: Scalar> HybridLoss<'_, T> {
    pub fn terms(&self) -> Result<LossTerms> {
        Ok(LossTerms {
            total: self.total.item()?.as_f64(),
            edge: self.edge.item()?.as_f64(),
            focal: self.focal.item()?.as_f64(),
            dice: self.dice.item()?.as_f64(),
        })
    }
}

/// Stacks per-sample masks and edge maps into `(N, H, W)` constants.
pub fn loss_targets<T: Scalar>(masks: &[Mask], cfg: &LossConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    let Some(first) = masks.first() else {
        return Err(Error::invalid("hybrid_loss", "empty batch"));
    };
    let (h, w) = first.dims();
    let mut t = Vec::with_capacity(masks.len() * h * w);
    let mut wt = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        first.check_same(m, "hybrid_loss")?;
        t.extend(m.data().iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
        let map = edge_weight_map(m, cfg.alpha, cfg.neighborhood)?;
        wt.extend(map.weights().iter().map(|&v| T::of(v)));
    }
    let shape = [masks.len(), h, w];
    Ok((Tensor::new(&shape, t)?, Tensor::new(&shape, wt)?))
}

/// Hybrid loss for logits `(N, 2, H, W)` (or `(2, H, W)`) against binary masks.
pub fn hybrid_loss<'t, T: Scalar>(logits: Var<'t, T>, masks: &[Mask], cfg: &LossConfig) -> Result<HybridLoss<'t, T>> {
    let (target, weights) = loss_targets::<T>(masks, cfg)?;
    hybrid_loss_with(logits, target, weights, cfg)
}

/// As [`hybrid_loss`], with targets and edge weights precomputed by [`loss_targets`].
pub fn hybrid_loss_with<'t, T: Scalar>(
    logits: Var<'t, T>,
    target: Tensor<T>,
    weights: Tensor<T>,
    cfg: &LossConfig,
) -> Result<HybridLoss<'t, T>> {
    let tape = logits.tape();
    let mut shape = logits.shape();
    let logits = if shape.len() == 3 {
        shape.insert(0, 1);
        logits.reshape(&shape)?
    } else {
        logits
    };
    if shape.len() != 4 || shape[1] != 2 {
        return Err(Error::invalid(
            "hybrid_loss",
            format!("logits must be (N, 2, H, W), got {shape:?}"),
        ));
    }
    let pix = [shape[0], shape[2], shape[3]];
    if target.shape() != pix {
        return Err(Error::shape("hybrid_loss", &pix, target.shape()));
    }
    let probs = logits.softmax(1)?;
    let p0 = probs.slice(1, 0, 1)?.reshape(&pix)?;
    let p1 = probs.slice(1, 1, 2)?.reshape(&pix)?;
    let not_target = target.map(|v| T::one() - v);
    let t = tape.constant(target);
    let p_t = p1.mul(t)?.add(p0.mul(tape.constant(not_target))?)?;

    let edge = edge_loss(p_t, tape.constant(weights))?;
    let focal = focal_loss(p_t, cfg.focal_gamma)?;
    let dice = dice_loss(p1, t, cfg.dice_smooth)?;
    let total = edge.add(focal)?.add(dice)?;
    Ok(HybridLoss {
        total,
        edge,
        focal,
        dice,
    })
}

/// Loss values of one sample's logits `(2, H, W)`, computed off any training tape.
pub fn sample_loss<T: Scalar>(logits: &Tensor<T>, mask: &Mask, cfg: &LossConfig) -> Result<LossTerms> {
    let tape = Tape::new();
    let l = hybrid_loss(tape.constant(logits.clone()), std::slice::from_ref(mask), cfg)?;
    l.terms()
}
