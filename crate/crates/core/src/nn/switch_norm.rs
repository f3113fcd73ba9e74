//! Switchable Normalization.
//!
//! Each output is normalized with a convex mix of instance (per sample and
//! channel), layer (per sample) and batch (per channel) statistics. Means and
//! variances have separate mixing logits, turned into weights by softmax.
//! In eval mode the batch component is replaced by running averages, which
//! makes every sample's output independent of the rest of the batch.
//!
//! The whole layer is one tape primitive with a hand-derived backward rule;
//! composing it from reductions would keep a dozen full-size intermediates
//! alive per layer.

use crate::autodiff::{softmax_values, BackwardCtx, BackwardOp, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::{Bound, BufferId, Init, ParamId, ParamRegistry};
use super::Mode;

pub const SN_EPS: f64 = 1e-5;
pub const SN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct SwitchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Mixing logits over {instance, layer, batch} for the mean.
    pub lambda_mean: ParamId,
    /// Mixing logits over {instance, layer, batch} for the variance.
    pub lambda_var: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch statistics observed by one train-mode forward; fold them into the
/// running averages with [`SwitchNorm::update_running`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl SwitchNorm {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(SwitchNorm {
            channels,
            gamma: reg.register(&format!("{name}.gamma"), &[channels], Init::Constant(1.0))?,
            beta: reg.register(&format!("{name}.beta"), &[channels], Init::Constant(0.0))?,
            lambda_mean: reg.register(&format!("{name}.lambda_mean"), &[3], Init::Constant(0.0))?,
            lambda_var: reg.register(&format!("{name}.lambda_var"), &[3], Init::Constant(0.0))?,
            running_mean: reg.register_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: reg.register_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            eps: SN_EPS,
            momentum: SN_MOMENTUM,
        })
    }

    /// Learnable scalars contributed by one layer: gamma, beta and two sets of three logits.
    pub fn param_count(channels: usize) -> usize {
        2 * channels + 6
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((reg.buffer(self.running_mean), reg.buffer(self.running_var))),
        };
        let inputs = [
            x,
            p.get(self.gamma),
            p.get(self.beta),
            p.get(self.lambda_mean),
            p.get(self.lambda_var),
        ];
        switch_norm(inputs, running, self.eps)
    }

    pub fn update_running<T: Scalar>(&self, reg: &mut ParamRegistry<T>, stats: &BatchStats<T>) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in reg.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in reg.buffer_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Saved forward state for the backward rule.
struct SwitchNormBackward<T> {
    n: usize,
    c: usize,
    plane: usize,
    train: bool,
    wm: [T; 3],
    wv: [T; 3],
    mu_in: Vec<T>,
    var_in: Vec<T>,
    mu_ln: Vec<T>,
    var_ln: Vec<T>,
    mu_bn: Vec<T>,
    var_bn: Vec<T>,
    /// Mixed mean per (n, c).
    mu: Vec<T>,
    /// `1 / sqrt(mixed var + eps)` per (n, c).
    inv: Vec<T>,
}

fn weights3<T: Scalar>(logits: &Tensor<T>) -> [T; 3] {
    let w = softmax_values(logits, 0);
    [w.data()[0], w.data()[1], w.data()[2]]
}

/// Softmax vector-Jacobian product for three logits.
fn softmax3_vjp<T: Scalar>(w: &[T; 3], dw: &[T; 3]) -> Tensor<T> {
    let dot = w[0] * dw[0] + w[1] * dw[1] + w[2] * dw[2];
    Tensor::new(&[3], (0..3).map(|k| w[k] * (dw[k] - dot)).collect()).expect("three logits")
}

/// The layer as a tape primitive over `[x, gamma, beta, lambda_mean, lambda_var]`.
/// `running` selects eval mode; train mode also returns the batch statistics.
pub fn switch_norm<'t, T: Scalar>(
    inputs: [Var<'t, T>; 5],
    running: Option<(&Tensor<T>, &Tensor<T>)>,
    eps: f64,
) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
    let [x, gamma, beta, lambda_mean, lambda_var] = inputs;
    let (out, op, stats) = {
        let xv = x.value();
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::invalid("switch_norm", format!("input must be NCHW, got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let gv = gamma.value();
        if gv.shape() != [c] {
            return Err(Error::shape("switch_norm", gv.shape(), &[c]));
        }
        if n == 0 || plane == 0 {
            return Err(Error::EmptyReduction { op: "switch_norm" });
        }
        let bv = beta.value();
        let xd = xv.data();
        let wm = weights3(&lambda_mean.value());
        let wv = weights3(&lambda_var.value());

        // Instance statistics, two-pass.
        let inv_plane = T::of(1.0 / plane as f64);
        let mut mu_in = vec![T::zero(); n * c];
        let mut var_in = vec![T::zero(); n * c];
        for i in 0..n * c {
            let p = &xd[i * plane..(i + 1) * plane];
            let m = p.iter().copied().sum::<T>() * inv_plane;
            mu_in[i] = m;
            var_in[i] = p.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_plane;
        }
        // Layer statistics over (c, h, w).
        let inv_layer = T::of(1.0 / (c * plane) as f64);
        let mut mu_ln = vec![T::zero(); n];
        let mut var_ln = vec![T::zero(); n];
        for b in 0..n {
            let p = &xd[b * c * plane..(b + 1) * c * plane];
            let m = p.iter().copied().sum::<T>() * inv_layer;
            mu_ln[b] = m;
            var_ln[b] = p.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_layer;
        }
        // Batch statistics over (n, h, w), or the running estimates.
        let (mu_bn, var_bn, stats) = match running {
            Some((rm, rv)) => (rm.data().to_vec(), rv.data().to_vec(), None),
            None => {
                let inv_batch = T::of(1.0 / (n * plane) as f64);
                let mut mu = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        acc += xd[base..base + plane].iter().copied().sum::<T>();
                    }
                    let m = acc * inv_batch;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        sq += xd[base..base + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    mu[ch] = m;
                    var[ch] = sq * inv_batch;
                }
                let stats = BatchStats {
                    mean: mu.clone(),
                    var: var.clone(),
                };
                (mu, var, Some(stats))
            }
        };

        let eps = T::of(eps);
        let mut mu = vec![T::zero(); n * c];
        let mut inv = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let i = b * c + ch;
                mu[i] = wm[0] * mu_in[i] + wm[1] * mu_ln[b] + wm[2] * mu_bn[ch];
                let var = wv[0] * var_in[i] + wv[1] * var_ln[b] + wv[2] * var_bn[ch];
                inv[i] = T::one() / (var + eps).sqrt();
                let (g, bb, m, iv) = (gv.data()[ch], bv.data()[ch], mu[i], inv[i]);
                for k in i * plane..(i + 1) * plane {
                    out[k] = g * (xd[k] - m) * iv + bb;
                }
            }
        }
        let op = SwitchNormBackward {
            n,
            c,
            plane,
            train: running.is_none(),
            wm,
            wv,
            mu_in,
            var_in,
            mu_ln,
            var_ln,
            mu_bn,
            var_bn,
            mu,
            inv,
        };
        (Tensor::new(s, out)?, op, stats)
    };
    let y = x.tape().record(out, &[x, gamma, beta, lambda_mean, lambda_var], op)?;
    Ok((y, stats))
}

impl<T: Scalar> BackwardOp<T> for SwitchNormBackward<T> {
    fn name(&self) -> &'static str {
        "switch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, c, plane) = (self.n, self.c, self.plane);
        let x = ctx.inputs[0].data();
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad.data();

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        // d loss / d mixed mean and d loss / d mixed variance per (n, c).
        let mut dmu = vec![T::zero(); n * c];
        let mut dvar = vec![T::zero(); n * c];
        let half = T::of(0.5);
        for b in 0..n {
            for ch in 0..c {
                let i = b * c + ch;
                let (m, iv) = (self.mu[i], self.inv[i]);
                let (mut sg, mut sgx, mut sgc) = (T::zero(), T::zero(), T::zero());
                for k in i * plane..(i + 1) * plane {
                    let centered = x[k] - m;
                    sg += g[k];
                    sgx += g[k] * centered * iv;
                    sgc += g[k] * centered;
                }
                dgamma[ch] += sgx;
                dbeta[ch] += sg;
                dmu[i] = -gamma[ch] * iv * sg;
                dvar[i] = -half * gamma[ch] * iv * iv * iv * sgc;
            }
        }

        let mut dwm = [T::zero(); 3];
        let mut dwv = [T::zero(); 3];
        for b in 0..n {
            for ch in 0..c {
                let i = b * c + ch;
                dwm[0] += dmu[i] * self.mu_in[i];
                dwm[1] += dmu[i] * self.mu_ln[b];
                dwm[2] += dmu[i] * self.mu_bn[ch];
                dwv[0] += dvar[i] * self.var_in[i];
                dwv[1] += dvar[i] * self.var_ln[b];
                dwv[2] += dvar[i] * self.var_bn[ch];
            }
        }

        let gx = if ctx.needs[0] {
            let (wm, wv) = (self.wm, self.wv);
            let inv_plane = T::of(1.0 / plane as f64);
            let inv_layer = T::of(1.0 / (c * plane) as f64);
            let inv_batch = T::of(1.0 / (n * plane) as f64);
            let two = T::of(2.0);
            // Layer and batch components aggregate over channels / samples.
            let mut dmu_ln = vec![T::zero(); n];
            let mut dvar_ln = vec![T::zero(); n];
            let mut dmu_bn = vec![T::zero(); c];
            let mut dvar_bn = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let i = b * c + ch;
                    dmu_ln[b] += dmu[i];
                    dvar_ln[b] += dvar[i];
                    dmu_bn[ch] += dmu[i];
                    dvar_bn[ch] += dvar[i];
                }
            }
            let mut gx = vec![T::zero(); x.len()];
            for b in 0..n {
                let ln_mean = wm[1] * dmu_ln[b] * inv_layer;
                let ln_var = wv[1] * dvar_ln[b] * two * inv_layer;
                for ch in 0..c {
                    let i = b * c + ch;
                    let direct = gamma[ch] * self.inv[i];
                    let in_mean = wm[0] * dmu[i] * inv_plane;
                    let in_var = wv[0] * dvar[i] * two * inv_plane;
                    let (bn_mean, bn_var) = if self.train {
                        (
                            wm[2] * dmu_bn[ch] * inv_batch,
                            wv[2] * dvar_bn[ch] * two * inv_batch,
                        )
                    } else {
                        (T::zero(), T::zero())
                    };
                    let (mi, ml, mb) = (self.mu_in[i], self.mu_ln[b], self.mu_bn[ch]);
                    for k in i * plane..(i + 1) * plane {
                        gx[k] = g[k] * direct
                            + in_mean
                            + ln_mean
                            + bn_mean
                            + in_var * (x[k] - mi)
                            + ln_var * (x[k] - ml)
                            + bn_var * (x[k] - mb);
                    }
                }
            }
            Some(Tensor::new(ctx.inputs[0].shape(), gx)?)
        } else {
            None
        };

        Ok(vec![
            gx,
            ctx.needs[1].then(|| Tensor::new(&[c], dgamma)).transpose()?,
            ctx.needs[2].then(|| Tensor::new(&[c], dbeta)).transpose()?,
            ctx.needs[3].then(|| softmax3_vjp(&self.wm, &dwm)),
            ctx.needs[4].then(|| softmax3_vjp(&self.wv, &dwv)),
        ])
    }
}
