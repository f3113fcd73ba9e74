use crate::autodiff::{BackwardCtx, BackwardOp, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::{Bound, Init, ParamId, ParamRegistry};

/// Learnable per-channel weights fusing the stacked outputs of every mixer depth.
#[derive(Clone, Debug)]
pub struct DepthAttention {
    pub weights: ParamId,
    pub len: usize,
}

impl DepthAttention {
    /// `len` is `out_ch * depth`. Weights start at one (identity fusion).
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, len: usize) -> Result<Self> {
        let weights = reg.register(&format!("{name}.weights"), &[len], Init::Constant(1.0))?;
        Ok(DepthAttention { weights, len })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, stacked: Var<'t, T>) -> Result<Var<'t, T>> {
        scale_channels(stacked, p.get(self.weights))
    }
}

struct ChannelScale;

impl<T: Scalar> BackwardOp<T> for ChannelScale {
    fn name(&self) -> &'static str {
        "channel_scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let s = x.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut gx = vec![T::zero(); x.numel()];
        let mut gw = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let wv = w.data()[ch];
                let mut acc = T::zero();
                for i in base..base + plane {
                    gx[i] = g.data()[i] * wv;
                    acc += g.data()[i] * x.data()[i];
                }
                gw[ch] += acc;
            }
        }
        Ok(vec![
            ctx.needs[0].then(|| Tensor::new(x.shape(), gx)).transpose()?,
            ctx.needs[1].then(|| Tensor::new(w.shape(), gw)).transpose()?,
        ])
    }
}

/// `y[n, c] = weights[c] * x[n, c]` for an NCHW input.
pub fn scale_channels<'t, T: Scalar>(x: Var<'t, T>, weights: Var<'t, T>) -> Result<Var<'t, T>> {
    let out = {
        let (xv, wv) = (x.value(), weights.value());
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::invalid("depth_attention", format!("input must be NCHW, got {s:?}")));
        }
        if wv.shape() != [s[1]] {
            return Err(Error::shape("depth_attention", &[s[1]], wv.shape()));
        }
        let plane = s[2] * s[3];
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv.data()[(i / plane) % s[1]])
            .collect();
        Tensor::new(s, data)?
    };
    x.tape().record(out, &[x, weights], ChannelScale)
}
