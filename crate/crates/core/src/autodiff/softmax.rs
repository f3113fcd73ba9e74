use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BackwardCtx, BackwardOp, Var};

/// Splits `shape` around `axis` into (outer, extent, inner) loop counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Softmax {
    axis: usize,
}

impl<T: Scalar> BackwardOp<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (y, g) = (ctx.output, ctx.grad);
        let (outer, extent, inner) = split_axis(y.shape(), self.axis);
        let (yd, gd) = (y.data(), g.data());
        let mut gx = vec![T::zero(); yd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut dot = T::zero();
                for k in 0..extent {
                    let at = base + k * inner;
                    dot += gd[at] * yd[at];
                }
                for k in 0..extent {
                    let at = base + k * inner;
                    gx[at] = yd[at] * (gd[at] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::new(y.shape(), gx)?)])
    }
}

/// Max-subtracted softmax of raw values along `axis`.
pub(crate) fn softmax_values<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..extent {
                max = max.max(xd[base + k * inner]);
            }
            let mut total = T::zero();
            for k in 0..extent {
                let e = (xd[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                total += e;
            }
            for k in 0..extent {
                out[base + k * inner] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("shape preserved")
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(Error::AxisOutOfRange {
                    op: "softmax",
                    axis,
                    rank: x.rank(),
                });
            }
            softmax_values(&x, axis)
        };
        self.record(out, &[self], Softmax { axis })
    }
}
