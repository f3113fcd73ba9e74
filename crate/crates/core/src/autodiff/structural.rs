use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::softmax::split_axis;
use super::{BackwardCtx, BackwardOp, Var};

struct Concat {
    axis: usize,
    extents: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad;
        let mut out = Vec::with_capacity(self.extents.len());
        let mut start = 0;
        for (i, &e) in self.extents.iter().enumerate() {
            out.push(if ctx.needs[i] {
                Some(slice_values(g, self.axis, start, start + e))
            } else {
                None
            });
            start += e;
        }
        Ok(out)
    }
}

fn slice_values<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let len = end - start;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, data).expect("slice extent")
}

struct Slice {
    axis: usize,
    start: usize,
}

impl<T: Scalar> BackwardOp<T> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let g = ctx.grad;
        let (outer, extent, inner) = split_axis(x.shape(), self.axis);
        let len = g.shape()[self.axis];
        let mut gx = vec![T::zero(); x.numel()];
        for o in 0..outer {
            let dst = o * extent * inner + self.start * inner;
            let src = o * len * inner;
            gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
        }
        Ok(vec![Some(Tensor::new(x.shape(), gx)?)])
    }
}

struct Reshape;

impl<T: Scalar> BackwardOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad.reshape(ctx.inputs[0].shape())?)])
    }
}

/// Zero padding of the two trailing axes: `[top, bottom, left, right]`.
struct Pad2d {
    pad: [usize; 4],
}

impl<T: Scalar> BackwardOp<T> for Pad2d {
    fn name(&self) -> &'static str {
        "pad2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let rank = x.rank();
        let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
        let pw = w + self.pad[2] + self.pad[3];
        let ph = h + self.pad[0] + self.pad[1];
        let planes = x.numel() / (h * w).max(1);
        let g = ctx.grad.data();
        let mut gx = Vec::with_capacity(x.numel());
        for p in 0..planes {
            for y in 0..h {
                let row = p * ph * pw + (y + self.pad[0]) * pw + self.pad[2];
                gx.extend_from_slice(&g[row..row + w]);
            }
        }
        Ok(vec![Some(Tensor::new(x.shape(), gx)?)])
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Joins `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let rank = values[0].rank();
            if axis >= rank {
                return Err(Error::AxisOutOfRange {
                    op: "concat",
                    axis,
                    rank,
                });
            }
            let mut shape = values[0].shape().to_vec();
            shape[axis] = 0;
            for v in &values {
                let s = v.shape();
                let conforms = s.len() == rank
                    && (0..rank).all(|d| d == axis || s[d] == values[0].shape()[d]);
                if !conforms {
                    return Err(Error::shape("concat", values[0].shape(), s));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in &values {
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let extents = values.iter().map(|v| v.shape()[axis]).collect();
            (Tensor::new(&shape, data)?, extents)
        };
        first.record(out.0, parts, Concat { axis, extents: out.1 })
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(Error::AxisOutOfRange {
                    op: "slice",
                    axis,
                    rank: x.rank(),
                });
            }
            if start > end || end > x.shape()[axis] {
                return Err(Error::invalid(
                    "slice",
                    format!("range {start}..{end} outside extent {}", x.shape()[axis]),
                ));
            }
            slice_values(&x, axis, start, end)
        };
        self.record(out, &[self], Slice { axis, start })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        self.record(out, &[self], Reshape)
    }

    /// Zero-pads the last two axes by `[top, bottom, left, right]`.
    pub fn pad2d(self, pad: [usize; 4]) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            let rank = x.rank();
            if rank < 2 {
                return Err(Error::invalid("pad2d", "input needs at least two axes"));
            }
            let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
            let (ph, pw) = (h + pad[0] + pad[1], w + pad[2] + pad[3]);
            let planes = x.numel() / (h * w).max(1);
            let mut data = vec![T::zero(); planes * ph * pw];
            for p in 0..planes {
                for y in 0..h {
                    let dst = p * ph * pw + (y + pad[0]) * pw + pad[2];
                    let src = p * h * w + y * w;
                    data[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[rank - 2] = ph;
            shape[rank - 1] = pw;
            Tensor::new(&shape, data)?
        };
        self.record(out, &[self], Pad2d { pad })
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::{Tape, Var};
    use crate::error::Error;
    use crate::tensor::Tensor;

    #[test]
    fn concat_channels() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[3, 4, 5]));
        let b = tape.leaf(Tensor::zeros(&[3, 4, 5]));
        let c = Var::concat(&[a, b], 0).unwrap();
        assert_eq!(c.shape(), vec![6, 4, 5]);
        assert_eq!(c.value().data()[..60], [1.0; 60]);
        assert_eq!(c.value().data()[60..], [0.0; 60]);
    }

    #[test]
    fn concat_splits_cotangent() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[2, 2]));
        let b = tape.leaf(Tensor::ones(&[2, 3]));
        let c = Var::concat(&[a, b], 1).unwrap();
        let w = tape.constant(Tensor::from_fn(&[2, 5], |i| i as f64));
        let g = tape.backward(c.mul(w).unwrap().sum_all().unwrap()).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 1.0, 5.0, 6.0]);
        assert_eq!(g.wrt(b).data(), &[2.0, 3.0, 4.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn pad_then_slice_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = x.pad2d([1, 2, 3, 1]).unwrap();
        assert_eq!(p.shape(), vec![2, 6, 8]);
        let back = p.slice(1, 1, 4).unwrap().slice(2, 3, 7).unwrap();
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn axis_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[2, 2]));
        assert!(matches!(Var::concat(&[a, a], 2), Err(Error::AxisOutOfRange { .. })));
        assert!(matches!(a.slice(3, 0, 1), Err(Error::AxisOutOfRange { .. })));
        assert!(a.slice(0, 1, 3).is_err());
    }
}
