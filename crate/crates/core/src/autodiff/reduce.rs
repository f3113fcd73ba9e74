use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

use super::{BackwardCtx, BackwardOp, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
    /// Population variance (divides by the extent, not extent - 1).
    Var,
}

/// Reduction geometry: for each input element, the flat index of the output
/// element it contributes to.
struct Plan {
    out_shape: Vec<usize>,
    target: Vec<usize>,
    count: usize,
}

fn plan(op: &'static str, shape: &[usize], axes: &[usize], keepdims: bool) -> Result<Plan> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::AxisOutOfRange { op, axis: a, rank });
        }
        reduced[a] = true;
    }
    let count: usize = (0..rank).filter(|&d| reduced[d]).map(|d| shape[d]).product();
    if count == 0 {
        return Err(Error::EmptyReduction { op });
    }
    let kept: Vec<usize> = (0..rank)
        .map(|d| if reduced[d] { 1 } else { shape[d] })
        .collect();
    let kept_strides = crate::tensor::strides(&kept);
    let n = numel(shape);
    let mut target = vec![0usize; n];
    let mut index = vec![0usize; rank];
    for slot in target.iter_mut() {
        *slot = (0..rank)
            .filter(|&d| !reduced[d])
            .map(|d| index[d] * kept_strides[d])
            .sum();
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    let out_shape = if keepdims {
        kept
    } else {
        (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect()
    };
    Ok(Plan {
        out_shape,
        target,
        count,
    })
}

struct Reduce {
    kind: ReduceKind,
    target: Vec<usize>,
    count: usize,
    /// Per-output means, kept for the variance rule.
    means: Vec<f64>,
}

impl<T: Scalar> BackwardOp<T> for Reduce {
    fn name(&self) -> &'static str {
        match self.kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Var => "var",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let g = ctx.grad.data();
        let inv = T::of(1.0 / self.count as f64);
        let data: Vec<T> = match self.kind {
            ReduceKind::Sum => self.target.iter().map(|&t| g[t]).collect(),
            ReduceKind::Mean => self.target.iter().map(|&t| g[t] * inv).collect(),
            ReduceKind::Var => {
                let two = T::of(2.0);
                x.data()
                    .iter()
                    .zip(&self.target)
                    .map(|(&xi, &t)| g[t] * two * (xi - T::of(self.means[t])) * inv)
                    .collect()
            }
        };
        Ok(vec![Some(Tensor::new(x.shape(), data)?)])
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub(crate) fn reduce(self, kind: ReduceKind, axes: &[usize], keepdims: bool) -> Result<Var<'t, T>> {
        let op_name = <Reduce as BackwardOp<T>>::name(&Reduce {
            kind,
            target: Vec::new(),
            count: 0,
            means: Vec::new(),
        });
        let (out, op) = {
            let x = self.value();
            let p = plan(op_name, x.shape(), axes, keepdims)?;
            let m = numel(&p.out_shape);
            let mut sums = vec![T::zero(); m];
            for (&xi, &t) in x.data().iter().zip(&p.target) {
                sums[t] += xi;
            }
            let inv = T::of(1.0 / p.count as f64);
            let means: Vec<T> = sums.iter().map(|&s| s * inv).collect();
            let out = match kind {
                ReduceKind::Sum => sums,
                ReduceKind::Mean => means.clone(),
                ReduceKind::Var => {
                    let mut sq = vec![T::zero(); m];
                    for (&xi, &t) in x.data().iter().zip(&p.target) {
                        let d = xi - means[t];
                        sq[t] += d * d;
                    }
                    sq.into_iter().map(|s| s * inv).collect()
                }
            };
            let op = Reduce {
                kind,
                target: p.target,
                count: p.count,
                means: means.iter().map(|m| m.as_f64()).collect(),
            };
            (Tensor::new(&p.out_shape, out)?, op)
        };
        self.record(out, &[self], op)
    }

    pub fn sum(self, axes: &[usize], keepdims: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Sum, axes, keepdims)
    }

    pub fn mean(self, axes: &[usize], keepdims: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Mean, axes, keepdims)
    }

    /// Population variance over `axes`.
    pub fn var(self, axes: &[usize], keepdims: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Var, axes, keepdims)
    }

    /// Sum over every axis, producing a rank-0 value.
    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(ReduceKind::Sum, &axes, false)
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(ReduceKind::Mean, &axes, false)
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::error::Error;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn mean_of_small_vector() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(x.mean_all().unwrap().item().unwrap(), 2.5);
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[3, 5], 1.7f64));
        let v = x.var(&[0, 1], false).unwrap();
        assert!(v.item().unwrap().abs() < 1e-28);
    }

    #[test]
    fn matches_two_pass_loop() {
        let mut rng = Rng::new(11);
        let data: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1000], &data).unwrap());
        let mean: f64 = data.iter().sum::<f64>() / 1000.0;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 1000.0;
        assert!((x.mean_all().unwrap().item().unwrap() - mean).abs() < 1e-12);
        assert!((x.var(&[0], false).unwrap().item().unwrap() - var).abs() < 1e-12);
    }

    #[test]
    fn keepdims_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2, 3, 4]));
        assert_eq!(x.sum(&[1], true).unwrap().shape(), vec![2, 1, 4]);
        assert_eq!(x.sum(&[0, 2], false).unwrap().shape(), vec![3]);
        let s = x.sum(&[2], false).unwrap();
        assert_eq!(s.value().data(), &[4.0; 6]);
    }

    #[test]
    fn bad_axes_and_empty_extent() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2, 3]));
        assert!(matches!(x.sum(&[2], false), Err(Error::AxisOutOfRange { .. })));
        let e = tape.leaf(Tensor::zeros(&[2, 0]));
        assert!(matches!(e.mean(&[1], false), Err(Error::EmptyReduction { .. })));
    }
}
