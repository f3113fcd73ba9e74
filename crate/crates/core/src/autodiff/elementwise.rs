use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BackwardCtx, BackwardOp, Var};

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary(BinaryKind);

impl<T: Scalar> BackwardOp<T> for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let (ga, gb) = match self.0 {
            BinaryKind::Add => (g.clone(), g.clone()),
            BinaryKind::Sub => (g.clone(), g.map(|x| -x)),
            BinaryKind::Mul => (g.zip_map(b, |g, b| g * b)?, g.zip_map(a, |g, a| g * a)?),
            BinaryKind::Div => {
                let ga = g.zip_map(b, |g, b| g / b)?;
                // d(a/b)/db = -(a/b)/b
                let q = ctx.output.zip_map(b, |q, b| q / b)?;
                (ga, g.zip_map(&q, |g, q| -g * q)?)
            }
        };
        Ok(vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)])
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Log,
    Exp,
    Erf,
    /// x^p for a constant exponent p.
    Pow(f64),
    /// c * x for a constant c.
    Scale(f64),
    /// x + c for a constant c.
    Shift(f64),
    Clamp(f64, f64),
}

struct Unary(UnaryKind);

impl<T: Scalar> BackwardOp<T> for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Neg => "neg",
            UnaryKind::Log => "log",
            UnaryKind::Exp => "exp",
            UnaryKind::Erf => "erf",
            UnaryKind::Pow(_) => "pow",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::Shift(_) => "shift",
            UnaryKind::Clamp(..) => "clamp",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, y, g) = (ctx.inputs[0], ctx.output, ctx.grad);
        let gx = match self.0 {
            UnaryKind::Neg => g.map(|g| -g),
            UnaryKind::Log => g.zip_map(x, |g, x| g / x)?,
            UnaryKind::Exp => g.zip_map(y, |g, y| g * y)?,
            UnaryKind::Erf => {
                let c = T::of(2.0 / std::f64::consts::PI.sqrt());
                g.zip_map(x, |g, x| g * c * (-x * x).exp())?
            }
            UnaryKind::Pow(p) => {
                if p == 0.0 {
                    Tensor::zeros(x.shape())
                } else {
                    let (pt, pm1) = (T::of(p), T::of(p - 1.0));
                    g.zip_map(x, |g, x| g * pt * x.powf(pm1))?
                }
            }
            UnaryKind::Scale(c) => g.map(|g| g * T::of(c)),
            UnaryKind::Shift(_) => g.clone(),
            UnaryKind::Clamp(lo, hi) => {
                let (lo, hi) = (T::of(lo), T::of(hi));
                g.zip_map(x, |g, x| if x < lo || x > hi { T::zero() } else { g })?
            }
        };
        Ok(vec![Some(gx)])
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    <Binary as BackwardOp<T>>::name(&Binary(kind)),
                    a.shape(),
                    b.shape(),
                ));
            }
            if let BinaryKind::Div = kind {
                if let Some(index) = b.data().iter().position(|v| v.is_zero()) {
                    return Err(Error::Domain {
                        op: "div",
                        index,
                        value: 0.0,
                    });
                }
            }
            match kind {
                BinaryKind::Add => a.zip_map(&b, |a, b| a + b)?,
                BinaryKind::Sub => a.zip_map(&b, |a, b| a - b)?,
                BinaryKind::Mul => a.zip_map(&b, |a, b| a * b)?,
                BinaryKind::Div => a.zip_map(&b, |a, b| a / b)?,
            }
        };
        self.record(out, &[self, other], Binary(kind))
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            match kind {
                UnaryKind::Log => {
                    if let Some(index) = x.data().iter().position(|&v| v <= T::zero()) {
                        return Err(Error::Domain {
                            op: "log",
                            index,
                            value: x.data()[index].as_f64(),
                        });
                    }
                    x.map(|v| v.ln())
                }
                UnaryKind::Neg => x.map(|v| -v),
                UnaryKind::Exp => x.map(|v| v.exp()),
                UnaryKind::Erf => x.map(|v| v.erf()),
                UnaryKind::Pow(p) => {
                    if p.fract() != 0.0 {
                        if let Some(index) = x.data().iter().position(|&v| v < T::zero()) {
                            return Err(Error::Domain {
                                op: "pow",
                                index,
                                value: x.data()[index].as_f64(),
                            });
                        }
                    }
                    if p == 0.0 {
                        Tensor::ones(x.shape())
                    } else {
                        let pt = T::of(p);
                        x.map(|v| v.powf(pt))
                    }
                }
                UnaryKind::Scale(c) => {
                    let c = T::of(c);
                    x.map(|v| v * c)
                }
                UnaryKind::Shift(c) => {
                    let c = T::of(c);
                    x.map(|v| v + c)
                }
                UnaryKind::Clamp(lo, hi) => {
                    let (lo, hi) = (T::of(lo), T::of(hi));
                    x.map(|v| v.max(lo).min(hi))
                }
            }
        };
        self.record(out, &[self], Unary(kind))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Elementwise quotient; any zero in the divisor is a domain error.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Neg)
    }

    /// Natural logarithm; non-positive entries are a domain error.
    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Log)
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn erf(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Erf)
    }

    /// `x^p`. A zero exponent yields ones with zero gradient, including at `x = 0`.
    pub fn powf(self, p: f64) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Pow(p))
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Shift(c))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }
}
