use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autodiff::{BackwardCtx, BackwardOp, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard normal CDF via erf.
fn phi<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

struct Gelu;

impl<T: Scalar> BackwardOp<T> for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let norm = T::of(1.0 / (2.0 * PI).sqrt());
        let half = T::of(0.5);
        let gx = ctx.grad.zip_map(ctx.inputs[0], |g, x| {
            let density = norm * (-half * x * x).exp();
            g * (phi(x) + x * density)
        })?;
        Ok(vec![Some(gx)])
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let out = x.value().map(|v| v * phi(v));
    x.tape().record(out, &[x], Gelu)
}
