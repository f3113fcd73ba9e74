//! 2-D convolution and transposed convolution (cross-correlation convention).
//!
//! All three directions (forward, input gradient, kernel gradient) are built
//! from two data movers, `gather` and `scatter_add`, around contiguous
//! `axpy`/`dot` loops. For each kernel offset `(ky, kx)` the input pixels that
//! offset touches are gathered into a dense `[channel][output position]`
//! buffer, so the multiply-accumulate work always runs over contiguous
//! memory regardless of stride or padding. A transposed convolution is the
//! input-gradient direction of a convolution with the same kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BackwardCtx, BackwardOp, Var};

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn stride(s: usize) -> Self {
        Conv2dSpec {
            stride: (s, s),
            ..Default::default()
        }
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 || kernel == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    (full > 2 * padding).then(|| full - 2 * padding)
}

/// Geometry of a convolution seen from the cross-correlation side: `cin x h x w`
/// input planes produce `cout x oh x ow` output planes.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Offsets where gather is a plain copy (1x1, unit stride, no padding).
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Output columns `ox` whose input column `ox*sw + kx - pw` lies in `[0, w)`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pw > kx {
            (self.pw - kx).div_ceil(self.sw)
        } else {
            0
        };
        let hi = if self.w + self.pw > kx {
            ((self.w - 1 + self.pw - kx) / self.sw + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `col[c][oy*ow + ox] = x[c][iy*w + ix]` for kernel offset `(ky, kx)`, zero
/// where the tap falls into padding.
fn gather<T: Scalar>(geo: &Geometry, x: &[T], channels: usize, ky: usize, kx: usize, col: &mut [T]) {
    let (lo, hi) = geo.col_range(kx);
    let (ip, op) = (geo.in_plane(), geo.out_plane());
    for c in 0..channels {
        let src = &x[c * ip..(c + 1) * ip];
        let dst = &mut col[c * op..(c + 1) * op];
        for oy in 0..geo.oh {
            let row = &mut dst[oy * geo.ow..(oy + 1) * geo.ow];
            match geo.input_row(oy, ky) {
                None => row.fill(T::zero()),
                Some(iy) => {
                    row[..lo].fill(T::zero());
                    row[hi..].fill(T::zero());
                    let base = iy * geo.w + kx;
                    if geo.sw == 1 {
                        let start = base + lo - geo.pw;
                        row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
                            *slot = src[base + ox * geo.sw - geo.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather`]: `x[c][iy*w + ix] += col[c][oy*ow + ox]`.
fn scatter_add<T: Scalar>(geo: &Geometry, col: &[T], channels: usize, ky: usize, kx: usize, x: &mut [T]) {
    let (lo, hi) = geo.col_range(kx);
    let (ip, op) = (geo.in_plane(), geo.out_plane());
    for c in 0..channels {
        let src = &col[c * op..(c + 1) * op];
        let dst = &mut x[c * ip..(c + 1) * ip];
        for oy in 0..geo.oh {
            let Some(iy) = geo.input_row(oy, ky) else { continue };
            let row = &src[oy * geo.ow..(oy + 1) * geo.ow];
            let base = iy * geo.w + kx;
            if geo.sw == 1 {
                let start = base + lo - geo.pw;
                for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                    *d += s;
                }
            } else {
                for (ox, &s) in row.iter().enumerate().take(hi).skip(lo) {
                    dst[base + ox * geo.sw - geo.pw] += s;
                }
            }
        }
    }
}

fn weight_at(geo: &Geometry, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
    ((oc * geo.cin_g() + ic) * geo.kh + ky) * geo.kw + kx
}

/// Cross-correlation `x (n, cin, h, w) -> (n, cout, oh, ow)`.
fn forward_raw<T: Scalar>(geo: &Geometry, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cg, og, ip, op) = (geo.cin_g(), geo.cout_g(), geo.in_plane(), geo.out_plane());
    let mut out = vec![T::zero(); geo.n * geo.cout * op];
    let mut col = vec![T::zero(); cg * op];
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let xs = &x[(n * geo.cin + g * cg) * ip..(n * geo.cin + (g + 1) * cg) * ip];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let cols: &[T] = if geo.is_pointwise() {
                        xs
                    } else {
                        gather(geo, xs, cg, ky, kx, &mut col);
                        &col
                    };
                    for o in 0..og {
                        let oc = g * og + o;
                        let dst = &mut out[(n * geo.cout + oc) * op..(n * geo.cout + oc + 1) * op];
                        for ic in 0..cg {
                            let wv = weight[weight_at(geo, oc, ic, ky, kx)];
                            axpy(dst, wv, &cols[ic * op..(ic + 1) * op]);
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            for oc in 0..geo.cout {
                let bv = b[oc];
                for v in &mut out[(n * geo.cout + oc) * op..(n * geo.cout + oc + 1) * op] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradient of [`forward_raw`] with respect to `x`, given output cotangent `g`.
fn backward_input_raw<T: Scalar>(geo: &Geometry, g: &[T], weight: &[T]) -> Vec<T> {
    let (cg, og, ip, op) = (geo.cin_g(), geo.cout_g(), geo.in_plane(), geo.out_plane());
    let mut gx = vec![T::zero(); geo.n * geo.cin * ip];
    let mut tmp = vec![T::zero(); cg * op];
    for n in 0..geo.n {
        for grp in 0..geo.groups {
            let gs = &g[(n * geo.cout + grp * og) * op..(n * geo.cout + (grp + 1) * og) * op];
            let dst = &mut gx[(n * geo.cin + grp * cg) * ip..(n * geo.cin + (grp + 1) * cg) * ip];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let target: &mut [T] = if geo.is_pointwise() {
                        &mut *dst
                    } else {
                        tmp.fill(T::zero());
                        &mut tmp
                    };
                    for ic in 0..cg {
                        let acc = &mut target[ic * op..(ic + 1) * op];
                        for o in 0..og {
                            let wv = weight[weight_at(geo, grp * og + o, ic, ky, kx)];
                            axpy(acc, wv, &gs[o * op..(o + 1) * op]);
                        }
                    }
                    if !geo.is_pointwise() {
                        scatter_add(geo, &tmp, cg, ky, kx, dst);
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of [`forward_raw`] with respect to the kernel.
fn backward_weight_raw<T: Scalar>(geo: &Geometry, x: &[T], g: &[T]) -> Vec<T> {
    let (cg, og, ip, op) = (geo.cin_g(), geo.cout_g(), geo.in_plane(), geo.out_plane());
    let mut gw = vec![T::zero(); geo.cout * cg * geo.kh * geo.kw];
    let mut col = vec![T::zero(); cg * op];
    for n in 0..geo.n {
        for grp in 0..geo.groups {
            let xs = &x[(n * geo.cin + grp * cg) * ip..(n * geo.cin + (grp + 1) * cg) * ip];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let cols: &[T] = if geo.is_pointwise() {
                        xs
                    } else {
                        gather(geo, xs, cg, ky, kx, &mut col);
                        &col
                    };
                    for o in 0..og {
                        let oc = grp * og + o;
                        let gs = &g[(n * geo.cout + oc) * op..(n * geo.cout + oc + 1) * op];
                        for ic in 0..cg {
                            gw[weight_at(geo, oc, ic, ky, kx)] += dot(gs, &cols[ic * op..(ic + 1) * op]);
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Per-channel sum of an NCHW cotangent.
fn bias_grad<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut gb = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in gb.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            *acc += g.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], gb).expect("bias extent")
}

struct Conv2dBackward {
    geo: Geometry,
}

impl<T: Scalar> BackwardOp<T> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let gx = ctx.needs[0]
            .then(|| Tensor::new(x.shape(), backward_input_raw(&self.geo, g.data(), w.data())))
            .transpose()?;
        let gw = ctx.needs[1]
            .then(|| Tensor::new(w.shape(), backward_weight_raw(&self.geo, x.data(), g.data())))
            .transpose()?;
        let mut out = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| bias_grad(g)));
        }
        Ok(out)
    }
}

struct ConvTranspose2dBackward {
    /// Geometry of the adjoint convolution (output side is this op's input).
    geo: Geometry,
}

impl<T: Scalar> BackwardOp<T> for ConvTranspose2dBackward {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let gx = ctx.needs[0]
            .then(|| Tensor::new(x.shape(), forward_raw(&self.geo, g.data(), w.data(), None)))
            .transpose()?;
        let gw = ctx.needs[1]
            .then(|| Tensor::new(w.shape(), backward_weight_raw(&self.geo, g.data(), x.data())))
            .transpose()?;
        let mut out = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| bias_grad(g)));
        }
        Ok(out)
    }
}

fn check_rank4(op: &'static str, what: &str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::invalid(op, format!("{what} must be rank 4, got {shape:?}")));
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: Option<&Tensor<impl Scalar>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(op, &[channels], b.shape()));
        }
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Cross-correlation of an NCHW input with an `(out, in/groups, kh, kw)` kernel.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        const OP: &str = "conv2d";
        let (out, geo) = {
            let (x, w) = (self.value(), kernel.value());
            check_rank4(OP, "input", x.shape())?;
            check_rank4(OP, "kernel", w.shape())?;
            let (xs, ws) = (x.shape(), w.shape());
            let groups = spec.groups;
            if groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
                return Err(Error::invalid(
                    OP,
                    format!(
                        "groups {groups} must divide input channels {} and output channels {}",
                        xs[1], ws[0]
                    ),
                ));
            }
            if ws[1] * groups != xs[1] {
                return Err(Error::invalid(
                    OP,
                    format!(
                        "kernel expects {} input channels per group ({} total) but input has {}",
                        ws[1],
                        ws[1] * groups,
                        xs[1]
                    ),
                ));
            }
            let oh = conv2d_output_extent(xs[2], ws[2], spec.stride.0, spec.padding.0);
            let ow = conv2d_output_extent(xs[3], ws[3], spec.stride.1, spec.padding.1);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::invalid(
                    OP,
                    format!("kernel {}x{} does not fit input {}x{}", ws[2], ws[3], xs[2], xs[3]),
                ));
            };
            let b = bias.map(|b| b.value());
            check_bias(OP, b.as_deref(), ws[0])?;
            let geo = Geometry {
                n: xs[0],
                cin: xs[1],
                h: xs[2],
                w: xs[3],
                cout: ws[0],
                oh,
                ow,
                kh: ws[2],
                kw: ws[3],
                sh: spec.stride.0,
                sw: spec.stride.1,
                ph: spec.padding.0,
                pw: spec.padding.1,
                groups,
            };
            let data = forward_raw(&geo, x.data(), w.data(), b.as_ref().map(|b| b.data()));
            (Tensor::new(&[geo.n, geo.cout, oh, ow], data)?, geo)
        };
        let inputs: Vec<Var<'t, T>> = match bias {
            Some(b) => vec![self, kernel, b],
            None => vec![self, kernel],
        };
        self.record(out, &inputs, Conv2dBackward { geo })
    }

    /// Transposed convolution with an `(in, out, kh, kw)` kernel; output extent
    /// is `(in - 1) * stride - 2 * padding + kernel`.
    pub fn conv_transpose2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'t, T>> {
        const OP: &str = "conv_transpose2d";
        let (out, geo) = {
            let (x, w) = (self.value(), kernel.value());
            check_rank4(OP, "input", x.shape())?;
            check_rank4(OP, "kernel", w.shape())?;
            let (xs, ws) = (x.shape(), w.shape());
            if ws[0] != xs[1] {
                return Err(Error::invalid(
                    OP,
                    format!("kernel expects {} input channels but input has {}", ws[0], xs[1]),
                ));
            }
            let oh = conv_transpose2d_output_extent(xs[2], ws[2], stride.0, padding.0);
            let ow = conv_transpose2d_output_extent(xs[3], ws[3], stride.1, padding.1);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::invalid(OP, "output extent would be empty"));
            };
            let b = bias.map(|b| b.value());
            check_bias(OP, b.as_deref(), ws[1])?;
            // Seen as the adjoint of a convolution from (ws[1], oh, ow) to (xs[1], xs[2], xs[3]).
            let geo = Geometry {
                n: xs[0],
                cin: ws[1],
                h: oh,
                w: ow,
                cout: xs[1],
                oh: xs[2],
                ow: xs[3],
                kh: ws[2],
                kw: ws[3],
                sh: stride.0,
                sw: stride.1,
                ph: padding.0,
                pw: padding.1,
                groups: 1,
            };
            let mut data = backward_input_raw(&geo, x.data(), w.data());
            if let Some(b) = &b {
                let plane = oh * ow;
                for n in 0..geo.n {
                    for c in 0..geo.cin {
                        let bv = b.data()[c];
                        for v in &mut data[(n * geo.cin + c) * plane..(n * geo.cin + c + 1) * plane] {
                            *v += bv;
                        }
                    }
                }
            }
            (Tensor::new(&[geo.n, geo.cin, oh, ow], data)?, geo)
        };
        let inputs: Vec<Var<'t, T>> = match bias {
            Some(b) => vec![self, kernel, b],
            None => vec![self, kernel],
        };
        self.record(out, &inputs, ConvTranspose2dBackward { geo })
    }
}
