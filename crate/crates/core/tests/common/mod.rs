//! Reference implementations and fixtures shared by the integration tests.
//! Oracles here are deliberately naive loops with no shared code paths.

#![allow(dead_code)]

use rdpnet::autodiff::Var;
use rdpnet::gradcheck::{grad_check, relative_error};
use rdpnet::loss::{hybrid_loss, LossConfig};
use rdpnet::mask::Mask;
use rdpnet::model::{RdpNet, RdpNetConfig};
use rdpnet::nn::Mode;
use rdpnet::{Result, Rng, Tape, Tensor};

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

pub fn random_mask(rng: &mut Rng, h: usize, w: usize, density: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.uniform() < density)
}

/// Mask made of a few random rectangles, so edges are long and straight.
pub fn blocky_mask(rng: &mut Rng, h: usize, w: usize) -> Mask {
    let mut m = Mask::filled(h, w, false);
    for _ in 0..rng.int_in(1, 3) {
        let (y0, x0) = (rng.below(h), rng.below(w));
        let (y1, x1) = ((y0 + 1 + rng.below(h / 2)).min(h), (x0 + 1 + rng.below(w / 2)).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, true);
            }
        }
    }
    m
}

// ---- convolution ----

/// NCHW cross-correlation with `(cout, cin/groups, kh, kw)` weights.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cpg * groups, cin);
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let opg = cout / groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            let g = co / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bn, c, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Scatter form of the transposed convolution with `(cin, cout, kh, kw)` weights.
pub fn naive_conv_transpose2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h - 1) * stride.0 + kh - 2 * pad.0;
    let ow = (wd - 1) * stride.1 + kw - 2 * pad.1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            let bias = b.map_or(0.0, |b| b.data()[co]);
            for i in 0..oh * ow {
                out[(bn * cout + co) * oh * ow + i] = bias;
            }
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.at(&[bn, ci, iy, ix]);
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride.0 + ky) as isize - pad.0 as isize;
                                let ox = (ix * stride.1 + kx) as isize - pad.1 as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((bn * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w.at(&[ci, co, ky, kx]);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum ConvCase {
    Dense,
    /// `groups == in_channels`, with a channel multiplier on the output.
    Grouped,
    /// Odd kernel, same padding, one filter per channel.
    Depthwise,
    Transpose,
}

pub const STRIDES: [usize; 3] = [1, 2, 4];
pub const PADDINGS: [usize; 3] = [0, 1, 2];

/// Runs `count` random convolution cases cycling through every kind,
/// stride and padding, and returns the worst absolute difference against
/// the naive loops.
pub fn conv_oracle_sweep(seed: u64, count: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let kinds = [ConvCase::Dense, ConvCase::Grouped, ConvCase::Depthwise, ConvCase::Transpose];
    for i in 0..count {
        let kind = kinds[i % 4];
        let s = STRIDES[(i / 4) % 3];
        let pad = PADDINGS[(i / 12) % 3];
        let n = rng.int_in(1, 2);
        let k = rng.int_in(1, 4);
        let h = rng.int_in(k.max(2), 10);
        let w = rng.int_in(k.max(2), 10);
        let with_bias = rng.uniform() < 0.7;
        let tape = Tape::<f64>::new();
        let conv = |rng: &mut Rng, cin: usize, cout: usize, k: usize, groups: usize, stride: usize, pad: usize| {
            let x = random_tensor(rng, &[n, cin, h, w]);
            let wt = random_tensor(rng, &[cout, cin / groups, k, k]);
            let b = random_tensor(rng, &[cout]);
            let spec = rdpnet::Conv2dSpec {
                stride: (stride, stride),
                padding: (pad, pad),
                groups,
            };
            let got = tape
                .constant(x.clone())
                .conv2d(tape.constant(wt.clone()), with_bias.then(|| tape.constant(b.clone())), spec)
                .unwrap();
            let want = naive_conv2d(&x, &wt, with_bias.then_some(&b), (stride, stride), (pad, pad), groups);
            assert_eq!(got.shape(), want.shape().to_vec(), "{kind:?}");
            got.value().max_abs_diff(&want)
        };
        let diff = match kind {
            ConvCase::Dense => {
                let (cin, cout) = (rng.int_in(1, 4), rng.int_in(1, 4));
                conv(&mut rng, cin, cout, k, 1, s, pad)
            }
            ConvCase::Grouped => {
                let cin = rng.int_in(1, 4);
                let mult = rng.int_in(1, 2);
                conv(&mut rng, cin, cin * mult, k, cin, s, pad)
            }
            ConvCase::Depthwise => {
                let c = rng.int_in(1, 4);
                let k = [1, 3, 5][rng.below(3)];
                conv(&mut rng, c, c, k, c, 1, k / 2)
            }
            ConvCase::Transpose => {
                let (cin, cout) = (rng.int_in(1, 3), rng.int_in(1, 3));
                // Keep the output extent positive.
                let pad = if (h.min(w) - 1) * s + k > 2 * pad { pad } else { 0 };
                let x = random_tensor(&mut rng, &[n, cin, h, w]);
                let wt = random_tensor(&mut rng, &[cin, cout, k, k]);
                let b = random_tensor(&mut rng, &[cout]);
                let got = tape
                    .constant(x.clone())
                    .conv_transpose2d(tape.constant(wt.clone()), with_bias.then(|| tape.constant(b.clone())), (s, s), (pad, pad))
                    .unwrap();
                let want = naive_conv_transpose2d(&x, &wt, with_bias.then_some(&b), (s, s), (pad, pad));
                assert_eq!(got.shape(), want.shape().to_vec(), "{kind:?}");
                got.value().max_abs_diff(&want)
            }
        };
        worst = worst.max(diff);
    }
    worst
}

// ---- edge weights ----

/// Direct per-pixel window average, `alpha * |mean - label|`.
pub fn brute_edge_weights(mask: &Mask, alpha: f64, m: usize) -> Vec<f64> {
    let (h, w) = mask.dims();
    let r = (m / 2) as isize;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut sum, mut n) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        sum += mask.get(yy as usize, xx as usize) as u8 as f64;
                        n += 1.0;
                    }
                }
            }
            let label = mask.get(y as usize, x as usize) as u8 as f64;
            out.push(alpha * (sum / n - label).abs());
        }
    }
    out
}

// ---- gradient checks ----

pub type Program = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

pub struct GradCase {
    pub name: String,
    pub program: Program,
    pub leaves: Vec<Tensor<f64>>,
}

/// Reduces `y` to a scalar with fixed random weights so every output element
/// gets a distinct cotangent.
pub fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = Rng::new(seed);
    let r = random_tensor(&mut rng, &y.shape());
    y.mul(y.tape().constant(r))?.sum_all()
}

fn case(name: impl Into<String>, leaves: Vec<Tensor<f64>>, program: Program) -> GradCase {
    GradCase {
        name: name.into(),
        program,
        leaves,
    }
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(0.3, 2.0))
}

/// One case per differentiable primitive, each at the given shape `(n, c, h, w)`.
pub fn primitive_cases(seed: u64, dims: [usize; 4]) -> Vec<GradCase> {
    use rdpnet::loss::{dice_loss, edge_loss, focal_loss};
    use rdpnet::nn::{gelu, scale_channels, switch_norm};

    let mut rng = Rng::new(seed);
    let s = dims.to_vec();
    let [n, c, h, w] = dims;
    let t = |rng: &mut Rng| random_tensor(rng, &s);
    let mut v: Vec<GradCase> = Vec::new();

    v.push(case("add", vec![t(&mut rng), t(&mut rng)], Box::new(|_, x| project(x[0].add(x[1])?, 1))));
    v.push(case("sub", vec![t(&mut rng), t(&mut rng)], Box::new(|_, x| project(x[0].sub(x[1])?, 2))));
    v.push(case("mul", vec![t(&mut rng), t(&mut rng)], Box::new(|_, x| project(x[0].mul(x[1])?, 3))));
    v.push(case("div", vec![t(&mut rng), positive(&mut rng, &s)], Box::new(|_, x| project(x[0].div(x[1])?, 4))));
    v.push(case("neg", vec![t(&mut rng)], Box::new(|_, x| project(x[0].neg()?, 5))));
    v.push(case("log", vec![positive(&mut rng, &s)], Box::new(|_, x| project(x[0].log()?, 6))));
    v.push(case("exp", vec![t(&mut rng)], Box::new(|_, x| project(x[0].exp()?, 7))));
    v.push(case("erf", vec![t(&mut rng)], Box::new(|_, x| project(x[0].erf()?, 8))));
    v.push(case("powf", vec![positive(&mut rng, &s)], Box::new(|_, x| project(x[0].powf(2.5)?, 9))));
    v.push(case("mul_scalar", vec![t(&mut rng)], Box::new(|_, x| project(x[0].mul_scalar(-1.7)?, 10))));
    v.push(case("add_scalar", vec![t(&mut rng)], Box::new(|_, x| project(x[0].add_scalar(0.3)?, 11))));
    // Values stay clear of the clamp kinks at +-0.5 by at least the FD step.
    let clamp_in = Tensor::from_fn(&s, |i| if i % 2 == 0 { rng.uniform_range(-0.4, 0.4) } else { rng.uniform_range(0.6, 1.0) });
    v.push(case("clamp", vec![clamp_in], Box::new(|_, x| project(x[0].clamp(-0.5, 0.5)?, 12))));
    v.push(case("sum", vec![t(&mut rng)], Box::new(|_, x| project(x[0].sum(&[1, 3], false)?, 13))));
    v.push(case("mean", vec![t(&mut rng)], Box::new(|_, x| project(x[0].mean(&[0, 2], true)?, 14))));
    v.push(case("var", vec![t(&mut rng)], Box::new(|_, x| project(x[0].var(&[2, 3], false)?, 15))));
    v.push(case("sum_all", vec![t(&mut rng)], Box::new(|_, x| x[0].exp()?.sum_all())));
    v.push(case("mean_all", vec![t(&mut rng)], Box::new(|_, x| x[0].exp()?.mean_all())));
    v.push(case("softmax", vec![t(&mut rng)], Box::new(|_, x| project(x[0].softmax(1)?, 16))));
    v.push(case(
        "concat",
        vec![t(&mut rng), t(&mut rng)],
        Box::new(|_, x| project(Var::concat(&[x[0], x[1]], 1)?, 17)),
    ));
    if w > 1 {
        v.push(case("slice", vec![t(&mut rng)], Box::new(move |_, x| project(x[0].slice(3, 1, w)?, 18))));
    }
    v.push(case(
        "reshape",
        vec![t(&mut rng)],
        Box::new(move |_, x| project(x[0].reshape(&[n * c, h * w])?, 19)),
    ));
    v.push(case("pad2d", vec![t(&mut rng)], Box::new(|_, x| project(x[0].pad2d([1, 0, 2, 1])?, 20))));
    let k = 3.min(h).min(w);
    v.push(case(
        "conv2d",
        vec![t(&mut rng), random_tensor(&mut rng, &[2, c, k, k]), random_tensor(&mut rng, &[2])],
        Box::new(|_, x| {
            let spec = rdpnet::Conv2dSpec::default().with_padding(1);
            project(x[0].conv2d(x[1], Some(x[2]), spec)?, 21)
        }),
    ));
    v.push(case(
        "conv2d_depthwise_strided",
        vec![t(&mut rng), random_tensor(&mut rng, &[c, 1, k, k]), random_tensor(&mut rng, &[c])],
        Box::new(move |_, x| {
            let spec = rdpnet::Conv2dSpec::stride(2).with_padding(k / 2).with_groups(c);
            project(x[0].conv2d(x[1], Some(x[2]), spec)?, 22)
        }),
    ));
    v.push(case(
        "conv_transpose2d",
        vec![t(&mut rng), random_tensor(&mut rng, &[c, 3, 2, 2]), random_tensor(&mut rng, &[3])],
        Box::new(|_, x| project(x[0].conv_transpose2d(x[1], Some(x[2]), (2, 2), (0, 0))?, 23)),
    ));
    v.push(case("gelu", vec![t(&mut rng).map(|z| 3.0 * z)], Box::new(|_, x| project(gelu(x[0])?, 24))));
    v.push(case(
        "scale_channels",
        vec![t(&mut rng), random_tensor(&mut rng, &[c])],
        Box::new(|_, x| project(scale_channels(x[0], x[1])?, 25)),
    ));
    let sn_leaves = |rng: &mut Rng| {
        vec![
            random_tensor(rng, &s).map(|z| 2.0 * z + 0.5),
            positive(rng, &[c]),
            random_tensor(rng, &[c]),
            random_tensor(rng, &[3]),
            random_tensor(rng, &[3]),
        ]
    };
    if n * h * w > 1 && h * w > 1 {
        v.push(case(
            "switch_norm_train",
            sn_leaves(&mut rng),
            Box::new(|_, x| project(switch_norm([x[0], x[1], x[2], x[3], x[4]], None, 1e-5)?.0, 26)),
        ));
    }
    let running_mean = random_tensor(&mut rng, &[c]).map(|z| 0.3 * z);
    let running_var = positive(&mut rng, &[c]);
    v.push(case(
        "switch_norm_eval",
        sn_leaves(&mut rng),
        Box::new(move |_, x| {
            let y = switch_norm([x[0], x[1], x[2], x[3], x[4]], Some((&running_mean, &running_var)), 1e-5)?.0;
            project(y, 27)
        }),
    ));
    let prob = Tensor::from_fn(&s, |_| rng.uniform_range(0.05, 0.95));
    let weights = Tensor::from_fn(&s, |_| rng.uniform());
    v.push(case(
        "edge_loss",
        vec![prob.clone(), weights],
        Box::new(|_, x| edge_loss(x[0], x[1])),
    ));
    v.push(case("focal_loss", vec![prob.clone()], Box::new(|_, x| focal_loss(x[0], 2.0))));
    let target = Tensor::from_fn(&s, |_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 });
    v.push(case(
        "dice_loss",
        vec![prob.reshape(&[n * c, h, w]).unwrap()],
        Box::new(move |tape, x| {
            let tg = tape.constant(target.reshape(&[n * c, h, w]).unwrap());
            dice_loss(x[0], tg, 1.0)
        }),
    ));
    let masks: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng, h, w, 0.4)).collect();
    v.push(case(
        "hybrid_loss",
        vec![random_tensor(&mut rng, &[n, 2, h, w])],
        Box::new(move |_, x| Ok(hybrid_loss(x[0], &masks, &LossConfig { neighborhood: 3, ..Default::default() })?.total)),
    ));
    v
}

/// Shapes `(n, c, h, w)` for the per-primitive gradient sweep.
pub const GRAD_SHAPES: [[usize; 4]; 20] = [
    [1, 1, 1, 1],
    [1, 1, 1, 3],
    [1, 1, 3, 1],
    [1, 1, 2, 2],
    [2, 1, 2, 2],
    [1, 2, 2, 2],
    [1, 2, 3, 3],
    [2, 2, 3, 3],
    [1, 3, 4, 4],
    [2, 3, 2, 5],
    [3, 1, 4, 2],
    [1, 4, 3, 2],
    [2, 2, 5, 5],
    [1, 1, 6, 6],
    [2, 3, 4, 3],
    [3, 2, 2, 4],
    [1, 5, 2, 2],
    [2, 4, 4, 4],
    [1, 2, 7, 3],
    [4, 1, 3, 3],
];

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

/// Worst relative error of each case in `cases`.
pub fn check_cases(cases: &[GradCase]) -> Vec<(String, f64)> {
    cases
        .iter()
        .map(|c| {
            let report = grad_check(&c.program, &c.leaves, FD_STEP, GRAD_TOL)
                .unwrap_or_else(|e| panic!("{}: {e}", c.name));
            (c.name.clone(), report.max_rel_err())
        })
        .collect()
}

/// Config used for the whole-network gradient check.
pub fn tiny_config() -> RdpNetConfig {
    RdpNetConfig {
        patch_size: 4,
        embed_dim: 4,
        depth: 2,
        out_ch: 3,
        dw_kernel: 3,
        in_channels: 6,
        num_classes: 2,
        height: 16,
        width: 16,
    }
}

/// Central differences through forward + hybrid loss in eval mode, over every
/// parameter and both input images. Returns the worst relative error and
/// the number of scalars checked.
pub fn model_grad_check(seed: u64) -> (f64, usize) {
    let mut rng = Rng::new(seed);
    let mut net = RdpNet::<f64>::build(tiny_config(), &mut rng).unwrap();
    // Non-trivial running statistics and mixing logits.
    let buffers: Vec<String> = net.registry().buffers().map(|(k, _)| k.to_string()).collect();
    for name in buffers {
        let slot = net.registry_mut().slot_mut(&name).unwrap();
        let var = name.ends_with("running_var");
        for v in slot.data_mut() {
            *v = if var { rng.uniform_range(0.5, 1.5) } else { rng.uniform_range(-0.2, 0.2) };
        }
    }
    for (name, p) in net.registry_mut().params_mut() {
        if name.contains("lambda") || name.contains("gamma") || name.contains("attention") {
            for v in p.data_mut() {
                *v += rng.uniform_range(-0.3, 0.3);
            }
        }
    }
    let a = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.uniform());
    let b = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.uniform());
    let masks = vec![blocky_mask(&mut rng, 16, 16)];
    let loss_cfg = LossConfig::default();

    let loss_of = |net: &RdpNet<f64>, a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let p = net.bind(&tape, false);
        let out = net.forward(&p, tape.constant(a.clone()), tape.constant(b.clone()), Mode::Eval).unwrap();
        hybrid_loss(out.logits, &masks, &loss_cfg).unwrap().total.item().unwrap()
    };

    let (param_grads, ga, gb) = {
        let tape = Tape::new();
        let p = net.bind(&tape, true);
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let out = net.forward(&p, va, vb, Mode::Eval).unwrap();
        let loss = hybrid_loss(out.logits, &masks, &loss_cfg).unwrap();
        let mut grads = tape.backward(loss.total).unwrap();
        let ga = grads.take(va);
        let gb = grads.take(vb);
        (p.grads(&mut grads), ga, gb)
    };

    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let names: Vec<String> = net.registry().params().map(|(k, _)| k.to_string()).collect();
    for (pi, name) in names.iter().enumerate() {
        for j in 0..param_grads[pi].numel() {
            let base = net.registry_mut().slot_mut(name).unwrap().data()[j];
            net.registry_mut().slot_mut(name).unwrap().data_mut()[j] = base + step;
            let plus = loss_of(&net, &a, &b);
            net.registry_mut().slot_mut(name).unwrap().data_mut()[j] = base - step;
            let minus = loss_of(&net, &a, &b);
            net.registry_mut().slot_mut(name).unwrap().data_mut()[j] = base;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(param_grads[pi].data()[j], numeric));
            checked += 1;
        }
    }
    for (img, g, first) in [(&a, &ga, true), (&b, &gb, false)] {
        let mut work = img.clone();
        for j in 0..work.numel() {
            let base = work.data()[j];
            work.data_mut()[j] = base + step;
            let plus = if first { loss_of(&net, &work, &b) } else { loss_of(&net, &a, &work) };
            work.data_mut()[j] = base - step;
            let minus = if first { loss_of(&net, &work, &b) } else { loss_of(&net, &a, &work) };
            work.data_mut()[j] = base;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(g.data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
