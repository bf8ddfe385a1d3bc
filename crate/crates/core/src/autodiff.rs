//! Reverse pass over a recorded forward tape, plus a finite-difference
//! gradient checker.
//!
//! The backward pass consumes the [`Tape`] by value, so a tape cannot be
//! replayed twice. Adjoints are accumulated into an activation-indexed
//! buffer mirroring the forward indexing (0 = network input), which makes
//! skip connections a pure accumulation.

use crate::error::{Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::network::{forward, forward_with_tape, LayerTape, NetworkConfig, Params, Tape, TensorKind};
use crate::ops::{InterpKind, PoolKind};

/// Gradient of one layer's trainable tensors; shapes mirror
/// [`crate::network::LayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn_gamma: Option<Vec<f64>>,
    pub bn_beta: Option<Vec<f64>>,
}

/// Full gradient: per-layer tensors plus the gradient with respect to the
/// network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
    pub input: GridFunction,
}

impl Grads {
    pub fn zeros_like(params: &Params, input_spec: GridSpec, input_channels: usize) -> Self {
        Grads {
            layers: params
                .layers
                .iter()
                .map(|lp| LayerGrads {
                    kernel: vec![0.0; lp.kernel.values.len()],
                    bias: vec![0.0; lp.bias.len()],
                    bn_gamma: lp.bn.as_ref().map(|bn| vec![0.0; bn.gamma.len()]),
                    bn_beta: lp.bn.as_ref().map(|bn| vec![0.0; bn.beta.len()]),
                })
                .collect(),
            input: GridFunction::zeros(input_spec, input_channels),
        }
    }

    /// Visit tensors in the same order as [`Params::for_each_tensor`].
    pub fn for_each_tensor(&self, mut f: impl FnMut(TensorKind, &[f64])) {
        for lg in &self.layers {
            f(TensorKind::Kernel, &lg.kernel);
            f(TensorKind::Bias, &lg.bias);
            if let Some(g) = &lg.bn_gamma {
                f(TensorKind::BnGamma, g);
            }
            if let Some(b) = &lg.bn_beta {
                f(TensorKind::BnBeta, b);
            }
        }
    }

    /// Accumulate `scale * other` into `self` (tensor part only).
    pub fn axpy(&mut self, scale: f64, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.kernel.iter_mut().zip(&b.kernel) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
            if let (Some(x), Some(y)) = (a.bn_gamma.as_mut(), b.bn_gamma.as_ref()) {
                for (p, q) in x.iter_mut().zip(y) {
                    *p += scale * q;
                }
            }
            if let (Some(x), Some(y)) = (a.bn_beta.as_mut(), b.bn_beta.as_ref()) {
                for (p, q) in x.iter_mut().zip(y) {
                    *p += scale * q;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for lg in &mut self.layers {
            for v in lg.kernel.iter_mut().chain(lg.bias.iter_mut()) {
                *v *= s;
            }
            for t in [lg.bn_gamma.as_mut(), lg.bn_beta.as_mut()].into_iter().flatten() {
                for v in t.iter_mut() {
                    *v *= s;
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.for_each_tensor(|_, t| {
            for v in t {
                m = m.max(v.abs());
            }
        });
        m
    }
}

fn downsample_adjoint(
    d_out: &GridFunction,
    post_act: &GridFunction,
    kind: PoolKind,
    s: usize,
) -> GridFunction {
    if s == 1 {
        return d_out.clone();
    }
    let mut d = GridFunction::zeros(post_act.spec, post_act.channels);
    match kind {
        PoolKind::Average => {
            let inv = 1.0 / (s * s) as f64;
            for c in 0..d_out.channels {
                for i in 0..d_out.spec.rows {
                    for j in 0..d_out.spec.cols {
                        let g = d_out.at(c, i, j) * inv;
                        for k in 0..s {
                            for l in 0..s {
                                *d.at_mut(c, i * s + k, j * s + l) += g;
                            }
                        }
                    }
                }
            }
        }
        PoolKind::Max => {
            // route to the first (row-major) occurrence of the block maximum
            for c in 0..d_out.channels {
                for i in 0..d_out.spec.rows {
                    for j in 0..d_out.spec.cols {
                        let (mut best, mut bk, mut bl) = (f64::NEG_INFINITY, 0, 0);
                        for k in 0..s {
                            for l in 0..s {
                                let v = post_act.at(c, i * s + k, j * s + l);
                                if v > best {
                                    best = v;
                                    bk = k;
                                    bl = l;
                                }
                            }
                        }
                        *d.at_mut(c, i * s + bk, j * s + bl) += d_out.at(c, i, j);
                    }
                }
            }
        }
    }
    d
}

fn upsample_adjoint(
    d_up: &GridFunction,
    input_spec: GridSpec,
    kind: InterpKind,
    s: usize,
) -> GridFunction {
    if s == 1 {
        return d_up.clone();
    }
    let mut d = GridFunction::zeros(input_spec, d_up.channels);
    for c in 0..d_up.channels {
        for i in 0..input_spec.rows {
            let i1 = (i + 1).min(input_spec.rows - 1);
            for j in 0..input_spec.cols {
                let j1 = (j + 1).min(input_spec.cols - 1);
                for k in 0..s {
                    for l in 0..s {
                        let g = d_up.at(c, i * s + k, j * s + l);
                        match kind {
                            InterpKind::Constant => *d.at_mut(c, i, j) += g,
                            InterpKind::Bilinear => {
                                let tr = k as f64 / s as f64;
                                let tc = l as f64 / s as f64;
                                *d.at_mut(c, i, j) += (1.0 - tr) * (1.0 - tc) * g;
                                *d.at_mut(c, i1, j) += tr * (1.0 - tc) * g;
                                *d.at_mut(c, i, j1) += (1.0 - tr) * tc * g;
                                *d.at_mut(c, i1, j1) += tr * tc * g;
                            }
                        }
                    }
                }
            }
        }
    }
    d
}

/// Batch-normalization backward with the same integral weights as the
/// forward statistics (`wgt = h^2 / |domain|`, one example).
#[allow(clippy::too_many_arguments)]
fn bn_backward(
    d_y: &GridFunction,
    pre_bn: &GridFunction,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> GridFunction {
    let spec = pre_bn.spec;
    let wgt = spec.h * spec.h / spec.domain.area();
    let n = spec.n_cells();
    let mut d_x = GridFunction::zeros(spec, pre_bn.channels);
    for c in 0..pre_bn.channels {
        let sigma = (var[c] + eps).sqrt();
        let x = &pre_bn.values[c * n..(c + 1) * n];
        let dy = &d_y.values[c * n..(c + 1) * n];
        let (mut s1, mut s2, mut sc) = (0.0, 0.0, 0.0);
        for (&xi, &di) in x.iter().zip(dy) {
            let dxh = di * gamma[c];
            let xc = xi - mean[c];
            s1 += dxh;
            s2 += dxh * xc;
            sc += xc;
            d_gamma[c] += di * xc / sigma;
            d_beta[c] += di;
        }
        let d_var = -s2 / (2.0 * sigma * sigma * sigma);
        let common = wgt * (-s1 / sigma - 2.0 * wgt * d_var * sc);
        let dx = &mut d_x.values[c * n..(c + 1) * n];
        for ((&xi, &di), out) in x.iter().zip(dy).zip(dx.iter_mut()) {
            let dxh = di * gamma[c];
            *out = dxh / sigma + 2.0 * wgt * d_var * (xi - mean[c]) + common;
        }
    }
    d_x
}

/// Reverse pass. `d_output` is the adjoint of the network output (same shape
/// as `tape.output`). Consumes the tape.
pub fn backward(
    cfg: &NetworkConfig,
    params: &Params,
    tape: Tape,
    d_output: &GridFunction,
) -> Result<Grads> {
    if d_output.spec.rows != tape.output.spec.rows
        || d_output.spec.cols != tape.output.spec.cols
        || d_output.channels != tape.output.channels
    {
        return Err(Error::ShapeMismatch("output adjoint shape mismatch".into()));
    }
    let n_layers = cfg.layers.len();
    let mut grads = Grads::zeros_like(params, tape.input.spec, tape.input.channels);
    // adjoints of the activations, indexed like the forward pass
    let mut adj: Vec<Option<GridFunction>> = vec![None; n_layers + 1];
    adj[n_layers] = Some(d_output.clone());

    for l in (0..n_layers).rev() {
        let layer = &cfg.layers[l];
        let lp = &params.layers[l];
        let lt: &LayerTape = &tape.layers[l];
        let d_out = adj[l + 1].take().ok_or_else(|| {
            Error::ShapeMismatch(format!("missing adjoint for activation {}", l + 1))
        })?;

        let d_post = downsample_adjoint(&d_out, &lt.post_act, layer.pooling, layer.s_d);

        let d_pre_act = if l == n_layers - 1 {
            d_post
        } else {
            let mut d = d_post;
            for (g, &x) in d.values.iter_mut().zip(&lt.pre_act.values) {
                *g *= layer.activation.derivative(x);
            }
            d
        };

        let d_pre_bn = match (&lp.bn, &lt.bn_stats) {
            (Some(bn), Some((mean, var))) => {
                let lg = &mut grads.layers[l];
                bn_backward(
                    &d_pre_act,
                    &lt.pre_bn,
                    mean,
                    var,
                    &bn.gamma,
                    bn.eps,
                    lg.bn_gamma.as_mut().unwrap(),
                    lg.bn_beta.as_mut().unwrap(),
                )
            }
            _ => d_pre_act,
        };

        // bias: plain sum of the conv-output adjoint per channel
        {
            let lg = &mut grads.layers[l];
            let n = d_pre_bn.spec.n_cells();
            for (o, b) in lg.bias.iter_mut().enumerate() {
                *b += d_pre_bn.values[o * n..(o + 1) * n].iter().sum::<f64>();
            }
        }

        // convolution: dW and the adjoint of the padded input
        let k = &lp.kernel;
        let (kn, km) = (k.rows, k.cols);
        let h2 = lt.padded.spec.h * lt.padded.spec.h;
        let (orows, ocols) = (d_pre_bn.spec.rows, d_pre_bn.spec.cols);
        let (prows, pcols) = (lt.padded.spec.rows, lt.padded.spec.cols);
        let mut d_padded = GridFunction::zeros(lt.padded.spec, lt.padded.channels);
        {
            let lg = &mut grads.layers[l];
            for o in 0..k.out_channels {
                for i in 0..orows {
                    for j in 0..ocols {
                        let g = h2 * d_pre_bn.at(o, i, j);
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..k.in_channels {
                            for kk in 0..kn {
                                let ur = i + kn - 1 - kk;
                                let ubase = (c * prows + ur) * pcols;
                                let wbase = ((o * k.in_channels + c) * kn + kk) * km;
                                for ll in 0..km {
                                    let uc = j + km - 1 - ll;
                                    lg.kernel[wbase + ll] += g * lt.padded.values[ubase + uc];
                                    d_padded.values[ubase + uc] += g * k.values[wbase + ll];
                                }
                            }
                        }
                    }
                }
            }
        }

        // padding adjoint: scatter back through the reflection index map
        let (left, _right, top, _bottom) = lt.pad;
        let in_rows = lt.upsampled_spec.rows;
        let in_cols = lt.upsampled_spec.cols;
        let mut d_conv_in = GridFunction::zeros(lt.upsampled_spec, lt.padded.channels);
        for c in 0..d_padded.channels {
            for r in 0..prows {
                let sr = crate::ops::reflect_index(r as isize - top as isize, in_rows);
                for col in 0..pcols {
                    let sc = crate::ops::reflect_index(col as isize - left as isize, in_cols);
                    *d_conv_in.at_mut(c, sr, sc) += d_padded.at(c, r, col);
                }
            }
        }

        // split off the skip channels, un-crop, and accumulate at the source
        let d_up = match &lt.skip {
            None => d_conv_in,
            Some(st) => {
                let n = lt.upsampled_spec.n_cells();
                let main_len = lt.upsampled_channels * n;
                let mut d_skip = GridFunction::zeros(st.src_spec, st.src_channels);
                for c in 0..st.src_channels {
                    for r in 0..in_rows {
                        for col in 0..in_cols {
                            *d_skip.at_mut(c, st.crop_top + r, st.crop_left + col) +=
                                d_conv_in.values[(lt.upsampled_channels + c) * n + (r * in_cols + col)];
                        }
                    }
                }
                accumulate(&mut adj, st.src_index, d_skip)?;
                let mut main = GridFunction::zeros(lt.upsampled_spec, lt.upsampled_channels);
                main.values.copy_from_slice(&d_conv_in.values[..main_len]);
                main
            }
        };

        let d_x = upsample_adjoint(&d_up, lt.input_spec, layer.interp, layer.s_u);
        accumulate(&mut adj, l, d_x)?;
    }

    grads.input = adj[0].take().unwrap_or_else(|| {
        GridFunction::zeros(tape.input.spec, tape.input.channels)
    });
    Ok(grads)
}

fn accumulate(adj: &mut [Option<GridFunction>], index: usize, d: GridFunction) -> Result<()> {
    match &mut adj[index] {
        slot @ None => *slot = Some(d),
        Some(existing) => {
            if existing.values.len() != d.values.len() {
                return Err(Error::ShapeMismatch(format!(
                    "conflicting adjoint shapes at activation {index}"
                )));
            }
            for (a, b) in existing.values.iter_mut().zip(&d.values) {
                *a += b;
            }
        }
    }
    Ok(())
}

/// One discrepancy found by the gradient checker.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compare the reverse-pass gradient against central finite differences.
///
/// `loss` maps the network output to a scalar and its adjoint. Every scalar
/// of every trainable tensor is perturbed by ±`step` (pass
/// `max_per_tensor = Some(k)` to check only the first k of each tensor).
pub fn grad_check(
    cfg: &NetworkConfig,
    params: &Params,
    input: &GridFunction,
    loss: impl Fn(&GridFunction) -> (f64, GridFunction),
    step: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    let tape = forward_with_tape(cfg, params, input)?;
    let (_, d_out) = loss(&tape.output);
    let grads = backward(cfg, params, tape, &d_out)?;

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    grads.for_each_tensor(|_, t| analytic.push(t.to_vec()));

    let mut report = GradCheckReport { n_checked: 0, max_rel_err: 0.0, worst: None };
    let n_tensors = analytic.len();
    for tensor in 0..n_tensors {
        let len = analytic[tensor].len();
        let check = max_per_tensor.map_or(len, |k| k.min(len));
        for element in 0..check {
            let mut plus = params.clone();
            perturb(&mut plus, tensor, element, step);
            let mut minus = params.clone();
            perturb(&mut minus, tensor, element, -step);
            let (lp, _) = {
                let out = forward(cfg, &plus, input)?;
                loss(&out)
            };
            let (lm, _) = {
                let out = forward(cfg, &minus, input)?;
                loss(&out)
            };
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[tensor][element];
            // differences below the finite-difference noise floor count as
            // exact (e.g. the analytically zero bias gradient under BN)
            let e = if (a - numeric).abs() < 1e-9 { 0.0 } else { rel_err(a, numeric) };
            report.n_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(GradCheckEntry { tensor, element, analytic: a, numeric, rel_err: e });
            }
        }
    }
    Ok(report)
}

fn perturb(params: &mut Params, tensor: usize, element: usize, delta: f64) {
    let mut i = 0;
    params.for_each_tensor_mut(|_, t| {
        if i == tensor {
            t[element] += delta;
        }
        i += 1;
    });
}
