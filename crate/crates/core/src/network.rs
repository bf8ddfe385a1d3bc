//! Architecture description and the forward pass.
//!
//! A layer applies, in order: upsampling, optional skip concatenation,
//! reflection padding to the convolution's required size, valid convolution
//! plus bias, optional batch normalization, the activation (omitted on the
//! final layer), and downsampling. Padding is chosen so the convolution
//! preserves the spatial size of its input ("same" convolution via
//! reflection), and the output is re-anchored to the pre-pad domain so every
//! activation in the network lives on the configured input domain. For odd
//! kernels this is exact; for even kernels it absorbs the inherent half-cell
//! offset.
//!
//! Activations are indexed 0..=L: index 0 is the network input and index
//! l + 1 the output of layer l. `skip_from` refers to this indexing, so a
//! skip from the raw input is `skip_from = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{resolution_ladder, GridFunction, GridSpec, RectDomain};
use crate::ops::{
    apply_activation, batch_norm, downsample, reflect_pad, upsample, valid_conv, Activation,
    BnParams, ConvKernel, InterpFn, InterpKind, PoolKind, PoolingFn,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Physical kernel support, unchanged under resolution scaling.
    pub kernel_support: RectDomain,
    /// Kernel pixel counts (rows, cols).
    pub kernel_px: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub s_d: usize,
    pub s_u: usize,
    pub pooling: PoolKind,
    pub interp: InterpKind,
    pub activation: Activation,
    pub use_bn: bool,
    /// Activation index to concatenate after upsampling (0 = network input).
    pub skip_from: Option<usize>,
}

impl LayerSpec {
    /// Plain convolutional layer with a centered kernel support of
    /// `px * h_conv` physical size, no sampling, no BN, no skip.
    pub fn conv(h_conv: f64, px: (usize, usize), in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        LayerSpec {
            kernel_support: RectDomain::centered(px.1 as f64 * h_conv, px.0 as f64 * h_conv).unwrap(),
            kernel_px: px,
            in_channels,
            out_channels,
            s_d: 1,
            s_u: 1,
            pooling: PoolKind::Average,
            interp: InterpKind::Bilinear,
            activation,
            use_bn: false,
            skip_from: None,
        }
    }

    /// Resolution of the kernel grid implied by support and pixel count.
    pub fn kernel_h(&self) -> f64 {
        self.kernel_support.height / self.kernel_px.0 as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_domain: RectDomain,
    pub layers: Vec<LayerSpec>,
    /// Exponent of the weight space; the regularity guarantees need p = 2.
    pub p: f64,
}

impl NetworkConfig {
    pub fn new(input_domain: RectDomain, layers: Vec<LayerSpec>) -> Self {
        Self { input_domain, layers, p: 2.0 }
    }

    /// Between-layer resolutions `h_0..=h_L` for input resolution `h0`.
    pub fn ladder(&self, h0: f64) -> Vec<f64> {
        resolution_ladder(h0, &self.layers.iter().map(|l| (l.s_d, l.s_u)).collect::<Vec<_>>())
    }

    /// Resolution at which layer l's convolution runs (after upsampling).
    pub fn conv_resolutions(&self, h0: f64) -> Vec<f64> {
        self.ladder(h0)
            .iter()
            .zip(&self.layers)
            .map(|(h, l)| h / l.s_u as f64)
            .collect()
    }

    /// Structural checks: kernel grids consistent with the resolution ladder
    /// and skip indices in range.
    pub fn validate(&self, h0: f64) -> Result<()> {
        let convs = self.conv_resolutions(h0);
        for (l, (layer, h)) in self.layers.iter().zip(&convs).enumerate() {
            let (n, m) = layer.kernel_px;
            if n == 0 || m == 0 || layer.in_channels == 0 || layer.out_channels == 0 {
                return Err(Error::LayerConfig { layer: l, msg: "zero-sized layer".into() });
            }
            let want_h = layer.kernel_h();
            let want_w = layer.kernel_support.width / m as f64;
            if (want_h - h).abs() > 1e-9 * h.max(1.0) || (want_w - h).abs() > 1e-9 * h.max(1.0) {
                return Err(Error::LayerConfig {
                    layer: l,
                    msg: format!(
                        "kernel support / pixel count gives h = {want_h} x {want_w}, ladder expects {h}"
                    ),
                });
            }
            if let Some(k) = layer.skip_from {
                if k > l {
                    return Err(Error::LayerConfig { layer: l, msg: format!("skip_from {k} is not an earlier activation") });
                }
            }
        }
        Ok(())
    }
}

/// Parameters of one layer at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kernel: ConvKernel,
    pub bias: Vec<f64>,
    pub bn: Option<BnParams>,
}

/// All trainable tensors of one network instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
}

/// Which trainable tensor a flat slot holds; used by the optimizer to decide
/// decay applicability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Kernel,
    Bias,
    BnGamma,
    BnBeta,
}

impl Params {
    /// Zero-initialized parameters matching `cfg` at input resolution `h0`.
    pub fn zeros(cfg: &NetworkConfig, h0: f64) -> Self {
        let convs = cfg.conv_resolutions(h0);
        let layers = cfg
            .layers
            .iter()
            .zip(&convs)
            .map(|(l, &h)| LayerParams {
                kernel: ConvKernel::zeros(
                    l.kernel_support,
                    h,
                    l.out_channels,
                    l.in_channels,
                    l.kernel_px.0,
                    l.kernel_px.1,
                ),
                bias: vec![0.0; l.out_channels],
                bn: l.use_bn.then(|| BnParams::identity(l.out_channels, 1e-5)),
            })
            .collect();
        Params { layers }
    }

    /// Visit all trainable tensors in a fixed order (kernel, bias, bn gamma,
    /// bn beta per layer).
    pub fn for_each_tensor(&self, mut f: impl FnMut(TensorKind, &[f64])) {
        for lp in &self.layers {
            f(TensorKind::Kernel, &lp.kernel.values);
            f(TensorKind::Bias, &lp.bias);
            if let Some(bn) = &lp.bn {
                f(TensorKind::BnGamma, &bn.gamma);
                f(TensorKind::BnBeta, &bn.beta);
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(TensorKind, &mut [f64])) {
        for lp in &mut self.layers {
            f(TensorKind::Kernel, &mut lp.kernel.values);
            f(TensorKind::Bias, &mut lp.bias);
            if let Some(bn) = &mut lp.bn {
                f(TensorKind::BnGamma, &mut bn.gamma);
                f(TensorKind::BnBeta, &mut bn.beta);
            }
        }
    }

    pub fn n_tensors(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, _| n += 1);
        n
    }

    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }
}

/// Norm modes for the trainable kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormMode {
    /// Function-space L2 norm: sqrt(sum_l h_l^2 sum w^2). Invariant under
    /// exact PC refinement of the kernels.
    FunctionSpace,
    /// Plain mean of squared kernel entries, as tracked in experiments.
    MeanSquare,
}

pub fn weight_norm(params: &Params, mode: WeightNormMode) -> f64 {
    match mode {
        WeightNormMode::FunctionSpace => {
            let mut acc = 0.0;
            for lp in &params.layers {
                let h2 = lp.kernel.h * lp.kernel.h;
                acc += h2 * lp.kernel.values.iter().map(|v| v * v).sum::<f64>();
            }
            acc.sqrt()
        }
        WeightNormMode::MeanSquare => {
            let (mut acc, mut n) = (0.0, 0usize);
            for lp in &params.layers {
                acc += lp.kernel.values.iter().map(|v| v * v).sum::<f64>();
                n += lp.kernel.values.len();
            }
            if n == 0 {
                0.0
            } else {
                acc / n as f64
            }
        }
    }
}

/// Instantiate a fixed function-space network at a `gamma`-times finer grid:
/// kernel pixel counts scale by `gamma`, physical supports stay, kernel
/// values are PC-refined (the represented kernels are unchanged, and so is
/// the function-space weight norm).
pub fn instantiate_at_resolution(
    cfg: &NetworkConfig,
    params: &Params,
    gamma: usize,
) -> (NetworkConfig, Params) {
    assert!(gamma >= 1);
    let mut cfg2 = cfg.clone();
    for l in &mut cfg2.layers {
        l.kernel_px = (l.kernel_px.0 * gamma, l.kernel_px.1 * gamma);
    }
    let params2 = Params {
        layers: params
            .layers
            .iter()
            .map(|lp| LayerParams {
                kernel: lp.kernel.refine(gamma),
                bias: lp.bias.clone(),
                bn: lp.bn.clone(),
            })
            .collect(),
    };
    (cfg2, params2)
}

/// Per-layer forward record kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    /// Spec and channel count of the activation entering the layer.
    pub input_spec: GridSpec,
    pub input_channels: usize,
    /// Upsampled main-path activation (shape needed for the concat split).
    pub upsampled_spec: GridSpec,
    pub upsampled_channels: usize,
    /// Crop offsets (top, left) and source shape of the skip, if any.
    pub skip: Option<SkipTape>,
    /// Padding applied (left, right, top, bottom).
    pub pad: (usize, usize, usize, usize),
    /// Convolution input (padded, concatenated).
    pub padded: GridFunction,
    /// Convolution output before BN/activation.
    pub pre_bn: GridFunction,
    /// BN statistics, if BN ran.
    pub bn_stats: Option<(Vec<f64>, Vec<f64>)>,
    /// Activation input (after BN).
    pub pre_act: GridFunction,
    /// Downsampling input (after activation).
    pub post_act: GridFunction,
}

#[derive(Debug, Clone)]
pub struct SkipTape {
    pub src_index: usize,
    pub crop_top: usize,
    pub crop_left: usize,
    pub src_spec: GridSpec,
    pub src_channels: usize,
}

/// Recorded forward pass: the input, every layer record, and the output.
/// Consumed by value in the reverse pass, so a tape cannot be reused.
#[derive(Debug, Clone)]
pub struct Tape {
    pub input: GridFunction,
    pub layers: Vec<LayerTape>,
    pub output: GridFunction,
}

fn center_crop(u: &GridFunction, rows: usize, cols: usize) -> Result<(GridFunction, usize, usize)> {
    if u.spec.rows < rows || u.spec.cols < cols {
        return Err(Error::ShapeMismatch(format!(
            "cannot crop {}x{} to {}x{}",
            u.spec.rows, u.spec.cols, rows, cols
        )));
    }
    let top = (u.spec.rows - rows) / 2;
    let left = (u.spec.cols - cols) / 2;
    let domain = RectDomain::new(
        u.spec.domain.x0 + left as f64 * u.spec.h,
        u.spec.domain.y0 + top as f64 * u.spec.h,
        cols as f64 * u.spec.h,
        rows as f64 * u.spec.h,
    )?;
    let spec = GridSpec { domain, h: u.spec.h, rows, cols };
    let mut out = GridFunction::zeros(spec, u.channels);
    for c in 0..u.channels {
        for r in 0..rows {
            for col in 0..cols {
                *out.at_mut(c, r, col) = u.at(c, top + r, left + col);
            }
        }
    }
    Ok((out, top, left))
}

fn concat_channels(a: &GridFunction, b: &GridFunction) -> GridFunction {
    debug_assert_eq!(a.spec.rows, b.spec.rows);
    debug_assert_eq!(a.spec.cols, b.spec.cols);
    let mut values = Vec::with_capacity(a.values.len() + b.values.len());
    values.extend_from_slice(&a.values);
    values.extend_from_slice(&b.values);
    GridFunction { spec: a.spec, channels: a.channels + b.channels, values }
}

/// Split of the total padding for a kernel extent: `(before, after)`.
pub fn same_pad(extent: usize) -> (usize, usize) {
    let total = extent - 1;
    (total / 2, total - total / 2)
}

/// Run the network. When `record` is set, all intermediates needed for the
/// reverse pass are kept.
pub fn forward_pass(
    cfg: &NetworkConfig,
    params: &Params,
    input: &GridFunction,
    record: bool,
) -> Result<(GridFunction, Option<Tape>)> {
    if params.layers.len() != cfg.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers configured, {} parameterized",
            cfg.layers.len(),
            params.layers.len()
        )));
    }
    if !input.spec.domain.approx_eq(&cfg.input_domain) {
        return Err(Error::SpecMismatch("input domain does not match the configuration".into()));
    }
    let n_layers = cfg.layers.len();
    let mut acts: Vec<GridFunction> = Vec::with_capacity(n_layers + 1);
    acts.push(input.clone());
    let mut tapes = Vec::with_capacity(if record { n_layers } else { 0 });

    for (l, (layer, lp)) in cfg.layers.iter().zip(&params.layers).enumerate() {
        let x = acts.last().unwrap();
        let input_spec = x.spec;
        let input_channels = x.channels;

        let up = upsample(x, InterpFn { kind: layer.interp, factor: layer.s_u });
        let upsampled_spec = up.spec;
        let upsampled_channels = up.channels;

        let (conv_in, skip_tape) = match layer.skip_from {
            None => (up, None),
            Some(k) => {
                let src = &acts[k];
                if (src.spec.h - upsampled_spec.h).abs() > 1e-9 * upsampled_spec.h {
                    return Err(Error::LayerConfig {
                        layer: l,
                        msg: format!(
                            "skip source resolution {} does not match layer resolution {}",
                            src.spec.h, upsampled_spec.h
                        ),
                    });
                }
                let (cropped, top, left) =
                    center_crop(src, upsampled_spec.rows, upsampled_spec.cols).map_err(|e| {
                        Error::LayerConfig { layer: l, msg: format!("skip crop failed: {e}") }
                    })?;
                let st = SkipTape {
                    src_index: k,
                    crop_top: top,
                    crop_left: left,
                    src_spec: src.spec,
                    src_channels: src.channels,
                };
                (concat_channels(&up, &cropped), Some(st))
            }
        };
        if conv_in.channels != layer.in_channels {
            return Err(Error::LayerConfig {
                layer: l,
                msg: format!(
                    "convolution input has {} channels, layer expects {}",
                    conv_in.channels, layer.in_channels
                ),
            });
        }

        let (n, m) = (lp.kernel.rows, lp.kernel.cols);
        let (top, bottom) = same_pad(n);
        let (left, right) = same_pad(m);
        let padded = reflect_pad(&conv_in, (left, right, top, bottom))
            .map_err(|e| Error::LayerConfig { layer: l, msg: format!("{e}") })?;

        let mut conv_out = valid_conv(&padded, &lp.kernel, Some(&lp.bias))
            .map_err(|e| Error::LayerConfig { layer: l, msg: format!("{e}") })?;
        // re-anchor: the "same" convolution output aligns cell-for-cell with
        // its pre-pad input
        conv_out.spec = GridSpec { domain: conv_in.spec.domain, ..conv_out.spec };
        let pre_bn = conv_out;

        let (pre_act, bn_stats) = match &lp.bn {
            None => (pre_bn.clone(), None),
            Some(bn) => {
                let (mean, var) = crate::ops::batch_statistics(std::slice::from_ref(&pre_bn))?;
                let normed = batch_norm(std::slice::from_ref(&pre_bn), bn)?.pop().unwrap();
                (normed, Some((mean, var)))
            }
        };

        let is_last = l == n_layers - 1;
        let post_act = if is_last { pre_act.clone() } else { apply_activation(&pre_act, layer.activation) };
        if post_act.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::LayerConfig { layer: l, msg: "non-finite activation".into() });
        }

        let out = downsample(&post_act, PoolingFn { kind: layer.pooling, factor: layer.s_d })
            .map_err(|e| Error::LayerConfig { layer: l, msg: format!("{e}") })?;

        if record {
            tapes.push(LayerTape {
                input_spec,
                input_channels,
                upsampled_spec,
                upsampled_channels,
                skip: skip_tape,
                pad: (left, right, top, bottom),
                padded,
                pre_bn,
                bn_stats,
                pre_act,
                post_act,
            });
        }
        acts.push(out);
    }

    let output = acts.pop().unwrap();
    let tape = record.then(|| Tape { input: input.clone(), layers: tapes, output: output.clone() });
    Ok((output, tape))
}

/// Evaluate the network.
pub fn forward(cfg: &NetworkConfig, params: &Params, input: &GridFunction) -> Result<GridFunction> {
    Ok(forward_pass(cfg, params, input, false)?.0)
}

/// Evaluate and record the intermediates for the reverse pass.
pub fn forward_with_tape(cfg: &NetworkConfig, params: &Params, input: &GridFunction) -> Result<Tape> {
    Ok(forward_pass(cfg, params, input, true)?.1.unwrap())
}

/// Report on the hypotheses of the output-regularity guarantee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityPreconditions {
    pub continuity_guaranteed: bool,
    /// Holds under the additional assumption that the input is of bounded
    /// variation; the structural hypotheses are the same.
    pub c1_guaranteed_for_bv_input: bool,
    pub reasons: Vec<String>,
}

/// Continuity of the infinite-resolution output is guaranteed iff p = 2, the
/// activation is Lipschitz, and every input-to-output path (including skip
/// connections) crosses at least two convolutions.
pub fn check_regularity_preconditions(cfg: &NetworkConfig) -> RegularityPreconditions {
    let mut reasons = Vec::new();
    let mut ok = true;
    if (cfg.p - 2.0).abs() > 1e-12 {
        ok = false;
        reasons.push(format!("weight exponent p = {} (guarantee needs p = 2)", cfg.p));
    }
    for (l, layer) in cfg.layers.iter().enumerate() {
        if !layer.activation.lipschitz().is_finite() {
            ok = false;
            reasons.push(format!("layer {l}: activation is not Lipschitz"));
        }
    }
    // min number of convolutions over input-to-output paths
    let n = cfg.layers.len();
    let mut min_convs = vec![usize::MAX; n + 1];
    min_convs[0] = 0;
    for (l, layer) in cfg.layers.iter().enumerate() {
        let mut best = min_convs[l];
        if let Some(k) = layer.skip_from {
            if min_convs[k] < best {
                best = min_convs[k];
            }
        }
        min_convs[l + 1] = best.saturating_add(1);
    }
    let depth = min_convs[n];
    if depth < 2 {
        ok = false;
        if n < 2 {
            reasons.push(format!("network has only {n} convolutional layer(s); at least two are required"));
        } else {
            reasons.push(format!(
                "a skip connection creates an input-to-output path with only {depth} convolution(s); at least two are required"
            ));
        }
    }
    RegularityPreconditions {
        continuity_guaranteed: ok,
        c1_guaranteed_for_bv_input: ok,
        reasons,
    }
}

// --- parameter serialization -------------------------------------------------

/// Flat text format for [`Params`]: one named header line per tensor,
/// followed by its values in the order of [`Params::for_each_tensor`].
pub fn params_to_text(params: &Params) -> String {
    let mut s = String::new();
    for (l, lp) in params.layers.iter().enumerate() {
        let k = &lp.kernel;
        s.push_str(&format!(
            "kernel {l} {} {} {} {} {} {} {} {} {}\n",
            k.out_channels, k.in_channels, k.rows, k.cols, k.h, k.domain.x0, k.domain.y0, k.domain.width, k.domain.height
        ));
        push_values(&mut s, &k.values);
        s.push_str(&format!("bias {l} {}\n", lp.bias.len()));
        push_values(&mut s, &lp.bias);
        if let Some(bn) = &lp.bn {
            s.push_str(&format!("bn {l} {} {}\n", bn.gamma.len(), bn.eps));
            push_values(&mut s, &bn.gamma);
            push_values(&mut s, &bn.beta);
        }
    }
    s
}

fn push_values(s: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{v}"));
    }
    s.push('\n');
}

pub fn params_from_text(text: &str) -> Result<Params> {
    let mut layers: Vec<LayerParams> = Vec::new();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let perr = |msg: String| Error::Parse { offset: 0, msg };
    let parse_values = |line: &str, n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr(format!("bad value {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != n {
            return Err(perr(format!("expected {n} values, got {}", v.len())));
        }
        Ok(v)
    };
    while let Some(header) = lines.next() {
        let toks: Vec<&str> = header.split_whitespace().collect();
        match toks.as_slice() {
            ["kernel", l, oc, ic, rows, cols, h, x0, y0, w, hh] => {
                let l: usize = l.parse().map_err(|_| perr("bad layer index".into()))?;
                if l != layers.len() {
                    return Err(perr(format!("kernel for layer {l} out of order")));
                }
                let (oc, ic): (usize, usize) = (
                    oc.parse().map_err(|_| perr("bad out_channels".into()))?,
                    ic.parse().map_err(|_| perr("bad in_channels".into()))?,
                );
                let (rows, cols): (usize, usize) = (
                    rows.parse().map_err(|_| perr("bad rows".into()))?,
                    cols.parse().map_err(|_| perr("bad cols".into()))?,
                );
                let h: f64 = h.parse().map_err(|_| perr("bad h".into()))?;
                let domain = RectDomain::new(
                    x0.parse().map_err(|_| perr("bad x0".into()))?,
                    y0.parse().map_err(|_| perr("bad y0".into()))?,
                    w.parse().map_err(|_| perr("bad width".into()))?,
                    hh.parse().map_err(|_| perr("bad height".into()))?,
                )?;
                let mut kernel = ConvKernel::zeros(domain, h, oc, ic, rows, cols);
                kernel.values = parse_values(
                    lines.next().ok_or_else(|| perr("missing kernel values".into()))?,
                    oc * ic * rows * cols,
                )?;
                layers.push(LayerParams { kernel, bias: Vec::new(), bn: None });
            }
            ["bias", l, n] => {
                let l: usize = l.parse().map_err(|_| perr("bad layer index".into()))?;
                let n: usize = n.parse().map_err(|_| perr("bad bias length".into()))?;
                let lp = layers.get_mut(l).ok_or_else(|| perr(format!("bias before kernel {l}")))?;
                lp.bias = parse_values(lines.next().ok_or_else(|| perr("missing bias values".into()))?, n)?;
            }
            ["bn", l, n, eps] => {
                let l: usize = l.parse().map_err(|_| perr("bad layer index".into()))?;
                let n: usize = n.parse().map_err(|_| perr("bad bn length".into()))?;
                let eps: f64 = eps.parse().map_err(|_| perr("bad eps".into()))?;
                let gamma = parse_values(lines.next().ok_or_else(|| perr("missing gamma".into()))?, n)?;
                let beta = parse_values(lines.next().ok_or_else(|| perr("missing beta".into()))?, n)?;
                let lp = layers.get_mut(l).ok_or_else(|| perr(format!("bn before kernel {l}")))?;
                lp.bn = Some(BnParams { gamma, beta, eps });
            }
            _ => return Err(perr(format!("unrecognized header {header:?}"))),
        }
    }
    Ok(Params { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{project_pc, refine};
    use crate::rng::CounterRng;

    fn unit_input(n: usize, channels: usize, seed: u64) -> GridFunction {
        let spec = GridSpec::new(RectDomain::unit(), 1.0 / n as f64).unwrap();
        let mut rng = CounterRng::new(seed, 0);
        let values = (0..channels * spec.n_cells()).map(|_| rng.next_normal()).collect();
        GridFunction::from_values(spec, channels, values).unwrap()
    }

    fn randomize(params: &mut Params, seed: u64, scale: f64) {
        let mut rng = CounterRng::new(seed, 1);
        params.for_each_tensor_mut(|kind, t| {
            if matches!(kind, TensorKind::Kernel | TensorKind::Bias) {
                for v in t {
                    *v = rng.next_normal() * scale;
                }
            }
        });
    }

    #[test]
    fn identity_kernel_net_is_identity() {
        // one layer, 1x1 kernel with value 1/h^2, bias 0, identity activation
        let n = 8;
        let h = 1.0 / n as f64;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (1, 1), 1, 1, Activation::Identity)],
        );
        cfg.validate(h).unwrap();
        let mut params = Params::zeros(&cfg, h);
        params.layers[0].kernel.values[0] = 1.0 / (h * h);
        let input = unit_input(n, 1, 3);
        let out = forward(&cfg, &params, &input).unwrap();
        assert_eq!(out.spec.rows, n);
        for (a, b) in input.values.iter().zip(&out.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Straight-line reference evaluator: upsample, pad, conv, bias, bn,
    /// activation, downsample, written directly against the layer equation
    /// with no shared code path beyond the primitives it checks.
    fn reference_forward(cfg: &NetworkConfig, params: &Params, input: &GridFunction) -> GridFunction {
        let mut acts = vec![input.clone()];
        let last = cfg.layers.len() - 1;
        for (l, (layer, lp)) in cfg.layers.iter().zip(&params.layers).enumerate() {
            let x = acts.last().unwrap().clone();
            let up = upsample(&x, InterpFn { kind: layer.interp, factor: layer.s_u });
            let merged = match layer.skip_from {
                None => up,
                Some(k) => {
                    let (c, _, _) = center_crop(&acts[k], up.spec.rows, up.spec.cols).unwrap();
                    concat_channels(&up, &c)
                }
            };
            let (n, m) = (lp.kernel.rows, lp.kernel.cols);
            let padded = reflect_pad(&merged, (same_pad(m).0, same_pad(m).1, same_pad(n).0, same_pad(n).1)).unwrap();
            let mut z = valid_conv(&padded, &lp.kernel, Some(&lp.bias)).unwrap();
            z.spec = GridSpec { domain: merged.spec.domain, ..z.spec };
            let z = match &lp.bn {
                Some(bn) => batch_norm(std::slice::from_ref(&z), bn).unwrap().pop().unwrap(),
                None => z,
            };
            let z = if l == last { z } else { apply_activation(&z, layer.activation) };
            acts.push(downsample(&z, PoolingFn { kind: layer.pooling, factor: layer.s_d }).unwrap());
        }
        acts.pop().unwrap()
    }

    #[test]
    fn forward_matches_reference_on_two_layer_net() {
        let n = 8;
        let h = 1.0 / n as f64;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![
                LayerSpec::conv(h, (3, 3), 1, 2, Activation::Relu),
                LayerSpec::conv(h, (3, 3), 2, 1, Activation::Identity),
            ],
        );
        let mut params = Params::zeros(&cfg, h);
        randomize(&mut params, 17, 4.0);
        let input = unit_input(n, 1, 5);
        let out = forward(&cfg, &params, &input).unwrap();
        let reference = reference_forward(&cfg, &params, &input);
        assert_eq!(out.values, reference.values);
    }

    #[test]
    fn strided_conv_equals_conv_plus_avg_downsampling() {
        // stride-2 correlation oracle vs conv followed by average pooling is
        // exact only for the top-left-of-block sampling variant; with average
        // pooling the downsampled output is the block mean of the dense conv.
        let n = 8;
        let h = 1.0 / n as f64;
        let mut layer = LayerSpec::conv(h, (3, 3), 1, 1, Activation::Identity);
        layer.s_d = 2;
        layer.pooling = PoolKind::Average;
        let cfg = NetworkConfig::new(RectDomain::unit(), vec![layer]);
        let mut params = Params::zeros(&cfg, h);
        randomize(&mut params, 9, 2.0);
        let input = unit_input(n, 1, 7);
        let out = forward(&cfg, &params, &input).unwrap();

        // oracle: dense same-conv, then average each 2x2 block
        let padded = reflect_pad(&input, (1, 1, 1, 1)).unwrap();
        let dense = valid_conv(&padded, &params.layers[0].kernel, Some(&params.layers[0].bias)).unwrap();
        for i in 0..n / 2 {
            for j in 0..n / 2 {
                let mean = (dense.at(0, 2 * i, 2 * j)
                    + dense.at(0, 2 * i, 2 * j + 1)
                    + dense.at(0, 2 * i + 1, 2 * j)
                    + dense.at(0, 2 * i + 1, 2 * j + 1))
                    / 4.0;
                assert!((out.at(0, i, j) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn instantiate_preserves_function_space_norm_and_identity_at_gamma_1() {
        let n = 8;
        let h = 1.0 / n as f64;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![
                LayerSpec::conv(h, (3, 3), 1, 2, Activation::Relu),
                LayerSpec::conv(h, (3, 3), 2, 1, Activation::Identity),
            ],
        );
        let mut params = Params::zeros(&cfg, h);
        randomize(&mut params, 23, 1.0);

        let (cfg1, params1) = instantiate_at_resolution(&cfg, &params, 1);
        assert_eq!(cfg1, cfg);
        assert_eq!(params1, params);

        let (cfg2, params2) = instantiate_at_resolution(&cfg, &params, 2);
        assert_eq!(cfg2.layers[0].kernel_px, (6, 6));
        assert_eq!(params2.layers[0].kernel.rows, 6);
        let a = weight_norm(&params, WeightNormMode::FunctionSpace);
        let b = weight_norm(&params2, WeightNormMode::FunctionSpace);
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
        // refined config validates at the refined input resolution
        cfg2.validate(h / 2.0).unwrap();
    }

    #[test]
    fn weight_norm_single_kernel_formulas() {
        let h = 0.25;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (1, 1), 1, 1, Activation::Identity)],
        );
        let mut params = Params::zeros(&cfg, h);
        params.layers[0].kernel.values[0] = 3.0;
        let fs = weight_norm(&params, WeightNormMode::FunctionSpace);
        assert!((fs - h * 3.0).abs() < 1e-15);
        let ms = weight_norm(&params, WeightNormMode::MeanSquare);
        assert!((ms - 9.0).abs() < 1e-15);
        let zero = Params::zeros(&cfg, h);
        assert_eq!(weight_norm(&zero, WeightNormMode::FunctionSpace), 0.0);
        assert_eq!(weight_norm(&zero, WeightNormMode::MeanSquare), 0.0);
    }

    #[test]
    fn regularity_preconditions() {
        let h = 1.0 / 8.0;
        let one = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (3, 3), 1, 1, Activation::Identity)],
        );
        assert!(!check_regularity_preconditions(&one).continuity_guaranteed);

        let three = NetworkConfig::new(
            RectDomain::unit(),
            vec![
                LayerSpec::conv(h, (3, 3), 1, 2, Activation::Relu),
                LayerSpec::conv(h, (3, 3), 2, 2, Activation::Relu),
                LayerSpec::conv(h, (3, 3), 2, 1, Activation::Identity),
            ],
        );
        let r = check_regularity_preconditions(&three);
        assert!(r.continuity_guaranteed, "{:?}", r.reasons);
        assert!(r.c1_guaranteed_for_bv_input);

        let mut skip_net = three.clone();
        skip_net.layers[2].skip_from = Some(0);
        skip_net.layers[2].in_channels = 3;
        let r = check_regularity_preconditions(&skip_net);
        assert!(!r.continuity_guaranteed);
        assert!(r.reasons.iter().any(|m| m.contains("skip")), "{:?}", r.reasons);
    }

    #[test]
    fn forward_converges_under_refinement_for_smooth_input() {
        // instantiate at gamma = 1, 2 and compare on a refined smooth input
        let n = 8;
        let h = 1.0 / n as f64;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![
                LayerSpec::conv(h, (3, 3), 1, 2, Activation::LeakyRelu { alpha: 0.1 }),
                LayerSpec::conv(h, (3, 3), 2, 1, Activation::Identity),
            ],
        );
        let mut params = Params::zeros(&cfg, h);
        randomize(&mut params, 31, 1.0);
        let f = |x: f64, y: f64, _: usize| (2.0 * x + 0.5).sin() * (3.0 * y).cos();
        let spec = GridSpec::new(RectDomain::unit(), h).unwrap();
        let u1 = project_pc(f, spec, 1).unwrap();
        let o1 = forward(&cfg, &params, &u1).unwrap();
        let (cfg2, params2) = instantiate_at_resolution(&cfg, &params, 2);
        let o2 = forward(&cfg2, &params2, &refine(&u1, 2)).unwrap();
        let d12 = crate::grid::sup_diff(&o1, &o2).unwrap();
        assert!(d12.is_finite());
        assert!(d12 < 1.0, "refinement difference unexpectedly large: {d12}");
    }

    #[test]
    fn params_text_round_trip() {
        let h = 1.0 / 8.0;
        let mut l0 = LayerSpec::conv(h, (3, 3), 1, 2, Activation::Relu);
        l0.use_bn = true;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![l0, LayerSpec::conv(h, (1, 1), 2, 1, Activation::Identity)],
        );
        let mut params = Params::zeros(&cfg, h);
        randomize(&mut params, 77, 2.0);
        let text = params_to_text(&params);
        let back = params_from_text(&text).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn network_config_json_round_trip() {
        let h = 1.0 / 8.0;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (3, 3), 1, 1, Activation::LeakyRelu { alpha: 0.2 })],
        );
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        assert!(json.contains("kernel_support"), "{json}");
        let back: NetworkConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validate_catches_inconsistent_kernel_grids() {
        let h = 1.0 / 8.0;
        let mut layer = LayerSpec::conv(h, (3, 3), 1, 1, Activation::Identity);
        layer.kernel_px = (5, 5); // support no longer matches
        let cfg = NetworkConfig::new(RectDomain::unit(), vec![layer]);
        assert!(matches!(cfg.validate(h), Err(Error::LayerConfig { layer: 0, .. })));
    }
}
