//! Losses, the regularized objective, initialization, and the optimizer.
//!
//! The objective for a batch is `sum_j loss_j + lambda * |w|_fs + nu * |b|`,
//! where `|w|_fs` is the function-space weight norm over all kernels and
//! `|b|` the Euclidean norm over all biases. Weight decay is applied in
//! coupled form (added to the gradient before the Adam moments), matching
//! standard L2 decay; to keep the effective function-space penalty fixed
//! when the grid is refined by `gamma`, scale the decay by `1 / gamma^2`
//! ([`compensate_weight_decay`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Grads};
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::network::{
    forward_with_tape, weight_norm, NetworkConfig, Params, TensorKind, WeightNormMode,
};
use crate::rng::CounterRng;

/// Loss selection, serializable for experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over all cells and channels of the squared difference.
    MseMean,
    /// `(1/q) * sum h^2 |pred - target|^q` (function-space q-norm to the q).
    QNorm { q: f64 },
    /// Per-cell softmax over channels against one-hot targets, weighted by a
    /// spatial map `g` and the cell area.
    WeightedCrossEntropy,
}

/// Loss value and its gradient with respect to the prediction.
pub fn loss_and_grad(
    kind: LossKind,
    pred: &GridFunction,
    target: &GridFunction,
    weight_map: Option<&GridFunction>,
) -> Result<(f64, GridFunction)> {
    if pred.values.len() != target.values.len() || pred.channels != target.channels {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}ch/{} values vs target {}ch/{} values",
            pred.channels,
            pred.values.len(),
            target.channels,
            target.values.len()
        )));
    }
    match kind {
        LossKind::MseMean => {
            let count = pred.values.len() as f64;
            let mut grad = pred.clone();
            let mut val = 0.0;
            for (g, t) in grad.values.iter_mut().zip(&target.values) {
                let d = *g - t;
                val += d * d;
                *g = 2.0 * d / count;
            }
            Ok((val / count, grad))
        }
        LossKind::QNorm { q } => {
            if q < 1.0 {
                return Err(Error::Config(format!("q-norm exponent {q} must be >= 1")));
            }
            let h2 = pred.spec.h * pred.spec.h;
            let mut grad = pred.clone();
            let mut val = 0.0;
            for (g, t) in grad.values.iter_mut().zip(&target.values) {
                let d = *g - t;
                val += d.abs().powf(q);
                *g = h2 * d.abs().powf(q - 1.0) * d.signum();
            }
            Ok((h2 * val / q, grad))
        }
        LossKind::WeightedCrossEntropy => {
            let c = pred.channels;
            if c < 2 {
                return Err(Error::Config("cross entropy needs at least 2 channels".into()));
            }
            let n = pred.spec.n_cells();
            let h2 = pred.spec.h * pred.spec.h;
            if let Some(g) = weight_map {
                if g.channels != 1 || g.spec.n_cells() != n {
                    return Err(Error::ShapeMismatch("weight map must be one channel on the prediction grid".into()));
                }
            }
            let mut grad = GridFunction::zeros(pred.spec, c);
            let mut val = 0.0;
            let mut p = vec![0.0; c];
            let cols = pred.spec.cols;
            for cell in 0..n {
                let bad = || Error::InvalidOneHot { row: cell / cols, col: cell % cols };
                // validate the one-hot target for this cell
                let mut hot = None;
                for ch in 0..c {
                    let y = target.values[ch * n + cell];
                    if y == 1.0 {
                        if hot.replace(ch).is_some() {
                            return Err(bad());
                        }
                    } else if y != 0.0 {
                        return Err(bad());
                    }
                }
                let hot = hot.ok_or_else(bad)?;
                let w = h2 * weight_map.map_or(1.0, |g| g.values[cell]);
                // max-subtracted softmax
                let mut zmax = f64::NEG_INFINITY;
                for ch in 0..c {
                    zmax = zmax.max(pred.values[ch * n + cell]);
                }
                let mut zsum = 0.0;
                for ch in 0..c {
                    p[ch] = (pred.values[ch * n + cell] - zmax).exp();
                    zsum += p[ch];
                }
                for q in p.iter_mut() {
                    *q /= zsum;
                }
                val -= w * p[hot].ln();
                for ch in 0..c {
                    let y = if ch == hot { 1.0 } else { 0.0 };
                    grad.values[ch * n + cell] = w * (p[ch] - y);
                }
            }
            Ok((val, grad))
        }
    }
}

/// Regularization terms of the objective: `lambda * |w|_fs + nu * |b|`.
pub fn regularizer(params: &Params, lambda: f64, nu: f64) -> f64 {
    let wn = weight_norm(params, WeightNormMode::FunctionSpace);
    let bn: f64 = params
        .layers
        .iter()
        .flat_map(|lp| lp.bias.iter())
        .map(|b| b * b)
        .sum::<f64>()
        .sqrt();
    lambda * wn + nu * bn
}

/// Add the analytic gradient of [`regularizer`] into `grads`.
pub fn add_regularizer_grads(grads: &mut Grads, params: &Params, lambda: f64, nu: f64) {
    if lambda != 0.0 {
        let wn = weight_norm(params, WeightNormMode::FunctionSpace);
        if wn > 0.0 {
            for (lg, lp) in grads.layers.iter_mut().zip(&params.layers) {
                let scale = lambda * lp.kernel.h * lp.kernel.h / wn;
                for (g, w) in lg.kernel.iter_mut().zip(&lp.kernel.values) {
                    *g += scale * w;
                }
            }
        }
    }
    if nu != 0.0 {
        let bn: f64 = params
            .layers
            .iter()
            .flat_map(|lp| lp.bias.iter())
            .map(|b| b * b)
            .sum::<f64>()
            .sqrt();
        if bn > 0.0 {
            for (lg, lp) in grads.layers.iter_mut().zip(&params.layers) {
                for (g, b) in lg.bias.iter_mut().zip(&lp.bias) {
                    *g += nu * b / bn;
                }
            }
        }
    }
}

/// Decay strength that keeps the function-space penalty unchanged when the
/// kernel grids are refined by `gamma` (pixel values then enter the norm
/// with weight `h^2 / gamma^2` each, but there are `gamma^2` times as many).
pub fn compensate_weight_decay(weight_decay: f64, gamma: usize) -> f64 {
    weight_decay / (gamma * gamma) as f64
}

/// Adam hyperparameters; decay is coupled (added to the raw gradient).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Whether decay also applies to biases and BN parameters.
    pub decay_bias_and_bn: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decay_bias_and_bn: true }
    }
}

/// First and second moments, aligned with the tensor iteration order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let mut m = Vec::new();
        params.for_each_tensor(|_, t| m.push(vec![0.0; t.len()]));
        let v = m.clone();
        OptimizerState { t: 0, m, v }
    }
}

/// One Adam update in place. Returns an error (leaving `params` partially
/// updated is avoided by checking first) if the gradient is not finite.
pub fn adam_step(
    params: &mut Params,
    grads: &Grads,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut flat: Vec<&[f64]> = Vec::with_capacity(state.m.len());
    for lg in &grads.layers {
        flat.push(&lg.kernel);
        flat.push(&lg.bias);
        if let Some(g) = &lg.bn_gamma {
            flat.push(g);
        }
        if let Some(b) = &lg.bn_beta {
            flat.push(b);
        }
    }
    let step_no = state.t + 1;
    for t in &flat {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate { step: step_no });
        }
    }
    state.t = step_no;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let mut i = 0;
    let mut result = Ok(());
    params.for_each_tensor_mut(|kind, p| {
        if result.is_err() {
            return;
        }
        let g = flat[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        if g.len() != p.len() {
            result = Err(Error::ShapeMismatch(format!(
                "gradient tensor {i} has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
            return;
        }
        let decay = if cfg.decay_bias_and_bn || kind == TensorKind::Kernel {
            cfg.weight_decay
        } else {
            0.0
        };
        for e in 0..p.len() {
            let grad = g[e] + decay * p[e];
            m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * grad;
            v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * grad * grad;
            p[e] -= cfg.lr * (m[e] / bc1) / ((v[e] / bc2).sqrt() + cfg.eps);
        }
        i += 1;
    });
    result
}

/// Fan-in uniform initialization of the kernels, scaled by `1 / h^2` so the
/// quadrature-weighted convolution has the conventional activation variance.
/// Biases start at zero, BN at identity. Deterministic in `seed`.
pub fn init_params(cfg: &NetworkConfig, h0: f64, seed: u64) -> Result<Params> {
    cfg.validate(h0)?;
    let mut params = Params::zeros(cfg, h0);
    for (l, (lp, spec)) in params.layers.iter_mut().zip(&cfg.layers).enumerate() {
        let fan_in = (spec.in_channels * spec.kernel_px.0 * spec.kernel_px.1) as f64;
        let h = lp.kernel.h;
        let bound = (6.0 / fan_in).sqrt() / (h * h);
        let mut rng = CounterRng::new(seed, l as u64);
        for w in &mut lp.kernel.values {
            *w = rng.next_range(-bound, bound);
        }
    }
    Ok(params)
}

/// Training configuration for the supervised loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-epoch record of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch (regularizer excluded).
    pub train_loss: f64,
    pub objective: f64,
    pub weight_norm_fs: f64,
    pub weight_norm_ms: f64,
    /// max_jump of the network output on a fixed probe input, if one was
    /// supplied.
    pub probe_max_jump: Option<f64>,
}

/// Loop result; on a non-finite loss or update the loop stops and reports
/// the failing step, keeping the history gathered so far.
#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRow>,
    pub aborted: Option<Error>,
}

/// Minibatch Adam over `(input, target)` pairs. Batch gradients are averaged;
/// the regularizer gradient is added once per step.
pub fn train_loop(
    net: &NetworkConfig,
    params: &mut Params,
    data: &[(GridFunction, GridFunction)],
    tc: &TrainConfig,
    probe: Option<&GridFunction>,
) -> TrainOutcome {
    let mut history = Vec::with_capacity(tc.epochs);
    if data.is_empty() {
        return TrainOutcome { history, aborted: Some(Error::EmptyBatch) };
    }
    let mut state = OptimizerState::new(params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = CounterRng::new(tc.seed, u64::MAX);
    let bs = tc.batch_size.max(1);

    for epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(bs) {
            let mut acc: Option<Grads> = None;
            let mut ok = Ok(());
            for &idx in batch {
                let (input, target) = &data[idx];
                let step = state.t + 1;
                let r = (|| -> Result<(f64, Grads)> {
                    let tape = forward_with_tape(net, params, input)?;
                    let (val, d_out) = loss_and_grad(tc.loss, &tape.output, target, None)?;
                    if !val.is_finite() {
                        return Err(Error::NonFiniteLoss { step });
                    }
                    let g = backward(net, params, tape, &d_out)?;
                    Ok((val, g))
                })();
                match r {
                    Ok((val, g)) => {
                        epoch_loss += val;
                        match &mut acc {
                            None => acc = Some(g),
                            Some(a) => a.axpy(1.0, &g),
                        }
                    }
                    Err(e) => {
                        ok = Err(e);
                        break;
                    }
                }
            }
            let res = ok.and_then(|_| {
                let mut g = acc.take().expect("non-empty batch");
                g.scale(1.0 / batch.len() as f64);
                add_regularizer_grads(&mut g, params, tc.lambda, tc.nu);
                adam_step(params, &g, &mut state, &tc.adam)
            });
            if let Err(e) = res {
                return TrainOutcome { history, aborted: Some(e) };
            }
        }
        let train_loss = epoch_loss / data.len() as f64;
        let probe_max_jump = probe.and_then(|p| {
            crate::network::forward(net, params, p).ok().map(|o| crate::analysis::max_jump(&o))
        });
        history.push(EpochRow {
            epoch,
            train_loss,
            objective: epoch_loss + regularizer(params, tc.lambda, tc.nu),
            weight_norm_fs: weight_norm(params, WeightNormMode::FunctionSpace),
            weight_norm_ms: weight_norm(params, WeightNormMode::MeanSquare),
            probe_max_jump,
        });
    }
    TrainOutcome { history, aborted: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, RectDomain};
    use crate::network::LayerSpec;
    use crate::ops::Activation;

    fn gf(n: usize, channels: usize, seed: u64) -> GridFunction {
        let spec = GridSpec::new(RectDomain::unit(), 1.0 / n as f64).unwrap();
        let mut rng = CounterRng::new(seed, 0);
        let values = (0..channels * spec.n_cells()).map(|_| rng.next_normal()).collect();
        GridFunction::from_values(spec, channels, values).unwrap()
    }

    fn fd_loss_grad(
        kind: LossKind,
        pred: &GridFunction,
        target: &GridFunction,
        wm: Option<&GridFunction>,
    ) {
        let (_, grad) = loss_and_grad(kind, pred, target, wm).unwrap();
        for e in (0..pred.values.len()).step_by(5) {
            let mut p = pred.clone();
            p.values[e] += 1e-6;
            let lp = loss_and_grad(kind, &p, target, wm).unwrap().0;
            p.values[e] -= 2e-6;
            let lm = loss_and_grad(kind, &p, target, wm).unwrap().0;
            let numeric = (lp - lm) / 2e-6;
            let a = grad.values[e];
            assert!(
                (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8) < 1e-5,
                "{kind:?} at {e}: analytic {a}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn mse_mean_value_and_grad() {
        let spec = GridSpec::new(RectDomain::unit(), 0.5).unwrap();
        let pred = GridFunction::from_values(spec, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let target = GridFunction::from_values(spec, 1, vec![0.0, 2.0, 3.0, 2.0]).unwrap();
        let (v, g) = loss_and_grad(LossKind::MseMean, &pred, &target, None).unwrap();
        assert!((v - (1.0 + 0.0 + 0.0 + 4.0) / 4.0).abs() < 1e-15);
        assert!((g.values[0] - 2.0 * 1.0 / 4.0).abs() < 1e-15);
        fd_loss_grad(LossKind::MseMean, &gf(6, 1, 1), &gf(6, 1, 2), None);
    }

    #[test]
    fn qnorm_value_and_grad() {
        // q = 2: (1/2) h^2 sum d^2
        let spec = GridSpec::new(RectDomain::unit(), 0.5).unwrap();
        let pred = GridFunction::from_values(spec, 1, vec![1.0, 0.0, 0.0, -2.0]).unwrap();
        let target = GridFunction::zeros(spec, 1);
        let (v, _) = loss_and_grad(LossKind::QNorm { q: 2.0 }, &pred, &target, None).unwrap();
        assert!((v - 0.5 * 0.25 * 5.0).abs() < 1e-15);
        fd_loss_grad(LossKind::QNorm { q: 2.0 }, &gf(6, 1, 3), &gf(6, 1, 4), None);
        fd_loss_grad(LossKind::QNorm { q: 3.0 }, &gf(6, 1, 5), &gf(6, 1, 6), None);
        assert!(loss_and_grad(LossKind::QNorm { q: 0.5 }, &pred, &target, None).is_err());
    }

    #[test]
    fn cross_entropy_value_grad_and_one_hot_validation() {
        let n = 4;
        let spec = GridSpec::new(RectDomain::unit(), 1.0 / n as f64).unwrap();
        let cells = spec.n_cells();
        // uniform logits, 2 channels: per-cell loss is ln 2
        let pred = GridFunction::zeros(spec, 2);
        let mut target = GridFunction::zeros(spec, 2);
        for cell in 0..cells {
            target.values[cell] = 1.0; // channel 0 hot everywhere
        }
        let h2 = spec.h * spec.h;
        let (v, g) = loss_and_grad(LossKind::WeightedCrossEntropy, &pred, &target, None).unwrap();
        assert!((v - h2 * cells as f64 * (2.0f64).ln()).abs() < 1e-12);
        assert!((g.values[0] - h2 * (0.5 - 1.0)).abs() < 1e-15);

        let mut rng = CounterRng::new(9, 0);
        let mut pred2 = gf(n, 3, 7);
        for v in &mut pred2.values {
            *v *= 2.0;
        }
        let mut target3 = GridFunction::zeros(spec, 3);
        for cell in 0..cells {
            let hot = rng.next_index(3);
            target3.values[hot * cells + cell] = 1.0;
        }
        let wm = gf(n, 1, 8).map(|x| 1.0 + x * x);
        fd_loss_grad(LossKind::WeightedCrossEntropy, &pred2, &target3, Some(&wm));

        let mut bad = target.clone();
        bad.values[0] = 0.5;
        assert!(matches!(
            loss_and_grad(LossKind::WeightedCrossEntropy, &pred, &bad, None),
            Err(Error::InvalidOneHot { .. })
        ));
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let h = 1.0 / 8.0;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![
                LayerSpec::conv(h, (3, 3), 1, 2, Activation::Relu),
                LayerSpec::conv(h, (3, 3), 2, 1, Activation::Identity),
            ],
        );
        let params = init_params(&cfg, h, 3).unwrap();
        let mut params = params;
        for lp in &mut params.layers {
            for (i, b) in lp.bias.iter_mut().enumerate() {
                *b = 0.3 * (i as f64 + 1.0);
            }
        }
        let (lambda, nu) = (0.7, 0.3);
        let input = gf(8, 1, 1);
        let mut grads = Grads::zeros_like(&params, input.spec, 1);
        add_regularizer_grads(&mut grads, &params, lambda, nu);
        // exactness of the squared-norm building block: at lambda = 2*|w|_fs
        // the kernel gradient is exactly 2 h^2 w
        let wn = weight_norm(&params, WeightNormMode::FunctionSpace);
        let mut sq = Grads::zeros_like(&params, input.spec, 1);
        add_regularizer_grads(&mut sq, &params, 2.0 * wn, 0.0);
        for (lg, lp) in sq.layers.iter().zip(&params.layers) {
            let h2 = lp.kernel.h * lp.kernel.h;
            for (g, w) in lg.kernel.iter().zip(&lp.kernel.values) {
                assert_eq!(*g, 2.0 * h2 * w);
            }
        }
        // finite differences on the full regularizer
        let mut i = 0;
        let mut flat: Vec<Vec<f64>> = Vec::new();
        grads.for_each_tensor(|_, t| flat.push(t.to_vec()));
        params.clone().for_each_tensor(|_, t| {
            for e in (0..t.len()).step_by(3) {
                let mut p = params.clone();
                let mut j = 0;
                p.for_each_tensor_mut(|_, tt| {
                    if j == i {
                        tt[e] += 1e-6;
                    }
                    j += 1;
                });
                let rp = regularizer(&p, lambda, nu);
                let mut m = params.clone();
                let mut j = 0;
                m.for_each_tensor_mut(|_, tt| {
                    if j == i {
                        tt[e] -= 1e-6;
                    }
                    j += 1;
                });
                let rm = regularizer(&m, lambda, nu);
                let numeric = (rp - rm) / 2e-6;
                let a = flat[i][e];
                assert!(
                    (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8) < 1e-4,
                    "tensor {i} elem {e}: {a} vs {numeric}"
                );
            }
            i += 1;
        });
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let h = 0.5;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (1, 1), 1, 1, Activation::Identity)],
        );
        let mut params = Params::zeros(&cfg, h);
        let input = GridFunction::zeros(GridSpec::new(RectDomain::unit(), h).unwrap(), 1);
        let mut grads = Grads::zeros_like(&params, input.spec, 1);
        grads.layers[0].kernel[0] = 1.0;
        let ac = AdamConfig { lr: 0.01, ..Default::default() };
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &grads, &mut state, &ac).unwrap();
        // bias-corrected first step: -lr * g / (|g| + eps)
        let expect = -0.01 * 1.0 / (1.0 + ac.eps);
        assert!((params.layers[0].kernel.values[0] - expect).abs() < 1e-12);
        assert_eq!(params.layers[0].bias[0], 0.0);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn coupled_weight_decay_shifts_the_effective_gradient() {
        let h = 0.5;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (1, 1), 1, 1, Activation::Identity)],
        );
        let input_spec = GridSpec::new(RectDomain::unit(), h).unwrap();
        let wd = 0.1;
        let mut with_decay = Params::zeros(&cfg, h);
        with_decay.layers[0].kernel.values[0] = 2.0;
        with_decay.layers[0].bias[0] = 3.0;
        let mut manual = with_decay.clone();

        let mut grads = Grads::zeros_like(&with_decay, input_spec, 1);
        grads.layers[0].kernel[0] = 0.5;
        grads.layers[0].bias[0] = 0.5;
        let ac = AdamConfig { lr: 0.01, weight_decay: wd, decay_bias_and_bn: false, ..Default::default() };
        let mut s1 = OptimizerState::new(&with_decay);
        adam_step(&mut with_decay, &grads, &mut s1, &ac).unwrap();

        // manual: decay folded into the kernel gradient only
        let mut g2 = Grads::zeros_like(&manual, input_spec, 1);
        g2.layers[0].kernel[0] = 0.5 + wd * 2.0;
        g2.layers[0].bias[0] = 0.5;
        let ac0 = AdamConfig { lr: 0.01, ..Default::default() };
        let mut s2 = OptimizerState::new(&manual);
        adam_step(&mut manual, &g2, &mut s2, &ac0).unwrap();
        assert_eq!(with_decay, manual);
    }

    #[test]
    fn weight_decay_compensation() {
        assert_eq!(compensate_weight_decay(0.01, 1), 0.01);
        assert_eq!(compensate_weight_decay(0.01, 2), 0.0025);
        assert_eq!(compensate_weight_decay(0.5, 4), 0.03125);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let h = 1.0 / 8.0;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![
                LayerSpec::conv(h, (3, 3), 1, 4, Activation::Relu),
                LayerSpec::conv(h, (3, 3), 4, 1, Activation::Identity),
            ],
        );
        let a = init_params(&cfg, h, 42).unwrap();
        let b = init_params(&cfg, h, 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, h, 43).unwrap();
        assert_ne!(a, c);
        let fan_in = 9.0;
        let bound = (6.0f64 / fan_in).sqrt() / (h * h);
        for w in &a.layers[0].kernel.values {
            assert!(w.abs() <= bound);
        }
        assert!(a.layers[0].kernel.values.iter().any(|w| w.abs() > 0.01 * bound));
        assert!(a.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn training_reduces_loss_on_a_small_regression_problem() {
        let n = 8;
        let h = 1.0 / n as f64;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![
                LayerSpec::conv(h, (3, 3), 1, 4, Activation::LeakyRelu { alpha: 0.1 }),
                LayerSpec::conv(h, (3, 3), 4, 1, Activation::Identity),
            ],
        );
        let mut params = init_params(&cfg, h, 7).unwrap();
        // target: blur-like map of the input
        let data: Vec<(GridFunction, GridFunction)> = (0..8)
            .map(|i| {
                let u = gf(n, 1, 100 + i);
                let t = u.map(|x| 0.5 * x);
                (u, t)
            })
            .collect();
        let tc = TrainConfig {
            loss: LossKind::MseMean,
            lambda: 0.0,
            nu: 0.0,
            adam: AdamConfig { lr: 0.02, ..Default::default() },
            epochs: 80,
            batch_size: 4,
            seed: 1,
        };
        let probe = gf(n, 1, 200);
        let out = train_loop(&cfg, &mut params, &data, &tc, Some(&probe));
        assert!(out.aborted.is_none(), "{:?}", out.aborted);
        assert!(out.history.iter().all(|r| r.probe_max_jump.unwrap().is_finite()));
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < 0.5 * first, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn non_finite_gradient_aborts_with_history() {
        let h = 0.5;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (1, 1), 1, 1, Activation::Identity)],
        );
        let mut params = Params::zeros(&cfg, h);
        params.layers[0].kernel.values[0] = f64::INFINITY;
        let spec = GridSpec::new(RectDomain::unit(), h).unwrap();
        let data = vec![(GridFunction::constant(spec, 1, 1.0), GridFunction::zeros(spec, 1))];
        let tc = TrainConfig {
            loss: LossKind::MseMean,
            lambda: 0.0,
            nu: 0.0,
            adam: AdamConfig::default(),
            epochs: 3,
            batch_size: 1,
            seed: 0,
        };
        let out = train_loop(&cfg, &mut params, &data, &tc, None);
        assert!(out.aborted.is_some());
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_params_unchanged() {
        let n = 4;
        let h = 1.0 / n as f64;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (3, 3), 1, 1, Activation::Identity)],
        );
        let initial = init_params(&cfg, h, 5).unwrap();
        let data = vec![(gf(n, 1, 1), gf(n, 1, 2))];
        let mut tc = TrainConfig {
            loss: LossKind::MseMean,
            lambda: 0.0,
            nu: 0.0,
            adam: AdamConfig::default(),
            epochs: 0,
            batch_size: 1,
            seed: 0,
        };
        let mut p = initial.clone();
        let out = train_loop(&cfg, &mut p, &data, &tc, None);
        assert!(out.history.is_empty() && out.aborted.is_none());
        assert_eq!(p, initial);

        tc.epochs = 5;
        tc.adam.lr = 0.0;
        let mut p = initial.clone();
        let out = train_loop(&cfg, &mut p, &data, &tc, None);
        assert_eq!(out.history.len(), 5);
        assert_eq!(p, initial);
        let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn pure_decay_shrinks_the_weight_norm_monotonically() {
        // zero inputs and targets: the data gradient vanishes, decay remains
        let n = 4;
        let h = 1.0 / n as f64;
        let cfg = NetworkConfig::new(
            RectDomain::unit(),
            vec![LayerSpec::conv(h, (3, 3), 1, 1, Activation::Identity)],
        );
        let mut params = init_params(&cfg, h, 9).unwrap();
        let spec = GridSpec::new(RectDomain::unit(), h).unwrap();
        let data = vec![(GridFunction::zeros(spec, 1), GridFunction::zeros(spec, 1))];
        let tc = TrainConfig {
            loss: LossKind::MseMean,
            lambda: 0.0,
            nu: 0.0,
            adam: AdamConfig { lr: 1e-3, weight_decay: 0.1, ..Default::default() },
            epochs: 10,
            batch_size: 1,
            seed: 0,
        };
        let out = train_loop(&cfg, &mut params, &data, &tc, None);
        assert!(out.aborted.is_none());
        let norms: Vec<f64> = out.history.iter().map(|r| r.weight_norm_fs).collect();
        for w in norms.windows(2) {
            assert!(w[1] < w[0], "{norms:?}");
        }
    }

    #[test]
    fn decay_compensation_composes_multiplicatively() {
        let wd = 0.37;
        for (g1, g2) in [(2usize, 3usize), (1, 4), (3, 3)] {
            let direct = compensate_weight_decay(wd, g1 * g2);
            let chained = compensate_weight_decay(compensate_weight_decay(wd, g1), g2);
            assert!((direct - chained).abs() < 1e-18);
        }
    }
}
