//! Layer primitives: h^2-weighted valid convolution, reflection padding,
//! down/upsampling, pointwise activations, and batch normalization.
//!
//! All operations are pure functions over immutable grid functions. Summation
//! orders are fixed (row-major, kernel-inner) so results are bit-for-bit
//! reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, GridSpec, RectDomain};

/// Block-reduction function for downsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Average,
}

/// Downsampling operator: reduces each s x s block with `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingFn {
    pub kind: PoolKind,
    pub factor: usize,
}

/// Interpolation function for upsampling from a 2 x 2 stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpKind {
    Constant,
    Bilinear,
}

/// Upsampling operator: expands each value into an s x s block via `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpFn {
    pub kind: InterpKind,
    pub factor: usize,
}

/// Pointwise activation function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Identity => x,
        }
    }

    /// Subgradient convention: relu'(0) = 0, leaky_relu'(0) = alpha.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Activation::Relu => 1.0,
            Activation::LeakyRelu { alpha } => alpha.abs().max(1.0),
            Activation::Identity => 1.0,
        }
    }
}

/// Per-channel batch normalization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BnParams {
    pub fn identity(channels: usize, eps: f64) -> Self {
        assert!(eps > 0.0, "eps must be positive");
        Self { gamma: vec![1.0; channels], beta: vec![0.0; channels], eps }
    }
}

/// Multi-channel convolution kernel on support `domain` at resolution `h`.
///
/// Values are stored `[out_channel][in_channel][row][col]`, row-major, and
/// are interpreted as a PC function on the support per (out, in) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub domain: RectDomain,
    pub h: f64,
    pub out_channels: usize,
    pub in_channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(
        domain: RectDomain,
        h: f64,
        out_channels: usize,
        in_channels: usize,
        rows: usize,
        cols: usize,
    ) -> Self {
        Self {
            domain,
            h,
            out_channels,
            in_channels,
            rows,
            cols,
            values: vec![0.0; out_channels * in_channels * rows * cols],
        }
    }

    /// Kernel on a support centered at the origin with side lengths
    /// `cols * h` x `rows * h`.
    pub fn centered(h: f64, out_channels: usize, in_channels: usize, rows: usize, cols: usize) -> Self {
        let domain = RectDomain::centered(cols as f64 * h, rows as f64 * h).unwrap();
        Self::zeros(domain, h, out_channels, in_channels, rows, cols)
    }

    #[inline]
    pub fn idx(&self, o: usize, c: usize, row: usize, col: usize) -> usize {
        ((o * self.in_channels + c) * self.rows + row) * self.cols + col
    }

    #[inline]
    pub fn at(&self, o: usize, c: usize, row: usize, col: usize) -> f64 {
        self.values[self.idx(o, c, row, col)]
    }

    pub fn n_values(&self) -> usize {
        self.values.len()
    }

    /// PC refinement of the kernel: pixel counts scale by `factor`, values
    /// are copied, the physical support is unchanged.
    pub fn refine(&self, factor: usize) -> ConvKernel {
        assert!(factor >= 1);
        if factor == 1 {
            return self.clone();
        }
        let mut out = ConvKernel::zeros(
            self.domain,
            self.h / factor as f64,
            self.out_channels,
            self.in_channels,
            self.rows * factor,
            self.cols * factor,
        );
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for row in 0..out.rows {
                    for col in 0..out.cols {
                        let i = out.idx(o, c, row, col);
                        out.values[i] = self.at(o, c, row / factor, col / factor);
                    }
                }
            }
        }
        out
    }
}

/// Valid convolution with the h^2 quadrature weight:
/// `out(o, i, j) = h^2 sum_c sum_{k,l} u(c, i+n-1-k, j+m-1-l) w(o, c, k, l)`.
///
/// The output domain is anchored so that output cell centers coincide with
/// the physical points at which the continuous convolution of the two PC
/// functions is evaluated (input anchor plus kernel upper corner, shifted by
/// half a cell).
pub fn valid_conv(u: &GridFunction, w: &ConvKernel, bias: Option<&[f64]>) -> Result<GridFunction> {
    let (rows, cols) = (u.spec.rows, u.spec.cols);
    let (n, m) = (w.rows, w.cols);
    if n > rows || m > cols {
        return Err(Error::KernelTooLarge { kn: n, km: m, rows, cols });
    }
    if (u.spec.h - w.h).abs() > 1e-12 * u.spec.h.max(w.h) {
        return Err(Error::ResolutionMismatch { hu: u.spec.h, hw: w.h });
    }
    if u.channels != w.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, kernel expects {}",
            u.channels, w.in_channels
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} entries, kernel has {} output channels",
                b.len(),
                w.out_channels
            )));
        }
    }
    let h = u.spec.h;
    let h2 = h * h;
    let out_rows = rows - n + 1;
    let out_cols = cols - m + 1;
    let domain = RectDomain::new(
        u.spec.domain.x0 + w.domain.x1() - 0.5 * h,
        u.spec.domain.y0 + w.domain.y1() - 0.5 * h,
        out_cols as f64 * h,
        out_rows as f64 * h,
    )?;
    let spec = GridSpec { domain, h, rows: out_rows, cols: out_cols };
    let mut out = GridFunction::zeros(spec, w.out_channels);
    for o in 0..w.out_channels {
        for i in 0..out_rows {
            for j in 0..out_cols {
                let mut acc = 0.0;
                for c in 0..u.channels {
                    for k in 0..n {
                        let urow = i + n - 1 - k;
                        let ubase = (c * rows + urow) * cols;
                        let wbase = ((o * w.in_channels + c) * n + k) * m;
                        for l in 0..m {
                            acc += u.values[ubase + j + m - 1 - l] * w.values[wbase + l];
                        }
                    }
                }
                let mut v = h2 * acc;
                if let Some(b) = bias {
                    v += b[o];
                }
                *out.at_mut(o, i, j) = v;
            }
        }
    }
    Ok(out)
}

/// Index map for symmetric (edge-inclusive) reflection with period 2n.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Extension by reflection: `pad = (left, right, top, bottom)` cells. The
/// cell adjacent to each boundary is mirrored first; the physical domain
/// grows by `pad * h` per side. Pads larger than the image repeat the
/// reflection.
pub fn reflect_pad(u: &GridFunction, pad: (usize, usize, usize, usize)) -> Result<GridFunction> {
    let (left, right, top, bottom) = pad;
    let h = u.spec.h;
    let domain = RectDomain::new(
        u.spec.domain.x0 - left as f64 * h,
        u.spec.domain.y0 - top as f64 * h,
        u.spec.domain.width + (left + right) as f64 * h,
        u.spec.domain.height + (top + bottom) as f64 * h,
    )?;
    let spec = GridSpec {
        domain,
        h,
        rows: u.spec.rows + top + bottom,
        cols: u.spec.cols + left + right,
    };
    let mut out = GridFunction::zeros(spec, u.channels);
    for c in 0..u.channels {
        for row in 0..spec.rows {
            let src_row = reflect_index(row as isize - top as isize, u.spec.rows);
            for col in 0..spec.cols {
                let src_col = reflect_index(col as isize - left as isize, u.spec.cols);
                *out.at_mut(c, row, col) = u.at(c, src_row, src_col);
            }
        }
    }
    Ok(out)
}

fn pool_block(u: &GridFunction, c: usize, row0: usize, col0: usize, s: usize, kind: PoolKind) -> f64 {
    match kind {
        PoolKind::Max => {
            let mut best = f64::NEG_INFINITY;
            for k in 0..s {
                for l in 0..s {
                    best = best.max(u.at(c, row0 + k, col0 + l));
                }
            }
            best
        }
        PoolKind::Average => {
            let mut acc = 0.0;
            for k in 0..s {
                for l in 0..s {
                    acc += u.at(c, row0 + k, col0 + l);
                }
            }
            acc / (s * s) as f64
        }
    }
}

/// Downsampling: block (k, l) of the output is `f` of the s x s input block.
/// The output lives on the same physical domain at resolution s * h.
pub fn downsample(u: &GridFunction, f: PoolingFn) -> Result<GridFunction> {
    let s = f.factor;
    if s == 1 {
        return Ok(u.clone());
    }
    if u.spec.rows % s != 0 {
        return Err(Error::Indivisible { axis: "row", size: u.spec.rows, factor: s });
    }
    if u.spec.cols % s != 0 {
        return Err(Error::Indivisible { axis: "col", size: u.spec.cols, factor: s });
    }
    let spec = GridSpec {
        domain: u.spec.domain,
        h: u.spec.h * s as f64,
        rows: u.spec.rows / s,
        cols: u.spec.cols / s,
    };
    let mut out = GridFunction::zeros(spec, u.channels);
    for c in 0..u.channels {
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                *out.at_mut(c, row, col) = pool_block(u, c, row * s, col * s, s, f.kind);
            }
        }
    }
    Ok(out)
}

/// Upsampling: each coarse value expands into an s x s block, interpolated
/// from the stencil `(U_{i,j}, U_{i+1,j}, U_{i,j+1}, U_{i+1,j+1})` with
/// constant extension past the last row/column. Bilinear weights are `k/s`
/// along each axis (grid-point alignment), so every output lies in the
/// stencil's min-max envelope.
pub fn upsample(u: &GridFunction, g: InterpFn) -> GridFunction {
    let s = g.factor;
    if s == 1 {
        return u.clone();
    }
    let spec = GridSpec {
        domain: u.spec.domain,
        h: u.spec.h / s as f64,
        rows: u.spec.rows * s,
        cols: u.spec.cols * s,
    };
    let mut out = GridFunction::zeros(spec, u.channels);
    for c in 0..u.channels {
        for i in 0..u.spec.rows {
            let i1 = (i + 1).min(u.spec.rows - 1);
            for j in 0..u.spec.cols {
                let j1 = (j + 1).min(u.spec.cols - 1);
                let (v00, v10, v01, v11) =
                    (u.at(c, i, j), u.at(c, i1, j), u.at(c, i, j1), u.at(c, i1, j1));
                for k in 0..s {
                    for l in 0..s {
                        let v = match g.kind {
                            InterpKind::Constant => v00,
                            InterpKind::Bilinear => {
                                // nested lerp form a + t*(b - a): rounding is
                                // monotone, so the result never leaves the
                                // stencil's min-max envelope even in floating
                                // point (the expanded sum of products can
                                // overshoot by an ulp)
                                let tr = k as f64 / s as f64;
                                let tc = l as f64 / s as f64;
                                let r0 = v00 + tc * (v01 - v00);
                                let r1 = v10 + tc * (v11 - v10);
                                r0 + tr * (r1 - r0)
                            }
                        };
                        *out.at_mut(c, i * s + k, j * s + l) = v;
                    }
                }
            }
        }
    }
    out
}

/// Pointwise application of the activation.
pub fn apply_activation(u: &GridFunction, sigma: Activation) -> GridFunction {
    u.map(|x| sigma.apply(x))
}

/// Per-channel batch statistics: h^2-weighted integral means over the whole
/// batch, divided by `N * |domain|`.
pub fn batch_statistics(batch: &[GridFunction]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let channels = first.channels;
    for u in batch {
        if !u.spec.approx_eq(&first.spec) || u.channels != channels {
            return Err(Error::SpecMismatch("batch members must share spec and channels".into()));
        }
    }
    let h2 = first.spec.h * first.spec.h;
    let denom = batch.len() as f64 * first.spec.domain.area();
    let mut mean = vec![0.0; channels];
    for u in batch {
        for c in 0..channels {
            let mut acc = 0.0;
            for v in u.channel(c) {
                acc += v;
            }
            mean[c] += h2 * acc;
        }
    }
    for m in mean.iter_mut() {
        *m /= denom;
    }
    let mut var = vec![0.0; channels];
    for u in batch {
        for c in 0..channels {
            let mut acc = 0.0;
            for v in u.channel(c) {
                let d = v - mean[c];
                acc += d * d;
            }
            var[c] += h2 * acc;
        }
    }
    for v in var.iter_mut() {
        *v /= denom;
    }
    Ok((mean, var))
}

/// Batch normalization per Def: `gamma * (u_i - mean) / sqrt(var + eps) + beta`,
/// with per-channel statistics across the whole batch.
pub fn batch_norm(batch: &[GridFunction], p: &BnParams) -> Result<Vec<GridFunction>> {
    let (mean, var) = batch_statistics(batch)?;
    let channels = batch[0].channels;
    if p.gamma.len() != channels || p.beta.len() != channels {
        return Err(Error::ShapeMismatch(format!(
            "bn params have {} channels, batch has {}",
            p.gamma.len(),
            channels
        )));
    }
    let mut out = Vec::with_capacity(batch.len());
    for u in batch {
        let mut r = u.clone();
        for c in 0..channels {
            let scale = p.gamma[c] / (var[c] + p.eps).sqrt();
            let n = u.spec.n_cells();
            for v in &mut r.values[c * n..(c + 1) * n] {
                *v = scale * (*v - mean[c]) + p.beta[c];
            }
        }
        out.push(r);
    }
    Ok(out)
}
