//! Physical rectangular domains, cell-aligned grids, and piecewise-constant
//! function spaces.
//!
//! A `GridFunction` represents a function that is constant on each h-cell of
//! a rectangular domain. Cells tile the domain exactly (cell edges lie on the
//! domain boundary) and the representative grid point of a cell is its
//! center. Values are stored channel-outermost, row-major, with y increasing
//! with the row index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for "is an integer multiple" checks on physical sizes.
pub const COMMENSURABILITY_RTOL: f64 = 1e-9;

/// An open axis-aligned rectangle in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectDomain {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl RectDomain {
    pub fn new(x0: f64, y0: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::InvalidDomain { width, height });
        }
        Ok(Self { x0, y0, width, height })
    }

    /// Unit square (0,1) x (0,1).
    pub fn unit() -> Self {
        Self { x0: 0.0, y0: 0.0, width: 1.0, height: 1.0 }
    }

    /// Rectangle of the given size centered at the origin.
    pub fn centered(width: f64, height: f64) -> Result<Self> {
        Self::new(-width / 2.0, -height / 2.0, width, height)
    }

    pub fn x1(&self) -> f64 {
        self.x0 + self.width
    }

    pub fn y1(&self) -> f64 {
        self.y0 + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Equality up to the commensurability tolerance, relative to size.
    pub fn approx_eq(&self, other: &RectDomain) -> bool {
        let scale = self.width.abs().max(self.height.abs()).max(1.0);
        let tol = COMMENSURABILITY_RTOL * scale;
        (self.x0 - other.x0).abs() <= tol
            && (self.y0 - other.y0).abs() <= tol
            && (self.width - other.width).abs() <= tol
            && (self.height - other.height).abs() <= tol
    }
}

/// Round `size / h` to the nearest integer, failing if it is not one within
/// the relative tolerance.
pub fn cells_along(size: f64, h: f64) -> Result<usize> {
    let ratio = size / h;
    let rounded = ratio.round();
    if rounded < 0.5 || (ratio - rounded).abs() > COMMENSURABILITY_RTOL * ratio.abs().max(1.0) {
        return Err(Error::IncommensurableDomain { size, h });
    }
    Ok(rounded as usize)
}

/// A domain together with a resolution that tiles it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain: RectDomain,
    pub h: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(domain: RectDomain, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::IncommensurableDomain { size: domain.width, h });
        }
        let cols = cells_along(domain.width, h)?;
        let rows = cells_along(domain.height, h)?;
        Ok(Self { domain, h, rows, cols })
    }

    /// Center of cell (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.domain.x0 + (col as f64 + 0.5) * self.h,
            self.domain.y0 + (row as f64 + 0.5) * self.h,
        )
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Same physical domain and resolution, up to tolerance.
    pub fn approx_eq(&self, other: &GridSpec) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.domain.approx_eq(&other.domain)
            && (self.h - other.h).abs() <= COMMENSURABILITY_RTOL * self.h
    }
}

/// A piecewise-constant function: per-cell values on a `GridSpec`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub spec: GridSpec,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        Self { spec, channels, values: vec![0.0; channels * spec.n_cells()] }
    }

    pub fn constant(spec: GridSpec, channels: usize, value: f64) -> Self {
        Self { spec, channels, values: vec![value; channels * spec.n_cells()] }
    }

    pub fn from_values(spec: GridSpec, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * spec.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                channels * spec.n_cells(),
                values.len()
            )));
        }
        Ok(Self { spec, channels, values })
    }

    #[inline]
    pub fn idx(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.spec.rows + row) * self.spec.cols + col
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.values[self.idx(c, row, col)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, row: usize, col: usize) -> &mut f64 {
        let i = self.idx(c, row, col);
        &mut self.values[i]
    }

    /// Slice holding one channel plane.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spec.n_cells();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            spec: self.spec,
            channels: self.channels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Evaluate the PC function at a physical point (value of the containing
    /// cell; points on the upper boundary fall into the last cell).
    pub fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        let col = (((x - self.spec.domain.x0) / self.spec.h).floor() as isize)
            .clamp(0, self.spec.cols as isize - 1) as usize;
        let row = (((y - self.spec.domain.y0) / self.spec.h).floor() as isize)
            .clamp(0, self.spec.rows as isize - 1) as usize;
        self.at(c, row, col)
    }
}

/// Project a pointwise-defined function onto PC^h by sampling cell centers.
///
/// The sampler receives `(x, y, channel)`.
pub fn project_pc(
    sampler: impl Fn(f64, f64, usize) -> f64,
    spec: GridSpec,
    channels: usize,
) -> Result<GridFunction> {
    let mut out = GridFunction::zeros(spec, channels);
    for c in 0..channels {
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                let (x, y) = spec.cell_center(row, col);
                let v = sampler(x, y, c);
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { channel: c, row, col });
                }
                *out.at_mut(c, row, col) = v;
            }
        }
    }
    Ok(out)
}

/// Exact PC refinement: each parent cell's value is copied into
/// `factor^2` children. The represented function is unchanged.
pub fn refine(u: &GridFunction, factor: usize) -> GridFunction {
    assert!(factor >= 1, "refinement factor must be >= 1");
    if factor == 1 {
        return u.clone();
    }
    let spec = GridSpec {
        domain: u.spec.domain,
        h: u.spec.h / factor as f64,
        rows: u.spec.rows * factor,
        cols: u.spec.cols * factor,
    };
    let mut out = GridFunction::zeros(spec, u.channels);
    for c in 0..u.channels {
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                *out.at_mut(c, row, col) = u.at(c, row / factor, col / factor);
            }
        }
    }
    out
}

/// Per-layer resolutions `h_{l+1} = h_l * s_D / s_U` for a ladder of
/// `(s_D, s_U)` sampling factors; index 0 is the input resolution.
pub fn resolution_ladder(h0: f64, layers: &[(usize, usize)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.len() + 1);
    out.push(h0);
    let mut h = h0;
    for &(s_d, s_u) in layers {
        h = h * s_d as f64 / s_u as f64;
        out.push(h);
    }
    out
}

/// Smallest integer pair (p, q) with `p / q ~ ratio`, searched up to `max`.
fn rationalize(ratio: f64, max: usize) -> Option<(usize, usize)> {
    for q in 1..=max {
        let p = (ratio * q as f64).round();
        if p >= 1.0 && (ratio - p / q as f64).abs() <= COMMENSURABILITY_RTOL * ratio.max(1.0) {
            return Some((p as usize, q));
        }
    }
    None
}

/// Refine both functions to their common finest grid.
pub fn common_refinement(u: &GridFunction, v: &GridFunction) -> Result<(GridFunction, GridFunction)> {
    if !u.spec.domain.approx_eq(&v.spec.domain) {
        return Err(Error::DomainMismatch);
    }
    let (p, q) = rationalize(u.spec.h / v.spec.h, 4096)
        .ok_or(Error::IncommensurableResolutions { ha: u.spec.h, hb: v.spec.h })?;
    // common h = u.h / p = v.h / q
    Ok((refine(u, p), refine(v, q)))
}

/// Sup-norm distance between two PC functions over the same physical domain,
/// computed on the common refinement.
pub fn sup_diff(u: &GridFunction, v: &GridFunction) -> Result<f64> {
    if u.channels != v.channels {
        return Err(Error::ShapeMismatch(format!(
            "channel mismatch: {} vs {}",
            u.channels, v.channels
        )));
    }
    let (a, b) = common_refinement(u, v)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GridSpec {
        GridSpec::new(RectDomain::unit(), 1.0 / n as f64).unwrap()
    }

    #[test]
    fn constant_sampler_is_fixed_point() {
        let u = project_pc(|_, _, _| 3.0, spec(4), 1).unwrap();
        assert!(u.values.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn projection_samples_cell_centers() {
        // sampler(x, y) = x on (0,1)^2 at h = 0.5: columns at 0.25 and 0.75
        let u = project_pc(|x, _, _| x, spec(2), 1).unwrap();
        assert_eq!(u.at(0, 0, 0), 0.25);
        assert_eq!(u.at(0, 0, 1), 0.75);
        assert_eq!(u.at(0, 1, 0), 0.25);
    }

    #[test]
    fn projection_rejects_non_finite_sampler() {
        let err = project_pc(|x, _, _| if x > 0.5 { f64::NAN } else { 0.0 }, spec(2), 1);
        match err {
            Err(Error::NonFiniteValue { col, .. }) => assert_eq!(col, 1),
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
    }

    #[test]
    fn projection_error_halves_with_h() {
        // sup-norm error vs a dense oracle should halve per refinement for a
        // smooth sampler (first-order accuracy of cell-center sampling).
        let f = |x: f64, y: f64| (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin();
        let dense_err = |n: usize| -> f64 {
            let u = project_pc(|x, y, _| f(x, y), spec(n), 1).unwrap();
            // oracle: evaluate both on a 10x finer grid of points
            let fine = 10 * n;
            let mut worst = 0.0f64;
            for row in 0..fine {
                for col in 0..fine {
                    let x = (col as f64 + 0.5) / fine as f64;
                    let y = (row as f64 + 0.5) / fine as f64;
                    worst = worst.max((u.eval(0, x, y) - f(x, y)).abs());
                }
            }
            worst
        };
        let e8 = dense_err(8);
        let e16 = dense_err(16);
        let e32 = dense_err(32);
        for (coarse, fine) in [(e8, e16), (e16, e32)] {
            let ratio = fine / coarse;
            assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn sup_bound_of_projection() {
        let f = |x: f64, y: f64| (7.3 * x).sin() * (3.1 * y).cos() * 2.5;
        let u = project_pc(|x, y, _| f(x, y), spec(16), 1).unwrap();
        assert!(u.max_abs() <= 2.5 + 1e-15);
    }

    #[test]
    fn refine_copies_constants() {
        let one = GridSpec::new(RectDomain::unit(), 1.0).unwrap();
        let u = GridFunction::constant(one, 1, 5.0);
        let r = refine(&u, 3);
        assert_eq!(r.spec.rows, 3);
        assert_eq!(r.spec.cols, 3);
        assert!(r.values.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn refine_composes() {
        let mut u = GridFunction::zeros(spec(4), 2);
        for (i, v) in u.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let a = refine(&refine(&u, 2), 3);
        let b = refine(&u, 6);
        assert_eq!(a.values, b.values);
        assert_eq!(refine(&u, 1).values, u.values);
    }

    #[test]
    fn ladder_matches_hand_values() {
        assert_eq!(resolution_ladder(1.0, &[(2, 1)]), vec![1.0, 2.0]);
        assert_eq!(resolution_ladder(1.0, &[(2, 1), (1, 2)]), vec![1.0, 2.0, 1.0]);
        // U-net-like: two downsamplings then two upsamplings return to h0
        let l = resolution_ladder(0.25, &[(2, 1), (2, 1), (1, 2), (1, 2)]);
        assert!((l.last().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sup_diff_basics() {
        let u = project_pc(|x, y, _| x * y, spec(4), 1).unwrap();
        assert_eq!(sup_diff(&u, &u).unwrap(), 0.0);

        let a = GridFunction::constant(spec(2), 1, 1.0);
        let b = GridFunction::constant(spec(4), 1, 1.5);
        assert_eq!(sup_diff(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn sup_diff_of_refinement_is_zero() {
        let mut u = GridFunction::zeros(spec(4), 1);
        let mut rng = crate::rng::CounterRng::new(9, 0);
        for v in u.values.iter_mut() {
            *v = rng.next_normal();
        }
        assert_eq!(sup_diff(&u, &refine(&u, 2)).unwrap(), 0.0);
    }

    #[test]
    fn sup_diff_rejects_different_domains() {
        let a = GridFunction::constant(spec(2), 1, 0.0);
        let d = RectDomain::new(0.0, 0.0, 2.0, 1.0).unwrap();
        let b = GridFunction::constant(GridSpec::new(d, 0.5).unwrap(), 1, 0.0);
        assert!(sup_diff(&a, &b).is_err());
    }

    #[test]
    fn project_own_cell_centers_is_identity() {
        let mut u = GridFunction::zeros(spec(5), 2);
        let mut rng = crate::rng::CounterRng::new(3, 1);
        for v in u.values.iter_mut() {
            *v = rng.next_normal();
        }
        let p = project_pc(|x, y, c| u.eval(c, x, y), u.spec, u.channels).unwrap();
        assert_eq!(p.values, u.values);
    }

    #[test]
    fn spec_rejects_incommensurable_h() {
        assert!(GridSpec::new(RectDomain::unit(), 0.3).is_err());
        assert!(GridSpec::new(RectDomain::unit(), 0.25).is_ok());
    }
}
