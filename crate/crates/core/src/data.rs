//! Synthetic data: random circle images, additive noise, and the fixed
//! inputs used for untrained-prior fitting.

use crate::error::{Error, Result};
use crate::grid::{GridFunction, GridSpec, RectDomain};
use crate::rng::CounterRng;

/// Number of circles per sampled image.
pub const CIRCLES_PER_IMAGE: usize = 5;

/// Sample an `n x n` image on the unit domain by drawing `n_circles` discs.
/// Per disc, center coordinates, radius, and gray value are drawn in that
/// order from N(0.5, 0.5^2); the disc is rasterized at the integer-floor
/// center and radius and its gray value is added to every covered pixel.
/// Centers and radii may fall outside the image; values are not clamped.
pub fn sample_circles(n: usize, n_circles: usize, seed: u64, stream: u64) -> GridFunction {
    let spec = GridSpec::new(RectDomain::unit(), 1.0 / n as f64).unwrap();
    let mut u = GridFunction::zeros(spec, 1);
    let mut rng = CounterRng::new(seed, stream);
    for _ in 0..n_circles {
        let x1 = rng.next_normal_with(0.5, 0.5);
        let x2 = rng.next_normal_with(0.5, 0.5);
        let r = rng.next_normal_with(0.5, 0.5);
        let c = rng.next_normal_with(0.5, 0.5);
        let cx = (n as f64 * x1).floor() as i64;
        let cy = (n as f64 * x2).floor() as i64;
        let rad = (n as f64 * r).floor() as i64;
        let r2 = rad * rad;
        for k in 0..n as i64 {
            for l in 0..n as i64 {
                if (cx - k) * (cx - k) + (cy - l) * (cy - l) <= r2 {
                    *u.at_mut(0, k as usize, l as usize) += c;
                }
            }
        }
    }
    u
}

/// Add per-pixel Gaussian noise of the given standard deviation. With
/// `clip`, values are clamped to [0, 1] afterwards.
pub fn add_gaussian_noise(u: &GridFunction, std: f64, seed: u64, stream: u64, clip: bool) -> GridFunction {
    let mut rng = CounterRng::new(seed, stream);
    let mut out = u.clone();
    for v in &mut out.values {
        *v += std * rng.next_normal();
        if clip {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// A clean/noisy pair of the circle distribution.
#[derive(Debug, Clone)]
pub struct CircleSample {
    pub index: usize,
    pub clean: GridFunction,
    pub noisy: GridFunction,
}

/// Deterministic dataset: sample `count` images at resolution `n`, using one
/// RNG stream per sample (stream `2i` for the image, `2i + 1` for its noise).
pub fn circle_dataset(n: usize, count: usize, noise_std: f64, seed: u64) -> Vec<CircleSample> {
    (0..count)
        .map(|i| {
            let clean = sample_circles(n, CIRCLES_PER_IMAGE, seed, 2 * i as u64);
            let noisy = add_gaussian_noise(&clean, noise_std, seed, 2 * i as u64 + 1, false);
            CircleSample { index: i, clean, noisy }
        })
        .collect()
}

/// Fixed random input for untrained-prior fitting: `channels` channels of
/// independent U(0, amplitude) values.
pub fn noise_input(spec: GridSpec, channels: usize, amplitude: f64, seed: u64) -> GridFunction {
    let mut rng = CounterRng::new(seed, 0);
    let mut u = GridFunction::zeros(spec, channels);
    for v in &mut u.values {
        *v = amplitude * rng.next_f64();
    }
    u
}

/// Two-channel coordinate input: channel 0 ramps 0..=1 along columns,
/// channel 1 along rows, each normalized by `len - 1`.
pub fn meshgrid_input(spec: GridSpec) -> GridFunction {
    let mut u = GridFunction::zeros(spec, 2);
    for i in 0..spec.rows {
        for j in 0..spec.cols {
            *u.at_mut(0, i, j) = if spec.cols > 1 { j as f64 / (spec.cols - 1) as f64 } else { 0.0 };
            *u.at_mut(1, i, j) = if spec.rows > 1 { i as f64 / (spec.rows - 1) as f64 } else { 0.0 };
        }
    }
    u
}

/// One manifest line per sample: index, rng streams, file names.
pub fn manifest_csv(samples: &[CircleSample], seed: u64) -> String {
    let mut s = String::from("index,seed,stream_clean,stream_noisy,clean,noisy\n");
    for c in samples {
        s.push_str(&format!(
            "{i},{seed},{},{},sample_{i:05}_clean.txt,sample_{i:05}_noisy.txt\n",
            2 * c.index,
            2 * c.index + 1,
            i = c.index
        ));
    }
    s
}

/// Parse a manifest produced by [`manifest_csv`].
pub fn parse_manifest(text: &str) -> Result<Vec<(usize, u64, String, String)>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse { offset: ln, msg: format!("expected 6 fields, got {}", f.len()) });
        }
        let idx = f[0].parse().map_err(|_| Error::Parse { offset: ln, msg: "bad index".into() })?;
        let seed = f[1].parse().map_err(|_| Error::Parse { offset: ln, msg: "bad seed".into() })?;
        rows.push((idx, seed, f[4].to_string(), f[5].to_string()));
    }
    Ok(rows)
}
