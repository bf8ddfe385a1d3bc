//! Grid function serialization.
//!
//! Two formats:
//! - a lossless flat text format: header line `rows cols channels h x0 y0`
//!   followed by whitespace-separated values (channel-outermost, row-major),
//!   printed with shortest round-trip precision; used for exact round-trips
//!   of images and parameter tensors.
//! - binary PGM (P5, 8-bit) for viewing, single channel, values linearly
//!   mapped from a stated [min, max] recorded in a comment line. A second
//!   comment line records the grid geometry so reads reconstruct the domain.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, GridSpec, RectDomain};

pub fn to_text(u: &GridFunction) -> String {
    let mut s = format!(
        "{} {} {} {} {} {}\n",
        u.spec.rows, u.spec.cols, u.channels, u.spec.h, u.spec.domain.x0, u.spec.domain.y0
    );
    for (i, v) in u.values.iter().enumerate() {
        if i > 0 {
            s.push(if i % u.spec.cols == 0 { '\n' } else { ' ' });
        }
        s.push_str(&format!("{v}"));
    }
    s.push('\n');
    s
}

pub fn from_text(text: &str) -> Result<GridFunction> {
    let mut tokens = text.split_whitespace();
    let mut next = |name: &str| -> Result<&str> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse { offset: 0, msg: format!("missing {name}") })
    };
    let rows: usize = parse(next("rows")?)?;
    let cols: usize = parse(next("cols")?)?;
    let channels: usize = parse(next("channels")?)?;
    let h: f64 = parse(next("h")?)?;
    let x0: f64 = parse(next("x0")?)?;
    let y0: f64 = parse(next("y0")?)?;
    let domain = RectDomain::new(x0, y0, cols as f64 * h, rows as f64 * h)?;
    let spec = GridSpec::new(domain, h)?;
    let mut values = Vec::with_capacity(rows * cols * channels);
    for tok in tokens {
        values.push(parse::<f64>(tok)?);
    }
    GridFunction::from_values(spec, channels, values)
}

fn parse<T: std::str::FromStr>(tok: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Parse { offset: 0, msg: format!("invalid token {tok:?}") })
}

pub fn write_text(u: &GridFunction, path: &Path) -> Result<()> {
    fs::write(path, to_text(u))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<GridFunction> {
    from_text(&fs::read_to_string(path)?)
}

/// Map a value into a byte: linear on [min, max], round half up, clamped.
fn to_byte(v: f64, min: f64, max: f64) -> u8 {
    let t = if max > min { (v - min) / (max - min) } else { 0.0 };
    (t * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Serialize channel 0 as binary PGM with the stated value range.
pub fn to_pgm(u: &GridFunction, min: f64, max: f64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"P5\n");
    out.extend_from_slice(format!("# range {min} {max}\n").as_bytes());
    out.extend_from_slice(
        format!("# grid {} {} {}\n", u.spec.h, u.spec.domain.x0, u.spec.domain.y0).as_bytes(),
    );
    out.extend_from_slice(format!("{} {}\n255\n", u.spec.cols, u.spec.rows).as_bytes());
    for &v in u.channel(0) {
        out.push(to_byte(v, min, max));
    }
    out
}

pub fn write_pgm(u: &GridFunction, min: f64, max: f64, path: &Path) -> Result<()> {
    fs::write(path, to_pgm(u, min, max))?;
    Ok(())
}

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmCursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    /// Next whitespace-delimited token, skipping `#` comment lines, and the
    /// comment lines skipped on the way (for the range/grid metadata).
    fn token(&mut self, comments: &mut Vec<String>) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos >= self.bytes.len() {
                return Err(self.err("unexpected end of file"));
            }
            if self.bytes[self.pos] == b'#' {
                let start = self.pos;
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                comments.push(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned());
                continue;
            }
            let start = self.pos;
            while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            return std::str::from_utf8(&self.bytes[start..self.pos])
                .map_err(|_| Error::Parse { offset: start, msg: "non-ascii header".into() });
        }
    }
}

/// Parse a PGM written by [`to_pgm`]. Values are mapped back into the stated
/// range (8-bit quantized). Grid geometry defaults to h = 1 at the origin if
/// the comment is absent.
pub fn from_pgm(bytes: &[u8]) -> Result<GridFunction> {
    let mut cur = PgmCursor { bytes, pos: 0 };
    let mut comments = Vec::new();
    let magic = cur.token(&mut comments)?;
    if magic != "P5" {
        return Err(Error::Parse { offset: 0, msg: format!("unsupported magic {magic:?}") });
    }
    let cols: usize = cur
        .token(&mut comments)?
        .parse()
        .map_err(|_| cur.err("invalid width"))?;
    let rows: usize = cur
        .token(&mut comments)?
        .parse()
        .map_err(|_| cur.err("invalid height"))?;
    let maxval: usize = cur
        .token(&mut comments)?
        .parse()
        .map_err(|_| cur.err("invalid maxval"))?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}")));
    }
    let (mut vmin, mut vmax) = (0.0, 1.0);
    let (mut h, mut x0, mut y0) = (1.0, 0.0, 0.0);
    for c in &comments {
        let parts: Vec<&str> = c.trim_start_matches('#').split_whitespace().collect();
        match parts.as_slice() {
            ["range", a, b] => {
                vmin = parse(a)?;
                vmax = parse(b)?;
            }
            ["grid", hh, xx, yy] => {
                h = parse(hh)?;
                x0 = parse(xx)?;
                y0 = parse(yy)?;
            }
            _ => {}
        }
    }
    // exactly one whitespace byte separates the header from raster data
    let data_start = cur.pos + 1;
    if bytes.len() < data_start + rows * cols {
        return Err(Error::Parse { offset: bytes.len(), msg: "truncated raster".into() });
    }
    let domain = RectDomain::new(x0, y0, cols as f64 * h, rows as f64 * h)?;
    let spec = GridSpec::new(domain, h)?;
    let values = bytes[data_start..data_start + rows * cols]
        .iter()
        .map(|&b| vmin + (vmax - vmin) * b as f64 / 255.0)
        .collect();
    GridFunction::from_values(spec, 1, values)
}

pub fn read_pgm(path: &Path) -> Result<GridFunction> {
    from_pgm(&fs::read(path)?)
}
