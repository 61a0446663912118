//! Binary PPM (P6) and PGM (P5) with maxval 255.
//!
//! Values are unit-interval floats; encoding rounds half-up per channel and
//! refuses out-of-range input rather than clipping silently.

use std::path::Path;

use crate::error::{Error, Result};

const MAX_DIM: usize = 1 << 14;

fn quantize(v: f64, what: &str) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::numerical("render", format!("{what} value {v} outside [0,1]")));
    }
    Ok((v * 255.0 + 0.5).floor() as u8)
}

/// Snap a unit-interval value onto the 8-bit grid used on disk.
pub fn to_grid(v: f64) -> f64 {
    ((v.clamp(0.0, 1.0) * 255.0 + 0.5).floor()) / 255.0
}

pub fn encode_p6(width: usize, height: usize, rgb: &[f64]) -> Result<Vec<u8>> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(rgb.len());
    for &v in rgb {
        out.push(quantize(v, "pixel")?);
    }
    Ok(out)
}

pub fn encode_p5(width: usize, height: usize, gray: &[f64]) -> Result<Vec<u8>> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.reserve(gray.len());
    for &v in gray {
        out.push(quantize(v, "gray")?);
    }
    Ok(out)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start || self.pos - start > 8 {
            return Err(Error::config("ppm", "malformed header number"));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        s.parse::<usize>().map_err(|_| Error::config("ppm", "bad header number"))
    }
}

fn decode(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::config("ppm", "bad magic"));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::config("ppm", format!("unreasonable dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::config("ppm", format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates header from payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::config("ppm", "missing header terminator"));
    }
    cur.pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::config("ppm", "dimension overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() != n {
        return Err(Error::config(
            "ppm",
            format!("payload length {} does not match {n}", payload.len()),
        ));
    }
    Ok((width, height, payload.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn decode_p6(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    decode(bytes, b"P6", 3)
}

pub fn decode_p5(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    decode(bytes, b"P5", 1)
}

pub fn write_p6(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    std::fs::write(path, encode_p6(width, height, rgb)?).map_err(|e| Error::io(path, e))
}

pub fn write_p5(path: &Path, width: usize, height: usize, gray: &[f64]) -> Result<()> {
    std::fs::write(path, encode_p5(width, height, gray)?).map_err(|e| Error::io(path, e))
}

pub fn read_p6(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_p6(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_p5(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_p5(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
