//! Binary greyscale (P5) export of BEV probability maps.
//!
//! A map indexed `[x, y]` becomes an image `X` pixels wide and `Y` pixels
//! tall. Row 0 is the max-y edge, so with ego x forward and y left the image
//! reads like a map viewed from above with forward to the right.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Quantises a probability to a byte: `round(clamp(p, 0, 1) · 255)`.
pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(probs: &Array2<f64>) -> Vec<u8> {
    let (nx, ny) = probs.dim();
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    out.reserve(nx * ny);
    for row in 0..ny {
        let y = ny - 1 - row;
        out.extend((0..nx).map(|x| quantize(probs[[x, y]])));
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, probs: &Array2<f64>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(probs))?;
    Ok(())
}

/// Inverse of [`encode_pgm`]: returns the map `[x, y]` with values `byte / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |reason: &str| Error::invalid("pgm", reason.to_owned());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary greymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (nx, ny, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit maps are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != nx * ny {
        return Err(bad("raster size does not match header"));
    }
    Ok(Array2::from_shape_fn((nx, ny), |(x, y)| {
        raster[(ny - 1 - y) * nx + x] as f64 / 255.0
    }))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    decode_pgm(&std::fs::read(path)?)
}
