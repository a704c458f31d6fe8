//! 64-bit average hash and Hamming similarity.

use std::fmt;

use crate::error::{Error, Result};

pub const GRID: usize = 8;

/// Relative tolerance under which a cell mean counts as equal to the grand
/// mean (and therefore sets its bit).
const TIE_TOLERANCE: f64 = 1e-9;

/// An 8×8 bit grid; bit `r * 8 + c` holds cell `(r, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AHash(u64);

impl AHash {
    pub fn from_bits(bits: u64) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn bit(self, row: usize, col: usize) -> bool {
        (self.0 >> (row * GRID + col)) & 1 == 1
    }

    pub fn hamming(self, other: AHash) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl fmt::Display for AHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..GRID {
            if r > 0 {
                f.write_str("/")?;
            }
            for c in 0..GRID {
                f.write_str(if self.bit(r, c) { "1" } else { "0" })?;
            }
        }
        Ok(())
    }
}

/// Start offsets of the 8 cells along an axis of `len` pixels, plus `len`.
///
/// Cells hold `len / 8` pixels each and the last cell absorbs the remainder.
/// Axes shorter than 8 map each cell to the single pixel at
/// `floor(c * len / 8)`.
pub fn cell_bounds(len: usize) -> [(usize, usize); GRID] {
    let base = len / GRID;
    let mut bounds = [(0, 0); GRID];
    for (c, b) in bounds.iter_mut().enumerate() {
        *b = if base == 0 {
            let start = c * len / GRID;
            (start, start + 1)
        } else if c == GRID - 1 {
            (c * base, len)
        } else {
            (c * base, (c + 1) * base)
        };
    }
    bounds
}

/// Average hash of an `height × width × channels` image stored row-major
/// with interleaved channels.
pub fn average_hash(pixels: &[f64], height: usize, width: usize, channels: usize) -> Result<AHash> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Input(format!(
            "cannot hash an empty {height}x{width}x{channels} image"
        )));
    }
    if pixels.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "{} pixel values for a {height}x{width}x{channels} image",
            pixels.len()
        )));
    }
    let gray: Vec<f64> = pixels
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();

    let rows = cell_bounds(height);
    let cols = cell_bounds(width);
    let mut cells = [0.0; GRID * GRID];
    for (r, &(r0, r1)) in rows.iter().enumerate() {
        for (c, &(c0, c1)) in cols.iter().enumerate() {
            let mut sum = 0.0;
            for y in r0..r1 {
                sum += gray[y * width + c0..y * width + c1].iter().sum::<f64>();
            }
            cells[r * GRID + c] = sum / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    Ok(threshold_cells(&cells))
}

/// Sets bit `i` iff `cells[i]` is at least the mean of all 64 cells.
pub fn threshold_cells(cells: &[f64; GRID * GRID]) -> AHash {
    let grand = cells.iter().sum::<f64>() / cells.len() as f64;
    let scale = cells.iter().fold(grand.abs(), |a, &v| a.max(v.abs()));
    let tol = TIE_TOLERANCE * scale;
    let bits = cells
        .iter()
        .enumerate()
        .filter(|(_, &v)| v - grand >= -tol)
        .fold(0u64, |acc, (i, _)| acc | (1 << i));
    AHash(bits)
}

/// `1 − hamming(a, b) / 64`.
pub fn similarity(a: AHash, b: AHash) -> f64 {
    1.0 - a.hamming(b) as f64 / 64.0
}
