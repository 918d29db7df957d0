//! Real spherical-harmonics direction encoding, degrees 0–2 (9 values).

use crate::error::{Error, Result};

pub const SH_DIM: usize = 9;

// Real SH normalization constants.
const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2_XY: f64 = 1.092_548_430_592_079_2;
const C2_ZZ: f64 = 0.315_391_565_252_520_05;
const C2_XX_YY: f64 = 0.546_274_215_296_039_6;

/// Encode a unit direction. Rejects directions whose norm strays more than
/// 1e-4 from 1 (callers normalize; a silent renormalize here would hide bugs).
pub fn sh_encode(d: [f32; 3]) -> Result<[f32; SH_DIM]> {
    let (x, y, z) = (d[0] as f64, d[1] as f64, d[2] as f64);
    let norm = (x * x + y * y + z * z).sqrt();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidArgument(format!(
            "direction must be unit length, |d| = {:.6}",
            norm
        )));
    }
    Ok([
        C0 as f32,
        (C1 * y) as f32,
        (C1 * z) as f32,
        (C1 * x) as f32,
        (C2_XY * x * y) as f32,
        (C2_XY * y * z) as f32,
        (C2_ZZ * (3.0 * z * z - 1.0)) as f32,
        (C2_XY * x * z) as f32,
        (C2_XX_YY * (x * x - y * y)) as f32,
    ])
}

/// Encode a batch of directions into a [n, 9] row-major buffer.
pub fn sh_encode_batch(dirs: &[f32]) -> Result<Vec<f32>> {
    if dirs.len() % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values do not split into 3-vectors",
            dirs.len()
        )));
    }
    let mut out = Vec::with_capacity(dirs.len() / 3 * SH_DIM);
    for d in dirs.chunks_exact(3) {
        out.extend_from_slice(&sh_encode([d[0], d[1], d[2]])?);
    }
    Ok(out)
}
