//! Multi-resolution hash-grid encoder.
//!
//! Each level lays a virtual vertex grid over the unit square/cube and maps
//! vertices into a fixed-size feature table. Coarse levels whose full vertex
//! grid fits in the table are indexed directly (collision-free); finer levels
//! hash vertex coordinates with the usual prime-XOR scheme. A query point is
//! encoded per level as the multilinear interpolation of its 2^dim corner
//! features; all levels concatenate.

use crate::autodiff::GatherTerm;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-coordinate hash multipliers. The first coordinate is left unmultiplied,
/// which makes the degenerate 1D case an identity map.
const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Feature rows per level; must be a power of two (the hash masks with
    /// table_size - 1).
    pub table_size: usize,
    pub features: usize,
    pub base_resolution: f64,
    pub growth: f64,
}

impl HashGridConfig {
    pub fn desk_default() -> Self {
        HashGridConfig {
            levels: 8,
            table_size: 1 << 14,
            features: 2,
            base_resolution: 16.0,
            growth: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features == 0 {
            return Err(Error::InvalidArgument(
                "hash grid needs at least one level and one feature".into(),
            ));
        }
        if self.table_size == 0 || !self.table_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "table size must be a power of two, got {}",
                self.table_size
            )));
        }
        if self.base_resolution < 1.0 || self.growth < 1.0 {
            return Err(Error::InvalidArgument(
                "base resolution and growth factor must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Cells per axis at `level`.
    pub fn resolution(&self, level: usize) -> u32 {
        (self.base_resolution * self.growth.powi(level as i32)).floor() as u32
    }

    /// Features produced per encoded point.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    /// Flat length of the parameter table (levels × table_size × features).
    pub fn table_len(&self) -> usize {
        self.levels * self.table_size * self.features
    }
}

/// Result of resolving query points into weighted table lookups.
pub struct EncodedPoints {
    pub terms: Vec<GatherTerm>,
    /// Points that fell outside [0,1]^dim and were clamped to the boundary.
    pub clamped: u64,
}

/// Map vertex coordinates at `res` cells/axis into a table slot.
fn vertex_slot(v: [u32; 3], dim: usize, res: u32, table_size: usize) -> u32 {
    let verts = res as u64 + 1; // vertices per axis
    let direct = verts.checked_pow(dim as u32).is_some_and(|n| n <= table_size as u64);
    if direct {
        let mut slot = 0u64;
        let mut stride = 1u64;
        for d in 0..dim {
            slot += v[d] as u64 * stride;
            stride *= verts;
        }
        slot as u32
    } else {
        let mut h = 0u32;
        for d in 0..dim {
            h ^= v[d].wrapping_mul(HASH_PRIMES[d]);
        }
        h & (table_size as u32 - 1)
    }
}

/// Resolve `points` (row-major, `dim` coordinates each, expected in the unit
/// domain) into interpolation terms against the flat table layout
/// `(level * table_size + slot) * features + f`.
pub fn encode_points(cfg: &HashGridConfig, points: &[f32], dim: usize) -> Result<EncodedPoints> {
    if dim != 2 && dim != 3 {
        return Err(Error::InvalidArgument(format!(
            "hash grid supports 2 or 3 coordinates, got {}",
            dim
        )));
    }
    if points.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} coordinates do not split into {}-vectors",
            points.len(),
            dim
        )));
    }
    let n_points = points.len() / dim;
    let corners = 1usize << dim;
    let feat = cfg.features;
    let out_stride = cfg.output_dim();
    let mut terms = Vec::with_capacity(n_points * cfg.levels * corners);
    let mut clamped = 0u64;

    for p in 0..n_points {
        let mut x = [0.0f64; 3];
        let mut was_clamped = false;
        for d in 0..dim {
            let raw = points[p * dim + d] as f64;
            let c = raw.clamp(0.0, 1.0);
            if c != raw {
                was_clamped = true;
            }
            x[d] = c;
        }
        if was_clamped {
            clamped += 1;
        }
        for level in 0..cfg.levels {
            let res = cfg.resolution(level);
            let mut cell = [0u32; 3];
            let mut frac = [0.0f64; 3];
            for d in 0..dim {
                let pos = x[d] * res as f64;
                let c = (pos.floor() as u32).min(res.saturating_sub(1));
                cell[d] = c;
                frac[d] = pos - c as f64;
            }
            let out_base = (p * out_stride + level * feat) as u32;
            let level_base = (level * cfg.table_size) as u32;
            for corner in 0..corners {
                let mut v = [0u32; 3];
                let mut w = 1.0f64;
                for d in 0..dim {
                    if corner >> d & 1 == 1 {
                        v[d] = cell[d] + 1;
                        w *= frac[d];
                    } else {
                        v[d] = cell[d];
                        w *= 1.0 - frac[d];
                    }
                }
                if w == 0.0 {
                    continue;
                }
                let slot = vertex_slot(v, dim, res, cfg.table_size);
                terms.push(GatherTerm {
                    out_base,
                    table_base: (level_base + slot) * feat as u32,
                    weight: w as f32,
                });
            }
        }
    }
    Ok(EncodedPoints { terms, clamped })
}

/// Evaluate the encoding directly against a table (no tape); shared by tests
/// and the calibration path.
pub fn encode_eval(
    cfg: &HashGridConfig,
    table: &[f32],
    points: &[f32],
    dim: usize,
) -> Result<Vec<f32>> {
    let enc = encode_points(cfg, points, dim)?;
    let n_points = points.len() / dim;
    let mut out = vec![0.0f32; n_points * cfg.output_dim()];
    for t in &enc.terms {
        let ob = t.out_base as usize;
        let tb = t.table_base as usize;
        for f in 0..cfg.features {
            out[ob + f] += t.weight * table[tb + f];
        }
    }
    Ok(out)
}
