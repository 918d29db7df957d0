//! Quality and complexity accounting: PSNR, mean component bitwidth,
//! bit-operation counts, storage footprint, and the image-gradient
//! complexity estimator.

use crate::error::{Error, Result};
use crate::field::model::FieldModel;
use crate::field::registry::{Registry, Role};
use crate::scene::image::Image;

/// PSNR ceiling reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Fixed storage estimate for the container header.
pub const STORAGE_HEADER_BYTES: u64 = 512;
/// Fixed storage estimate per component record (name, scheme, grid, counts).
pub const STORAGE_COMPONENT_BYTES: u64 = 256;

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 99.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(a.mse(b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Mean bitwidth over the component set.
pub fn fqr(bits: &[u32]) -> Result<f64> {
    if bits.is_empty() {
        return Err(Error::InvalidArgument(
            "mean bitwidth over an empty component set".into(),
        ));
    }
    Ok(bits.iter().map(|&b| b as f64).sum::<f64>() / bits.len() as f64)
}

pub fn registry_fqr(registry: &Registry) -> Result<f64> {
    let bits: Vec<u32> = registry.components.iter().map(|c| c.state.bits()).collect();
    fqr(&bits)
}

/// One batch of multiply-accumulates: a weight component's products against
/// one of its activation sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MacEntry {
    pub component: String,
    pub source: String,
    pub macs: u128,
}

/// MAC counts of every linear layer for `points` evaluated sample points,
/// derived from the registry's input links.
pub fn standard_workload(registry: &Registry, points: u64) -> Vec<MacEntry> {
    let mut entries = Vec::new();
    for c in &registry.components {
        if c.role != Role::Weight {
            continue;
        }
        for link in &c.inputs {
            entries.push(MacEntry {
                component: c.name.clone(),
                source: link.source.clone(),
                macs: c.out_dim as u128 * link.columns as u128 * points as u128,
            });
        }
    }
    entries
}

/// Bit-operations: each MAC weighs (weight bitwidth) × (activation bitwidth).
/// Counts multiplications only; interpolation and compositing arithmetic stay
/// in full-precision glue and are excluded. Every multiplying (weight-role)
/// component must be covered by the workload.
pub fn bitops(registry: &Registry, workload: &[MacEntry]) -> Result<u128> {
    let mut total: u128 = 0;
    for entry in workload {
        let w = registry.get(&entry.component)?;
        let a = registry.get(&entry.source)?;
        total += entry.macs * w.state.bits() as u128 * a.state.bits() as u128;
    }
    for c in &registry.components {
        if c.role == Role::Weight && !workload.iter().any(|e| e.component == c.name) {
            return Err(Error::InvalidArgument(format!(
                "workload has no entry for multiplying component '{}'",
                c.name
            )));
        }
    }
    Ok(total)
}

/// Bit-operations in tera-bit-ops.
pub fn bitops_tera(ops: u128) -> f64 {
    ops as f64 / 1e12
}

/// Storage footprint split into quantized payload and metadata estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageBreakdown {
    /// (component name, payload bytes) for components that store parameters.
    pub per_component: Vec<(String, u64)>,
    pub payload_bytes: u64,
    pub metadata_bytes: u64,
    pub total_bytes: u64,
}

/// Information size of `count` codes of `bits` width, rounded up to whole
/// bytes across the component. The byte-aligned container stores one code per
/// ceil(B/8) bytes instead, which coincides with this whenever B is a
/// multiple of 8.
pub fn code_bytes(count: u64, bits: u32) -> u64 {
    (count * bits as u64).div_ceil(8)
}

/// Quantized model size: per parameter-holding component, count·ceil(B/8)
/// bytes of codes; activation-only components contribute metadata only.
pub fn storage_bytes(model: &FieldModel, registry: &Registry) -> StorageBreakdown {
    let mut per_component = Vec::new();
    let mut payload = 0u64;
    for c in &registry.components {
        if c.param_indices.is_empty() {
            continue;
        }
        let count: u64 = c
            .param_indices
            .iter()
            .map(|&i| model.params[i].numel() as u64)
            .sum();
        let bytes = code_bytes(count, c.state.bits());
        payload += bytes;
        per_component.push((c.name.clone(), bytes));
    }
    let metadata = STORAGE_HEADER_BYTES + STORAGE_COMPONENT_BYTES * registry.len() as u64;
    StorageBreakdown {
        per_component,
        payload_bytes: payload,
        metadata_bytes: metadata,
        total_bytes: payload + metadata,
    }
}

/// Scene-complexity estimator: mean over all pixels (and images) of the
/// channel-mean forward-difference gradient magnitude |∂x| + |∂y|.
/// Differences past the last row/column contribute zero.
pub fn avg_image_gradient(images: &[&Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "complexity estimate over an empty image set".into(),
        ));
    }
    let mut total = 0.0f64;
    let mut pixels = 0u64;
    for img in images {
        let (w, h) = (img.width, img.height);
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(x, y);
                let mut mag = 0.0f64;
                if x + 1 < w {
                    let px = img.pixel(x + 1, y);
                    for c in 0..3 {
                        mag += (px[c] - p[c]).abs() as f64;
                    }
                }
                if y + 1 < h {
                    let py = img.pixel(x, y + 1);
                    for c in 0..3 {
                        mag += (py[c] - p[c]).abs() as f64;
                    }
                }
                total += mag / 3.0;
                pixels += 1;
            }
        }
    }
    Ok(total / pixels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::model::ModelConfig;
    use crate::field::registry::{build_registry, Component, InputLink};
    use crate::quant::{QuantScheme, QuantizerState};

    fn flat(w: usize, h: usize, v: f32) -> Image {
        Image::from_fn(w, h, |_, _| [v; 3])
    }

    #[test]
    fn psnr_examples() {
        let a = flat(4, 4, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        let b = flat(4, 4, 0.4);
        // per-channel error 0.1 → MSE 0.01 → 20 dB (f32 wiggle in the images)
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let zero = flat(4, 4, 0.0);
        let one = flat(4, 4, 1.0);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        assert!(psnr(&flat(4, 4, 0.0), &flat(4, 5, 0.0)).is_err());
    }

    #[test]
    fn mean_bitwidth_examples() {
        let mut fifteen = vec![8u32; 14];
        fifteen.push(32);
        assert!((fqr(&fifteen).unwrap() - 9.60).abs() < 1e-12);
        assert_eq!(fqr(&[32; 5]).unwrap(), 32.0);
        assert_eq!(fqr(&[2; 7]).unwrap(), 2.0);
        assert!(fqr(&[]).is_err());
    }

    fn toy_registry(weight_bits: f64, act_bits: f64) -> Registry {
        let act = Component {
            name: "act_in".into(),
            role: Role::ReluAct,
            state: QuantizerState::new(QuantScheme::UnsignedSymmetric, act_bits, 1.0, None)
                .unwrap(),
            param_indices: vec![],
            inputs: vec![],
            out_dim: 64,
        };
        let weight = Component {
            name: "w".into(),
            role: Role::Weight,
            state: QuantizerState::new(QuantScheme::SignedSymmetric, weight_bits, 1.0, None)
                .unwrap(),
            param_indices: vec![1, 2],
            inputs: vec![InputLink {
                source: "act_in".into(),
                columns: 64,
            }],
            out_dim: 64,
        };
        Registry {
            components: vec![act, weight],
        }
    }

    #[test]
    fn bitops_of_one_square_layer() {
        let reg = toy_registry(8.0, 8.0);
        let workload = standard_workload(&reg, 1);
        assert_eq!(workload.len(), 1);
        assert_eq!(workload[0].macs, 4096);
        assert_eq!(bitops(&reg, &workload).unwrap(), 262_144);
    }

    #[test]
    fn bitops_is_bilinear_in_bitwidths() {
        let reg8 = toy_registry(8.0, 8.0);
        let workload = standard_workload(&reg8, 3);
        let full = bitops(&reg8, &workload).unwrap();
        let half_w = bitops(&toy_registry(4.0, 8.0), &workload).unwrap();
        assert_eq!(half_w * 2, full);
    }

    #[test]
    fn bitops_ratio_between_uniform_widths_is_sixteen() {
        let cfg = ModelConfig::planar_default(1);
        let mut reg32 = build_registry(&cfg);
        let mut reg8 = build_registry(&cfg);
        for c in &mut reg32.components {
            c.state.b = 32.0;
        }
        for c in &mut reg8.components {
            c.state.b = 8.0;
        }
        let workload = standard_workload(&reg32, 4096);
        let hi = bitops(&reg32, &workload).unwrap();
        let lo = bitops(&reg8, &workload).unwrap();
        assert_eq!(hi, lo * 16);
    }

    #[test]
    fn bitops_rejects_uncovered_multiplier() {
        let reg = toy_registry(8.0, 8.0);
        let err = bitops(&reg, &[]);
        assert!(err.is_err());
    }

    #[test]
    fn storage_counts_codebook_payload() {
        let mut cfg = ModelConfig::planar_default(1);
        cfg.grid.levels = 1; // single table of 2^14 entries × 2 features
        let model = FieldModel::init(cfg.clone()).unwrap();
        let mut reg = build_registry(&cfg);
        let s8 = storage_bytes(&model, &reg);
        assert_eq!(s8.per_component[0], ("codebook".to_string(), 32_768));

        reg.get_mut("codebook").unwrap().state.b = 4.0;
        let s4 = storage_bytes(&model, &reg);
        assert_eq!(s4.per_component[0].1, 16_384);
        assert_eq!(s4.total_bytes - s4.payload_bytes, s4.metadata_bytes);
    }

    #[test]
    fn full_precision_storage_dominates_quantized() {
        let cfg = ModelConfig::planar_default(1);
        let model = FieldModel::init(cfg.clone()).unwrap();
        let mut fp = build_registry(&cfg);
        for c in &mut fp.components {
            c.state.b = 32.0;
        }
        let quant = build_registry(&cfg); // 8-bit placeholder states
        assert!(
            storage_bytes(&model, &fp).total_bytes > storage_bytes(&model, &quant).total_bytes
        );
    }

    #[test]
    fn gradient_of_constant_image_is_zero() {
        let img = flat(9, 7, 0.42);
        assert_eq!(avg_image_gradient(&[&img]).unwrap(), 0.0);
    }

    #[test]
    fn gradient_of_unit_step_edge() {
        // step of height 1 between columns 3 and 4 of an 8-wide image:
        // H edge pixels contribute 1 each → mean = 1/W
        let img = Image::from_fn(8, 4, |x, _| if x < 4 { [0.0; 3] } else { [1.0; 3] });
        let g = avg_image_gradient(&[&img]).unwrap();
        assert!((g - 1.0 / 8.0).abs() < 1e-9, "{g}");
    }

    #[test]
    fn noise_outranks_smooth_ramp() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let noise = Image::from_fn(16, 16, |_, _| {
            [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]
        });
        let ramp = Image::from_fn(16, 16, |x, _| [x as f32 / 15.0; 3]);
        assert!(
            avg_image_gradient(&[&noise]).unwrap() > avg_image_gradient(&[&ramp]).unwrap()
        );
    }

    #[test]
    fn gradient_invariant_under_transpose_and_rotation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = Image::from_fn(10, 6, |_, _| {
            [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]
        });
        let transposed = Image::from_fn(6, 10, |x, y| img.pixel(y, x));
        let rotated = Image::from_fn(10, 6, |x, y| img.pixel(9 - x, 5 - y));
        let g = avg_image_gradient(&[&img]).unwrap();
        assert!((g - avg_image_gradient(&[&transposed]).unwrap()).abs() < 1e-12);
        assert!((g - avg_image_gradient(&[&rotated]).unwrap()).abs() < 1e-12);
    }
}
