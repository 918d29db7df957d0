//! Builds the differentiable forward pass of a field model on a tape,
//! inserting fake-quantization nodes according to the component registry.

use crate::autodiff::{Activation, NodeId, ParamKey, QuantLeaves, Tape};
use crate::error::{Error, Result};
use crate::field::hash::encode_points;
use crate::field::model::{linear_name, linear_specs, FieldMode, FieldModel, LayerAct};
use crate::field::registry::Registry;
use crate::field::sh::{sh_encode_batch, SH_DIM};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// How much of the quantization machinery the forward pass engages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// No quantization nodes at all (training the float baseline, calibration).
    FullPrecision,
    /// Fake-quantize parameters and activations (quantization-aware passes).
    FakeQuant,
    /// Parameters already hold dequantized values (integer-path replay):
    /// skip parameter quantizers, keep activation quantizers.
    PreQuantizedParams,
}

/// Tape handles produced by one forward build.
pub struct ForwardHandles {
    /// Final RGB output, one row per evaluated point, [P, 3].
    pub rgb: NodeId,
    /// Quantized density column [P, 1]; volumetric mode only.
    pub sigma: Option<NodeId>,
    /// Model parameter leaves, index-aligned with `FieldModel::params`.
    pub param_leaves: Vec<NodeId>,
    /// Per-component quantizer scalar leaves (None in full-precision mode).
    pub quant_leaves: Vec<Option<QuantLeaves>>,
    /// Per-component node holding the raw values its quantizer sees
    /// (activation components and the codebook output; weight components
    /// read their tensors from the model directly).
    pub pre_quant: Vec<Option<NodeId>>,
    /// Input points that fell outside the unit domain and were clamped.
    pub clamped_points: u64,
}

/// Internal wiring state threaded through the build.
struct Wiring<'a> {
    tape: &'a mut Tape,
    mode: QuantMode,
    grids: Vec<QuantParams>,
    leaves: Vec<Option<QuantLeaves>>,
    pre_quant: Vec<Option<NodeId>>,
}

impl<'a> Wiring<'a> {
    /// Record the raw activation and append its quantizer when enabled.
    fn quantize_act(&mut self, ci: usize, x: NodeId) -> NodeId {
        self.pre_quant[ci] = Some(x);
        match self.mode {
            QuantMode::FullPrecision => x,
            QuantMode::FakeQuant | QuantMode::PreQuantizedParams => {
                self.tape
                    .fake_quant(x, self.grids[ci], self.leaves[ci].expect("leaves exist"))
            }
        }
    }

    /// Append a parameter quantizer; pre-quantized replay skips it because
    /// the tensor already holds grid values.
    fn quantize_param(&mut self, ci: usize, x: NodeId) -> NodeId {
        match self.mode {
            QuantMode::FullPrecision | QuantMode::PreQuantizedParams => x,
            QuantMode::FakeQuant => {
                self.tape
                    .fake_quant(x, self.grids[ci], self.leaves[ci].expect("leaves exist"))
            }
        }
    }
}

/// Wire one forward pass. `positions` is row-major [P, coord_dim] in the unit
/// domain; `dirs` ([P, 3] unit vectors) is required in volumetric mode.
pub fn build_forward(
    tape: &mut Tape,
    model: &FieldModel,
    registry: &Registry,
    mode: QuantMode,
    positions: &[f32],
    dirs: Option<&[f32]>,
) -> Result<ForwardHandles> {
    let cfg = &model.config;
    let dim = cfg.mode.coord_dim();
    if positions.is_empty() || positions.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "positions length {} is not a positive multiple of {}",
            positions.len(),
            dim
        )));
    }
    let points = positions.len() / dim;

    let encoded = encode_points(&cfg.grid, positions, dim)?;

    let param_leaves: Vec<NodeId> = model
        .params
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param_leaf(t.clone(), ParamKey::Model(i)))
        .collect();

    let mut grids = Vec::with_capacity(registry.len());
    let mut leaves: Vec<Option<QuantLeaves>> = Vec::with_capacity(registry.len());
    for (ci, comp) in registry.components.iter().enumerate() {
        grids.push(comp.state.derive()?);
        if mode == QuantMode::FullPrecision {
            leaves.push(None);
        } else {
            let b = tape.param_leaf(Tensor::scalar(comp.state.b as f32), ParamKey::QuantB(ci));
            let r_v =
                tape.param_leaf(Tensor::scalar(comp.state.r_v as f32), ParamKey::QuantRv(ci));
            let v_max = comp.state.v_max.map(|v| {
                tape.param_leaf(Tensor::scalar(v as f32), ParamKey::QuantVmax(ci))
            });
            leaves.push(Some(QuantLeaves { b, r_v, v_max }));
        }
    }

    let mut w = Wiring {
        tape,
        mode,
        grids,
        leaves,
        pre_quant: vec![None; registry.len()],
    };

    // Codebook: quantized table → interpolation → quantized output, both
    // stages under the single codebook component.
    let cb = registry.index_of("codebook")?;
    let table_q = w.quantize_param(cb, param_leaves[0]);
    let gathered = w.tape.gather_sum(
        table_q,
        encoded.terms,
        vec![points, cfg.grid.output_dim()],
        cfg.grid.features,
    );
    let mut x = w.quantize_act(cb, gathered);

    // Direction encoding enters before the color head in volumetric mode.
    let sh_q = if cfg.mode == FieldMode::Volumetric {
        let dirs = dirs.ok_or_else(|| {
            Error::InvalidArgument("volumetric forward requires view directions".into())
        })?;
        if dirs.len() != points * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} direction values for {} points",
                dirs.len(),
                points
            )));
        }
        let sh = sh_encode_batch(dirs)?;
        let sh_leaf = w.tape.leaf(Tensor::new(vec![points, SH_DIM], sh)?);
        let ci = registry.index_of("sh_dir")?;
        Some(w.quantize_act(ci, sh_leaf))
    } else {
        None
    };

    let mut rgb = None;
    let mut sigma = None;
    for (li, spec) in linear_specs(cfg).iter().enumerate() {
        let ci = registry.index_of(&linear_name(spec))?;
        let (wi, bi) = FieldModel::linear_param_indices(li);
        let weight_q = w.quantize_param(ci, param_leaves[wi]);
        let bias_q = w.quantize_param(ci, param_leaves[bi]);
        let lin = w.tape.linear(x, weight_q, Some(bias_q))?;
        match spec.act {
            LayerAct::Relu => {
                let a = w.tape.activation(Activation::Relu, lin);
                let rc = registry.index_of(&format!(
                    "{}_relu{}",
                    linear_name(spec).rsplit_once("_w").unwrap().0,
                    spec.index
                ))?;
                x = w.quantize_act(rc, a);
            }
            LayerAct::None => {
                // Density head output: column 0 is the raw density, the rest
                // is the geometric feature block feeding the color head.
                let sig_raw = w.tape.slice_cols(lin, 0, 1)?;
                let sig_act = w.tape.activation(Activation::Exp, sig_raw);
                let ec = registry.index_of("density_exp")?;
                sigma = Some(w.quantize_act(ec, sig_act));

                let geo = w.tape.slice_cols(lin, 1, 1 + cfg.geo_features)?;
                let gc = registry.index_of("geo_feature")?;
                let geo_q = w.quantize_act(gc, geo);
                let sh_q = sh_q.expect("volumetric mode encoded directions");
                x = w.tape.concat_cols(geo_q, sh_q)?;
            }
            LayerAct::Sigmoid => {
                let a = w.tape.activation(Activation::Sigmoid, lin);
                let rc = registry.index_of("rgb_sigmoid")?;
                rgb = Some(w.quantize_act(rc, a));
            }
        }
    }

    Ok(ForwardHandles {
        rgb: rgb.expect("every head ends in a sigmoid output"),
        sigma,
        param_leaves,
        quant_leaves: w.leaves,
        pre_quant: w.pre_quant,
        clamped_points: encoded.clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::model::ModelConfig;
    use crate::field::registry::build_registry;

    fn unit_dirs(n: usize) -> Vec<f32> {
        (0..n).flat_map(|_| [0.0, 0.0, 1.0]).collect()
    }

    #[test]
    fn planar_forward_shapes() {
        let model = FieldModel::init(ModelConfig::planar_default(3)).unwrap();
        let registry = build_registry(&model.config);
        let mut tape = Tape::new();
        let pos = vec![0.1, 0.2, 0.8, 0.9, 0.5, 0.5];
        let h = build_forward(
            &mut tape,
            &model,
            &registry,
            QuantMode::FullPrecision,
            &pos,
            None,
        )
        .unwrap();
        assert_eq!(tape.value(h.rgb).shape(), &[3, 3]);
        assert!(h.sigma.is_none());
        assert!(h.quant_leaves.iter().all(|l| l.is_none()));
        // raw activations captured for every non-weight component
        for (c, pq) in registry.components.iter().zip(&h.pre_quant) {
            use crate::field::registry::Role;
            if c.role != Role::Weight {
                assert!(pq.is_some(), "{} not captured", c.name);
            }
        }
    }

    #[test]
    fn volumetric_forward_shapes() {
        let model = FieldModel::init(ModelConfig::volumetric_default(3)).unwrap();
        let registry = build_registry(&model.config);
        let mut tape = Tape::new();
        let pos = vec![0.1, 0.2, 0.3, 0.6, 0.7, 0.8];
        let h = build_forward(
            &mut tape,
            &model,
            &registry,
            QuantMode::FakeQuant,
            &pos,
            Some(&unit_dirs(2)),
        )
        .unwrap();
        assert_eq!(tape.value(h.rgb).shape(), &[2, 3]);
        assert_eq!(tape.value(h.sigma.unwrap()).shape(), &[2, 1]);
        assert!(h.quant_leaves.iter().all(|l| l.is_some()));
    }

    #[test]
    fn volumetric_requires_directions() {
        let model = FieldModel::init(ModelConfig::volumetric_default(3)).unwrap();
        let registry = build_registry(&model.config);
        let mut tape = Tape::new();
        let err = build_forward(
            &mut tape,
            &model,
            &registry,
            QuantMode::FullPrecision,
            &[0.1, 0.2, 0.3],
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn wide_bitwidth_fake_quant_tracks_full_precision() {
        // At 32 bits with calibrated ranges the quantization error is far
        // below f32 resolution, so both modes must agree closely.
        let model = FieldModel::init(ModelConfig::planar_default(9)).unwrap();
        let mut registry = build_registry(&model.config);
        let pos: Vec<f32> = vec![0.13, 0.87, 0.42, 0.58, 0.99, 0.01, 0.5, 0.25];

        let mut fp_tape = Tape::new();
        let fp = build_forward(
            &mut fp_tape,
            &model,
            &registry,
            QuantMode::FullPrecision,
            &pos,
            None,
        )
        .unwrap();

        // Calibrate every component from the captured activations / tensors.
        for ci in 0..registry.len() {
            let samples: Vec<f32> = match registry.components[ci].param_indices.as_slice() {
                [] => fp_tape.value(fp.pre_quant[ci].unwrap()).data().to_vec(),
                idx => {
                    let mut s: Vec<f32> = idx
                        .iter()
                        .flat_map(|&i| model.params[i].data().iter().copied())
                        .collect();
                    if let Some(n) = fp.pre_quant[ci] {
                        s.extend_from_slice(fp_tape.value(n).data());
                    }
                    s
                }
            };
            let scheme = registry.components[ci].state.scheme;
            registry.components[ci].state =
                crate::quant::ptq_calibrate(&samples, scheme, 32.0).unwrap();
        }

        let mut q_tape = Tape::new();
        let q = build_forward(
            &mut q_tape,
            &model,
            &registry,
            QuantMode::FakeQuant,
            &pos,
            None,
        )
        .unwrap();
        for (a, b) in fp_tape
            .value(fp.rgb)
            .data()
            .iter()
            .zip(q_tape.value(q.rgb).data())
        {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
