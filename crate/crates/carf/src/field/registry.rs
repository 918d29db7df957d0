//! Quantizable-component registry.
//!
//! Every quantized tensor or activation in the pipeline owns exactly one
//! component, in pipeline order. A component bundles the quantizer state,
//! a role tag that fixes its scheme, and enough structure (parameter
//! indices, input links) for compute/storage accounting.

use crate::error::{Error, Result};
use crate::field::model::{linear_name, linear_specs, FieldMode, LayerAct, ModelConfig};
use crate::quant::{QuantScheme, QuantizerState};
use serde::{Deserialize, Serialize};

/// What a component quantizes; fixes the quantization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Hash-grid codebook: both the stored table and its interpolated output.
    Codebook,
    /// Positional-encoding-adjacent values other than the codebook
    /// (direction encoding, geometric feature vector).
    PeOther,
    /// Linear layer weights and bias.
    Weight,
    /// ReLU or sigmoid activation output (non-negative, zero-anchored).
    ReluAct,
    /// Exponential activation output (unbounded, kept at high precision).
    ExpAct,
}

impl Role {
    pub fn scheme(&self) -> QuantScheme {
        match self {
            Role::Codebook | Role::PeOther => QuantScheme::Asymmetric,
            Role::Weight => QuantScheme::SignedSymmetric,
            Role::ReluAct | Role::ExpAct => QuantScheme::UnsignedSymmetric,
        }
    }
}

/// How many values feed a weight component's multiplies, per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLink {
    /// Component name supplying the activation.
    pub source: String,
    /// Number of input columns drawn from that source.
    pub columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub role: Role,
    pub state: QuantizerState,
    /// Indices into the model's parameter list covered by this component
    /// (weight+bias for Weight, the table for Codebook, empty otherwise).
    pub param_indices: Vec<usize>,
    /// For Weight components: where the multiplied activations come from.
    pub inputs: Vec<InputLink>,
    /// Rows of output this component produces per evaluated point
    /// (for compute accounting of the consuming layer).
    pub out_dim: usize,
}

impl Component {
    fn new(name: &str, role: Role, out_dim: usize) -> Self {
        Component {
            name: name.to_string(),
            role,
            state: QuantizerState::default_for(role.scheme()),
            param_indices: Vec::new(),
            inputs: Vec::new(),
            out_dim,
        }
    }
}

/// All quantizable components of a model, in pipeline order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub components: Vec<Component>,
}

impl Registry {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.components
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown component '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Component> {
        Ok(&self.components[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Component> {
        let i = self.index_of(name)?;
        Ok(&mut self.components[i])
    }

    /// Mean bitwidth across components, from the soft (trainable) values.
    pub fn mean_bitwidth(&self) -> f64 {
        if self.components.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.components.iter().map(|c| c.state.bits() as f64).sum();
        sum / self.components.len() as f64
    }
}

/// ReLU activation component name for a linear layer ("density_w1" →
/// "density_relu1").
fn relu_name(base: &str) -> String {
    let (head, idx) = base.rsplit_once("_w").expect("linear names end in _w<i>");
    format!("{head}_relu{idx}")
}

/// Build the registry for a model configuration.
///
/// Pipeline order, volumetric:
/// codebook, sh_dir, density_w1, density_relu1, density_w2, density_exp,
/// geo_feature, color_w1, color_relu1, color_w2, color_relu2, color_w3,
/// rgb_sigmoid — 13 components with default depths.
///
/// Planar: codebook, mlp_w1..relu.., mlp_w4, rgb_sigmoid — 9 with defaults.
pub fn build_registry(cfg: &ModelConfig) -> Registry {
    let mut comps: Vec<Component> = Vec::new();
    let enc = cfg.grid.output_dim();

    comps.push({
        let mut c = Component::new("codebook", Role::Codebook, enc);
        c.param_indices = vec![0];
        c
    });
    if cfg.mode == FieldMode::Volumetric {
        comps.push(Component::new("sh_dir", Role::PeOther, crate::field::sh::SH_DIM));
    }

    for (i, spec) in linear_specs(cfg).iter().enumerate() {
        let name = linear_name(spec);
        let (wi, bi) = crate::field::model::FieldModel::linear_param_indices(i);
        let mut weight = Component::new(&name, Role::Weight, spec.out_dim);
        weight.param_indices = vec![wi, bi];
        weight.inputs = input_links(cfg, spec, &comps);
        comps.push(weight);

        match spec.act {
            LayerAct::Relu => {
                comps.push(Component::new(&relu_name(&name), Role::ReluAct, spec.out_dim));
            }
            LayerAct::None => {
                // Density head output splits into the exp-activated density
                // and the raw geometric feature block.
                comps.push(Component::new("density_exp", Role::ExpAct, 1));
                comps.push(Component::new("geo_feature", Role::PeOther, cfg.geo_features));
            }
            LayerAct::Sigmoid => {
                // Sigmoid output is bounded (0,1) but not zero-anchored like a
                // rectified stream, so it takes the general asymmetric scheme.
                comps.push(Component::new("rgb_sigmoid", Role::PeOther, spec.out_dim));
            }
        }
    }

    Registry { components: comps }
}

/// Which activation components feed a linear layer, and how many columns each
/// contributes. The color head's first layer reads a concatenation.
fn input_links(
    cfg: &ModelConfig,
    spec: &crate::field::model::LinearSpec,
    built: &[Component],
) -> Vec<InputLink> {
    use crate::field::model::Head;
    let link = |source: &str, columns: usize| InputLink {
        source: source.to_string(),
        columns,
    };
    match (spec.head, spec.index) {
        (Head::Planar, 1) | (Head::Density, 1) => vec![link("codebook", cfg.grid.output_dim())],
        (Head::Color, 1) => vec![
            link("geo_feature", cfg.geo_features),
            link("sh_dir", crate::field::sh::SH_DIM),
        ],
        _ => {
            // previous layer's ReLU output; it is the most recent ReLU
            // component already built
            let prev = built
                .iter()
                .rev()
                .find(|c| c.role == Role::ReluAct)
                .expect("hidden layer must follow a ReLU activation");
            vec![link(&prev.name, spec.in_dim)]
        }
    }
}
