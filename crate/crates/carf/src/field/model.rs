//! Field model: hash-grid codebook plus small MLP head(s).
//!
//! Two operating modes share one parameter layout:
//! - planar: (u, v) → RGB, a single MLP ending in a sigmoid;
//! - volumetric: (x, y, z) → density via an exponential head plus a geometric
//!   feature vector, which joins the encoded view direction in a color head
//!   ending in a sigmoid.

use crate::error::{Error, Result};
use crate::field::hash::HashGridConfig;
use crate::field::sh::SH_DIM;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldMode {
    /// 2D image field: coordinates → RGB.
    Planar,
    /// 3D radiance field: position × view direction → (density, RGB).
    Volumetric,
}

impl FieldMode {
    pub fn coord_dim(&self) -> usize {
        match self {
            FieldMode::Planar => 2,
            FieldMode::Volumetric => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FieldMode::Planar => "2d",
            FieldMode::Volumetric => "3d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: FieldMode,
    pub grid: HashGridConfig,
    /// Width of every hidden layer.
    pub width: usize,
    /// Hidden (ReLU) layers in the planar MLP.
    pub hidden_layers_2d: usize,
    /// Hidden layers in the volumetric density head.
    pub density_hidden_layers: usize,
    /// Hidden layers in the volumetric color head.
    pub color_hidden_layers: usize,
    /// Geometric feature width handed from the density head to the color head.
    pub geo_features: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn planar_default(seed: u64) -> Self {
        ModelConfig {
            mode: FieldMode::Planar,
            grid: HashGridConfig::desk_default(),
            width: 64,
            hidden_layers_2d: 3,
            density_hidden_layers: 1,
            color_hidden_layers: 2,
            geo_features: 15,
            seed,
        }
    }

    pub fn volumetric_default(seed: u64) -> Self {
        ModelConfig {
            mode: FieldMode::Volumetric,
            ..ModelConfig::planar_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.width == 0 {
            return Err(Error::InvalidArgument("MLP width must be positive".into()));
        }
        match self.mode {
            FieldMode::Planar => {
                if self.hidden_layers_2d == 0 {
                    return Err(Error::InvalidArgument(
                        "planar MLP needs at least one hidden layer".into(),
                    ));
                }
            }
            FieldMode::Volumetric => {
                if self.density_hidden_layers == 0 || self.color_hidden_layers == 0 {
                    return Err(Error::InvalidArgument(
                        "volumetric heads need at least one hidden layer".into(),
                    ));
                }
                if self.geo_features == 0 {
                    return Err(Error::InvalidArgument(
                        "volumetric mode needs a geometric feature channel".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Activation applied after a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerAct {
    Relu,
    /// Raw output (volumetric density head output, split downstream).
    None,
    Sigmoid,
}

/// Which head a linear layer belongs to (naming/registry purposes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Planar,
    Density,
    Color,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearSpec {
    pub head: Head,
    /// 1-based index within its head.
    pub index: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: LayerAct,
}

/// Enumerate each head's linear layers in pipeline order.
pub fn linear_specs(cfg: &ModelConfig) -> Vec<LinearSpec> {
    let enc = cfg.grid.output_dim();
    let w = cfg.width;
    let mut specs = Vec::new();
    match cfg.mode {
        FieldMode::Planar => {
            let mut in_dim = enc;
            for i in 0..cfg.hidden_layers_2d {
                specs.push(LinearSpec {
                    head: Head::Planar,
                    index: i + 1,
                    in_dim,
                    out_dim: w,
                    act: LayerAct::Relu,
                });
                in_dim = w;
            }
            specs.push(LinearSpec {
                head: Head::Planar,
                index: cfg.hidden_layers_2d + 1,
                in_dim,
                out_dim: 3,
                act: LayerAct::Sigmoid,
            });
        }
        FieldMode::Volumetric => {
            let mut in_dim = enc;
            for i in 0..cfg.density_hidden_layers {
                specs.push(LinearSpec {
                    head: Head::Density,
                    index: i + 1,
                    in_dim,
                    out_dim: w,
                    act: LayerAct::Relu,
                });
                in_dim = w;
            }
            specs.push(LinearSpec {
                head: Head::Density,
                index: cfg.density_hidden_layers + 1,
                in_dim,
                out_dim: 1 + cfg.geo_features,
                act: LayerAct::None,
            });
            let mut in_dim = cfg.geo_features + SH_DIM;
            for i in 0..cfg.color_hidden_layers {
                specs.push(LinearSpec {
                    head: Head::Color,
                    index: i + 1,
                    in_dim,
                    out_dim: w,
                    act: LayerAct::Relu,
                });
                in_dim = w;
            }
            specs.push(LinearSpec {
                head: Head::Color,
                index: cfg.color_hidden_layers + 1,
                in_dim,
                out_dim: 3,
                act: LayerAct::Sigmoid,
            });
        }
    }
    specs
}

/// Stable name of a linear layer ("mlp_w2", "density_w1", "color_w3", ...).
pub fn linear_name(spec: &LinearSpec) -> String {
    let head = match spec.head {
        Head::Planar => "mlp",
        Head::Density => "density",
        Head::Color => "color",
    };
    format!("{}_w{}", head, spec.index)
}

/// A field model's trainable tensors: codebook at index 0, then weight/bias
/// pairs in layer order.
#[derive(Debug, Clone)]
pub struct FieldModel {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

impl FieldModel {
    /// Seeded initialization: near-zero codebook, Xavier-uniform weights,
    /// zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let table: Vec<f32> = (0..config.grid.table_len())
            .map(|_| rng.gen_range(-1e-4..1e-4))
            .collect();
        params.push(Tensor::new(vec![table.len()], table)?);
        for spec in linear_specs(&config) {
            let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            let w: Vec<f32> = (0..spec.in_dim * spec.out_dim)
                .map(|_| rng.gen_range(-limit..limit) as f32)
                .collect();
            params.push(Tensor::new(vec![spec.out_dim, spec.in_dim], w)?);
            params.push(Tensor::zeros(vec![spec.out_dim]));
        }
        Ok(FieldModel { config, params })
    }

    /// Parameter tensor indices of linear layer `i` (weight, bias).
    pub fn linear_param_indices(i: usize) -> (usize, usize) {
        (1 + 2 * i, 2 + 2 * i)
    }

    pub fn codebook(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_layer_shapes() {
        let cfg = ModelConfig::planar_default(1);
        let specs = linear_specs(&cfg);
        assert_eq!(specs.len(), 4);
        assert_eq!(specs[0].in_dim, 16);
        assert_eq!(specs[3].out_dim, 3);
        assert_eq!(specs[3].act, LayerAct::Sigmoid);
    }

    #[test]
    fn volumetric_layer_shapes() {
        let cfg = ModelConfig::volumetric_default(1);
        let specs = linear_specs(&cfg);
        assert_eq!(specs.len(), 5);
        // density output carries 1 density + 15 geometric features
        assert_eq!(specs[1].out_dim, 16);
        assert_eq!(specs[1].act, LayerAct::None);
        // color head consumes features + 9 direction values
        assert_eq!(specs[2].in_dim, 15 + SH_DIM);
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ModelConfig::planar_default(7);
        let a = FieldModel::init(cfg.clone()).unwrap();
        let b = FieldModel::init(cfg).unwrap();
        assert_eq!(a.params.len(), 1 + 2 * 4);
        assert_eq!(a.params[0].numel(), 8 * (1 << 14) * 2);
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.data(), y.data());
        }
        assert!(a.codebook().data().iter().all(|v| v.abs() <= 1e-4));
    }
}
