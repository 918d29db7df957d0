//! Float checkpoint container: model configuration, parameter tensors, and
//! (optionally) trained quantizer state in one file.
//!
//! Layout: 4-byte magic `CARC`, u32 LE format version, u64 LE header length,
//! a JSON header (model config, parameter shapes, optional component
//! registry, optional reference loss), then each parameter tensor's values
//! as little-endian f32 in declaration order.

use crate::error::{Error, Result};
use crate::field::model::{FieldModel, ModelConfig};
use crate::field::registry::{build_registry, Registry};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

const MAGIC: [u8; 4] = *b"CARC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    param_shapes: Vec<Vec<usize>>,
    registry: Option<Registry>,
    fp_loss: Option<f64>,
}

/// Everything a checkpoint file holds.
pub struct Checkpoint {
    pub model: FieldModel,
    /// Present once quantizers have been calibrated or trained.
    pub registry: Option<Registry>,
    /// Full-precision reference loss, recorded by baseline training.
    pub fp_loss: Option<f64>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &FieldModel,
    registry: Option<&Registry>,
    fp_loss: Option<f64>,
) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        param_shapes: model.params.iter().map(|t| t.shape().to_vec()).collect(),
        registry: registry.cloned(),
        fp_loss,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for t in &model.params {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Container(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Container(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    header.config.validate()?;

    let mut params = Vec::with_capacity(header.param_shapes.len());
    for shape in &header.param_shapes {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        f.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Tensor::new(shape.clone(), data)?);
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::Container(
            "checkpoint has trailing bytes after the declared payload".into(),
        ));
    }

    let model = FieldModel {
        config: header.config,
        params,
    };
    // Structural cross-checks: shapes must match what the config implies,
    // and a saved registry must name the same components.
    let reference = FieldModel::init(model.config.clone())?;
    if reference.params.len() != model.params.len() {
        return Err(Error::Container(format!(
            "checkpoint holds {} parameter tensors, config implies {}",
            model.params.len(),
            reference.params.len()
        )));
    }
    for (i, (a, b)) in reference.params.iter().zip(&model.params).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::Container(format!(
                "parameter {i} has shape {:?}, config implies {:?}",
                b.shape(),
                a.shape()
            )));
        }
    }
    if let Some(reg) = &header.registry {
        let fresh = build_registry(&model.config);
        if reg.len() != fresh.len()
            || reg
                .components
                .iter()
                .zip(&fresh.components)
                .any(|(a, b)| a.name != b.name)
        {
            return Err(Error::Container(
                "saved component registry does not match the model architecture".into(),
            ));
        }
        for c in &reg.components {
            c.state.derive().map_err(|e| {
                Error::Container(format!("component {}: {e}", c.name))
            })?;
        }
    }
    Ok(Checkpoint {
        model,
        registry: header.registry,
        fp_loss: header.fp_loss,
    })
}
