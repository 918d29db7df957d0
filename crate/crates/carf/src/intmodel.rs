//! Integer model container and the replay path that proves quantized
//! inference matches the fake-quantized training graph.
//!
//! Layout (all integers little-endian):
//!   region 1 — 512-byte file header: magic `CARF`, u32 format version,
//!     u32 component count, u32 JSON length, then a JSON blob holding the
//!     model configuration, space-padded to the region size;
//!   region 2 — one 256-byte JSON record per component (name, scheme, soft
//!     and effective bitwidth, range, step size, zero offset, code count,
//!     payload size), space-padded;
//!   region 3 — per-component code payloads in component order. Each code
//!     is stored biased (`code - q_min`) in ceil(bits / 8) bytes, so the
//!     payload region's size is exactly what the storage accounting reports
//!     when every stored bitwidth is a whole number of bytes.
//!
//! Only components that own parameters (the codebook and the linear layers)
//! carry payloads; activation components contribute a record so the replay
//! side can rebuild their quantizers. Penalty exemptions are a training-time
//! setting and are not persisted; imports restore the architecture default.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::field::forward::{build_forward, QuantMode};
use crate::field::model::{FieldMode, FieldModel, ModelConfig};
use crate::field::registry::{build_registry, Registry, Role};
use crate::quant::{QuantParams, QuantScheme, QuantizerState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

const MAGIC: [u8; 4] = *b"CARF";
const VERSION: u32 = 1;
/// Region-1 size; matches the storage accounting's header constant.
const HEADER_BYTES: usize = 512;
/// Region-2 record size; matches the storage accounting's per-component
/// metadata constant.
const RECORD_BYTES: usize = 256;

/// Default deviation bound for replay verification.
pub const CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: ModelConfig,
}

#[derive(Serialize, Deserialize)]
struct ComponentRecord {
    name: String,
    scheme: QuantScheme,
    /// Trained soft bitwidth (carries the fractional state).
    b: f64,
    r_v: f64,
    v_max: Option<f64>,
    /// Effective integer bitwidth the codes were written at.
    bits: u32,
    /// Step size, recorded for external readers; must match re-derivation.
    s: f64,
    /// Zero offset, recorded for external readers; must match re-derivation.
    z: i64,
    /// Number of codes in this component's payload (0 for activations).
    count: u64,
    payload_bytes: u64,
}

fn bytes_per_code(bits: u32) -> usize {
    bits.div_ceil(8) as usize
}

fn pad_json(bytes: Vec<u8>, region: usize, what: &str) -> Result<Vec<u8>> {
    if bytes.len() > region {
        return Err(Error::Container(format!(
            "{what} needs {} bytes, region holds {region}",
            bytes.len()
        )));
    }
    let mut out = bytes;
    out.resize(region, b' ');
    Ok(out)
}

/// Concatenated parameter values of one component, in index order.
fn component_values(model: &FieldModel, param_indices: &[usize]) -> Vec<f32> {
    param_indices
        .iter()
        .flat_map(|&i| model.params[i].data().iter().copied())
        .collect()
}

/// Write the quantized model: every parameter component's integer codes plus
/// enough metadata to rebuild all quantizers.
pub fn export_integer_model(path: &Path, model: &FieldModel, registry: &Registry) -> Result<()> {
    let fresh = build_registry(&model.config);
    if registry.len() != fresh.len()
        || registry
            .components
            .iter()
            .zip(&fresh.components)
            .any(|(a, b)| a.name != b.name)
    {
        return Err(Error::Container(
            "component registry does not match the model architecture".into(),
        ));
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = FileHeader {
        config: model.config.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut region1 = Vec::with_capacity(HEADER_BYTES);
    region1.extend_from_slice(&MAGIC);
    region1.extend_from_slice(&VERSION.to_le_bytes());
    region1.extend_from_slice(&(registry.len() as u32).to_le_bytes());
    region1.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    region1.extend_from_slice(&header_json);
    f.write_all(&pad_json(region1, HEADER_BYTES, "file header")?)?;

    let mut payloads: Vec<Vec<u8>> = Vec::with_capacity(registry.len());
    for c in &registry.components {
        let qp = c.state.derive()?;
        let values = component_values(model, &c.param_indices);
        let codes = qp.integer_quantize_slice(&values);
        let step = bytes_per_code(qp.bits);
        let mut payload = Vec::with_capacity(codes.len() * step);
        for code in &codes {
            let biased = (code - qp.q_min) as u64;
            payload.extend_from_slice(&biased.to_le_bytes()[..step]);
        }
        let record = ComponentRecord {
            name: c.name.clone(),
            scheme: c.state.scheme,
            b: c.state.b,
            r_v: c.state.r_v,
            v_max: c.state.v_max,
            bits: qp.bits,
            s: qp.s,
            z: qp.z,
            count: codes.len() as u64,
            payload_bytes: payload.len() as u64,
        };
        let record_json = serde_json::to_vec(&record)?;
        f.write_all(&pad_json(record_json, RECORD_BYTES, "component record")?)?;
        payloads.push(payload);
    }
    for payload in &payloads {
        f.write_all(payload)?;
    }
    f.flush()?;
    Ok(())
}

/// An imported integer model: dequantized parameters ready for replay, the
/// reconstructed quantizer registry, and the raw codes for auditing.
pub struct IntModel {
    /// Parameters hold dequantized values; run with
    /// [`QuantMode::PreQuantizedParams`] so they are never re-quantized.
    pub model: FieldModel,
    pub registry: Registry,
    /// Integer codes per component (`None` for activation-only components).
    pub codes: Vec<Option<Vec<i64>>>,
}

fn read_exact_region(
    f: &mut impl std::io::Read,
    len: usize,
    what: &str,
) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf)
        .map_err(|e| Error::Container(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub fn import_integer_model(path: &Path) -> Result<IntModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let region1 = read_exact_region(&mut f, HEADER_BYTES, "file header")?;
    if region1[0..4] != MAGIC {
        return Err(Error::Container(format!(
            "{}: not an integer model file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(region1[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Container(format!(
            "unsupported integer model version {version}"
        )));
    }
    let count = u32::from_le_bytes(region1[8..12].try_into().unwrap()) as usize;
    let json_len = u32::from_le_bytes(region1[12..16].try_into().unwrap()) as usize;
    if 16 + json_len > HEADER_BYTES {
        return Err(Error::Container("header JSON overruns its region".into()));
    }
    let header: FileHeader = serde_json::from_slice(&region1[16..16 + json_len])?;
    header.config.validate()?;

    let mut registry = build_registry(&header.config);
    if registry.len() != count {
        return Err(Error::Container(format!(
            "file lists {count} components, architecture has {}",
            registry.len()
        )));
    }

    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let raw = read_exact_region(&mut f, RECORD_BYTES, "component record")?;
        let record: ComponentRecord = serde_json::from_slice(&raw).map_err(|e| {
            Error::Container(format!("component record {i} is not valid JSON: {e}"))
        })?;
        records.push(record);
    }

    // Rebuild quantizer states and verify the recorded derived values; a
    // mismatch means the header was edited or the file is corrupt.
    let mut model = FieldModel::init(header.config.clone())?;
    let mut codes: Vec<Option<Vec<i64>>> = vec![None; count];
    for (ci, record) in records.iter().enumerate() {
        let comp = &mut registry.components[ci];
        if record.name != comp.name {
            return Err(Error::Container(format!(
                "component {ci} is named {:?}, architecture expects {:?}",
                record.name, comp.name
            )));
        }
        if record.scheme != comp.role.scheme() {
            return Err(Error::Container(format!(
                "component {}: scheme {:?} does not match its role",
                comp.name, record.scheme
            )));
        }
        let mut state =
            QuantizerState::new(record.scheme, record.b, record.r_v, record.v_max)?;
        state.penalty_exempt = comp.role == Role::ExpAct;
        let qp = state.derive()?;
        if qp.bits != record.bits
            || qp.s.to_bits() != record.s.to_bits()
            || qp.z != record.z
        {
            return Err(Error::Container(format!(
                "component {}: recorded grid (bits {}, s {}, z {}) does not match \
                 its quantizer state (bits {}, s {}, z {})",
                comp.name, record.bits, record.s, record.z, qp.bits, qp.s, qp.z
            )));
        }
        let expected: u64 = comp
            .param_indices
            .iter()
            .map(|&i| model.params[i].numel() as u64)
            .sum();
        if record.count != expected {
            return Err(Error::Container(format!(
                "component {}: {} codes recorded, parameters need {}",
                comp.name, record.count, expected
            )));
        }
        let step = bytes_per_code(qp.bits);
        if record.payload_bytes != record.count * step as u64 {
            return Err(Error::Container(format!(
                "component {}: payload size {} does not match {} codes at {} bytes each",
                comp.name, record.payload_bytes, record.count, step
            )));
        }
        comp.state = state;
        codes[ci] = if comp.param_indices.is_empty() {
            None
        } else {
            Some(Vec::with_capacity(record.count as usize))
        };
    }

    for (ci, record) in records.iter().enumerate() {
        if record.count == 0 {
            continue;
        }
        let qp = registry.components[ci].state.derive()?;
        let step = bytes_per_code(qp.bits);
        let raw = read_exact_region(
            &mut f,
            record.payload_bytes as usize,
            &format!("payload of component {}", record.name),
        )?;
        let store = codes[ci].as_mut().expect("payload for parameter component");
        for chunk in raw.chunks_exact(step) {
            let mut word = [0u8; 8];
            word[..step].copy_from_slice(chunk);
            let code = u64::from_le_bytes(word) as i64 + qp.q_min;
            qp.dequantize(code).map_err(|_| {
                Error::Container(format!(
                    "component {}: code {code} outside grid [{}, {}]",
                    record.name, qp.q_min, qp.q_max
                ))
            })?;
            store.push(code);
        }
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::Container(
            "integer model has trailing bytes after the declared payloads".into(),
        ));
    }

    // Install dequantized parameter values.
    for (ci, comp) in registry.components.iter().enumerate() {
        let Some(codes) = &codes[ci] else { continue };
        let qp = comp.state.derive()?;
        let mut cursor = 0usize;
        for &pi in &comp.param_indices {
            let data = model.params[pi].data_mut();
            for v in data.iter_mut() {
                *v = qp.dequantize(codes[cursor])? as f32;
                cursor += 1;
            }
        }
    }
    Ok(IntModel {
        model,
        registry,
        codes,
    })
}

/// Outcome of a successful replay verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    pub probes: usize,
    /// Largest absolute output difference between the fake-quantized
    /// reference and the integer replay.
    pub max_abs_deviation: f64,
}

/// Deterministic probe inputs for the consistency check.
fn probe_inputs(mode: FieldMode, probes: usize, seed: u64) -> (Vec<f32>, Option<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        FieldMode::Planar => {
            let pos = (0..probes * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
            (pos, None)
        }
        FieldMode::Volumetric => {
            let pos = (0..probes * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut dirs = Vec::with_capacity(probes * 3);
            for _ in 0..probes {
                loop {
                    let v = [
                        rng.gen_range(-1.0f32..1.0),
                        rng.gen_range(-1.0f32..1.0),
                        rng.gen_range(-1.0f32..1.0),
                    ];
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n > 1e-3 {
                        dirs.extend(v.iter().map(|x| x / n));
                        break;
                    }
                }
            }
            (pos, Some(dirs))
        }
    }
}

fn forward_outputs(
    model: &FieldModel,
    registry: &Registry,
    mode: QuantMode,
    positions: &[f32],
    dirs: Option<&[f32]>,
) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    let mut tape = Tape::new();
    let h = build_forward(&mut tape, model, registry, mode, positions, dirs)?;
    let rgb = tape.value(h.rgb).data().to_vec();
    let sigma = h.sigma.map(|s| tape.value(s).data().to_vec());
    Ok((rgb, sigma))
}

/// Verify an exported integer model against its float source: every stored
/// code must equal a fresh quantization of the source parameters, and the
/// integer replay's outputs must stay within `tolerance` of the
/// fake-quantized reference on `probes` random inputs.
pub fn consistency_check(
    source: &FieldModel,
    registry: &Registry,
    int_model: &IntModel,
    probes: usize,
    seed: u64,
    tolerance: f64,
) -> Result<ConsistencyReport> {
    if probes == 0 {
        return Err(Error::InvalidArgument(
            "a zero-probe consistency check verifies nothing".into(),
        ));
    }
    if source.config != int_model.model.config {
        return Err(Error::Container(
            "integer model was exported from a different architecture".into(),
        ));
    }
    for (ci, comp) in registry.components.iter().enumerate() {
        let Some(stored) = &int_model.codes[ci] else {
            continue;
        };
        let qp: QuantParams = comp.state.derive()?;
        let values = component_values(source, &comp.param_indices);
        let expected = qp.integer_quantize_slice(&values);
        if *stored != expected {
            let first = stored
                .iter()
                .zip(&expected)
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            return Err(Error::Container(format!(
                "component {}: stored codes diverge from the source parameters \
                 (first mismatch at code {first})",
                comp.name
            )));
        }
    }

    let (pos, dirs) = probe_inputs(source.config.mode, probes, seed);
    let (rgb_ref, sigma_ref) =
        forward_outputs(source, registry, QuantMode::FakeQuant, &pos, dirs.as_deref())?;
    let (rgb_int, sigma_int) = forward_outputs(
        &int_model.model,
        &int_model.registry,
        QuantMode::PreQuantizedParams,
        &pos,
        dirs.as_deref(),
    )?;
    let mut max_dev = 0.0f64;
    for (a, b) in rgb_ref.iter().zip(&rgb_int) {
        max_dev = max_dev.max((*a as f64 - *b as f64).abs());
    }
    if let (Some(a), Some(b)) = (&sigma_ref, &sigma_int) {
        for (x, y) in a.iter().zip(b) {
            max_dev = max_dev.max((*x as f64 - *y as f64).abs());
        }
    }
    if max_dev > tolerance {
        return Err(Error::Container(format!(
            "integer replay deviates from the fake-quantized reference by \
             {max_dev:.3e} (allowed {tolerance:.3e})"
        )));
    }
    Ok(ConsistencyReport {
        probes,
        max_abs_deviation: max_dev,
    })
}
