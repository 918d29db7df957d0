//! Training: the full-precision baseline, post-training quantization
//! calibration, the bitwidth loss, and the adversarial alternating
//! optimization that trains soft bitwidths against model quality.

use crate::autodiff::{NodeId, ParamKey, Tape};
use crate::error::{Error, Result};
use crate::field::forward::{build_forward, ForwardHandles, QuantMode};
use crate::field::model::{FieldMode, FieldModel};
use crate::field::registry::{build_registry, Registry, Role};
use crate::metrics::registry_fqr;
use crate::optim::AdamState;
use crate::quant::{clamp_soft_bitwidth, ptq_calibrate, RANGE_FLOOR};
use crate::scene::camera::{all_pixels, generate_rays, per_pixel_seed, Camera, Ray};
use crate::scene::image::Image;
use crate::scene::primitives::VolumeScene;
use crate::scene::render::{oracle_render, sample_along_rays, BACKGROUND};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;

/// Training data: either a pixel lattice with target colors (planar) or a
/// bank of rays with oracle colors (volumetric).
pub enum Dataset {
    Planar {
        /// Pixel-center coordinates, [n, 2].
        positions: Vec<f32>,
        /// Target colors, [n, 3].
        colors: Vec<f32>,
        count: usize,
    },
    Volumetric {
        rays: Vec<Ray>,
        /// Oracle colors per ray, [n, 3].
        colors: Vec<f32>,
        samples_per_ray: usize,
    },
}

impl Dataset {
    /// Every pixel of a target image, with coordinates in the unit square.
    pub fn from_image(image: &Image) -> Self {
        let (w, h) = (image.width, image.height);
        let mut positions = Vec::with_capacity(w * h * 2);
        for (x, y) in all_pixels(w, h) {
            positions.push((x as f32 + 0.5) / w as f32);
            positions.push((y as f32 + 0.5) / h as f32);
        }
        Dataset::Planar {
            positions,
            colors: image.data.clone(),
            count: w * h,
        }
    }

    /// Rays from every pixel of every camera, with oracle render targets.
    pub fn from_scene(
        scene: &VolumeScene,
        cameras: &[Camera],
        samples_per_ray: usize,
    ) -> Result<Self> {
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for cam in cameras {
            let target = oracle_render(scene, cam)?;
            rays.extend(generate_rays(cam, &all_pixels(cam.width, cam.height))?);
            colors.extend_from_slice(&target.data);
        }
        if rays.is_empty() {
            return Err(Error::InvalidArgument(
                "volumetric dataset needs at least one camera".into(),
            ));
        }
        Ok(Dataset::Volumetric {
            rays,
            colors,
            samples_per_ray,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Planar { count, .. } => *count,
            Dataset::Volumetric { rays, .. } => rays.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> FieldMode {
        match self {
            Dataset::Planar { .. } => FieldMode::Planar,
            Dataset::Volumetric { .. } => FieldMode::Volumetric,
        }
    }
}

/// Deterministic batch of dataset indices for one iteration.
pub fn batch_indices(count: usize, batch: usize, seed: u64, iter: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(per_pixel_seed(seed, iter));
    (0..batch.min(count).max(1))
        .map(|_| rng.gen_range(0..count))
        .collect()
}

/// One recorded forward pass ending in the scalar MSE loss.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: NodeId,
    pub handles: ForwardHandles,
}

impl LossGraph {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).data()[0] as f64
    }
}

/// Forward + MSE on the selected dataset entries. Volumetric batches draw
/// fresh stratified samples from `sample_seed`.
pub fn batch_loss(
    model: &FieldModel,
    registry: &Registry,
    mode: QuantMode,
    dataset: &Dataset,
    indices: &[usize],
    sample_seed: u64,
) -> Result<LossGraph> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    match dataset {
        Dataset::Planar {
            positions, colors, ..
        } => {
            let pos: Vec<f32> = indices
                .iter()
                .flat_map(|&i| [positions[2 * i], positions[2 * i + 1]])
                .collect();
            let target: Vec<f32> = indices
                .iter()
                .flat_map(|&i| [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]])
                .collect();
            let mut tape = Tape::new();
            let handles = build_forward(&mut tape, model, registry, mode, &pos, None)?;
            let loss = tape.mse(
                handles.rgb,
                Tensor::new(vec![indices.len(), 3], target)?,
            )?;
            Ok(LossGraph {
                tape,
                loss,
                handles,
            })
        }
        Dataset::Volumetric {
            rays,
            colors,
            samples_per_ray,
        } => {
            let chosen: Vec<Ray> = indices.iter().map(|&i| rays[i]).collect();
            let target: Vec<f32> = indices
                .iter()
                .flat_map(|&i| [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]])
                .collect();
            let s = sample_along_rays(&chosen, *samples_per_ray, sample_seed, 0)?;
            let mut tape = Tape::new();
            let handles =
                build_forward(&mut tape, model, registry, mode, &s.positions, Some(&s.dirs))?;
            let sigma = tape.reshape(
                handles.sigma.expect("volumetric forward"),
                vec![s.rays, s.samples],
            )?;
            let rgb = tape.reshape(handles.rgb, vec![s.rays, s.samples, 3])?;
            let rendered = tape.volume_render(sigma, rgb, s.deltas)?;
            let composited = tape.composite_background(rendered, BACKGROUND)?;
            let loss = tape.mse(composited, Tensor::new(vec![indices.len(), 3], target)?)?;
            Ok(LossGraph {
                tape,
                loss,
                handles,
            })
        }
    }
}

/// Mean squared error over the whole dataset (the training-set loss).
/// Volumetric sampling uses a fixed evaluation seed so the value is a
/// deterministic function of the model.
pub fn dataset_loss(
    model: &FieldModel,
    registry: &Registry,
    mode: QuantMode,
    dataset: &Dataset,
    eval_seed: u64,
) -> Result<f64> {
    let n = dataset.len();
    let chunk = match dataset {
        Dataset::Planar { .. } => 4096,
        Dataset::Volumetric {
            samples_per_ray, ..
        } => (8192 / samples_per_ray).max(1),
    };
    let mut sum = 0.0f64;
    let mut elems = 0u64;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let g = batch_loss(model, registry, mode, dataset, &indices, eval_seed)?;
        let count = (indices.len() * 3) as u64;
        sum += g.loss_value() * count as f64;
        elems += count;
        start = end;
    }
    Ok(sum / elems as f64)
}

/// Full-precision training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters: u32,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn default_for(mode: FieldMode, seed: u64) -> Self {
        TrainConfig {
            iters: 1500,
            lr: 1e-2,
            batch: match mode {
                FieldMode::Planar => 4096,
                FieldMode::Volumetric => 1024,
            },
            seed,
        }
    }
}

/// Distinct deterministic RNG streams derived from one run seed.
const STREAM_BATCH: u64 = 0x01;
const STREAM_SAMPLES: u64 = 0x02;
const STREAM_EVAL: u64 = 0x03;

fn stream_seed(seed: u64, stream: u64) -> u64 {
    per_pixel_seed(seed, stream)
}

/// Train the float model with Adam on MSE. Returns the final training-set
/// loss (the full-precision reference loss).
pub fn train_full_precision(
    model: &mut FieldModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let registry = build_registry(&model.config);
    let mut opt: Vec<AdamState> = model
        .params
        .iter()
        .map(|t| AdamState::new(t.numel()))
        .collect();
    for iter in 0..cfg.iters {
        let indices = batch_indices(
            dataset.len(),
            cfg.batch,
            stream_seed(cfg.seed, STREAM_BATCH),
            iter as u64,
        );
        let sample_seed = per_pixel_seed(stream_seed(cfg.seed, STREAM_SAMPLES), iter as u64);
        let mut g = batch_loss(
            model,
            &registry,
            QuantMode::FullPrecision,
            dataset,
            &indices,
            sample_seed,
        )?;
        let l = g.loss_value();
        if !l.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at iteration {iter}"
            )));
        }
        if iter % 250 == 0 {
            log::debug!("baseline iteration {iter}: batch loss {l:.6e}");
        }
        g.tape.backward(g.loss)?;
        for (key, grad) in g.tape.param_grads() {
            if let ParamKey::Model(i) = key {
                opt[i].step(model.params[i].data_mut(), grad, cfg.lr);
            }
        }
    }
    dataset_loss(
        model,
        &registry,
        QuantMode::FullPrecision,
        dataset,
        stream_seed(cfg.seed, STREAM_EVAL),
    )
}

/// Initial bitwidth for every component after calibration.
pub const PTQ_INIT_BITS: f64 = 8.0;
/// Initial bitwidth for the exponential-activation component.
pub const PTQ_INIT_BITS_EXP: f64 = 32.0;

/// Post-training quantization: one full-precision calibration pass collects
/// per-component value ranges; every component starts at 8 bits except the
/// exponential activation, which starts at 32 bits and is exempt from the
/// bitwidth penalty.
pub fn ptq_init(
    model: &FieldModel,
    dataset: &Dataset,
    calibration_batch: usize,
    seed: u64,
) -> Result<Registry> {
    if calibration_batch == 0 || dataset.is_empty() {
        return Err(Error::InvalidArgument("empty calibration batch".into()));
    }
    let mut registry = build_registry(&model.config);
    let indices = batch_indices(
        dataset.len(),
        calibration_batch,
        stream_seed(seed, STREAM_BATCH),
        0,
    );
    let g = batch_loss(
        model,
        &registry,
        QuantMode::FullPrecision,
        dataset,
        &indices,
        stream_seed(seed, STREAM_SAMPLES),
    )?;
    for (ci, comp) in registry.components.iter_mut().enumerate() {
        let mut samples: Vec<f32> = comp
            .param_indices
            .iter()
            .flat_map(|&i| model.params[i].data().iter().copied())
            .collect();
        if let Some(node) = g.handles.pre_quant[ci] {
            samples.extend_from_slice(g.tape.value(node).data());
        }
        let b_init = if comp.role == Role::ExpAct {
            PTQ_INIT_BITS_EXP
        } else {
            PTQ_INIT_BITS
        };
        let mut state = ptq_calibrate(&samples, comp.state.scheme, b_init)?;
        state.penalty_exempt = comp.role == Role::ExpAct;
        comp.state = state;
    }
    Ok(registry)
}

/// Accuracy requirement the bitwidth loss drives toward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetMode {
    /// Hold the full-precision loss (minimal-degradation).
    Mdl,
    /// Allow a configured loss above full precision (metric-goal).
    Mgl,
}

impl TargetMode {
    pub fn name(&self) -> &'static str {
        match self {
            TargetMode::Mdl => "mdl",
            TargetMode::Mgl => "mgl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTarget {
    pub mode: TargetMode,
    /// Loss level the run is allowed to trade quality down to.
    pub value: f64,
}

impl MetricTarget {
    pub fn mdl(l_fp: f64) -> Self {
        MetricTarget {
            mode: TargetMode::Mdl,
            value: l_fp,
        }
    }

    /// Metric-goal target at `multiplier` times the full-precision loss;
    /// the multiplier must exceed 1 (surplus accuracy to trade away).
    pub fn mgl(l_fp: f64, multiplier: f64) -> Result<Self> {
        if !(multiplier > 1.0) {
            return Err(Error::Config(format!(
                "metric-goal multiplier must exceed 1, got {multiplier}"
            )));
        }
        Ok(MetricTarget {
            mode: TargetMode::Mgl,
            value: l_fp * multiplier,
        })
    }
}

/// Per-component bit-penalty weights; their sum equals the configured total.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    pub weights: Vec<f64>,
}

impl PenaltyConfig {
    /// Uniform split of `total` over non-exempt components; exempt
    /// components get zero and their share is redistributed.
    pub fn uniform(registry: &Registry, total: f64) -> Result<Self> {
        Self::with_codebook_boost(registry, total, 1.0)
    }

    /// Uniform split, except the codebook's weight is `boost` times the
    /// others' (it is often the dominant storage consumer).
    pub fn with_codebook_boost(registry: &Registry, total: f64, boost: f64) -> Result<Self> {
        if total < 0.0 || boost <= 0.0 {
            return Err(Error::Config(format!(
                "penalty total {total} and codebook boost {boost} must be non-negative/positive"
            )));
        }
        let active: Vec<bool> = registry
            .components
            .iter()
            .map(|c| !c.state.penalty_exempt)
            .collect();
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 {
            return Err(Error::Config(
                "every component is penalty-exempt; nothing to optimize".into(),
            ));
        }
        let mut shares = vec![0.0f64; registry.len()];
        let mut share_sum = 0.0;
        for (i, c) in registry.components.iter().enumerate() {
            if active[i] {
                shares[i] = if c.name == "codebook" { boost } else { 1.0 };
                share_sum += shares[i];
            }
        }
        let weights = shares
            .iter()
            .map(|s| s / share_sum * total)
            .collect();
        Ok(PenaltyConfig { weights })
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// The bitwidth loss: distance of the current quality from the target plus
/// the weighted sum of effective bitwidths.
pub fn bit_loss(l_nerf: f64, target: &MetricTarget, bits: &[u32], penalties: &PenaltyConfig) -> f64 {
    debug_assert_eq!(bits.len(), penalties.weights.len());
    let quality = (l_nerf - target.value).abs().sqrt();
    let penalty: f64 = bits
        .iter()
        .zip(&penalties.weights)
        .map(|(&b, &e)| e * b as f64)
        .sum();
    quality + penalty
}

/// Chain factor of the quality term: d sqrt(|L - T|) / dL. Defined as zero
/// exactly at the target so the bitwidths stop oscillating there.
pub fn quality_chain(l_nerf: f64, target: &MetricTarget) -> f64 {
    let delta = l_nerf - target.value;
    if delta == 0.0 {
        return 0.0;
    }
    delta.signum() / (2.0 * delta.abs().sqrt())
}

/// Gradients of the bitwidth loss for every component, given the recorded
/// gradients of the quality loss with respect to each soft bitwidth. The
/// effective-bitwidth penalty passes straight through rounding.
pub fn bit_loss_gradients(
    l_nerf: f64,
    target: &MetricTarget,
    grad_b_nerf: &[f64],
    penalties: &PenaltyConfig,
) -> Vec<f64> {
    let chain = quality_chain(l_nerf, target);
    grad_b_nerf
        .iter()
        .zip(&penalties.weights)
        .map(|(&g, &e)| chain * g + e)
        .collect()
}

/// One telemetry record per optimization iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub iter: u32,
    pub loss_nerf: f64,
    pub loss_bit: f64,
    pub fqr: f64,
    /// Soft bitwidths in component order.
    pub b: Vec<f64>,
}

/// Write telemetry rows as CSV with one soft-bitwidth column per component.
pub fn write_telemetry(path: &Path, rows: &[TelemetryRow], components: usize) -> Result<()> {
    let mut out = String::new();
    out.push_str("iter,loss_nerf,loss_bit,fqr");
    for i in 1..=components {
        out.push_str(&format!(",b_{i}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6}",
            row.iter, row.loss_nerf, row.loss_bit, row.fqr
        ));
        for b in &row.b {
            out.push_str(&format!(",{b:.6}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Alternating-optimization configuration.
#[derive(Debug, Clone)]
pub struct AcaqConfig {
    pub iters: u32,
    /// Learning rate of the quality group (model weights, ranges, ceilings).
    pub lr_q: f64,
    /// Learning rate of the soft bitwidths.
    pub lr_b: f64,
    pub batch: usize,
    pub seed: u64,
    /// Keep bitwidths frozen (plain quantization-aware fine-tuning).
    pub update_bits: bool,
}

impl AcaqConfig {
    pub fn default_for(mode: FieldMode, seed: u64) -> Self {
        AcaqConfig {
            iters: 3000,
            lr_q: 1e-3,
            lr_b: 1e-2,
            batch: match mode {
                FieldMode::Planar => 4096,
                FieldMode::Volumetric => 1024,
            },
            seed,
            update_bits: true,
        }
    }
}

/// State of one alternating optimization run. The quality group (model
/// parameters, quantizer ranges and ceilings) is updated only by quality-loss
/// gradients; the soft bitwidths only by bitwidth-loss gradients.
pub struct AcaqRun {
    pub model: FieldModel,
    pub registry: Registry,
    pub target: MetricTarget,
    pub penalties: PenaltyConfig,
    pub cfg: AcaqConfig,
    pub telemetry: Vec<TelemetryRow>,
    /// Iterations skipped because a gradient or loss went non-finite.
    pub skipped_steps: u32,
    opt_model: Vec<AdamState>,
    opt_b: Vec<AdamState>,
    opt_rv: Vec<AdamState>,
    opt_vmax: Vec<AdamState>,
}

impl AcaqRun {
    pub fn new(
        model: FieldModel,
        registry: Registry,
        target: MetricTarget,
        penalties: PenaltyConfig,
        cfg: AcaqConfig,
    ) -> Result<Self> {
        if penalties.weights.len() != registry.len() {
            return Err(Error::Config(format!(
                "{} penalty weights for {} components",
                penalties.weights.len(),
                registry.len()
            )));
        }
        let opt_model = model
            .params
            .iter()
            .map(|t| AdamState::new(t.numel()))
            .collect();
        let m = registry.len();
        Ok(AcaqRun {
            model,
            registry,
            target,
            penalties,
            cfg,
            telemetry: Vec::new(),
            skipped_steps: 0,
            opt_model,
            opt_b: (0..m).map(|_| AdamState::new(1)).collect(),
            opt_rv: (0..m).map(|_| AdamState::new(1)).collect(),
            opt_vmax: (0..m).map(|_| AdamState::new(1)).collect(),
        })
    }

    /// One iteration: a fake-quantized forward/backward on a fresh batch,
    /// then the two disjoint update groups.
    pub fn step(&mut self, dataset: &Dataset, iter: u32) -> Result<()> {
        let m = self.registry.len();
        let indices = batch_indices(
            dataset.len(),
            self.cfg.batch,
            stream_seed(self.cfg.seed, STREAM_BATCH),
            iter as u64,
        );
        let sample_seed =
            per_pixel_seed(stream_seed(self.cfg.seed, STREAM_SAMPLES), iter as u64);
        let mut g = batch_loss(
            &self.model,
            &self.registry,
            QuantMode::FakeQuant,
            dataset,
            &indices,
            sample_seed,
        )?;
        let l_nerf = g.loss_value();
        let bits: Vec<u32> = self.registry.components.iter().map(|c| c.state.bits()).collect();
        let l_bit = bit_loss(l_nerf, &self.target, &bits, &self.penalties);
        self.telemetry.push(TelemetryRow {
            iter,
            loss_nerf: l_nerf,
            loss_bit: l_bit,
            fqr: registry_fqr(&self.registry)?,
            b: self.registry.components.iter().map(|c| c.state.b).collect(),
        });
        if !l_nerf.is_finite() {
            log::warn!("iteration {iter}: non-finite quality loss, step skipped");
            self.skipped_steps += 1;
            return Ok(());
        }
        g.tape.backward(g.loss)?;

        let mut grad_b = vec![0.0f64; m];
        let mut grad_rv = vec![0.0f64; m];
        let mut grad_vmax = vec![0.0f64; m];
        let mut model_grads: Vec<Option<Vec<f32>>> = vec![None; self.model.params.len()];
        for (key, grad) in g.tape.param_grads() {
            match key {
                ParamKey::Model(i) => model_grads[i] = Some(grad.to_vec()),
                ParamKey::QuantB(ci) => grad_b[ci] = grad[0] as f64,
                ParamKey::QuantRv(ci) => grad_rv[ci] = grad[0] as f64,
                ParamKey::QuantVmax(ci) => grad_vmax[ci] = grad[0] as f64,
            }
        }

        // Quality group: model parameters, ranges, ceilings — quality-loss
        // gradients only.
        for (i, grad) in model_grads.iter().enumerate() {
            if let Some(grad) = grad {
                self.opt_model[i].step(self.model.params[i].data_mut(), grad, self.cfg.lr_q);
            }
        }
        for ci in 0..m {
            let state = &mut self.registry.components[ci].state;
            self.opt_rv[ci].step_scalar(&mut state.r_v, grad_rv[ci], self.cfg.lr_q);
            state.r_v = state.r_v.max(RANGE_FLOOR);
            if let Some(v) = state.v_max.as_mut() {
                self.opt_vmax[ci].step_scalar(v, grad_vmax[ci], self.cfg.lr_q);
            }
        }

        // Bitwidth group: soft bitwidths — bitwidth-loss gradients only.
        if self.cfg.update_bits {
            let gbit = bit_loss_gradients(l_nerf, &self.target, &grad_b, &self.penalties);
            for ci in 0..m {
                let state = &mut self.registry.components[ci].state;
                self.opt_b[ci].step_scalar(&mut state.b, gbit[ci], self.cfg.lr_b);
                state.b = clamp_soft_bitwidth(state.b);
            }
        }
        Ok(())
    }

    /// Run the configured number of iterations.
    pub fn run(&mut self, dataset: &Dataset) -> Result<()> {
        for iter in 0..self.cfg.iters {
            self.step(dataset, iter)?;
            if iter % 250 == 0 {
                if let Some(row) = self.telemetry.last() {
                    log::debug!(
                        "quantized iteration {iter}: loss {:.6e}, bit loss {:.6e}, fqr {:.3}",
                        row.loss_nerf,
                        row.loss_bit,
                        row.fqr
                    );
                }
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (FieldModel, Registry, Vec<TelemetryRow>) {
        (self.model, self.registry, self.telemetry)
    }
}

/// Quantization-aware fine-tuning at frozen bitwidths: the same loop with
/// bit updates disabled (the target only labels telemetry).
pub fn run_qat(
    model: FieldModel,
    registry: Registry,
    dataset: &Dataset,
    l_fp: f64,
    mut cfg: AcaqConfig,
) -> Result<(FieldModel, Registry, Vec<TelemetryRow>)> {
    cfg.update_bits = false;
    let penalties = PenaltyConfig::uniform(&registry, 0.0)?;
    let mut run = AcaqRun::new(model, registry, MetricTarget::mdl(l_fp), penalties, cfg)?;
    run.run(dataset)?;
    Ok(run.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::model::ModelConfig;
    use crate::quant::QuantScheme;
    use crate::scene::texture::WaveTexture;

    fn small_planar_config(seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::planar_default(seed);
        cfg.width = 16;
        cfg.grid.levels = 4;
        cfg.grid.table_size = 1 << 10;
        cfg
    }

    fn constant_image(w: usize, h: usize, rgb: [f32; 3]) -> Image {
        Image::from_fn(w, h, |_, _| rgb)
    }

    #[test]
    fn constant_target_trains_to_negligible_loss() {
        let img = constant_image(16, 16, [0.3, 0.6, 0.2]);
        let dataset = Dataset::from_image(&img);
        let mut model = FieldModel::init(small_planar_config(1)).unwrap();
        let cfg = TrainConfig {
            iters: 500,
            lr: 1e-2,
            batch: 256,
            seed: 1,
        };
        let l_fp = train_full_precision(&mut model, &dataset, &cfg).unwrap();
        assert!(l_fp <= 1e-6, "constant target should be exactly representable, got {l_fp}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let img = WaveTexture::new(2, 3).unwrap().render(16, 16);
        let dataset = Dataset::from_image(&img);
        let cfg = TrainConfig {
            iters: 60,
            lr: 1e-2,
            batch: 128,
            seed: 9,
        };
        let mut m1 = FieldModel::init(small_planar_config(7)).unwrap();
        let mut m2 = FieldModel::init(small_planar_config(7)).unwrap();
        let a = train_full_precision(&mut m1, &dataset, &cfg).unwrap();
        let b = train_full_precision(&mut m2, &dataset, &cfg).unwrap();
        assert_eq!(a, b);
        for (x, y) in m1.params.iter().zip(&m2.params) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn loss_decreases_over_windows_on_smooth_target() {
        let img = WaveTexture::new(1, 5).unwrap().render(24, 24);
        let dataset = Dataset::from_image(&img);
        let mut model = FieldModel::init(small_planar_config(2)).unwrap();
        let registry = build_registry(&model.config);
        let mut opt: Vec<AdamState> = model
            .params
            .iter()
            .map(|t| AdamState::new(t.numel()))
            .collect();
        let mut window_means = Vec::new();
        let mut acc = 0.0f64;
        for iter in 0..300u32 {
            let indices = batch_indices(dataset.len(), 256, 5, iter as u64);
            let mut g = batch_loss(
                &model,
                &registry,
                QuantMode::FullPrecision,
                &dataset,
                &indices,
                0,
            )
            .unwrap();
            acc += g.loss_value();
            g.tape.backward(g.loss).unwrap();
            for (key, grad) in g.tape.param_grads() {
                if let ParamKey::Model(i) = key {
                    opt[i].step(model.params[i].data_mut(), grad, 1e-2);
                }
            }
            if (iter + 1) % 100 == 0 {
                window_means.push(acc / 100.0);
                acc = 0.0;
            }
        }
        assert!(
            window_means.windows(2).all(|w| w[1] <= w[0]),
            "{window_means:?}"
        );
    }

    #[test]
    fn ptq_initializes_bits_ranges_and_exemptions() {
        let cfg = {
            let mut c = ModelConfig::volumetric_default(3);
            c.width = 16;
            c.grid.levels = 4;
            c.grid.table_size = 1 << 10;
            c
        };
        let model = FieldModel::init(cfg).unwrap();
        let scene = VolumeScene::generate(2, 4).unwrap();
        let cams = crate::scene::camera::orbit_cameras(2, 1.3, 0.3, 1.0, 12, 12).unwrap();
        let dataset = Dataset::from_scene(&scene, &cams, 8).unwrap();
        let registry = ptq_init(&model, &dataset, 64, 11).unwrap();

        for c in &registry.components {
            assert!(c.state.r_v > 0.0, "{} has empty range", c.name);
            if c.role == Role::ExpAct {
                assert_eq!(c.state.bits(), 32);
                assert!(c.state.penalty_exempt);
            } else {
                assert_eq!(c.state.bits(), 8);
                assert!(!c.state.penalty_exempt);
            }
        }
        // 12 components at 8 bits + 1 at 32 → mean 128/13
        let fqr = registry_fqr(&registry).unwrap();
        assert!((fqr - 128.0 / 13.0).abs() < 1e-12, "{fqr}");
    }

    #[test]
    fn ptq_rejects_empty_calibration() {
        let model = FieldModel::init(small_planar_config(1)).unwrap();
        let img = constant_image(4, 4, [0.5; 3]);
        let dataset = Dataset::from_image(&img);
        assert!(ptq_init(&model, &dataset, 0, 1).is_err());
    }

    #[test]
    fn bit_loss_examples() {
        let reg = {
            let model = FieldModel::init(small_planar_config(1)).unwrap();
            build_registry(&model.config)
        };
        // zero case: at target with zero penalties
        let zero = PenaltyConfig::uniform(&reg, 0.0).unwrap();
        let t = MetricTarget::mdl(1e-3);
        assert_eq!(bit_loss(1e-3, &t, &vec![8; reg.len()], &zero), 0.0);

        // single-component hand value: sqrt(1e-3) + 1e-3·8
        let single = PenaltyConfig {
            weights: vec![1e-3],
        };
        let t2 = MetricTarget::mdl(1e-3);
        let l = bit_loss(2e-3, &t2, &[8], &single);
        assert!((l - 0.039_622_776_601_683_795).abs() < 1e-12, "{l}");

        // penalty monotone in any bitwidth
        let uni = PenaltyConfig::uniform(&reg, 1e-3).unwrap();
        let mut bits = vec![8u32; reg.len()];
        let lo = bit_loss(2e-3, &t2, &bits, &uni);
        bits[3] = 9;
        assert!(bit_loss(2e-3, &t2, &bits, &uni) > lo);
    }

    #[test]
    fn bit_gradient_cusp_and_signs() {
        let single = PenaltyConfig {
            weights: vec![1e-4],
        };
        let t = MetricTarget::mdl(5e-3);
        // exactly at target: penalty only
        let g = bit_loss_gradients(5e-3, &t, &[0.7], &single);
        assert_eq!(g, vec![1e-4]);
        // above target: positive chain
        let g_hi = bit_loss_gradients(6e-3, &t, &[-0.5], &single);
        assert!(g_hi[0] < 0.0, "more precision should be rewarded: {g_hi:?}");
        // below target: chain flips sign
        let g_lo = bit_loss_gradients(4e-3, &t, &[-0.5], &single);
        assert!(g_lo[0] > 0.0, "{g_lo:?}");
    }

    #[test]
    fn mgl_requires_surplus() {
        assert!(MetricTarget::mgl(1e-3, 1.0).is_err());
        assert!(MetricTarget::mgl(1e-3, 4.0).is_ok());
    }

    #[test]
    fn penalty_distribution_redistributes_exempt_share() {
        let cfg = {
            let mut c = ModelConfig::volumetric_default(3);
            c.width = 8;
            c.grid.levels = 2;
            c.grid.table_size = 1 << 8;
            c
        };
        let mut registry = build_registry(&cfg);
        registry.get_mut("density_exp").unwrap().state.penalty_exempt = true;
        let p = PenaltyConfig::uniform(&registry, 1e-3).unwrap();
        assert!((p.total() - 1e-3).abs() < 1e-15);
        let exp_i = registry.index_of("density_exp").unwrap();
        assert_eq!(p.weights[exp_i], 0.0);
        let expected = 1e-3 / 12.0;
        for (i, w) in p.weights.iter().enumerate() {
            if i != exp_i {
                assert!((w - expected).abs() < 1e-15);
            }
        }

        let boosted = PenaltyConfig::with_codebook_boost(&registry, 1e-3, 3.0).unwrap();
        assert!((boosted.total() - 1e-3).abs() < 1e-15);
        let cb = registry.index_of("codebook").unwrap();
        assert!((boosted.weights[cb] / boosted.weights[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn acaq_groups_are_disjoint_and_bits_stay_boxed() {
        let img = WaveTexture::new(2, 8).unwrap().render(16, 16);
        let dataset = Dataset::from_image(&img);
        let mut model = FieldModel::init(small_planar_config(4)).unwrap();
        let tc = TrainConfig {
            iters: 120,
            lr: 1e-2,
            batch: 256,
            seed: 4,
        };
        let l_fp = train_full_precision(&mut model, &dataset, &tc).unwrap();
        let registry = ptq_init(&model, &dataset, 256, 4).unwrap();
        let penalties = PenaltyConfig::uniform(&registry, 1e-3).unwrap();
        let before_bits: Vec<f64> = registry.components.iter().map(|c| c.state.b).collect();
        let before_params: Vec<Vec<f32>> =
            model.params.iter().map(|t| t.data().to_vec()).collect();

        // bits frozen → quality group moves, b stays put
        let cfg = AcaqConfig {
            iters: 5,
            lr_q: 1e-3,
            lr_b: 1e-2,
            batch: 128,
            seed: 4,
            update_bits: false,
        };
        let (m2, r2, _) = {
            let mut run = AcaqRun::new(
                model.clone(),
                registry.clone(),
                MetricTarget::mdl(l_fp),
                penalties.clone(),
                cfg.clone(),
            )
            .unwrap();
            run.run(&dataset).unwrap();
            run.into_parts()
        };
        let after_bits: Vec<f64> = r2.components.iter().map(|c| c.state.b).collect();
        assert_eq!(before_bits, after_bits, "frozen bits must not move");
        assert!(
            m2.params
                .iter()
                .zip(&before_params)
                .any(|(t, b)| t.data() != b.as_slice()),
            "quality group must move"
        );

        // bits trained → stay inside the box at every telemetry row
        let mut run = AcaqRun::new(
            model,
            registry,
            MetricTarget::mgl(l_fp, 4.0).unwrap(),
            penalties,
            AcaqConfig {
                iters: 30,
                update_bits: true,
                ..cfg
            },
        )
        .unwrap();
        run.run(&dataset).unwrap();
        for row in &run.telemetry {
            for &b in &row.b {
                assert!((2.0..=32.0).contains(&b), "b = {b} escaped the box");
            }
        }
        assert_eq!(run.telemetry.len(), 30);
    }

    #[test]
    fn large_target_pushes_mean_bitwidth_down() {
        let img = WaveTexture::new(2, 12).unwrap().render(24, 24);
        let dataset = Dataset::from_image(&img);
        let mut model = FieldModel::init(small_planar_config(6)).unwrap();
        let tc = TrainConfig {
            iters: 250,
            lr: 1e-2,
            batch: 512,
            seed: 6,
        };
        let l_fp = train_full_precision(&mut model, &dataset, &tc).unwrap();
        let registry = ptq_init(&model, &dataset, 512, 6).unwrap();
        let penalties = PenaltyConfig::uniform(&registry, 1e-3).unwrap();
        let start_mean: f64 = registry.components.iter().map(|c| c.state.b).sum::<f64>()
            / registry.len() as f64;
        let mut run = AcaqRun::new(
            model,
            registry,
            MetricTarget::mgl(l_fp.max(1e-8), 16.0).unwrap(),
            penalties,
            AcaqConfig {
                iters: 100,
                lr_q: 1e-3,
                lr_b: 1e-2,
                batch: 256,
                seed: 6,
                update_bits: true,
            },
        )
        .unwrap();
        run.run(&dataset).unwrap();
        let end_mean: f64 = run
            .registry
            .components
            .iter()
            .map(|c| c.state.b)
            .sum::<f64>()
            / run.registry.len() as f64;
        assert!(
            end_mean < start_mean,
            "surplus target should lower mean bitwidth: {start_mean} → {end_mean}"
        );
    }

    #[test]
    fn telemetry_csv_shape() {
        let rows = vec![
            TelemetryRow {
                iter: 0,
                loss_nerf: 1.5e-3,
                loss_bit: 0.04,
                fqr: 9.846154,
                b: vec![8.0, 8.0, 32.0],
            },
            TelemetryRow {
                iter: 1,
                loss_nerf: 1.4e-3,
                loss_bit: 0.039,
                fqr: 9.8,
                b: vec![7.99, 8.01, 31.9],
            },
        ];
        let dir = std::env::temp_dir().join("carf_train_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("telemetry.csv");
        write_telemetry(&path, &rows, 3).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iter,loss_nerf,loss_bit,fqr,b_1,b_2,b_3");
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn diverged_training_reports_iteration() {
        let img = constant_image(8, 8, [0.5; 3]);
        let dataset = Dataset::from_image(&img);
        let mut model = FieldModel::init(small_planar_config(1)).unwrap();
        // poison the output layer so the forward pass goes non-finite
        // immediately (earlier layers would launder NaN through ReLU's max)
        let last = model.params.len() - 1;
        for v in model.params[last].data_mut() {
            *v = f32::NAN;
        }
        let cfg = TrainConfig {
            iters: 3,
            lr: 1e-2,
            batch: 16,
            seed: 1,
        };
        match train_full_precision(&mut model, &dataset, &cfg) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("iteration 0"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn quantizer_scheme_assignment_survives_calibration() {
        let img = WaveTexture::new(1, 2).unwrap().render(12, 12);
        let dataset = Dataset::from_image(&img);
        let model = FieldModel::init(small_planar_config(2)).unwrap();
        let registry = ptq_init(&model, &dataset, 64, 2).unwrap();
        assert_eq!(
            registry.get("codebook").unwrap().state.scheme,
            QuantScheme::Asymmetric
        );
        assert_eq!(
            registry.get("mlp_w1").unwrap().state.scheme,
            QuantScheme::SignedSymmetric
        );
        assert_eq!(
            registry.get("rgb_sigmoid").unwrap().state.scheme,
            QuantScheme::Asymmetric
        );
    }
}
