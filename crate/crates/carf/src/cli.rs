//! Command layer behind the `carf` binary: baseline training, calibration
//! and bitwidth optimization, evaluation, integer export/verification, and
//! multi-run sweeps with report generation.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{RunConfig, SceneKind};
use crate::error::{Error, Result};
use crate::field::forward::QuantMode;
use crate::field::model::FieldModel;
use crate::field::registry::Registry;
use crate::intmodel::{
    consistency_check, export_integer_model, import_integer_model, CHECK_TOLERANCE,
};
use crate::metrics::{
    avg_image_gradient, bitops, psnr_from_mse, registry_fqr, standard_workload, storage_bytes,
};
use crate::quant::{BIT_MAX, BIT_MIN};
use crate::report::{
    read_report_csv, write_report_bundle, RunRecord,
};
use crate::scene::camera::{orbit_cameras, per_pixel_seed, Camera};
use crate::scene::image::{save_image, Image};
use crate::scene::primitives::VolumeScene;
use crate::scene::render::{render_planar, render_volumetric};
use crate::scene::texture::WaveTexture;
use crate::train::{
    ptq_init, train_full_precision, write_telemetry, AcaqConfig, AcaqRun, Dataset, MetricTarget,
    PenaltyConfig, TargetMode, TrainConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

/// Camera ring parameters shared by every volumetric run.
const ORBIT_RADIUS: f32 = 1.3;
const ORBIT_ELEVATION: f32 = 0.35;
const ORBIT_FOV_Y: f32 = 1.0;
/// Stream index separating evaluation-render sampling from training streams.
const EVAL_RENDER_STREAM: u64 = 0xE7A1;

#[derive(Parser)]
#[command(
    name = "carf",
    version,
    about = "Learned-bitwidth quantization for neural fields"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train the full-precision baseline model
    Train(TrainArgs),
    /// Calibrate quantizers and run adversarial bitwidth optimization
    Acaq(AcaqArgs),
    /// Render a checkpoint against its scene and report quality metrics
    Eval(EvalArgs),
    /// Export a quantized checkpoint as an integer model container
    ExportInt(ExportIntArgs),
    /// Verify an integer container against its float checkpoint
    CheckInt(CheckIntArgs),
    /// Full pipeline for one config: train, quantize, evaluate, export
    Run(RunPipelineArgs),
    /// Run a grid of configs and collect a report
    Sweep(SweepArgs),
    /// Regenerate report plots and JSON from a report CSV
    Report(ReportArgs),
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Run configuration file (key = value lines)
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key (repeatable), e.g. --set acaq_iters=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for pair in &self.set {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(Error::Config(format!(
                    "--set expects KEY=VALUE, got {pair:?}"
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args)]
pub struct AcaqArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Float checkpoint to start from (default: <out_dir>/model.carc)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Keep bitwidths frozen (plain quantization-aware fine-tuning)
    #[arg(long)]
    pub freeze_bits: bool,
    /// Force every non-exempt component to this bitwidth before optimizing
    #[arg(long)]
    pub uniform_bits: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuantChoice {
    /// Use the checkpoint's quantizers when present, full precision otherwise
    Auto,
    /// Full-precision forward pass
    Full,
    /// Fake-quantized forward pass (requires trained quantizers)
    Fake,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint to evaluate (default: <out_dir>/quant.carc)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = QuantChoice::Auto)]
    pub quant: QuantChoice,
    /// Write the metrics JSON here as well as to stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Save rendered images next to the metrics
    #[arg(long)]
    pub save_renders: bool,
}

#[derive(Args)]
pub struct ExportIntArgs {
    /// Quantized checkpoint (must carry trained quantizers)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output container path (default: checkpoint directory /model.carf)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CheckIntArgs {
    /// Float checkpoint the container was exported from
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Integer model container to verify
    #[arg(long)]
    pub int: PathBuf,
    /// Number of random probe inputs
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    /// Probe RNG seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Maximum allowed output deviation
    #[arg(long, default_value_t = CHECK_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Args)]
pub struct RunPipelineArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Also write the final run record JSON to this path
    #[arg(long)]
    pub emit_record: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Scene complexities to sweep
    #[arg(long, value_delimiter = ',', default_value = "1,4,7")]
    pub complexities: Vec<usize>,
    /// Scene seeds to sweep
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Optimization modes to sweep (mdl, mgl)
    #[arg(long, value_delimiter = ',', default_value = "mdl")]
    pub modes: Vec<String>,
    /// Concurrent pipeline processes
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Existing report CSV
    #[arg(long)]
    pub records: PathBuf,
    /// Directory for the regenerated CSV/JSON/SVG bundle
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Entry point used by the binary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args.config.load()?).map(|_| ()),
        Command::Acaq(args) => cmd_acaq(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::ExportInt(args) => cmd_export_int(&args),
        Command::CheckInt(args) => cmd_check_int(&args),
        Command::Run(args) => cmd_run(&args).map(|_| ()),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

/// Scene content and training data, derived deterministically from a config.
pub struct SceneBundle {
    pub dataset: Dataset,
    /// Ground-truth images (one per camera; a single image for 2D scenes).
    pub targets: Vec<Image>,
    pub cameras: Vec<Camera>,
}

pub fn build_scene(cfg: &RunConfig) -> Result<SceneBundle> {
    let size = cfg.image_size;
    match cfg.scene {
        SceneKind::Wave => {
            let texture = WaveTexture::new(cfg.scene_complexity as u32, cfg.scene_seed)?;
            let target = texture.render(size, size);
            Ok(SceneBundle {
                dataset: Dataset::from_image(&target),
                targets: vec![target],
                cameras: Vec::new(),
            })
        }
        SceneKind::Volume => {
            let scene = VolumeScene::generate(cfg.scene_complexity as u32, cfg.scene_seed)?;
            let cameras = orbit_cameras(
                cfg.cameras,
                ORBIT_RADIUS,
                ORBIT_ELEVATION,
                ORBIT_FOV_Y,
                size,
                size,
            )?;
            let dataset = Dataset::from_scene(&scene, &cameras, cfg.samples_per_ray)?;
            // The dataset already holds the oracle colors in camera-major
            // pixel order; slice them back into per-camera target images.
            let targets = match &dataset {
                Dataset::Volumetric { colors, .. } => (0..cameras.len())
                    .map(|i| {
                        Image::new(
                            size,
                            size,
                            colors[i * size * size * 3..(i + 1) * size * size * 3].to_vec(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => unreachable!("volume scenes build volumetric datasets"),
            };
            Ok(SceneBundle {
                dataset,
                targets,
                cameras,
            })
        }
    }
}

/// Render the model from every viewpoint of the config's scene.
pub fn render_all(
    model: &FieldModel,
    registry: &Registry,
    mode: QuantMode,
    cfg: &RunConfig,
    cameras: &[Camera],
) -> Result<Vec<Image>> {
    match cfg.scene {
        SceneKind::Wave => Ok(vec![render_planar(
            model,
            registry,
            mode,
            cfg.image_size,
            cfg.image_size,
        )?]),
        SceneKind::Volume => cameras
            .iter()
            .enumerate()
            .map(|(i, cam)| {
                render_volumetric(
                    model,
                    registry,
                    mode,
                    cam,
                    cfg.samples_per_ray,
                    per_pixel_seed(per_pixel_seed(cfg.seed, EVAL_RENDER_STREAM), i as u64),
                )
            })
            .collect(),
    }
}

/// PSNR over all viewpoints (squared error pooled before the log).
pub fn psnr_over_images(targets: &[Image], renders: &[Image]) -> Result<f64> {
    if targets.len() != renders.len() || targets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "psnr needs matching non-empty image sets, got {} vs {}",
            targets.len(),
            renders.len()
        )));
    }
    let mut mse_sum = 0.0;
    for (t, r) in targets.iter().zip(renders) {
        mse_sum += t.mse(r)?;
    }
    Ok(psnr_from_mse(mse_sum / targets.len() as f64))
}

/// Per-frame quantized compute/storage metrics.
pub struct QuantMetrics {
    pub fqr: f64,
    pub bitops: u128,
    pub storage_bytes: u64,
}

pub fn quant_metrics(
    model: &FieldModel,
    registry: &Registry,
    cfg: &RunConfig,
) -> Result<QuantMetrics> {
    let points = match cfg.scene {
        SceneKind::Wave => cfg.image_size * cfg.image_size,
        SceneKind::Volume => cfg.image_size * cfg.image_size * cfg.samples_per_ray,
    } as u64;
    Ok(QuantMetrics {
        fqr: registry_fqr(registry)?,
        bitops: bitops(registry, &standard_workload(registry, points))?,
        storage_bytes: storage_bytes(model, registry).total_bytes,
    })
}

fn save_targets(dir: &Path, targets: &[Image]) -> Result<()> {
    for (i, img) in targets.iter().enumerate() {
        save_image(img, &dir.join(format!("target_{i:03}.png")))?;
    }
    Ok(())
}

fn checkpoint_for(cfg: &RunConfig, flag: &Option<PathBuf>, name: &str) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| cfg.resolved_out_dir().join(name))
}

fn load_matching_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config != cfg.model_config() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different architecture than the config",
            path.display()
        )));
    }
    Ok(ck)
}

/// Outcome of the baseline-training step.
pub struct TrainOutcome {
    pub model: FieldModel,
    pub fp_loss: f64,
    pub bundle: SceneBundle,
    pub checkpoint: PathBuf,
}

fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.cfg"), cfg.canonical_text())?;
    let bundle = build_scene(cfg)?;
    save_targets(&out, &bundle.targets)?;

    let mut model = FieldModel::init(cfg.model_config())?;
    let tc = TrainConfig {
        iters: cfg.train_iters,
        lr: cfg.train_lr,
        batch: cfg.effective_batch(),
        seed: cfg.seed,
    };
    log::info!(
        "training baseline on {} ({} samples, {} iterations)",
        cfg.scene_label(),
        bundle.dataset.len(),
        tc.iters
    );
    let fp_loss = train_full_precision(&mut model, &bundle.dataset, &tc)?;

    let ck_path = out.join("model.carc");
    save_checkpoint(&ck_path, &model, None, Some(fp_loss))?;
    let fp_json = serde_json::json!({
        "fp_loss": fp_loss,
        "config_fingerprint": cfg.fingerprint(),
    });
    std::fs::write(
        out.join("fp_loss.json"),
        format!("{}\n", serde_json::to_string_pretty(&fp_json)?),
    )?;
    println!(
        "train {}: loss {fp_loss:.6e} -> {}",
        cfg.scene_label(),
        ck_path.display()
    );
    Ok(TrainOutcome {
        model,
        fp_loss,
        bundle,
        checkpoint: ck_path,
    })
}

/// Outcome of the calibration + bitwidth-optimization step.
pub struct AcaqOutcome {
    pub model: FieldModel,
    pub registry: Registry,
    pub target: MetricTarget,
    pub checkpoint: PathBuf,
    pub telemetry: PathBuf,
}

fn acaq_pipeline(
    cfg: &RunConfig,
    model: FieldModel,
    fp_loss: f64,
    bundle: &SceneBundle,
    freeze_bits: bool,
    uniform_bits: Option<f64>,
) -> Result<AcaqOutcome> {
    let out = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out)?;
    let mut registry = ptq_init(&model, &bundle.dataset, cfg.effective_batch(), cfg.seed)?;
    if let Some(b) = uniform_bits {
        if !(BIT_MIN..=BIT_MAX).contains(&b) {
            return Err(Error::Config(format!(
                "uniform_bits must lie in [{BIT_MIN}, {BIT_MAX}], got {b}"
            )));
        }
        for c in registry.components.iter_mut() {
            if !c.state.penalty_exempt {
                c.state.b = b;
            }
        }
    }
    let target = match cfg.mode {
        TargetMode::Mdl => MetricTarget::mdl(fp_loss),
        TargetMode::Mgl => MetricTarget::mgl(fp_loss, cfg.target_multiplier)?,
    };
    let penalties =
        PenaltyConfig::with_codebook_boost(&registry, cfg.penalty_total, cfg.codebook_boost)?;
    let start_fqr = registry_fqr(&registry)?;
    let ac = AcaqConfig {
        iters: cfg.acaq_iters,
        lr_q: cfg.lr_quality,
        lr_b: cfg.lr_bits,
        batch: cfg.effective_batch(),
        seed: cfg.seed,
        update_bits: !freeze_bits,
    };
    log::info!(
        "optimizing {} quantizers for {} iterations ({} target, bits {})",
        registry.len(),
        ac.iters,
        cfg.mode.name(),
        if freeze_bits { "frozen" } else { "trained" }
    );
    let mut run = AcaqRun::new(model, registry, target, penalties, ac)?;
    run.run(&bundle.dataset)?;
    if run.skipped_steps > 0 {
        log::warn!("{} iterations skipped on non-finite values", run.skipped_steps);
    }
    let (model, registry, telemetry) = run.into_parts();

    let telemetry_path = out.join("telemetry.csv");
    write_telemetry(&telemetry_path, &telemetry, registry.len())?;
    let ck_path = out.join("quant.carc");
    save_checkpoint(&ck_path, &model, Some(&registry), Some(fp_loss))?;
    let end_fqr = registry_fqr(&registry)?;
    println!(
        "acaq {}: fqr {start_fqr:.3} -> {end_fqr:.3} ({} target) -> {}",
        cfg.scene_label(),
        cfg.mode.name(),
        ck_path.display()
    );
    Ok(AcaqOutcome {
        model,
        registry,
        target,
        checkpoint: ck_path,
        telemetry: telemetry_path,
    })
}

fn cmd_acaq(args: &AcaqArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let ck_path = checkpoint_for(&cfg, &args.checkpoint, "model.carc");
    let ck = load_matching_checkpoint(&ck_path, &cfg)?;
    let fp_loss = ck.fp_loss.ok_or_else(|| {
        Error::Config(format!(
            "{} lacks a full-precision reference loss; run train first",
            ck_path.display()
        ))
    })?;
    let bundle = build_scene(&cfg)?;
    acaq_pipeline(
        &cfg,
        ck.model,
        fp_loss,
        &bundle,
        args.freeze_bits,
        args.uniform_bits,
    )?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let ck_path = checkpoint_for(&cfg, &args.checkpoint, "quant.carc");
    let ck = load_matching_checkpoint(&ck_path, &cfg)?;
    let bundle = build_scene(&cfg)?;

    let (mode, mode_name) = match (args.quant, &ck.registry) {
        (QuantChoice::Full, _) | (QuantChoice::Auto, None) => {
            (QuantMode::FullPrecision, "full")
        }
        (QuantChoice::Fake | QuantChoice::Auto, Some(_)) => (QuantMode::FakeQuant, "fake"),
        (QuantChoice::Fake, None) => {
            return Err(Error::Config(format!(
                "{} holds no quantizer state; evaluate with --quant full",
                ck_path.display()
            )))
        }
    };
    // A full-precision pass still routes through the forward builder, which
    // wants a registry; its quantizers are ignored in that mode.
    let registry = ck
        .registry
        .clone()
        .unwrap_or_else(|| crate::field::registry::build_registry(&ck.model.config));
    let renders = render_all(&ck.model, &registry, mode, &cfg, &bundle.cameras)?;
    let psnr = psnr_over_images(&bundle.targets, &renders)?;

    let mut doc = serde_json::json!({
        "scene": cfg.scene_label(),
        "checkpoint": ck_path.display().to_string(),
        "quant": mode_name,
        "psnr": psnr,
        "config_fingerprint": cfg.fingerprint(),
    });
    if ck.registry.is_some() {
        let qm = quant_metrics(&ck.model, &registry, &cfg)?;
        doc["fqr"] = serde_json::json!(qm.fqr);
        doc["bitops"] = serde_json::json!(qm.bitops.to_string());
        doc["storage_bytes"] = serde_json::json!(qm.storage_bytes);
    }
    if let Some(fp) = ck.fp_loss {
        doc["fp_loss"] = serde_json::json!(fp);
    }
    let text = serde_json::to_string_pretty(&doc)?;
    println!("{text}");
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, format!("{text}\n"))?;
    }
    if args.save_renders {
        let dir = cfg.resolved_out_dir();
        std::fs::create_dir_all(&dir)?;
        for (i, img) in renders.iter().enumerate() {
            save_image(img, &dir.join(format!("render_{mode_name}_{i:03}.png")))?;
        }
    }
    Ok(())
}

fn cmd_export_int(args: &ExportIntArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let registry = ck.registry.ok_or_else(|| {
        Error::Config(format!(
            "{} holds no quantizer state; run acaq before exporting",
            args.checkpoint.display()
        ))
    })?;
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("model.carf")
    });
    export_integer_model(&out, &ck.model, &registry)?;
    let size = std::fs::metadata(&out)?.len();
    println!("export-int: {} ({size} bytes)", out.display());
    Ok(())
}

fn cmd_check_int(args: &CheckIntArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let registry = ck.registry.ok_or_else(|| {
        Error::Config(format!(
            "{} holds no quantizer state to verify against",
            args.checkpoint.display()
        ))
    })?;
    let int = import_integer_model(&args.int)?;
    let report = consistency_check(
        &ck.model,
        &registry,
        &int,
        args.probes,
        args.seed,
        args.tolerance,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "probes": report.probes,
            "max_abs_deviation": report.max_abs_deviation,
            "tolerance": args.tolerance,
        })
    );
    Ok(())
}

fn cmd_run(args: &RunPipelineArgs) -> Result<RunRecord> {
    let cfg = args.config.load()?;
    let out = cfg.resolved_out_dir();
    let trained = cmd_train(&cfg)?;
    let quant = acaq_pipeline(
        &cfg,
        trained.model,
        trained.fp_loss,
        &trained.bundle,
        false,
        None,
    )?;

    let renders = render_all(
        &quant.model,
        &quant.registry,
        QuantMode::FakeQuant,
        &cfg,
        &trained.bundle.cameras,
    )?;
    let psnr = psnr_over_images(&trained.bundle.targets, &renders)?;
    let qm = quant_metrics(&quant.model, &quant.registry, &cfg)?;

    let int_path = out.join("model.carf");
    export_integer_model(&int_path, &quant.model, &quant.registry)?;
    let int = import_integer_model(&int_path)?;
    let check = consistency_check(
        &quant.model,
        &quant.registry,
        &int,
        32,
        cfg.seed,
        CHECK_TOLERANCE,
    )?;
    log::info!(
        "integer replay verified on {} probes (max deviation {:.3e})",
        check.probes,
        check.max_abs_deviation
    );

    let target_refs: Vec<&Image> = trained.bundle.targets.iter().collect();
    let record = RunRecord {
        scene: cfg.scene_label(),
        complexity: avg_image_gradient(&target_refs)?,
        mode: cfg.mode.name().to_string(),
        target: quant.target.value,
        penalty: cfg.penalty_total,
        fqr: qm.fqr,
        psnr,
        bitops: qm.bitops,
        storage_bytes: qm.storage_bytes,
        telemetry: Some(quant.telemetry.display().to_string()),
        config_fingerprint: Some(cfg.fingerprint()),
    };
    let record_json = serde_json::to_string_pretty(&record)?;
    std::fs::write(out.join("record.json"), format!("{record_json}\n"))?;
    if let Some(path) = &args.emit_record {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, format!("{record_json}\n"))?;
    }
    println!("{record_json}");
    Ok(record)
}

struct SweepCell {
    label: String,
    dir: PathBuf,
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.config.load()?;
    if args.jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    for mode in &args.modes {
        if mode != "mdl" && mode != "mgl" {
            return Err(Error::Config(format!(
                "modes must be mdl or mgl, got {mode:?}"
            )));
        }
    }
    if args.complexities.is_empty() || args.seeds.is_empty() || args.modes.is_empty() {
        return Err(Error::Config("sweep axes must be non-empty".into()));
    }
    let root = std::path::absolute(base.resolved_out_dir())?;
    std::fs::create_dir_all(&root)?;

    // Materialize one config file per cell; children get absolute output
    // directories so the out-root env var cannot re-prefix them.
    let mut pending: std::collections::VecDeque<SweepCell> = std::collections::VecDeque::new();
    for &k in &args.complexities {
        for &s in &args.seeds {
            for mode in &args.modes {
                let mut cell_cfg = base.clone();
                cell_cfg.set("scene_complexity", &k.to_string())?;
                cell_cfg.set("scene_seed", &s.to_string())?;
                cell_cfg.set("mode", mode)?;
                let label = format!("{}_{}", cell_cfg.scene_label(), mode);
                let dir = root.join("cells").join(&label);
                std::fs::create_dir_all(&dir)?;
                cell_cfg.set("out_dir", &dir.display().to_string())?;
                cell_cfg.validate()?;
                std::fs::write(dir.join("config.cfg"), cell_cfg.canonical_text())?;
                pending.push_back(SweepCell { label, dir });
            }
        }
    }
    let total = pending.len();
    let exe = std::env::current_exe()?;

    let mut active: Vec<(std::process::Child, SweepCell)> = Vec::new();
    let mut finished: Vec<(SweepCell, bool)> = Vec::new();
    while !pending.is_empty() || !active.is_empty() {
        while active.len() < args.jobs {
            let Some(cell) = pending.pop_front() else { break };
            log::info!("sweep cell {} starting", cell.label);
            let child = std::process::Command::new(&exe)
                .arg("run")
                .arg("--config")
                .arg(cell.dir.join("config.cfg"))
                .arg("--emit-record")
                .arg(cell.dir.join("record.json"))
                .stdout(std::fs::File::create(cell.dir.join("stdout.log"))?)
                .stderr(std::fs::File::create(cell.dir.join("stderr.log"))?)
                .spawn()?;
            active.push((child, cell));
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
        let mut i = 0;
        while i < active.len() {
            match active[i].0.try_wait()? {
                Some(status) => {
                    let (_, cell) = active.remove(i);
                    if status.success() {
                        println!("cell {} done ({}/{total})", cell.label, finished.len() + 1);
                    } else {
                        println!(
                            "cell {} FAILED with {status} ({}/{total}); see {}",
                            cell.label,
                            finished.len() + 1,
                            cell.dir.join("stderr.log").display()
                        );
                    }
                    finished.push((cell, status.success()));
                }
                None => i += 1,
            }
        }
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    finished.sort_by(|a, b| a.0.label.cmp(&b.0.label));
    for (cell, ok) in &finished {
        if !ok {
            failures.push(cell.label.clone());
            continue;
        }
        let text = std::fs::read_to_string(cell.dir.join("record.json"))?;
        records.push(serde_json::from_str::<RunRecord>(&text)?);
    }
    write_report_bundle(&root, &records)?;
    if !failures.is_empty() {
        std::fs::write(
            root.join("failures.json"),
            format!("{}\n", serde_json::to_string_pretty(&failures)?),
        )?;
    }
    println!(
        "sweep: {} of {total} cells succeeded; report in {}",
        records.len(),
        root.display()
    );
    if !failures.is_empty() {
        return Err(Error::Pipeline(format!(
            "{} of {total} sweep cells failed: {}",
            failures.len(),
            failures.join(", ")
        )));
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let records = read_report_csv(&args.records)?;
    write_report_bundle(&args.out_dir, &records)?;
    println!(
        "report: {} records -> {}",
        records.len(),
        args.out_dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(name: &str, text: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("carf_cli_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn set_overrides_apply_after_config() {
        let path = write_cfg("a.cfg", "scene = wave\nacaq_iters = 100\n");
        let args = ConfigArgs {
            config: path,
            set: vec!["acaq_iters=7".into(), "width = 32".into()],
        };
        let cfg = args.load().unwrap();
        assert_eq!(cfg.acaq_iters, 7);
        assert_eq!(cfg.width, 32);
    }

    #[test]
    fn malformed_set_is_a_config_error() {
        let path = write_cfg("b.cfg", "scene = wave\n");
        let args = ConfigArgs {
            config: path,
            set: vec!["no_equals_sign".into()],
        };
        match args.load() {
            Err(Error::Config(msg)) => assert!(msg.contains("KEY=VALUE"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn cli_parses_all_subcommands() {
        for argv in [
            vec!["carf", "train", "--config", "x.cfg"],
            vec!["carf", "acaq", "--config", "x.cfg", "--freeze-bits"],
            vec!["carf", "eval", "--config", "x.cfg", "--quant", "fake"],
            vec!["carf", "export-int", "--checkpoint", "q.carc"],
            vec!["carf", "check-int", "--checkpoint", "q.carc", "--int", "m.carf"],
            vec!["carf", "run", "--config", "x.cfg"],
            vec![
                "carf",
                "sweep",
                "--config",
                "x.cfg",
                "--complexities",
                "1,4",
                "--jobs",
                "2",
            ],
            vec!["carf", "report", "--records", "r.csv", "--out-dir", "d"],
        ] {
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
    }

    #[test]
    fn sweep_axis_validation() {
        let path = write_cfg("c.cfg", "scene = wave\n");
        let args = SweepArgs {
            config: ConfigArgs {
                config: path,
                set: vec![],
            },
            complexities: vec![1],
            seeds: vec![1],
            modes: vec!["nonsense".into()],
            jobs: 1,
        };
        assert!(matches!(cmd_sweep(&args), Err(Error::Config(_))));
    }
}
