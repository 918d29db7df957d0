//! Run configuration: a flat `key = value` file describing one training /
//! quantization run, plus a stable fingerprint for provenance tracking.

use crate::error::{Error, Result};
use crate::field::model::{FieldMode, ModelConfig};
use crate::train::TargetMode;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Environment variable that prefixes relative output directories, so sweeps
/// can be redirected without editing config files.
pub const OUT_ROOT_ENV: &str = "CARF_OUT_ROOT";

/// Which synthetic scene family a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// 2D harmonic texture (planar field).
    Wave,
    /// 3D primitive volume (volumetric field).
    Volume,
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Wave => "wave",
            SceneKind::Volume => "volume",
        }
    }

    pub fn field_mode(&self) -> FieldMode {
        match self {
            SceneKind::Wave => FieldMode::Planar,
            SceneKind::Volume => FieldMode::Volumetric,
        }
    }
}

/// Everything one run needs, resolved from defaults and a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneKind,
    /// Scene complexity knob (harmonic count / primitive count).
    pub scene_complexity: usize,
    pub scene_seed: u64,
    pub mode: TargetMode,
    /// Loss multiplier for metric-goal runs (ignored under minimal
    /// degradation).
    pub target_multiplier: f64,
    pub penalty_total: f64,
    pub codebook_boost: f64,
    pub train_iters: u32,
    pub train_lr: f64,
    pub acaq_iters: u32,
    pub lr_quality: f64,
    pub lr_bits: f64,
    /// Pixels (2D) or rays (3D) per batch; `None` picks the mode default.
    pub batch: Option<usize>,
    pub seed: u64,
    pub image_size: usize,
    pub cameras: usize,
    pub samples_per_ray: usize,
    pub width: usize,
    pub grid_levels: usize,
    pub grid_table: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn default_for(scene: SceneKind) -> Self {
        RunConfig {
            scene,
            scene_complexity: 1,
            scene_seed: 1,
            mode: TargetMode::Mdl,
            target_multiplier: 4.0,
            penalty_total: 1e-3,
            codebook_boost: 1.0,
            train_iters: 1500,
            train_lr: 1e-2,
            acaq_iters: 3000,
            lr_quality: 1e-3,
            lr_bits: 1e-2,
            batch: None,
            seed: 42,
            image_size: 64,
            cameras: 6,
            samples_per_ray: 32,
            width: 64,
            grid_levels: 8,
            grid_table: 1 << 14,
            out_dir: PathBuf::from("runs/run"),
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch.unwrap_or(match self.scene {
            SceneKind::Wave => 4096,
            SceneKind::Volume => 1024,
        })
    }

    /// Short label identifying the scene, e.g. `wave_k4_s1`.
    pub fn scene_label(&self) -> String {
        format!(
            "{}_k{}_s{}",
            self.scene.name(),
            self.scene_complexity,
            self.scene_seed
        )
    }

    /// Model architecture implied by this run.
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = match self.scene {
            SceneKind::Wave => ModelConfig::planar_default(self.seed),
            SceneKind::Volume => ModelConfig::volumetric_default(self.seed),
        };
        cfg.width = self.width;
        cfg.grid.levels = self.grid_levels;
        cfg.grid.table_size = self.grid_table;
        cfg
    }

    /// Output directory, honoring the [`OUT_ROOT_ENV`] prefix for relative
    /// paths.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out_dir.is_relative() => {
                PathBuf::from(root).join(&self.out_dir)
            }
            _ => self.out_dir.clone(),
        }
    }

    /// Canonical `key = value` rendering of the fully resolved settings,
    /// in fixed key order.
    pub fn canonical_text(&self) -> String {
        let pairs: Vec<(&str, String)> = vec![
            ("scene", self.scene.name().into()),
            ("scene_complexity", self.scene_complexity.to_string()),
            ("scene_seed", self.scene_seed.to_string()),
            ("mode", self.mode.name().into()),
            ("target_multiplier", format!("{}", self.target_multiplier)),
            ("penalty_total", format!("{}", self.penalty_total)),
            ("codebook_boost", format!("{}", self.codebook_boost)),
            ("train_iters", self.train_iters.to_string()),
            ("train_lr", format!("{}", self.train_lr)),
            ("acaq_iters", self.acaq_iters.to_string()),
            ("lr_quality", format!("{}", self.lr_quality)),
            ("lr_bits", format!("{}", self.lr_bits)),
            ("batch", self.effective_batch().to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("cameras", self.cameras.to_string()),
            ("samples_per_ray", self.samples_per_ray.to_string()),
            ("width", self.width.to_string()),
            ("grid_levels", self.grid_levels.to_string()),
            ("grid_table", self.grid_table.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// 64-bit FNV-1a fingerprint of the canonical settings, as hex. Stable
    /// across runs; changes when any effective setting changes.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=64).contains(&self.scene_complexity) {
            return Err(Error::Config(format!(
                "scene_complexity must lie in [1, 64], got {}",
                self.scene_complexity
            )));
        }
        if self.mode == TargetMode::Mgl && !(self.target_multiplier > 1.0) {
            return Err(Error::Config(format!(
                "target_multiplier must exceed 1 under mgl, got {}",
                self.target_multiplier
            )));
        }
        if self.penalty_total < 0.0 {
            return Err(Error::Config("penalty_total must be non-negative".into()));
        }
        if self.codebook_boost <= 0.0 {
            return Err(Error::Config("codebook_boost must be positive".into()));
        }
        if !(self.train_lr > 0.0) || !(self.lr_quality > 0.0) || !(self.lr_bits > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch == Some(0) {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be at least 1".into()));
        }
        if self.scene == SceneKind::Volume {
            if self.cameras == 0 {
                return Err(Error::Config("cameras must be at least 1".into()));
            }
            if self.samples_per_ray < 2 {
                return Err(Error::Config("samples_per_ray must be at least 2".into()));
            }
        }
        self.model_config().validate()?;
        Ok(())
    }

    /// Parse a config file (`key = value` lines, `#` comments). The `scene`
    /// key is required; everything else falls back to defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let pairs = parse_pairs(text)?;
        let scene = match pairs.get("scene").map(String::as_str) {
            Some("wave") => SceneKind::Wave,
            Some("volume") => SceneKind::Volume,
            Some(other) => {
                return Err(Error::Config(format!(
                    "scene must be wave or volume, got {other:?}"
                )))
            }
            None => {
                return Err(Error::Config(
                    "config is missing the required key scene".into(),
                ))
            }
        };
        let mut cfg = RunConfig::default_for(scene);
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply one `key = value` override (used by command-line flags).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("key {key} cannot parse value {value:?}"))
            })
        }
        match key {
            "scene" => {
                self.scene = match value {
                    "wave" => SceneKind::Wave,
                    "volume" => SceneKind::Volume,
                    other => {
                        return Err(Error::Config(format!(
                            "scene must be wave or volume, got {other:?}"
                        )))
                    }
                }
            }
            "scene_complexity" => self.scene_complexity = num(key, value)?,
            "scene_seed" => self.scene_seed = num(key, value)?,
            "mode" => {
                self.mode = match value {
                    "mdl" => TargetMode::Mdl,
                    "mgl" => TargetMode::Mgl,
                    other => {
                        return Err(Error::Config(format!(
                            "mode must be mdl or mgl, got {other:?}"
                        )))
                    }
                }
            }
            "target_multiplier" => self.target_multiplier = num(key, value)?,
            "penalty_total" => self.penalty_total = num(key, value)?,
            "codebook_boost" => self.codebook_boost = num(key, value)?,
            "train_iters" => self.train_iters = num(key, value)?,
            "train_lr" => self.train_lr = num(key, value)?,
            "acaq_iters" => self.acaq_iters = num(key, value)?,
            "lr_quality" => self.lr_quality = num(key, value)?,
            "lr_bits" => self.lr_bits = num(key, value)?,
            "batch" => self.batch = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "cameras" => self.cameras = num(key, value)?,
            "samples_per_ray" => self.samples_per_ray = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "grid_levels" => self.grid_levels = num(key, value)?,
            "grid_table" => self.grid_table = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value, found {line:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if pairs.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!(
                "line {}: key {key} appears twice",
                lineno + 1
            )));
        }
    }
    Ok(pairs)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
