//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]`, `[distill]`
//! and `[eval]` tables plus a top-level `seed`. Every key is optional; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rkf_core::distill::{DistillConfig, TrainConfig};
use rkf_core::eval::DetectorParams;
use rkf_core::geometry::AugmentConfig;
use rkf_core::net::{ModelConfig, Variant};
use rkf_core::synth::{StyleKind, SynthStyle};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dir: PathBuf,
    pub train_images: usize,
    pub eval_images: usize,
    pub size: usize,
    /// `blobs`, `checker_warped` or `multi_freq_noise`.
    pub style: String,
    pub density: f64,
    pub contrast: f64,
    /// Homography ranges shared by training and both evaluation sets.
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear: f64,
    pub perspective: f64,
    pub translation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `base` or `rkf`; used by `train-base`.
    pub variant: String,
    pub rotations: usize,
    pub trunk: Vec<usize>,
    pub head: usize,
    pub desc_dim: usize,
    pub r: usize,
    pub kernel: usize,
    /// Training images used for the data-dependent initialization.
    pub init_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub score_lr_scale: f64,
    pub margin: f64,
    pub safe_radius: f64,
    pub grid_stride: usize,
    pub min_pairs: usize,
    /// Training pairs rotate uniformly in `[0, max_rotation_deg)`.
    pub max_rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub iterations: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `base` (DBase) or `rkf` (DRKF).
    pub student: String,
    pub teacher_rotations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub nms_radius: usize,
    pub threshold: f64,
    pub top_k: usize,
    pub border: usize,
    pub sweep_step_deg: f64,
    pub bench_sizes: Vec<usize>,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            distill: DistillSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            dir: PathBuf::from("data"),
            train_images: 200,
            eval_images: 100,
            size: 64,
            style: StyleKind::MultiFreqNoise.name().to_string(),
            density: 1.0,
            contrast: 1.0,
            scale_min: aug.scale.0,
            scale_max: aug.scale.1,
            shear: aug.shear.1,
            perspective: aug.perspective.1,
            translation: aug.translation,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            variant: "base".into(),
            rotations: 4,
            trunk: m.trunk,
            head: m.head,
            desc_dim: m.desc_dim,
            r: m.r,
            kernel: m.kernel,
            init_images: 8,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            lr: t.lr,
            momentum: t.momentum,
            score_lr_scale: t.score_lr_scale,
            margin: t.margin,
            safe_radius: t.safe_radius,
            grid_stride: t.grid_stride,
            min_pairs: t.min_pairs,
            max_rotation_deg: 360.0,
        }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            iterations: 500,
            lr: TrainConfig::default().lr,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            student: "rkf".into(),
            teacher_rotations: 4,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = DetectorParams::default();
        Self {
            nms_radius: d.nms_radius,
            threshold: d.threshold,
            top_k: d.top_k,
            border: d.border,
            sweep_step_deg: 30.0,
            bench_sizes: vec![64, 256],
            bench_reps: 10,
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainImages = 1,
    EvalImages,
    UprightPairs,
    RotatedPairs,
    InitBase,
    InitRkf,
    TrainBase,
    TrainRkf,
    InitDBase,
    InitDRkf,
    Distill,
    Bench,
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// The effective configuration as TOML; parses back to `self`.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.style()?;
        self.model_config("base")?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model_config(&self.model.variant)?;
        self.student_variant()?;
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.distill_train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.augment().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.data.size < 16 || self.data.size % (2 * self.model.r) != 0 {
            return bad(format!("data.size must be >= 16 and divisible by {}", 2 * self.model.r));
        }
        if self.data.train_images == 0 || self.data.eval_images == 0 {
            return bad("data.train_images and data.eval_images must be positive".into());
        }
        if self.model.init_images == 0 {
            return bad("model.init_images must be positive".into());
        }
        if !(self.distill.lambda1 >= 0.0 && self.distill.lambda2 >= 0.0) {
            return bad("distill.lambda1 and distill.lambda2 must be >= 0".into());
        }
        if self.distill.teacher_rotations == 0 {
            return bad("distill.teacher_rotations must be >= 1".into());
        }
        if !(self.train.max_rotation_deg >= 0.0 && self.train.max_rotation_deg <= 360.0) {
            return bad("train.max_rotation_deg must be in [0, 360]".into());
        }
        if self.eval.bench_reps < 10 || self.eval.bench_sizes.is_empty() {
            return bad("eval.bench_reps must be >= 10 and eval.bench_sizes non-empty".into());
        }
        if self.eval.top_k == 0 {
            return bad("eval.top_k must be positive".into());
        }
        Ok(())
    }

    pub fn style(&self) -> Result<SynthStyle, CliError> {
        let kind: StyleKind = self.data.style.parse().map_err(|_| CliError::Config(format!("unknown data.style {:?}", self.data.style)))?;
        let mut s = SynthStyle::new(kind, 0);
        s.density = self.data.density;
        s.contrast = self.data.contrast;
        Ok(s)
    }

    /// Evaluation-pair homography ranges without rotation.
    pub fn augment(&self) -> AugmentConfig {
        let d = &self.data;
        AugmentConfig {
            rotation: (0.0, 0.0),
            scale: (d.scale_min, d.scale_max),
            shear: (-d.shear, d.shear),
            perspective: (-d.perspective, d.perspective),
            translation: d.translation,
        }
    }

    pub fn rotated_augment(&self) -> AugmentConfig {
        AugmentConfig {
            rotation: (0.0, std::f64::consts::TAU),
            ..self.augment()
        }
    }

    pub fn model_config(&self, variant: &str) -> Result<ModelConfig, CliError> {
        let variant = match variant {
            "base" => Variant::Base,
            "rkf" => Variant::Rkf {
                n_rotations: self.model.rotations,
            },
            other => return Err(CliError::Config(format!("unknown model variant {other:?}; expected base or rkf"))),
        };
        let m = &self.model;
        Ok(ModelConfig {
            trunk: m.trunk.clone(),
            head: m.head,
            desc_dim: m.desc_dim,
            r: m.r,
            kernel: m.kernel,
            variant,
        })
    }

    pub fn student_variant(&self) -> Result<&str, CliError> {
        match self.distill.student.as_str() {
            s @ ("base" | "rkf") => Ok(s),
            other => Err(CliError::Config(format!("unknown distill.student {other:?}; expected base or rkf"))),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            lr: t.lr,
            momentum: t.momentum,
            seed: 0,
            augment: AugmentConfig {
                rotation: (0.0, t.max_rotation_deg.to_radians()),
                ..self.augment()
            },
            grid_stride: t.grid_stride,
            min_pairs: t.min_pairs,
            max_retries: TrainConfig::default().max_retries,
            margin: t.margin,
            safe_radius: t.safe_radius,
            score_lr_scale: t.score_lr_scale,
        }
    }

    pub fn distill_train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.distill.iterations,
            lr: self.distill.lr,
            ..self.train_config()
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            lambda1: self.distill.lambda1,
            lambda2: self.distill.lambda2,
        }
    }

    pub fn detector(&self) -> DetectorParams {
        let e = &self.eval;
        DetectorParams {
            nms_radius: e.nms_radius,
            threshold: e.threshold,
            top_k: e.top_k,
            border: e.border,
        }
    }

    pub fn stream_seed(&self, stream: Stream) -> u64 {
        self.stream_seeds(stream, 1)[0]
    }

    /// `n` seeds from the ChaCha stream `stream` keyed by the run seed.
    pub fn stream_seeds(&self, stream: Stream, n: usize) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        (0..n).map(|_| rng.next_u64()).collect()
    }
}

/// Applies `section.key=value` (or `seed=value`); the value uses TOML syntax and
/// falls back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let path = path.trim();
    match path.split_once('.') {
        None => {
            table.insert(path.to_string(), value);
        }
        Some((section, key)) => {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(CliError::Config(format!("{section} is not a section")));
            };
            t.insert(key.to_string(), value);
        }
    }
    Ok(())
}
