//! Experiment configuration: TOML file, dotted-key overrides, `MANTIS_SEED`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Augment, DataSpec, ShapeKind};
use crate::error::{MantisError, Result};
use crate::model::{LossWeights, ModelConfig, SaaSettings, Tuning};
use crate::saa::{ControllerKind, FusionKind, OperatorMask};
use crate::serialization::CurveKind;
use crate::train::{OptimConfig, TrainConfig};

pub const SEED_ENV: &str = "MANTIS_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generate,
    #[default]
    Train,
    Eval,
    Analyze,
    Ablate,
    Complexity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Curves,
    #[default]
    R,
    Controller,
    Fusion,
    Modulate,
    Components,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub expand: usize,
    pub state: usize,
    pub conv_width: usize,
    pub blocks: usize,
    /// Number of key points / tokens `n`.
    pub patches: usize,
    /// Neighbours per patch.
    pub k: usize,
    pub d_o: usize,
    pub d_proj: usize,
    pub curves: [CurveKind; 2],
    pub bits: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 32,
            expand: 2,
            state: 8,
            conv_width: 4,
            blocks: 4,
            patches: 16,
            k: 16,
            d_o: 16,
            d_proj: 32,
            curves: [CurveKind::Hilbert, CurveKind::TransHilbert],
            bits: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaaSection {
    pub enabled: bool,
    pub d_phi: usize,
    pub r: usize,
    pub controller: ControllerKind,
    pub fusion: FusionKind,
    pub modulate: OperatorMask,
}

impl Default for SaaSection {
    fn default() -> Self {
        SaaSection {
            enabled: true,
            d_phi: 16,
            r: 8,
            controller: ControllerKind::Soft,
            fusion: FusionKind::ConcatMlp,
            modulate: OperatorMask::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub tuning: Tuning,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub augment: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translate: f64,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
    /// Halt after this many completed epochs (the schedule still spans
    /// `epochs`); resume later from the checkpoint.
    pub stop_after: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        let w = LossWeights::default();
        let a = Augment::default();
        TrainSection {
            tuning: Tuning::Mantis,
            lr: o.lr,
            weight_decay: o.weight_decay,
            epochs: 30,
            warmup: 3,
            batch: 16,
            seed: 0,
            alpha: w.alpha,
            beta: w.beta,
            tau: w.tau,
            augment: true,
            scale_min: a.scale.0,
            scale_max: a.scale.1,
            translate: a.translate,
            eval_every: 1,
            stop_after: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub classes: Vec<ShapeKind>,
    pub points: usize,
    pub noise: f64,
    pub samples_per_class: usize,
    pub rotate: bool,
    /// Dataset seed; defaults to the training seed.
    pub seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            classes: ShapeKind::ALL.to_vec(),
            points: 128,
            noise: 0.02,
            samples_per_class: 64,
            rotate: false,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub checkpoint: bool,
    /// Continue training from this checkpoint.
    pub resume: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/default"), checkpoint: true, resume: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub axis: AblationAxis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Test clouds run through the analysis.
    pub samples: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection { samples: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexitySection {
    pub lengths: Vec<usize>,
    pub repeats: usize,
}

impl Default for ComplexitySection {
    fn default() -> Self {
        ComplexitySection { lengths: vec![64, 128, 256, 384, 512, 640, 768, 896, 1024], repeats: 25 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelSection,
    pub saa: SaaSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
    pub ablate: AblateSection,
    pub analyze: AnalyzeSection,
    pub complexity: ComplexitySection,
}

fn cfg_err(msg: impl Into<String>) -> MantisError {
    MantisError::Config(msg.into())
}

/// Parse the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| cfg_err(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| cfg_err(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// File contents, then `MANTIS_SEED`, then overrides, then validation.
    pub fn from_toml(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        if let Some(s) = env_seed {
            let seed: u64 =
                s.trim().parse().map_err(|_| cfg_err(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
            apply_override(&mut table, &format!("train.seed={seed}"))?;
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::from_toml(&text, overrides, env.as_deref())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.data_spec().validate()?;
        let t = &self.train;
        let checks = [
            (self.model.blocks >= 1, "model.blocks must be ≥ 1"),
            (self.saa.d_phi >= 1, "saa.d_phi must be ≥ 1"),
            (self.saa.r >= 1, "saa.r must be ≥ 1"),
            (t.lr > 0.0 && t.lr.is_finite(), "train.lr must be positive"),
            (t.weight_decay >= 0.0 && t.weight_decay.is_finite(), "train.weight_decay must be ≥ 0"),
            (t.epochs >= 1, "train.epochs must be ≥ 1"),
            (t.warmup <= t.epochs, "train.warmup must not exceed train.epochs"),
            (t.batch >= 1, "train.batch must be ≥ 1"),
            (t.alpha >= 0.0 && t.alpha.is_finite(), "train.alpha must be ≥ 0"),
            (t.beta >= 0.0 && t.beta.is_finite(), "train.beta must be ≥ 0"),
            (t.tau > 0.0 && t.tau.is_finite(), "train.tau must be positive"),
            (
                t.scale_min > 0.0 && t.scale_min <= t.scale_max && t.scale_max.is_finite(),
                "train.scale_min/scale_max must satisfy 0 < min ≤ max",
            ),
            (t.translate >= 0.0 && t.translate.is_finite(), "train.translate must be ≥ 0"),
            (t.eval_every >= 1, "train.eval_every must be ≥ 1"),
            (t.stop_after.is_none_or(|s| s >= 1), "train.stop_after must be ≥ 1"),
            (self.analyze.samples >= 1, "analyze.samples must be ≥ 1"),
            (self.complexity.repeats >= 1, "complexity.repeats must be ≥ 1"),
            (
                self.complexity.lengths.len() >= 2 && self.complexity.lengths.windows(2).all(|w| w[0] < w[1]),
                "complexity.lengths must be strictly increasing with at least two entries",
            ),
            (self.complexity.lengths.first().is_some_and(|&n| n >= 1), "complexity.lengths must be ≥ 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(cfg_err(*msg)),
            None => Ok(()),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d: m.d,
            expand: m.expand,
            state: m.state,
            conv_width: m.conv_width,
            blocks: m.blocks,
            patches: m.patches,
            k: m.k,
            d_o: m.d_o,
            d_proj: m.d_proj,
            classes: self.data.classes.len(),
            curves: m.curves,
            bits: m.bits,
        }
    }

    /// `None` when adapters are disabled or the tuning mode cannot train them.
    pub fn saa_settings(&self) -> Option<SaaSettings> {
        let s = &self.saa;
        (s.enabled && self.train.tuning == Tuning::Mantis).then_some(SaaSettings {
            d_phi: s.d_phi,
            r: s.r,
            controller: s.controller,
            fusion: s.fusion,
            modulate: s.modulate,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.train.alpha, beta: self.train.beta, tau: self.train.tau }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            optim: OptimConfig { lr: t.lr, weight_decay: t.weight_decay, epochs: t.epochs, warmup: t.warmup, ..OptimConfig::default() },
            batch: t.batch,
            seed: t.seed,
            loss: self.loss_weights(),
            augment: t.augment.then_some(Augment { scale: (t.scale_min, t.scale_max), translate: t.translate }),
        }
    }

    pub fn data_spec(&self) -> DataSpec {
        let d = &self.data;
        DataSpec {
            classes: d.classes.clone(),
            points: d.points,
            noise: d.noise,
            samples_per_class: d.samples_per_class,
            rotate: d.rotate,
            seed: d.seed.unwrap_or(self.train.seed),
        }
    }

    /// SHA-256 over the canonical JSON of everything except the output section.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
