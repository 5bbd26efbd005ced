//! Flat `section.key = value` run configuration.
//!
//! Lists are whitespace separated (`quant.slice_bits = 2 2 2 2`). Blank lines
//! and `#` comments are ignored. Unknown keys are errors.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use slicequant::router::ThresholdMode;
use slicequant::trainer::{Activation, BudgetSchedule, ScheduleShape, Stage1Mode, TrainConfig};

use crate::data::{activation_name, parse_activation};

#[derive(Debug, Error, PartialEq)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: &str, message: impl Into<String>) -> Self {
        Self {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub d: usize,
    pub depth: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibSection {
    pub nsamples: usize,
    pub seq_len: usize,
    pub outlier_frac: f64,
    pub outlier_scale: f64,
    /// Fraction of extra held-out samples used for threshold calibration;
    /// 0 reuses the calibration set.
    pub split: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSection {
    pub slice_bits: Vec<u8>,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_clip: f64,
    pub lr_router: f64,
    pub weight_decay: f64,
    pub stage1: Stage1Mode,
    pub threshold_mode: ThresholdMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedSection {
    pub b_init: f64,
    pub b_target: f64,
    pub shape: ScheduleShape,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub target_bit_eval: Vec<f64>,
    pub target_activation_ratio_eval: Vec<f64>,
    pub top_frac: f64,
    pub migration_bits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub calib: CalibSection,
    pub quant: QuantSection,
    pub train: TrainSection,
    pub sched: SchedSection,
    pub eval: EvalSection,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Regularizer weight used by the toy harness.
pub const TOY_LAMBDA: f64 = 5e-2;

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sched = BudgetSchedule::default();
        Self {
            model: ModelSection {
                d: 32,
                depth: 3,
                activation: Activation::Silu,
            },
            calib: CalibSection {
                nsamples: train.nsamples,
                seq_len: 32,
                outlier_frac: 0.05,
                outlier_scale: 8.0,
                split: 0.0,
            },
            quant: QuantSection {
                slice_bits: train.slice_bits.clone(),
                group_size: train.group_size,
            },
            train: TrainSection {
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr_clip: train.lr_clip,
                lr_router: train.lr_router,
                weight_decay: train.weight_decay,
                stage1: train.stage1,
                threshold_mode: train.threshold_mode,
            },
            sched: SchedSection {
                b_init: sched.b_init,
                b_target: sched.b_target,
                shape: sched.shape,
                lambda: TOY_LAMBDA,
            },
            eval: EvalSection {
                target_bit_eval: vec![2.0, 3.0, 4.0, 5.0, 6.0, 8.0],
                target_activation_ratio_eval: Vec::new(),
                top_frac: 0.1,
                migration_bits: vec![2.99, 3.99],
            },
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

// ── Parsing ────────────────────────────────────────────────────────────────

fn scalar<T: FromStr>(path: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| ConfigError::new(path, format!("cannot parse `{v}`: {e}")))
}

fn list<T: FromStr>(path: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    v.split_whitespace().map(|t| scalar(path, t)).collect()
}

fn stage1_name(m: Stage1Mode) -> &'static str {
    match m {
        Stage1Mode::Interleaved => "interleaved",
        Stage1Mode::Warmup => "warmup",
    }
}

fn threshold_name(m: ThresholdMode) -> &'static str {
    match m {
        ThresholdMode::Shared => "shared",
        ThresholdMode::PerSlice => "per_slice",
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "model.d" => self.model.d = scalar(key, v)?,
            "model.depth" => self.model.depth = scalar(key, v)?,
            "model.activation" => {
                self.model.activation =
                    parse_activation(v).ok_or_else(|| ConfigError::new(key, format!("unknown activation `{v}`")))?
            }
            "calib.nsamples" => self.calib.nsamples = scalar(key, v)?,
            "calib.seq_len" => self.calib.seq_len = scalar(key, v)?,
            "calib.outlier_frac" => self.calib.outlier_frac = scalar(key, v)?,
            "calib.outlier_scale" => self.calib.outlier_scale = scalar(key, v)?,
            "calib.split" => self.calib.split = scalar(key, v)?,
            "quant.slice_bits" => self.quant.slice_bits = list(key, v)?,
            "quant.group_size" => self.quant.group_size = scalar(key, v)?,
            "train.epochs" => self.train.epochs = scalar(key, v)?,
            "train.batch_size" => self.train.batch_size = scalar(key, v)?,
            "train.lr_clip" => self.train.lr_clip = scalar(key, v)?,
            "train.lr_router" => self.train.lr_router = scalar(key, v)?,
            "train.weight_decay" => self.train.weight_decay = scalar(key, v)?,
            "train.stage1" => {
                self.train.stage1 = match v {
                    "interleaved" => Stage1Mode::Interleaved,
                    "warmup" => Stage1Mode::Warmup,
                    _ => return Err(ConfigError::new(key, format!("unknown stage-1 mode `{v}`"))),
                }
            }
            "train.threshold_mode" => {
                self.train.threshold_mode = match v {
                    "shared" => ThresholdMode::Shared,
                    "per_slice" => ThresholdMode::PerSlice,
                    _ => return Err(ConfigError::new(key, format!("unknown threshold mode `{v}`"))),
                }
            }
            "sched.b_init" => self.sched.b_init = scalar(key, v)?,
            "sched.b_target" => self.sched.b_target = scalar(key, v)?,
            "sched.shape" => self.sched.shape = v.parse().map_err(|e: String| ConfigError::new(key, e))?,
            "sched.lambda" => self.sched.lambda = scalar(key, v)?,
            "eval.target_bit_eval" => self.eval.target_bit_eval = list(key, v)?,
            "eval.target_activation_ratio_eval" => self.eval.target_activation_ratio_eval = list(key, v)?,
            "eval.top_frac" => self.eval.top_frac = scalar(key, v)?,
            "eval.migration_bits" => self.eval.migration_bits = list(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(&format!("line {}", n + 1), "expected `key = value`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(&path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    /// Every setting that affects results. `out_dir` is left out so a run's
    /// outputs do not depend on where they are written.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.d", self.model.d.to_string()),
            ("model.depth", self.model.depth.to_string()),
            ("model.activation", activation_name(self.model.activation).into()),
            ("calib.nsamples", self.calib.nsamples.to_string()),
            ("calib.seq_len", self.calib.seq_len.to_string()),
            ("calib.outlier_frac", self.calib.outlier_frac.to_string()),
            ("calib.outlier_scale", self.calib.outlier_scale.to_string()),
            ("calib.split", self.calib.split.to_string()),
            ("quant.slice_bits", join(&self.quant.slice_bits)),
            ("quant.group_size", self.quant.group_size.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr_clip", self.train.lr_clip.to_string()),
            ("train.lr_router", self.train.lr_router.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.stage1", stage1_name(self.train.stage1).into()),
            ("train.threshold_mode", threshold_name(self.train.threshold_mode).into()),
            ("sched.b_init", self.sched.b_init.to_string()),
            ("sched.b_target", self.sched.b_target.to_string()),
            ("sched.shape", self.sched.shape.name().into()),
            ("sched.lambda", self.sched.lambda.to_string()),
            ("eval.target_bit_eval", join(&self.eval.target_bit_eval)),
            ("eval.target_activation_ratio_eval", join(&self.eval.target_activation_ratio_eval)),
            ("eval.top_frac", self.eval.top_frac.to_string()),
            ("eval.migration_bits", join(&self.eval.migration_bits)),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("model.d", self.model.d),
            ("model.depth", self.model.depth),
            ("calib.nsamples", self.calib.nsamples),
            ("calib.seq_len", self.calib.seq_len),
            ("quant.group_size", self.quant.group_size),
            ("train.epochs", self.train.epochs),
            ("train.batch_size", self.train.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::new(k, "must be positive"));
            }
        }
        slicequant::slicer::validate_slice_bits(&self.quant.slice_bits)
            .map_err(|e| ConfigError::new("quant.slice_bits", e.to_string()))?;
        for (k, v) in [
            ("calib.outlier_frac", self.calib.outlier_frac),
            ("calib.split", self.calib.split),
            ("eval.top_frac", self.eval.top_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::new(k, format!("{v} outside [0, 1]")));
            }
        }
        if self.eval.top_frac == 0.0 {
            return Err(ConfigError::new("eval.top_frac", "must be positive"));
        }
        for (k, v) in [
            ("calib.outlier_scale", self.calib.outlier_scale),
            ("train.lr_clip", self.train.lr_clip),
            ("train.lr_router", self.train.lr_router),
            ("train.weight_decay", self.train.weight_decay),
            ("sched.lambda", self.sched.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::new(k, format!("{v} is not a finite non-negative number")));
            }
        }
        let total: f64 = self.quant.slice_bits.iter().map(|&b| b as f64).sum();
        let lo = self.quant.slice_bits[0] as f64;
        if !(lo..=total).contains(&self.sched.b_target) {
            return Err(ConfigError::new("sched.b_target", format!("outside [{lo}, {total}]")));
        }
        if self.sched.b_init < self.sched.b_target {
            return Err(ConfigError::new("sched.b_init", "below sched.b_target"));
        }
        if self.eval.migration_bits.len() != 2 {
            return Err(ConfigError::new("eval.migration_bits", "expected two budgets"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            nsamples: self.calib.nsamples,
            batch_size: self.train.batch_size,
            lr_clip: self.train.lr_clip,
            lr_router: self.train.lr_router,
            weight_decay: self.train.weight_decay,
            slice_bits: self.quant.slice_bits.clone(),
            group_size: self.quant.group_size,
            stage1: self.train.stage1,
            threshold_mode: self.train.threshold_mode,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> BudgetSchedule {
        BudgetSchedule {
            b_init: self.sched.b_init,
            b_target: self.sched.b_target,
            total_steps: self.train_config().global_steps(),
            shape: self.sched.shape,
            reg_weight: self.sched.lambda,
        }
    }
}
