//! Layer-wise two-stage calibration.
//!
//! Each layer is fitted against its full-precision output. Stage 1 tunes only
//! the clipping of the shared MSB slice; stage 2 rebuilds every slice from
//! those parameters and trains clipping and router together against the
//! routed output plus a budget regularizer whose target bit width decays from
//! `b_init` to `b_target` over the run.

mod gradcheck;
mod layer;
mod model;
mod objective;
mod optim;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layer::{
    calibrate_layer, stage1_msb, stage2_joint, LayerOutcome, LayerReport, Stage2Options, StepRecord,
};
pub use model::{calibrate_model, layer_seed, Activation, CalibratedLayer, CalibratedModel, LinearStack};
pub use objective::{evaluate, EvalOptions, Evaluation, LayerSetup, SliceField, Stage};
pub use optim::{AdamState, AdamW};

use crate::error::{QuantError, Result};
use crate::matrix::Matrix;
use crate::qcore::{ClipParams, DEFAULT_GROUP_SIZE};
use crate::router::{avg_bits, RouterState, ThresholdMode};
use crate::slicer::DEFAULT_SLICE_BITS;

/// Everything a layer learns: MSB clipping and the router.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub clip: ClipParams,
    pub router: RouterState,
}

// ── Budget schedule ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleShape {
    #[default]
    Logarithmic,
    Linear,
    Cosine,
    Exponential,
}

impl ScheduleShape {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleShape::Logarithmic => "log",
            ScheduleShape::Linear => "linear",
            ScheduleShape::Cosine => "cosine",
            ScheduleShape::Exponential => "exp",
        }
    }
}

impl std::str::FromStr for ScheduleShape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "log" | "logarithmic" => Ok(Self::Logarithmic),
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            "exp" | "exponential" => Ok(Self::Exponential),
            other => Err(format!("unknown schedule shape `{other}`")),
        }
    }
}

/// Target bit-width trajectory `b(t)` and the regularizer weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSchedule {
    pub b_init: f64,
    pub b_target: f64,
    pub total_steps: usize,
    pub shape: ScheduleShape,
    pub reg_weight: f64,
}

impl Default for BudgetSchedule {
    fn default() -> Self {
        Self {
            b_init: 8.0,
            b_target: 3.0,
            total_steps: TrainConfig::default().global_steps(),
            shape: ScheduleShape::Logarithmic,
            reg_weight: 1e-5,
        }
    }
}

impl BudgetSchedule {
    pub fn value(&self, t: usize) -> Result<f64> {
        schedule_value(self, t)
    }
}

pub fn schedule_value(sched: &BudgetSchedule, t: usize) -> Result<f64> {
    let l = sched.total_steps;
    if t < 1 || t > l {
        return Err(QuantError::OutOfRange {
            what: "schedule step t",
            value: t as f64,
            lo: 1.0,
            hi: l as f64,
        });
    }
    let (hi, lo) = (sched.b_init, sched.b_target);
    if t == l {
        return Ok(lo);
    }
    let frac = t as f64 / l as f64;
    Ok(match sched.shape {
        ScheduleShape::Logarithmic => hi - (hi - lo) * (t as f64).ln() / (l as f64).ln(),
        ScheduleShape::Linear => hi - (hi - lo) * frac,
        ScheduleShape::Cosine => lo + (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0,
        ScheduleShape::Exponential => hi * (lo / hi).powf(frac),
    })
}

/// Budget regularizer `(AvgBits - b(t)) · ‖G‖₁` and its gradient w.r.t. every
/// gate. `AvgBits` is a detached coefficient, so the gradient is that
/// coefficient everywhere.
pub fn reg_loss(g: &Matrix, slice_bits: &[u8], sched: &BudgetSchedule, t: usize) -> Result<(f64, f64)> {
    let coef = avg_bits(g, slice_bits)? - schedule_value(sched, t)?;
    let l1: f64 = g.as_slice().iter().map(|v| v.abs()).sum();
    Ok((coef * l1, coef))
}

// ── Training configuration ─────────────────────────────────────────────────

/// Whether stage 1 runs inside every step next to stage 2, or entirely
/// before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stage1Mode {
    #[default]
    Interleaved,
    Warmup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub nsamples: usize,
    pub batch_size: usize,
    pub lr_clip: f64,
    pub lr_router: f64,
    pub weight_decay: f64,
    pub slice_bits: Vec<u8>,
    pub group_size: usize,
    pub stage1: Stage1Mode,
    pub threshold_mode: ThresholdMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            nsamples: 128,
            batch_size: 1,
            lr_clip: 5e-3,
            lr_router: 1e-5,
            weight_decay: 0.0,
            slice_bits: DEFAULT_SLICE_BITS.to_vec(),
            group_size: DEFAULT_GROUP_SIZE,
            stage1: Stage1Mode::Interleaved,
            threshold_mode: ThresholdMode::Shared,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batches_per_epoch(&self) -> usize {
        self.nsamples.div_ceil(self.batch_size.max(1))
    }

    /// `(nsamples / batch_size) · epochs`
    pub fn global_steps(&self) -> usize {
        self.batches_per_epoch() * self.epochs
    }

    pub fn validate(&self) -> Result<()> {
        crate::slicer::validate_slice_bits(&self.slice_bits)?;
        for (what, v) in [
            ("epochs", self.epochs),
            ("nsamples", self.nsamples),
            ("batch_size", self.batch_size),
            ("group_size", self.group_size),
        ] {
            if v == 0 {
                return Err(QuantError::OutOfRange {
                    what,
                    value: 0.0,
                    lo: 1.0,
                    hi: f64::INFINITY,
                });
            }
        }
        for (what, v) in [
            ("lr_clip", self.lr_clip),
            ("lr_router", self.lr_router),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(QuantError::OutOfRange {
                    what,
                    value: v,
                    lo: 0.0,
                    hi: f64::INFINITY,
                });
            }
        }
        Ok(())
    }
}
