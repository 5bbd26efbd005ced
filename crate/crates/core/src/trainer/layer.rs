use crate::error::{QuantError, Result};
use crate::matrix::Matrix;
use crate::qcore::ClipParams;
use crate::router::{avg_bits, forward_elastic, gate_hard_with, score, GateMode};
use crate::slicer::SliceStack;

use super::objective::{evaluate, EvalOptions, LayerSetup, Stage};
use super::optim::{AdamState, AdamW};
use super::{BudgetSchedule, LayerParams, Stage1Mode, TrainConfig};

/// Share of steps `AvgBits` may sit on a bound before a warning is raised.
const STUCK_FRACTION: f64 = 0.2;

/// One global calibration step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub layer: usize,
    pub step: usize,
    pub stage1_loss: Option<f64>,
    pub loss: f64,
    pub data_term: f64,
    pub reg_term: f64,
    pub avg_bits: f64,
    pub b_sched: f64,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub records: Vec<StepRecord>,
    pub stage1_losses: Vec<f64>,
    /// Hard-gated `AvgBits` over the calibration inputs after training.
    pub final_avg_bits: f64,
    pub clamp_counts: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub params: LayerParams,
    pub stack: SliceStack,
    pub report: LayerReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stage2Options {
    /// Bypasses the router with a constant gate on every routed slice.
    pub forced_gate: Option<f64>,
}

// ── Optimizer bookkeeping ──────────────────────────────────────────────────

struct Calibrator<'a> {
    setup: &'a LayerSetup,
    sched: BudgetSchedule,
    clip_hp: AdamW,
    router_hp: AdamW,
    s1_clip: AdamState,
    s2_clip: AdamState,
    s2_router: AdamState,
    params: LayerParams,
}

fn flat_clip(c: &ClipParams) -> Vec<f64> {
    let mut v = c.gamma_lo.clone();
    v.extend_from_slice(&c.gamma_hi);
    v
}

fn set_flat_clip(c: &mut ClipParams, flat: &[f64]) {
    let n = c.gamma_lo.len();
    c.gamma_lo.copy_from_slice(&flat[..n]);
    c.gamma_hi.copy_from_slice(&flat[n..]);
}

impl<'a> Calibrator<'a> {
    fn new(setup: &'a LayerSetup, params: LayerParams, cfg: &TrainConfig, sched: BudgetSchedule) -> Self {
        let n_clip = 2 * params.clip.num_groups();
        let n_router = params.router.num_params();
        Self {
            setup,
            sched,
            clip_hp: AdamW::new(cfg.lr_clip, cfg.weight_decay),
            router_hp: AdamW::new(cfg.lr_router, cfg.weight_decay),
            s1_clip: AdamState::new(n_clip),
            s2_clip: AdamState::new(n_clip),
            s2_router: AdamState::new(n_router),
            params,
        }
    }

    fn diverged(&self, stage: &'static str, step: usize, loss: f64) -> QuantError {
        QuantError::Diverged {
            stage,
            step,
            loss,
            last_good: Box::new(self.params.clone()),
        }
    }

    fn stage1_step(&mut self, x: &Matrix, y: &Matrix, step: usize) -> Result<f64> {
        let opts = EvalOptions {
            gradients: true,
            ..Default::default()
        };
        let ev = evaluate(self.setup, &self.params, x, y, Stage::Msb, &self.sched, opts)?;
        let (lo, hi) = ev.clip_grad.expect("gradients requested");
        if !ev.loss.is_finite() || lo.iter().chain(&hi).any(|g| !g.is_finite()) {
            return Err(self.diverged("stage1", step, ev.loss));
        }
        let mut grad = lo;
        grad.extend_from_slice(&hi);
        let mut flat = flat_clip(&self.params.clip);
        self.s1_clip.step(&self.clip_hp, &mut flat, &grad);
        set_flat_clip(&mut self.params.clip, &flat);
        Ok(ev.loss)
    }

    fn stage2_step(&mut self, x: &Matrix, y: &Matrix, t: usize, opts: Stage2Options) -> Result<StepRecord> {
        let eval_opts = EvalOptions {
            gradients: true,
            forced_gate: opts.forced_gate,
            ..Default::default()
        };
        let ev = evaluate(self.setup, &self.params, x, y, Stage::Joint { t }, &self.sched, eval_opts)?;
        let (lo, hi) = ev.clip_grad.clone().expect("gradients requested");
        let router_bad = ev.router_grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()));
        if !ev.loss.is_finite() || router_bad || lo.iter().chain(&hi).any(|g| !g.is_finite()) {
            return Err(self.diverged("stage2", t, ev.loss));
        }
        let mut grad = lo;
        grad.extend_from_slice(&hi);
        let mut flat = flat_clip(&self.params.clip);
        self.s2_clip.step(&self.clip_hp, &mut flat, &grad);
        set_flat_clip(&mut self.params.clip, &flat);
        if let Some(rg) = &ev.router_grad {
            let mut rp = self.params.router.flat_params();
            self.s2_router.step(&self.router_hp, &mut rp, rg);
            self.params.router.set_flat_params(&rp);
        }
        self.params.router.step = t;
        Ok(StepRecord {
            layer: 0,
            step: t,
            stage1_loss: None,
            loss: ev.loss,
            data_term: ev.data_term,
            reg_term: ev.reg_term,
            avg_bits: ev.avg_bits,
            b_sched: ev.b_sched,
            tau: ev.tau,
        })
    }
}

fn check_batches(batches: &[(Matrix, Matrix)]) -> Result<()> {
    if batches.is_empty() {
        return Err(QuantError::Empty("calibration batches"));
    }
    Ok(())
}

// ── Public entry points ────────────────────────────────────────────────────

/// Stage 1 alone: `steps` updates of the MSB clipping, cycling through the
/// batches in order. The router is untouched.
pub fn stage1_msb(
    setup: &LayerSetup,
    batches: &[(Matrix, Matrix)],
    params: &LayerParams,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<(ClipParams, Vec<f64>)> {
    check_batches(batches)?;
    let sched = BudgetSchedule {
        total_steps: steps.max(1),
        ..Default::default()
    };
    let mut cal = Calibrator::new(setup, params.clone(), cfg, sched);
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let (x, y) = &batches[(step - 1) % batches.len()];
        losses.push(cal.stage1_step(x, y, step)?);
    }
    Ok((cal.params.clip, losses))
}

/// Stage 2 alone over `sched.total_steps` steps, then commits the slices.
pub fn stage2_joint(
    setup: &LayerSetup,
    batches: &[(Matrix, Matrix)],
    params: &LayerParams,
    cfg: &TrainConfig,
    sched: &BudgetSchedule,
    opts: Stage2Options,
) -> Result<(LayerParams, SliceStack, Vec<StepRecord>)> {
    check_batches(batches)?;
    let mut cal = Calibrator::new(setup, params.clone(), cfg, *sched);
    cal.params.router.total_steps = sched.total_steps;
    let mut records = Vec::with_capacity(sched.total_steps);
    for t in 1..=sched.total_steps {
        let (x, y) = &batches[(t - 1) % batches.len()];
        records.push(cal.stage2_step(x, y, t, opts)?);
    }
    let stack = setup.commit(&cal.params.clip)?;
    Ok((cal.params, stack, records))
}

/// Full calibration of one layer. `sched.total_steps` is replaced by the
/// step count implied by `cfg`.
pub fn calibrate_layer(
    layer: usize,
    setup: &LayerSetup,
    batches: &[(Matrix, Matrix)],
    init: LayerParams,
    cfg: &TrainConfig,
    sched: &BudgetSchedule,
    opts: Stage2Options,
) -> Result<LayerOutcome> {
    check_batches(batches)?;
    cfg.validate()?;
    let total = cfg.global_steps();
    let sched = BudgetSchedule {
        total_steps: total,
        ..*sched
    };
    let mut cal = Calibrator::new(setup, init, cfg, sched);
    cal.params.router.total_steps = total;
    let mut records = Vec::with_capacity(total);
    let mut stage1_losses = Vec::with_capacity(total);
    let batch = |t: usize| &batches[(t - 1) % batches.len()];

    if cfg.stage1 == Stage1Mode::Warmup {
        for t in 1..=total {
            let (x, y) = batch(t);
            stage1_losses.push(cal.stage1_step(x, y, t)?);
        }
    }
    for t in 1..=total {
        let (x, y) = batch(t);
        let s1 = if cfg.stage1 == Stage1Mode::Interleaved {
            let l = cal.stage1_step(x, y, t)?;
            stage1_losses.push(l);
            Some(l)
        } else {
            None
        };
        let mut rec = cal.stage2_step(x, y, t, opts)?;
        rec.layer = layer;
        rec.stage1_loss = s1;
        records.push(rec);
    }

    let stack = setup.commit(&cal.params.clip)?;
    let final_avg_bits = hard_avg_bits(&cal.params, &stack, batches)?;
    let mut warnings = Vec::new();
    let lo = setup.slice_bits[0] as f64;
    let hi: f64 = setup.slice_bits.iter().map(|&b| b as f64).sum();
    let stuck = records
        .iter()
        .filter(|r| r.avg_bits <= lo || r.avg_bits >= hi)
        .count();
    if stuck as f64 > STUCK_FRACTION * records.len() as f64 {
        warnings.push(format!(
            "layer {layer}: AvgBits sat on a bound for {stuck} of {} steps",
            records.len()
        ));
    }
    if stack.any_clamp() {
        warnings.push(format!(
            "layer {layer}: residual clamps per slice {:?}",
            stack.clamp_counts()
        ));
    }
    Ok(LayerOutcome {
        report: LayerReport {
            layer,
            records,
            stage1_losses,
            final_avg_bits,
            clamp_counts: stack.clamp_counts(),
            warnings,
        },
        params: cal.params,
        stack,
    })
}

/// Hard-gated `AvgBits` pooled over every batch input.
fn hard_avg_bits(params: &LayerParams, stack: &SliceStack, batches: &[(Matrix, Matrix)]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (x, _) in batches {
        let g = gate_hard_with(&score(x, &params.router)?, &params.router);
        total += avg_bits(&g, &stack.slice_bits)? * x.rows() as f64;
        tokens += x.rows();
    }
    Ok(total / tokens as f64)
}

/// Output of a committed layer under hard gates at its own thresholds.
pub(crate) fn hard_forward(params: &LayerParams, stack: &SliceStack, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let g = gate_hard_with(&score(x, &params.router)?, &params.router);
    let y = forward_elastic(x, stack, &g, GateMode::Hard)?;
    Ok((y, g))
}
