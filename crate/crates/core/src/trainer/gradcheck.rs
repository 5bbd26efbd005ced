//! Central finite differences against the analytic gradients.
//!
//! The straight-through rule is not the derivative of the floored loss, so
//! differences are taken on the anchored surrogate: every floor decision and
//! the `AvgBits` coefficient are frozen at the evaluation point, after which
//! the loss is smooth and its exact gradient is the straight-through one.
//!
//! `L(θ+h) − L(θ−h)` is formed term by term from the two outputs and gate
//! matrices instead of subtracting two rounded losses, which keeps the
//! difference accurate at `h = 1e-6`.

use crate::error::Result;
use crate::matrix::Matrix;

use super::objective::{evaluate, EvalOptions, Evaluation, LayerSetup, Stage};
use super::{BudgetSchedule, LayerParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Calibration step the objective is evaluated at; must be `< L`.
    pub t: usize,
    pub router_tol: f64,
    pub clip_tol: f64,
    /// Lower bound on the relative-error denominator.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            t: 1,
            router_tol: 1e-6,
            clip_tol: 1e-5,
            denom_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub router_max_rel: f64,
    pub clip_max_rel: f64,
    pub router_checked: usize,
    pub clip_checked: usize,
    pub router_tol: f64,
    pub clip_tol: f64,
    /// `(index, analytic, numeric)` of the worst router entry.
    pub router_worst: (usize, f64, f64),
    pub clip_worst: (usize, f64, f64),
}

impl GradCheckReport {
    pub fn router_ok(&self) -> bool {
        self.router_max_rel <= self.router_tol
    }

    pub fn clip_ok(&self) -> bool {
        self.clip_max_rel <= self.clip_tol
    }

    pub fn passed(&self) -> bool {
        self.router_ok() && self.clip_ok()
    }
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn grad_check(
    setup: &LayerSetup,
    params: &LayerParams,
    x: &Matrix,
    y: &Matrix,
    sched: &BudgetSchedule,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let stage = Stage::Joint { t: cfg.t };
    crate::router::GateSchedule::new(sched.total_steps)?.check_step(cfg.t)?;
    let opts = EvalOptions {
        gradients: true,
        ..Default::default()
    };
    let base = evaluate(setup, params, x, y, stage, sched, opts)?;
    let frozen = EvalOptions {
        gradients: false,
        anchors: Some(&base.anchors),
        frozen_avg_bits: Some(base.avg_bits),
        forced_gate: None,
    };
    let coef = sched.reg_weight * (base.avg_bits - base.b_sched);
    let probe_at = |p: &LayerParams| evaluate(setup, p, x, y, stage, sched, frozen);
    let h = cfg.step;
    let central = |up: &Evaluation, down: &Evaluation| -> f64 {
        let n = y.as_slice().len() as f64;
        let data: f64 = up
            .output
            .as_slice()
            .iter()
            .zip(down.output.as_slice())
            .zip(y.as_slice())
            .map(|((a, b), t)| (a - b) * ((a - t) + (b - t)))
            .sum::<f64>()
            / n;
        let reg: f64 = match (&up.gates, &down.gates) {
            (Some(a), Some(b)) => a.as_slice().iter().zip(b.as_slice()).map(|(a, b)| a.abs() - b.abs()).sum(),
            _ => 0.0,
        };
        (data + coef * reg) / (2.0 * h)
    };

    // Router.
    let router_grad = base.router_grad.clone().unwrap_or_default();
    let flat = params.router.flat_params();
    let mut router_max = 0.0f64;
    let mut router_worst = (0, 0.0, 0.0);
    let mut probe = params.clone();
    for i in 0..flat.len() {
        let mut f = flat.clone();
        f[i] = flat[i] + h;
        probe.router.set_flat_params(&f);
        let up = probe_at(&probe)?;
        f[i] = flat[i] - h;
        probe.router.set_flat_params(&f);
        let down = probe_at(&probe)?;
        let numeric = central(&up, &down);
        let e = rel_err(router_grad[i], numeric, cfg.denom_floor);
        if e > router_max {
            router_max = e;
            router_worst = (i, router_grad[i], numeric);
        }
    }

    // Clipping logits.
    let (g_lo, g_hi) = base.clip_grad.clone().expect("gradients requested");
    let groups = params.clip.num_groups();
    let mut clip_max = 0.0f64;
    let mut clip_worst = (0, 0.0, 0.0);
    for side in 0..2 {
        for g in 0..groups {
            let mut probe = params.clone();
            let orig = if side == 0 { params.clip.gamma_lo[g] } else { params.clip.gamma_hi[g] };
            let set = |p: &mut LayerParams, v: f64| {
                if side == 0 {
                    p.clip.gamma_lo[g] = v
                } else {
                    p.clip.gamma_hi[g] = v
                }
            };
            set(&mut probe, orig + h);
            let up = probe_at(&probe)?;
            set(&mut probe, orig - h);
            let down = probe_at(&probe)?;
            let numeric = central(&up, &down);
            let analytic = if side == 0 { g_lo[g] } else { g_hi[g] };
            let e = rel_err(analytic, numeric, cfg.denom_floor);
            if e > clip_max {
                clip_max = e;
                clip_worst = (side * groups + g, analytic, numeric);
            }
        }
    }

    Ok(GradCheckReport {
        router_max_rel: router_max,
        clip_max_rel: clip_max,
        router_checked: flat.len(),
        clip_checked: 2 * groups,
        router_tol: cfg.router_tol,
        clip_tol: cfg.clip_tol,
        router_worst,
        clip_worst,
    })
}
