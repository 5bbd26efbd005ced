//! Elastic evaluation at arbitrary bit budgets and outlier-migration analysis.

use std::collections::BTreeMap;

use slicequant::router::{
    calibrate_thresholds, forward_elastic, gate_hard_with, prefix_violation_rate, ratio_from_target_bits, score,
    token_bits, GateMode, ThresholdMode,
};
use slicequant::slicer::migration_overlap;
use slicequant::trainer::{Activation, CalibratedLayer};
use slicequant::Matrix;

use crate::checkpoint::Checkpoint;
use crate::pipeline::fp_model;
use crate::BenchError;

/// Result of running every layer with thresholds fitted for one `ρ`.
#[derive(Debug, Clone)]
pub struct RoutedPass {
    pub output: Matrix,
    pub gates: Vec<Matrix>,
    pub thresholds: Vec<Vec<f64>>,
}

/// Hard-gated forward. Each layer's thresholds are the `ρ`-quantile of its
/// scores on `fit` (the quantized stream at that layer); `eval` is routed
/// with them. With `fit = None` the thresholds come from `eval` itself.
pub fn routed_pass(
    layers: &[CalibratedLayer],
    activation: Activation,
    eval: &Matrix,
    fit: Option<&Matrix>,
    rho: f64,
    mode: ThresholdMode,
) -> Result<RoutedPass, BenchError> {
    let mut h = eval.clone();
    let mut hf = fit.cloned();
    let mut gates = Vec::with_capacity(layers.len());
    let mut thresholds = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let s = score(&h, &layer.params.router)?;
        let fit_scores = match &hf {
            Some(f) => score(f, &layer.params.router)?,
            None => s.clone(),
        };
        let th = calibrate_thresholds(&[fit_scores], rho, mode)?.remove(0);
        let mut router = layer.params.router.clone();
        router.thresholds = th.clone();
        let g = gate_hard_with(&s, &router);
        let mut y = forward_elastic(&h, &layer.stack, &g, GateMode::Hard)?;
        if let Some(f) = &hf {
            let gf = gate_hard_with(&score(f, &router)?, &router);
            let mut yf = forward_elastic(f, &layer.stack, &gf, GateMode::Hard)?;
            if i + 1 < layers.len() {
                yf = activation.apply(&yf);
            }
            hf = Some(yf);
        }
        if i + 1 < layers.len() {
            y = activation.apply(&y);
        }
        h = y;
        gates.push(g);
        thresholds.push(th);
    }
    Ok(RoutedPass {
        output: h,
        gates,
        thresholds,
    })
}

fn mse(a: &Matrix, b: &Matrix) -> Result<f64, BenchError> {
    let d = a.sub(b)?;
    Ok(d.as_slice().iter().map(|v| v * v).sum::<f64>() / d.as_slice().len() as f64)
}

/// Squared output error of every token.
pub fn token_errors(out: &Matrix, reference: &Matrix) -> Result<Vec<f64>, BenchError> {
    let d = out.sub(reference)?;
    Ok((0..d.rows()).map(|t| d.row(t).iter().map(|v| v * v).sum()).collect())
}

// ── Sweep ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub target_bits: f64,
    pub rho: f64,
    pub realized_bits: f64,
    pub output_mse: f64,
    pub prefix_violation: f64,
    /// Realized average bits of every layer.
    pub layer_bits: Vec<f64>,
    /// Token count per effective bit width, pooled over layers.
    pub histogram: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub notes: Vec<String>,
}

pub fn eval_sweep(ckpt: &Checkpoint, eval: &Matrix, fit: Option<&Matrix>, targets: &[f64]) -> Result<Sweep, BenchError> {
    let layers = ckpt.calibrated_layers();
    let reference = fp_model(ckpt).forward(eval)?;
    let slice_bits = &ckpt.config.quant.slice_bits;
    let mode = ckpt.config.train.threshold_mode;
    let mut sweep = Sweep::default();
    for &target in targets {
        let rho = match ratio_from_target_bits(target, slice_bits) {
            Ok(r) => r,
            Err(e) => {
                sweep.notes.push(format!("target {target} skipped: {e}"));
                continue;
            }
        };
        let pass = routed_pass(&layers, ckpt.config.model.activation, eval, fit, rho, mode)?;
        let mut histogram = BTreeMap::new();
        let mut layer_bits = Vec::with_capacity(layers.len());
        let mut violation = 0.0;
        for g in &pass.gates {
            let bits = token_bits(g, slice_bits);
            for &b in &bits {
                *histogram.entry(b as u32).or_insert(0) += 1;
            }
            layer_bits.push(bits.iter().sum::<f64>() / bits.len() as f64);
            violation += prefix_violation_rate(g);
        }
        sweep.rows.push(SweepRow {
            target_bits: target,
            rho,
            realized_bits: layer_bits.iter().sum::<f64>() / layer_bits.len() as f64,
            output_mse: mse(&pass.output, &reference)?,
            prefix_violation: violation / pass.gates.len() as f64,
            layer_bits,
            histogram,
        });
    }
    Ok(sweep)
}

// ── Outlier migration ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MigrationReport {
    pub bits_a: f64,
    pub bits_b: f64,
    pub top_frac: f64,
    pub static_bits: (u32, u32),
    pub routed_bits: (f64, f64),
    pub static_overlap: f64,
    pub routed_overlap: f64,
    pub static_a: Vec<f64>,
    pub static_b: Vec<f64>,
    pub routed_a: Vec<f64>,
    pub routed_b: Vec<f64>,
}

/// Every token at the same precision: the merged code truncated to
/// `round(bits)` bits.
fn static_pass(ckpt: &Checkpoint, x: &Matrix, bits: f64) -> Result<(Matrix, u32), BenchError> {
    let mut h = x.clone();
    let mut keep_bits = 0;
    let n = ckpt.layers.len();
    for (i, layer) in ckpt.layers.iter().enumerate() {
        let stack = &layer.stack;
        let total = stack.total_bits();
        let keep = (bits.round() as u32).clamp(stack.slice_bits[0] as u32, total);
        let (w, _) = stack.truncate(total - keep)?;
        h = h.matmul_nt(&w)?;
        if i + 1 < n {
            h = ckpt.config.model.activation.apply(&h);
        }
        keep_bits = keep;
    }
    Ok((h, keep_bits))
}

fn routed_at(ckpt: &Checkpoint, x: &Matrix, fit: Option<&Matrix>, bits: f64) -> Result<(Matrix, f64), BenchError> {
    let slice_bits = &ckpt.config.quant.slice_bits;
    let rho = ratio_from_target_bits(bits, slice_bits)?;
    let pass = routed_pass(
        &ckpt.calibrated_layers(),
        ckpt.config.model.activation,
        x,
        fit,
        rho,
        ckpt.config.train.threshold_mode,
    )?;
    let mut realized = 0.0;
    for g in &pass.gates {
        realized += token_bits(g, slice_bits).iter().sum::<f64>() / g.rows() as f64;
    }
    Ok((pass.output, realized / pass.gates.len() as f64))
}

pub fn migration_report(
    ckpt: &Checkpoint,
    eval: &Matrix,
    fit: Option<&Matrix>,
    bits_a: f64,
    bits_b: f64,
    top_frac: f64,
) -> Result<MigrationReport, BenchError> {
    let reference = fp_model(ckpt).forward(eval)?;
    let (sa, ka) = static_pass(ckpt, eval, bits_a)?;
    let (sb, kb) = static_pass(ckpt, eval, bits_b)?;
    let (ra, rba) = routed_at(ckpt, eval, fit, bits_a)?;
    let (rb, rbb) = routed_at(ckpt, eval, fit, bits_b)?;
    let static_a = token_errors(&sa, &reference)?;
    let static_b = token_errors(&sb, &reference)?;
    let routed_a = token_errors(&ra, &reference)?;
    let routed_b = token_errors(&rb, &reference)?;
    Ok(MigrationReport {
        bits_a,
        bits_b,
        top_frac,
        static_bits: (ka, kb),
        routed_bits: (rba, rbb),
        static_overlap: migration_overlap(&static_a, &static_b, top_frac)?,
        routed_overlap: migration_overlap(&routed_a, &routed_b, top_frac)?,
        static_a,
        static_b,
        routed_a,
        routed_b,
    })
}
