//! Token-level bit router.
//!
//! A two-layer scorer assigns each token a score per residual slice. During
//! calibration the scores pass through a sigmoid whose temperature grows
//! logarithmically and becomes an exact indicator on the last step; at
//! inference a threshold `δ` turns scores into hard gates, and moving `δ`
//! trades precision for work without touching the weights. Slice 1 is never
//! routed.

use rand::Rng;

use crate::error::{QuantError, Result};
use crate::matrix::Matrix;
use crate::slicer::SliceStack;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// How calibrated thresholds are shared across the routed slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// One pooled quantile per layer.
    #[default]
    Shared,
    /// One quantile per routed slice.
    PerSlice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    /// `d × h`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `h × n_routed`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    /// Either one shared threshold or one per routed slice.
    pub thresholds: Vec<f64>,
    pub step: usize,
    pub total_steps: usize,
}

impl RouterState {
    /// Hidden width `max(1, d / 4)`; the first layer draws from
    /// `U(-1/√d, 1/√d)` and the output layer starts at exactly zero, so every
    /// initial soft gate is 0.5.
    pub fn init(input_dim: usize, n_routed: usize, rng: &mut impl Rng) -> Self {
        let hidden = (input_dim / 4).max(1);
        let bound = 1.0 / (input_dim as f64).sqrt();
        let w1 = Matrix::from_fn(input_dim, hidden, |_, _| rng.random_range(-bound..bound));
        let b1 = (0..hidden).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            w1,
            b1,
            w2: Matrix::zeros(hidden, n_routed),
            b2: vec![0.0; n_routed],
            thresholds: vec![0.0],
            step: 0,
            total_steps: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_routed(&self) -> usize {
        self.b2.len()
    }

    pub fn threshold_for(&self, slot: usize) -> f64 {
        if self.thresholds.len() == 1 {
            self.thresholds[0]
        } else {
            self.thresholds[slot]
        }
    }

    /// Flat parameter view in `w1, b1, w2, b2` order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for dst in [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ] {
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.rows() * self.w1.cols() + self.b1.len() + self.w2.rows() * self.w2.cols() + self.b2.len()
    }
}

/// Hidden pre-activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    pub pre_hidden: Matrix,
    pub hidden: Matrix,
}

pub fn score(x: &Matrix, rs: &RouterState) -> Result<Matrix> {
    score_traced(x, rs).map(|(s, _)| s)
}

pub fn score_traced(x: &Matrix, rs: &RouterState) -> Result<(Matrix, ScoreTrace)> {
    if x.cols() != rs.input_dim() {
        return Err(QuantError::ShapeMismatch {
            what: "router input dimension",
            expected: rs.input_dim(),
            got: x.cols(),
        });
    }
    if let Some(index) = x.first_non_finite() {
        return Err(QuantError::NonFinite { index });
    }
    let mut pre = x.matmul(&rs.w1)?;
    for t in 0..pre.rows() {
        for (v, b) in pre.row_mut(t).iter_mut().zip(&rs.b1) {
            *v += b;
        }
    }
    let hidden = pre.map(silu);
    let mut s = hidden.matmul(&rs.w2)?;
    for t in 0..s.rows() {
        for (v, b) in s.row_mut(t).iter_mut().zip(&rs.b2) {
            *v += b;
        }
    }
    Ok((
        s,
        ScoreTrace {
            pre_hidden: pre,
            hidden,
        },
    ))
}

// ── Gating ────────────────────────────────────────────────────────────────

/// Logarithmic temperature schedule over `total_steps` calibration steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSchedule {
    pub total_steps: usize,
}

/// Temperature at step `t`; `None` stands for `τ = ∞` at the final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    Finite(f64),
    Infinite,
}

impl GateSchedule {
    pub fn new(total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(QuantError::Empty("gate schedule"));
        }
        Ok(Self { total_steps })
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.total_steps {
            return Err(QuantError::OutOfRange {
                what: "gate step t",
                value: t as f64,
                lo: 1.0,
                hi: self.total_steps as f64,
            });
        }
        Ok(())
    }

    /// `τ(t) = ln L / (ln L - ln t)`.
    pub fn temperature(&self, t: usize) -> Result<Temperature> {
        self.check_step(t)?;
        if t == self.total_steps {
            return Ok(Temperature::Infinite);
        }
        let ln_l = (self.total_steps as f64).ln();
        Ok(Temperature::Finite(ln_l / (ln_l - (t as f64).ln())))
    }
}

impl Temperature {
    pub fn as_option(self) -> Option<f64> {
        match self {
            Temperature::Finite(v) => Some(v),
            Temperature::Infinite => None,
        }
    }

    pub fn gate(self, s: f64) -> f64 {
        match self {
            Temperature::Finite(tau) => sigmoid(tau * s),
            Temperature::Infinite => indicator(s > 0.0),
        }
    }
}

#[inline]
fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn gate_soft(s: &Matrix, sched: &GateSchedule, t: usize) -> Result<Matrix> {
    let temp = sched.temperature(t)?;
    Ok(s.map(|v| temp.gate(v)))
}

pub fn gate_hard(s: &Matrix, delta: f64) -> Matrix {
    s.map(|v| indicator(v - delta > 0.0))
}

/// Hard gates with the router's own thresholds (shared or per slice).
pub fn gate_hard_with(s: &Matrix, rs: &RouterState) -> Matrix {
    Matrix::from_fn(s.rows(), s.cols(), |t, j| indicator(s.get(t, j) - rs.threshold_for(j) > 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Soft,
    /// Gates must be 0 or 1; off slices are skipped entirely.
    Hard,
}

fn check_gates(g: &Matrix, tokens: usize, n_routed: usize) -> Result<()> {
    if g.rows() != tokens {
        return Err(QuantError::ShapeMismatch {
            what: "gate rows (tokens)",
            expected: tokens,
            got: g.rows(),
        });
    }
    if g.cols() != n_routed {
        return Err(QuantError::ShapeMismatch {
            what: "gate columns (routed slices)",
            expected: n_routed,
            got: g.cols(),
        });
    }
    Ok(())
}

/// Per-slice linear outputs `X W_eᵀ`, each `T × out`.
pub fn slice_outputs(x: &Matrix, slice_weights: &[Matrix]) -> Result<Vec<Matrix>> {
    slice_weights.iter().map(|w| x.matmul_nt(w)).collect()
}

/// Combines per-slice outputs: slice 1 always, slice `e ≥ 2` scaled by its
/// gate. Gating the token before the product or the product afterwards is the
/// same linear map.
pub fn combine_gated(parts: &[Matrix], g: &Matrix, mode: GateMode) -> Result<Matrix> {
    let first = parts.first().ok_or(QuantError::Empty("slice outputs"))?;
    check_gates(g, first.rows(), parts.len() - 1)?;
    if mode == GateMode::Hard {
        if let Some(index) = g.as_slice().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(QuantError::OutOfRange {
                what: "hard gate value",
                value: g.as_slice()[index],
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    let mut y = first.clone();
    for t in 0..y.rows() {
        let out = y.row_mut(t);
        for (j, part) in parts[1..].iter().enumerate() {
            let gate = g.get(t, j);
            if mode == GateMode::Hard && gate == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(part.row(t)) {
                *o += gate * p;
            }
        }
    }
    Ok(y)
}

/// `Ŷ_i = W_1ᵀ X_i + Σ_{e≥2} W_eᵀ (G_{i,e-1} X_i)`
pub fn forward_elastic(x: &Matrix, stack: &SliceStack, g: &Matrix, mode: GateMode) -> Result<Matrix> {
    let (_, in_features) = stack.weight_shape;
    if x.cols() != in_features {
        return Err(QuantError::ShapeMismatch {
            what: "token dimension",
            expected: in_features,
            got: x.cols(),
        });
    }
    check_gates(g, x.rows(), stack.num_slices() - 1)?;
    let weights: Vec<Matrix> = (0..stack.num_slices()).map(|e| stack.slice_weight(e)).collect();
    combine_gated(&slice_outputs(x, &weights)?, g, mode)
}

/// Mean effective bits per token; a routed gate counts when it exceeds 0.5.
pub fn avg_bits(g: &Matrix, slice_bits: &[u8]) -> Result<f64> {
    let n_routed = slice_bits.len().saturating_sub(1);
    check_gates(g, g.rows(), n_routed)?;
    if g.rows() == 0 {
        return Err(QuantError::Empty("gate matrix"));
    }
    Ok(token_bits(g, slice_bits).iter().sum::<f64>() / g.rows() as f64)
}

/// Effective bits of every token.
pub fn token_bits(g: &Matrix, slice_bits: &[u8]) -> Vec<f64> {
    let base = slice_bits[0] as f64;
    (0..g.rows())
        .map(|t| {
            base + g
                .row(t)
                .iter()
                .zip(&slice_bits[1..])
                .filter(|(&v, _)| v > 0.5)
                .map(|(_, &b)| b as f64)
                .sum::<f64>()
        })
        .collect()
}

/// Fraction of tokens whose active routed slices are not a prefix
/// (some slice on while an earlier one is off).
pub fn prefix_violation_rate(g: &Matrix) -> f64 {
    if g.rows() == 0 {
        return 0.0;
    }
    let bad = (0..g.rows())
        .filter(|&t| {
            let row = g.row(t);
            row.windows(2).any(|w| w[0] <= 0.5 && w[1] > 0.5)
        })
        .count();
    bad as f64 / g.rows() as f64
}

/// `ρ = (target - b_1) / Σ_{e≥2} b_e`
pub fn ratio_from_target_bits(target: f64, slice_bits: &[u8]) -> Result<f64> {
    let base = *slice_bits.first().ok_or(QuantError::Empty("slice_bits"))? as f64;
    let routed: f64 = slice_bits[1..].iter().map(|&b| b as f64).sum();
    let hi = base + routed;
    if !(target >= base && target <= hi) {
        return Err(QuantError::OutOfRange {
            what: "target bits",
            value: target,
            lo: base,
            hi,
        });
    }
    if routed == 0.0 {
        return Ok(0.0);
    }
    Ok((target - base) / routed)
}

/// Threshold such that a fraction `rho` of `samples` lies strictly above it:
/// the `(N - k)`-th smallest sample with `k = round(ρN)`, or just below the
/// minimum when every sample should pass.
pub fn quantile_threshold(samples: &[f64], rho: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(QuantError::Empty("score samples"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(QuantError::OutOfRange {
            what: "activation ratio rho",
            value: rho,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite { index });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let active = ((rho * n as f64).round() as usize).min(n);
    Ok(if active == n {
        sorted[0].next_down()
    } else {
        sorted[n - active - 1]
    })
}

/// Per-layer thresholds from pooled calibration scores (`T × n_routed` per
/// layer). Shared mode pools every routed slice into one quantile.
pub fn calibrate_thresholds(scores: &[Matrix], rho: f64, mode: ThresholdMode) -> Result<Vec<Vec<f64>>> {
    if scores.is_empty() {
        return Err(QuantError::Empty("calibration scores"));
    }
    scores
        .iter()
        .map(|s| match mode {
            ThresholdMode::Shared => Ok(vec![quantile_threshold(s.as_slice(), rho)?]),
            ThresholdMode::PerSlice => (0..s.cols())
                .map(|j| {
                    let col: Vec<f64> = (0..s.rows()).map(|t| s.get(t, j)).collect();
                    quantile_threshold(&col, rho)
                })
                .collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::QuantParams;
    use crate::slicer::{decompose, DEFAULT_SLICE_BITS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn random_router(d: usize, n: usize, seed: u64) -> RouterState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rs = RouterState::init(d, n, &mut rng);
        for v in rs.w2.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in &mut rs.b2 {
            *v = rng.random_range(-0.5..0.5);
        }
        rs
    }

    #[test]
    fn zero_output_layer_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rs = RouterState::init(16, 3, &mut rng);
        assert_eq!(rs.hidden_dim(), 4);
        let s = score(&random_matrix(5, 16, 2), &rs).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
        let sched = GateSchedule::new(100).unwrap();
        let g = gate_soft(&s, &sched, 37).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_computed_single_token() {
        let rs = RouterState {
            w1: Matrix::from_vec(2, 1, vec![0.5, -1.0]).unwrap(),
            b1: vec![0.25],
            w2: Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            b2: vec![-0.1],
            thresholds: vec![0.0],
            step: 0,
            total_steps: 0,
        };
        let x = Matrix::from_vec(1, 2, vec![1.0, 0.5]).unwrap();
        // a = 0.5 - 0.5 + 0.25 = 0.25; silu(a) = 0.25 * sigmoid(0.25)
        let a: f64 = 0.25;
        let expect = 2.0 * a / (1.0 + (-a).exp()) - 0.1;
        assert!((score(&x, &rs).unwrap().get(0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn batch_equals_rowwise() {
        let rs = random_router(8, 3, 4);
        let x = random_matrix(6, 8, 5);
        let batch = score(&x, &rs).unwrap();
        for t in 0..6 {
            let row = Matrix::from_vec(1, 8, x.row(t).to_vec()).unwrap();
            assert_eq!(score(&row, &rs).unwrap().row(0), batch.row(t));
        }
        assert!(score(&random_matrix(2, 7, 1), &rs).is_err());
    }

    #[test]
    fn temperature_endpoints() {
        let sched = GateSchedule::new(2560).unwrap();
        assert_eq!(sched.temperature(1).unwrap(), Temperature::Finite(1.0));
        assert_eq!(sched.temperature(2560).unwrap(), Temperature::Infinite);
        assert!(sched.temperature(0).is_err());
        assert!(sched.temperature(2561).is_err());
        let s = Matrix::from_vec(1, 3, vec![-0.3, 0.0, 0.7]).unwrap();
        let g1 = gate_soft(&s, &sched, 1).unwrap();
        assert_eq!(g1.as_slice(), &[sigmoid(-0.3), 0.5, sigmoid(0.7)]);
        let gl = gate_soft(&s, &sched, 2560).unwrap();
        assert_eq!(gl.as_slice(), &[0.0, 0.0, 1.0]);
        // Single-step schedule is already at its end.
        assert_eq!(GateSchedule::new(1).unwrap().temperature(1).unwrap(), Temperature::Infinite);
    }

    #[test]
    fn hard_gate_examples() {
        let s = random_matrix(10, 3, 8);
        let sched = GateSchedule::new(50).unwrap();
        assert_eq!(gate_hard(&s, 0.0), gate_soft(&s, &sched, 50).unwrap());
        assert!(gate_hard(&s, f64::INFINITY).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_sweep_hits_every_count_once() {
        let s = random_matrix(7, 3, 13);
        let mut uniq: Vec<f64> = s.as_slice().to_vec();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let mut seen = Vec::new();
        let below = uniq[0].next_down();
        for &d in std::iter::once(&below).chain(uniq.iter()) {
            let on = gate_hard(&s, d).as_slice().iter().filter(|&&v| v == 1.0).count();
            seen.push(on);
        }
        // Brute-force: number of entries strictly above each sweep point.
        let expect: Vec<usize> = std::iter::once(below)
            .chain(uniq.iter().copied())
            .map(|d| s.as_slice().iter().filter(|&&v| v > d).count())
            .collect();
        assert_eq!(seen, expect);
        let mut sorted = seen.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), seen.len());
        assert_eq!(*seen.first().unwrap(), 21);
        assert_eq!(*seen.last().unwrap(), 0);
    }

    fn toy_stack() -> SliceStack {
        let w = random_matrix(5, 6, 17).map(|v| v * 0.4);
        let base = QuantParams::new(vec![0.3], vec![1.7], 2, 64).unwrap();
        decompose(&w, &base, &DEFAULT_SLICE_BITS).unwrap()
    }

    #[test]
    fn forward_extremes() {
        let st = toy_stack();
        let x = random_matrix(4, 6, 18);
        let ones = Matrix::from_fn(4, 3, |_, _| 1.0);
        let all = forward_elastic(&x, &st, &ones, GateMode::Hard).unwrap();
        let dense = x.matmul_nt(&st.reconstruct(4).unwrap()).unwrap();
        for (a, b) in all.as_slice().iter().zip(dense.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zeros = Matrix::zeros(4, 3);
        let msb = forward_elastic(&x, &st, &zeros, GateMode::Hard).unwrap();
        assert_eq!(msb, x.matmul_nt(&st.slice_weight(0)).unwrap());
        assert!(forward_elastic(&x, &st, &Matrix::zeros(3, 3), GateMode::Hard).is_err());
        let half = Matrix::from_fn(4, 3, |_, _| 0.5);
        assert!(forward_elastic(&x, &st, &half, GateMode::Hard).is_err());
    }

    #[test]
    fn mixed_gates_match_per_token_reconstruction() {
        let st = toy_stack();
        let x = random_matrix(3, 6, 19);
        let g = Matrix::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let y = forward_elastic(&x, &st, &g, GateMode::Hard).unwrap();
        for t in 0..3 {
            let mut active = vec![true];
            active.extend(g.row(t).iter().map(|&v| v == 1.0));
            let w_t = st.reconstruct_subset(&active).unwrap();
            let row = Matrix::from_vec(1, 6, x.row(t).to_vec()).unwrap();
            let expect = row.matmul_nt(&w_t).unwrap();
            for (a, b) in y.row(t).iter().zip(expect.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Soft mode with the same binary gates is bit-identical.
        assert_eq!(y, forward_elastic(&x, &st, &g, GateMode::Soft).unwrap());
    }

    #[test]
    fn avg_bits_examples() {
        let bits = DEFAULT_SLICE_BITS;
        assert_eq!(avg_bits(&Matrix::from_fn(4, 3, |_, _| 1.0), &bits).unwrap(), 8.0);
        assert_eq!(avg_bits(&Matrix::zeros(4, 3), &bits).unwrap(), 2.0);
        let g = Matrix::from_fn(4, 3, |t, j| if t % 2 == 0 && j == 0 { 1.0 } else { 0.0 });
        assert_eq!(avg_bits(&g, &bits).unwrap(), 3.0);
        // Exactly 0.5 is not active.
        assert_eq!(avg_bits(&Matrix::from_fn(2, 3, |_, _| 0.5), &bits).unwrap(), 2.0);
    }

    #[test]
    fn ratio_examples() {
        let bits = DEFAULT_SLICE_BITS;
        assert!((ratio_from_target_bits(4.0, &bits).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ratio_from_target_bits(2.0, &bits).unwrap(), 0.0);
        assert_eq!(ratio_from_target_bits(8.0, &bits).unwrap(), 1.0);
        assert!(ratio_from_target_bits(1.9, &bits).is_err());
        assert!(ratio_from_target_bits(8.1, &bits).is_err());
    }

    #[test]
    fn quantile_examples() {
        let s = Matrix::from_vec(100, 1, (1..=100).map(|v| v as f64).collect()).unwrap();
        let d1 = calibrate_thresholds(std::slice::from_ref(&s), 1.0, ThresholdMode::Shared).unwrap()[0][0];
        assert!(d1 < 1.0);
        assert!(gate_hard(&s, d1).as_slice().iter().all(|&v| v == 1.0));
        let d0 = calibrate_thresholds(std::slice::from_ref(&s), 0.0, ThresholdMode::Shared).unwrap()[0][0];
        assert!(d0 >= 100.0);
        let d = calibrate_thresholds(std::slice::from_ref(&s), 0.25, ThresholdMode::Shared).unwrap()[0][0];
        let frac = gate_hard(&s, d).as_slice().iter().sum::<f64>() / 100.0;
        assert!((0.24..=0.26).contains(&frac), "{frac}");
        assert!(calibrate_thresholds(&[], 0.5, ThresholdMode::Shared).is_err());
        assert!(quantile_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn per_slice_thresholds() {
        let s = random_matrix(200, 3, 23);
        let th = calibrate_thresholds(std::slice::from_ref(&s), 0.3, ThresholdMode::PerSlice).unwrap();
        assert_eq!(th[0].len(), 3);
        for j in 0..3 {
            let on = (0..200).filter(|&t| s.get(t, j) > th[0][j]).count();
            assert_eq!(on, 60);
        }
    }

    #[test]
    fn prefix_violations() {
        let g = Matrix::from_vec(4, 3, vec![1., 1., 0., 0., 1., 0., 0., 0., 0., 1., 0., 1.]).unwrap();
        assert_eq!(prefix_violation_rate(&g), 0.5);
    }

    proptest! {
        #[test]
        fn gates_shrink_as_delta_grows(seed in 0u64..500, d1 in -3.0f64..3.0, dd in 0.0f64..3.0) {
            let s = random_matrix(8, 3, seed);
            let lo = gate_hard(&s, d1);
            let hi = gate_hard(&s, d1 + dd);
            for (a, b) in lo.as_slice().iter().zip(hi.as_slice()) {
                prop_assert!(b <= a);
            }
        }

        #[test]
        fn avg_bits_bounded(seed in 0u64..500) {
            let g = random_matrix(9, 3, seed).map(sigmoid);
            let b = avg_bits(&g, &DEFAULT_SLICE_BITS).unwrap();
            prop_assert!((2.0..=8.0).contains(&b));
        }

        #[test]
        fn soft_gate_sharpens(s in -5.0f64..5.0) {
            let sched = GateSchedule::new(1000).unwrap();
            let mut prev = f64::NAN;
            for t in [1usize, 10, 100, 500, 900, 999] {
                let g = sched.temperature(t).unwrap().gate(s);
                if s == 0.0 {
                    prop_assert_eq!(g, 0.5);
                } else if !prev.is_nan() {
                    // moves toward the indicator
                    let target = if s > 0.0 { 1.0 } else { 0.0 };
                    prop_assert!((g - target).abs() <= (prev - target).abs());
                }
                prev = g;
            }
        }
    }
}
