//! Loss and analytic gradients for one layer.
//!
//! The data term is the mean squared error between the (routed) quantized
//! output and the full-precision target. Gradients reach the clipping logits
//! through the straight-through residual chain and the router through the
//! soft gates; the budget coefficient `AvgBits - b(t)` is held constant.

use crate::error::{QuantError, Result};
use crate::matrix::Matrix;
use crate::qcore::{clip_derive, ClipDerived, ClipParams, GroupRange, QuantParams};
use crate::router::{combine_gated, score_traced, silu_grad, GateMode, GateSchedule, Temperature};
use crate::slicer::{decompose, residual_chain, ChainAnchor, ChainLink, SliceStack};

use super::{schedule_value, BudgetSchedule, LayerParams};

/// Frozen pretrained weight plus its per-group ranges.
#[derive(Debug, Clone)]
pub struct LayerSetup {
    pub weight: Matrix,
    pub ranges: Vec<GroupRange>,
    pub slice_bits: Vec<u8>,
    pub group_size: usize,
}

/// Dequantized slice weights with the straight-through partials of every
/// element w.r.t. its group's base `(scale, zero)`.
#[derive(Debug, Clone)]
pub struct SliceField {
    pub weights: Vec<Matrix>,
    pub d_scale: Vec<Vec<f64>>,
    pub d_zero: Vec<Vec<f64>>,
    /// Element-major: element `i`, slice `e` at `i * n_slices + e`.
    pub anchors: Vec<ChainAnchor>,
    pub clamps: usize,
}

impl LayerSetup {
    pub fn new(weight: Matrix, slice_bits: &[u8], group_size: usize) -> Result<Self> {
        crate::slicer::validate_slice_bits(slice_bits)?;
        if group_size == 0 {
            return Err(QuantError::Empty("group"));
        }
        let ranges = GroupRange::of_groups(weight.as_slice(), group_size)?;
        Ok(Self {
            weight,
            ranges,
            slice_bits: slice_bits.to_vec(),
            group_size,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.ranges.len()
    }

    pub fn derive(&self, clip: &ClipParams) -> Result<Vec<ClipDerived>> {
        if clip.num_groups() != self.num_groups() {
            return Err(QuantError::ShapeMismatch {
                what: "clip groups",
                expected: self.num_groups(),
                got: clip.num_groups(),
            });
        }
        Ok(self
            .ranges
            .iter()
            .enumerate()
            .map(|(g, &r)| clip_derive(r, clip.gamma_lo[g], clip.gamma_hi[g], self.slice_bits[0]))
            .collect())
    }

    pub fn base_params(&self, clip: &ClipParams) -> Result<QuantParams> {
        let d = self.derive(clip)?;
        QuantParams::new(
            d.iter().map(|v| v.scale).collect(),
            d.iter().map(|v| v.zero).collect(),
            self.slice_bits[0],
            self.group_size,
        )
    }

    /// Final slice decomposition under `clip`.
    pub fn commit(&self, clip: &ClipParams) -> Result<SliceStack> {
        decompose(&self.weight, &self.base_params(clip)?, &self.slice_bits)
    }

    pub fn slice_field(
        &self,
        derived: &[ClipDerived],
        n_slices: usize,
        anchors: Option<&[ChainAnchor]>,
    ) -> Result<SliceField> {
        let n = self.weight.rows() * self.weight.cols();
        if let Some(a) = anchors {
            if a.len() != n * n_slices {
                return Err(QuantError::ShapeMismatch {
                    what: "chain anchors",
                    expected: n * n_slices,
                    got: a.len(),
                });
            }
        }
        let bits = &self.slice_bits[..n_slices];
        let mut values = vec![vec![0.0; n]; n_slices];
        let mut d_scale = vec![vec![0.0; n]; n_slices];
        let mut d_zero = vec![vec![0.0; n]; n_slices];
        let mut out_anchors = Vec::with_capacity(n * n_slices);
        let mut clamps = 0;
        let mut links = vec![ChainLink::default(); n_slices];
        for (i, &w) in self.weight.as_slice().iter().enumerate() {
            let d = &derived[i / self.group_size];
            let a = anchors.map(|a| &a[i * n_slices..(i + 1) * n_slices]);
            residual_chain(w, d.scale, d.zero, bits, a, &mut links);
            for (e, l) in links.iter().enumerate() {
                values[e][i] = l.value;
                d_scale[e][i] = l.d_scale;
                d_zero[e][i] = l.d_zero;
                out_anchors.push(l.anchor());
                clamps += l.clamped as usize;
            }
        }
        let (rows, cols) = (self.weight.rows(), self.weight.cols());
        Ok(SliceField {
            weights: values
                .into_iter()
                .map(|v| Matrix::from_vec(rows, cols, v))
                .collect::<Result<_>>()?,
            d_scale,
            d_zero,
            anchors: out_anchors,
            clamps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// MSB slice only, no router.
    Msb,
    /// All slices, soft-gated at step `t`.
    Joint { t: usize },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    pub gradients: bool,
    /// Replays the quantizer against recorded floor decisions.
    pub anchors: Option<&'a [ChainAnchor]>,
    /// Uses this `AvgBits` in the budget coefficient instead of measuring it.
    pub frozen_avg_bits: Option<f64>,
    /// Replaces every routed gate by a constant (router bypassed).
    pub forced_gate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub data_term: f64,
    pub reg_term: f64,
    pub avg_bits: f64,
    pub b_sched: f64,
    pub tau: Option<f64>,
    pub output: Matrix,
    /// Routed gates used for the output (`None` in the MSB stage).
    pub gates: Option<Matrix>,
    pub clamps: usize,
    pub anchors: Vec<ChainAnchor>,
    /// `(d/d gamma_lo, d/d gamma_hi)` per group.
    pub clip_grad: Option<(Vec<f64>, Vec<f64>)>,
    /// Flat router gradient in `w1, b1, w2, b2` order.
    pub router_grad: Option<Vec<f64>>,
}

/// Objective value (and optionally gradients) on one batch.
pub fn evaluate(
    setup: &LayerSetup,
    params: &LayerParams,
    x: &Matrix,
    y: &Matrix,
    stage: Stage,
    sched: &BudgetSchedule,
    opts: EvalOptions<'_>,
) -> Result<Evaluation> {
    let n_slices = match stage {
        Stage::Msb => 1,
        Stage::Joint { .. } => setup.slice_bits.len(),
    };
    let derived = setup.derive(&params.clip)?;
    let field = setup.slice_field(&derived, n_slices, opts.anchors)?;
    let parts: Vec<Matrix> = field.weights.iter().map(|w| x.matmul_nt(w)).collect::<Result<_>>()?;
    if y.rows() != x.rows() || y.cols() != setup.weight.rows() {
        return Err(QuantError::ShapeMismatch {
            what: "target shape",
            expected: x.rows() * setup.weight.rows(),
            got: y.rows() * y.cols(),
        });
    }
    let tokens = x.rows();
    let n_routed = setup.slice_bits.len() - 1;

    // Gates.
    let mut gates = None;
    let mut trace = None;
    let mut temp = Temperature::Infinite;
    if let Stage::Joint { t } = stage {
        let gs = GateSchedule::new(sched.total_steps)?;
        temp = gs.temperature(t)?;
        let g = match opts.forced_gate {
            Some(v) => Matrix::from_fn(tokens, n_routed, |_, _| v),
            None => {
                let (s, tr) = score_traced(x, &params.router)?;
                trace = Some((s.clone(), tr));
                s.map(|v| temp.gate(v))
            }
        };
        gates = Some(g);
    }

    let yhat = match &gates {
        None => parts[0].clone(),
        Some(g) => combine_gated(&parts, g, GateMode::Soft)?,
    };
    let resid = yhat.sub(y)?;
    let count = resid.as_slice().len() as f64;
    let data_term = resid.as_slice().iter().map(|r| r * r).sum::<f64>() / count;

    let (mut avg, mut b_sched, mut coef, mut reg_term) = (setup.slice_bits[0] as f64, f64::NAN, 0.0, 0.0);
    if let (Stage::Joint { t }, Some(g)) = (stage, &gates) {
        avg = match opts.frozen_avg_bits {
            Some(v) => v,
            None => crate::router::avg_bits(g, &setup.slice_bits)?,
        };
        b_sched = schedule_value(sched, t)?;
        coef = avg - b_sched;
        reg_term = coef * g.as_slice().iter().map(|v| v.abs()).sum::<f64>();
    }
    let loss = data_term + sched.reg_weight * reg_term;

    let mut eval = Evaluation {
        loss,
        data_term,
        reg_term,
        avg_bits: avg,
        b_sched,
        tau: temp.as_option().filter(|_| gates.is_some()),
        output: yhat,
        gates: None,
        clamps: field.clamps,
        anchors: Vec::new(),
        clip_grad: None,
        router_grad: None,
    };
    if !opts.gradients {
        eval.anchors = field.anchors;
        eval.gates = gates;
        return Ok(eval);
    }

    // ── Backward ──
    let d_y = resid.map(|r| 2.0 * r / count);

    // Clip logits via each slice's weight gradient.
    let n_groups = setup.num_groups();
    let mut g_scale = vec![0.0; n_groups];
    let mut g_zero = vec![0.0; n_groups];
    for e in 0..n_slices {
        let upstream = match (&gates, e) {
            (Some(g), e) if e > 0 => {
                let mut m = d_y.clone();
                for t in 0..tokens {
                    let gate = g.get(t, e - 1);
                    m.row_mut(t).iter_mut().for_each(|v| *v *= gate);
                }
                m
            }
            _ => d_y.clone(),
        };
        let d_w = upstream.matmul_tn(x)?;
        for (i, &dw) in d_w.as_slice().iter().enumerate() {
            let grp = i / setup.group_size;
            g_scale[grp] += dw * field.d_scale[e][i];
            g_zero[grp] += dw * field.d_zero[e][i];
        }
    }
    let mut d_lo = vec![0.0; n_groups];
    let mut d_hi = vec![0.0; n_groups];
    for g in 0..n_groups {
        let d = &derived[g];
        d_lo[g] = g_scale[g] * d.d_scale[0] + g_zero[g] * d.d_zero[0];
        d_hi[g] = g_scale[g] * d.d_scale[1] + g_zero[g] * d.d_zero[1];
    }
    eval.clip_grad = Some((d_lo, d_hi));

    // Router through the soft gates.
    if let (Some(g), Some((_, tr))) = (&gates, &trace) {
        let rs = &params.router;
        let mut grad = vec![0.0; rs.num_params()];
        if let Temperature::Finite(tau) = temp {
            let lambda_coef = sched.reg_weight * coef;
            let d_s = Matrix::from_fn(tokens, n_routed, |t, j| {
                let data: f64 = crate::matrix::dot(d_y.row(t), parts[j + 1].row(t));
                let gate = g.get(t, j);
                (data + lambda_coef) * tau * gate * (1.0 - gate)
            });
            let d_w2 = tr.hidden.matmul_tn(&d_s)?;
            let d_b2 = column_sums(&d_s);
            let d_h = d_s.matmul_nt(&rs.w2)?;
            let mut d_a = d_h;
            for (v, &a) in d_a.as_mut_slice().iter_mut().zip(tr.pre_hidden.as_slice()) {
                *v *= silu_grad(a);
            }
            let d_w1 = x.matmul_tn(&d_a)?;
            let d_b1 = column_sums(&d_a);
            let mut at = 0;
            for part in [d_w1.as_slice(), &d_b1, d_w2.as_slice(), &d_b2] {
                grad[at..at + part.len()].copy_from_slice(part);
                at += part.len();
            }
        }
        eval.router_grad = Some(grad);
    }
    eval.anchors = field.anchors;
    eval.gates = gates;
    Ok(eval)
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for t in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(t)) {
            *o += v;
        }
    }
    out
}
