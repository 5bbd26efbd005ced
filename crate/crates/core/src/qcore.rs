//! Floor-aligned scalar quantizer, centered dequantizer and the learnable
//! clipping parameterization shared by every bit slice.
//!
//! Codes are `clamp(floor(x / s + z), 0, 2^b - 1)` and dequantize to the bin
//! center `s * (code - z + 0.5)`. Dropping low bits of a floor-aligned code is
//! the same as quantizing with a coarser step, which is what lets slices nest.

use crate::error::{QuantError, Result};

/// Scale floor used when a group is constant (max == min).
pub const SCALE_EPSILON: f64 = 1e-8;

/// Initial clip logit; `squash(4.0) ≈ 0.982`, i.e. essentially no clipping.
pub const CLIP_INIT_LOGIT: f64 = 4.0;

pub const DEFAULT_GROUP_SIZE: usize = 128;

/// Group-wise scale / zero point for a `bits`-wide quantizer.
///
/// Groups run over the flattened (row-major) tensor: element `i` belongs to
/// group `i / group_size`, and the last group may be partial.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    pub bits: u8,
    pub group_size: usize,
}

impl QuantParams {
    pub fn new(scales: Vec<f64>, zeros: Vec<f64>, bits: u8, group_size: usize) -> Result<Self> {
        let qp = Self {
            scales,
            zeros,
            bits,
            group_size,
        };
        qp.validate()?;
        Ok(qp)
    }

    /// Single group covering any tensor of up to `usize::MAX` elements.
    pub fn uniform(scale: f64, zero: f64, bits: u8) -> Result<Self> {
        Self::new(vec![scale], vec![zero], bits, usize::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(QuantError::OutOfRange {
                what: "group_size",
                value: 0.0,
                lo: 1.0,
                hi: f64::INFINITY,
            });
        }
        if self.scales.len() != self.zeros.len() {
            return Err(QuantError::ShapeMismatch {
                what: "zero points per scale",
                expected: self.scales.len(),
                got: self.zeros.len(),
            });
        }
        if self.scales.is_empty() {
            return Err(QuantError::Empty("quantization groups"));
        }
        for (group, &scale) in self.scales.iter().enumerate() {
            if scale.is_nan() || scale <= 0.0 || scale.is_infinite() {
                return Err(QuantError::NonPositiveScale { group, scale });
            }
        }
        if let Some(index) = self.zeros.iter().position(|z| !z.is_finite()) {
            return Err(QuantError::NonFinite { index });
        }
        Ok(())
    }

    #[inline]
    pub fn group_of(&self, index: usize) -> usize {
        index / self.group_size
    }

    #[inline]
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }

    /// Checks that the groups cover a tensor of `len` elements.
    pub fn check_covers(&self, len: usize) -> Result<()> {
        let covered = self.num_groups().saturating_mul(self.group_size);
        if covered < len {
            return Err(QuantError::ShapeMismatch {
                what: "elements covered by quantization groups",
                expected: len,
                got: covered,
            });
        }
        Ok(())
    }
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(QuantError::InvalidBits {
            bits: bits as u32,
            reason: "must lie in [1, 8]",
        });
    }
    Ok(())
}

pub fn num_groups(len: usize, group_size: usize) -> usize {
    len.div_ceil(group_size)
}

/// Pre-clamp real code `x / s + z`.
#[inline]
pub fn pre_code(x: f64, scale: f64, zero: f64) -> f64 {
    x / scale + zero
}

/// Quantizes one value; the flag reports whether the floor fell outside the
/// representable range and was clamped.
#[inline]
pub fn quantize_scalar(x: f64, scale: f64, zero: f64, bits: u8) -> (u8, bool) {
    let max = ((1u32 << bits) - 1) as f64;
    let f = pre_code(x, scale, zero).floor();
    if f < 0.0 {
        (0, true)
    } else if f > max {
        (max as u8, true)
    } else {
        (f as u8, false)
    }
}

#[inline]
pub fn dequantize_scalar(code: u32, scale: f64, zero: f64) -> f64 {
    scale * (code as f64 - zero + 0.5)
}

pub fn quantize_floor(x: &[f64], qp: &QuantParams) -> Result<Vec<u8>> {
    qp.validate()?;
    qp.check_covers(x.len())?;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() {
                return Err(QuantError::NonFinite { index: i });
            }
            let g = qp.group_of(i);
            Ok(quantize_scalar(v, qp.scales[g], qp.zeros[g], qp.bits).0)
        })
        .collect()
}

pub fn dequantize_centered(codes: &[u8], qp: &QuantParams) -> Result<Vec<f64>> {
    qp.validate()?;
    qp.check_covers(codes.len())?;
    let max = qp.max_code();
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c as u32 > max {
                return Err(QuantError::CodeOutOfRange {
                    index: i,
                    code: c as u32,
                    bits: qp.bits,
                });
            }
            let g = qp.group_of(i);
            Ok(dequantize_scalar(c as u32, qp.scales[g], qp.zeros[g]))
        })
        .collect()
}

// ── Learnable clipping ─────────────────────────────────────────────────────

#[inline]
pub fn squash(gamma: f64) -> f64 {
    1.0 / (1.0 + (-gamma).exp())
}

#[inline]
fn squash_grad(gamma: f64) -> f64 {
    let s = squash(gamma);
    s * (1.0 - s)
}

/// Per-group clipping logits. `squash(gamma_lo)` / `squash(gamma_hi)` are the
/// fractions of the group's range kept below / above the anchor point.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipParams {
    pub gamma_lo: Vec<f64>,
    pub gamma_hi: Vec<f64>,
}

impl ClipParams {
    pub fn identity_init(groups: usize) -> Self {
        Self {
            gamma_lo: vec![CLIP_INIT_LOGIT; groups],
            gamma_hi: vec![CLIP_INIT_LOGIT; groups],
        }
    }

    pub fn num_groups(&self) -> usize {
        self.gamma_lo.len()
    }
}

/// Min / max of one group plus the anchor the clip fractions pivot around:
/// zero when the group straddles it, otherwise the endpoint nearest zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRange {
    pub min: f64,
    pub max: f64,
}

impl GroupRange {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(QuantError::Empty("weight group"));
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(QuantError::NonFinite { index: i });
            }
            min = min.min(v);
            max = max.max(v);
        }
        Ok(Self { min, max })
    }

    #[inline]
    pub fn anchor(&self) -> f64 {
        0.0f64.clamp(self.min, self.max)
    }

    /// Ranges of consecutive `group_size` chunks of a flattened tensor.
    pub fn of_groups(values: &[f64], group_size: usize) -> Result<Vec<Self>> {
        if values.is_empty() {
            return Err(QuantError::Empty("weight tensor"));
        }
        values.chunks(group_size).map(Self::of).collect()
    }
}

/// `(scale, zero)` for one group and the Jacobian of both w.r.t.
/// `(gamma_lo, gamma_hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipDerived {
    pub scale: f64,
    pub zero: f64,
    /// `[d scale / d gamma_lo, d scale / d gamma_hi]`
    pub d_scale: [f64; 2],
    /// `[d zero / d gamma_lo, d zero / d gamma_hi]`
    pub d_zero: [f64; 2],
}

pub fn clip_derive(range: GroupRange, gamma_lo: f64, gamma_hi: f64, bits: u8) -> ClipDerived {
    let levels = ((1u32 << bits) - 1) as f64;
    let a = range.anchor();
    let lo = a + squash(gamma_lo) * (range.min - a);
    let hi = a + squash(gamma_hi) * (range.max - a);
    let dlo = squash_grad(gamma_lo) * (range.min - a);
    let dhi = squash_grad(gamma_hi) * (range.max - a);

    let raw = (hi - lo) / levels;
    if raw < SCALE_EPSILON {
        // Degenerate range: scale pinned, only the zero point still moves.
        let scale = SCALE_EPSILON;
        return ClipDerived {
            scale,
            zero: -lo / scale,
            d_scale: [0.0, 0.0],
            d_zero: [-dlo / scale, 0.0],
        };
    }
    let scale = raw;
    let zero = -lo / scale;
    // z = -lo / s with s = (hi - lo) / n
    let ds_dlo = -1.0 / levels;
    let ds_dhi = 1.0 / levels;
    let dz_dlo = -1.0 / scale + lo / (scale * scale) * ds_dlo;
    let dz_dhi = lo / (scale * scale) * ds_dhi;
    ClipDerived {
        scale,
        zero,
        d_scale: [ds_dlo * dlo, ds_dhi * dhi],
        d_zero: [dz_dlo * dlo, dz_dhi * dhi],
    }
}

/// Quantization parameters for one group from its clipping logits.
pub fn params_from_clip(group: &[f64], gamma_lo: f64, gamma_hi: f64, bits: u8) -> Result<QuantParams> {
    check_bits(bits)?;
    let d = clip_derive(GroupRange::of(group)?, gamma_lo, gamma_hi, bits);
    QuantParams::new(vec![d.scale], vec![d.zero], bits, group.len())
}

/// Group-wise parameters for a flattened tensor.
pub fn params_from_clip_groups(
    weights: &[f64],
    clip: &ClipParams,
    bits: u8,
    group_size: usize,
) -> Result<QuantParams> {
    check_bits(bits)?;
    let ranges = GroupRange::of_groups(weights, group_size)?;
    if ranges.len() != clip.num_groups() {
        return Err(QuantError::ShapeMismatch {
            what: "clip groups",
            expected: ranges.len(),
            got: clip.num_groups(),
        });
    }
    let mut scales = Vec::with_capacity(ranges.len());
    let mut zeros = Vec::with_capacity(ranges.len());
    for (g, r) in ranges.iter().enumerate() {
        let d = clip_derive(*r, clip.gamma_lo[g], clip.gamma_hi[g], bits);
        scales.push(d.scale);
        zeros.push(d.zero);
    }
    QuantParams::new(scales, zeros, bits, group_size)
}

// ── Straight-through gradients ────────────────────────────────────────────

/// Gradients of `sum(upstream * dequantize(quantize(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteGrad {
    pub input: Vec<f64>,
    pub scale: Vec<f64>,
    pub zero: Vec<f64>,
}

/// Straight-through gradient: the floor is treated as identity while the code
/// is in range, and the clamp kills the input gradient when it is not.
pub fn quant_grad_ste(upstream: &[f64], x: &[f64], qp: &QuantParams) -> Result<SteGrad> {
    if upstream.len() != x.len() {
        return Err(QuantError::ShapeMismatch {
            what: "upstream gradient length",
            expected: x.len(),
            got: upstream.len(),
        });
    }
    qp.validate()?;
    qp.check_covers(x.len())?;
    let mut input = vec![0.0; x.len()];
    let mut scale = vec![0.0; qp.num_groups()];
    let mut zero = vec![0.0; qp.num_groups()];
    for (i, (&g_up, &v)) in upstream.iter().zip(x).enumerate() {
        let g = qp.group_of(i);
        let (s, z) = (qp.scales[g], qp.zeros[g]);
        let (code, clamped) = quantize_scalar(v, s, z, qp.bits);
        let local = ste_local(v, s, z, code, clamped);
        input[i] = g_up * local.d_input;
        scale[g] += g_up * local.d_scale;
        zero[g] += g_up * local.d_zero;
    }
    Ok(SteGrad { input, scale, zero })
}

/// Per-element STE partials of the dequantized value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteLocal {
    pub d_input: f64,
    pub d_scale: f64,
    pub d_zero: f64,
}

#[inline]
pub fn ste_local(x: f64, scale: f64, zero: f64, code: u8, clamped: bool) -> SteLocal {
    let c = code as f64;
    if clamped {
        SteLocal {
            d_input: 0.0,
            d_scale: c - zero + 0.5,
            d_zero: -scale,
        }
    } else {
        // deq = s * (u - z + 0.5 - frac) with u = x / s + z and frac frozen
        SteLocal {
            d_input: 1.0,
            d_scale: c - pre_code(x, scale, zero) + 0.5,
            d_zero: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qp(s: f64, z: f64, b: u8) -> QuantParams {
        QuantParams::uniform(s, z, b).unwrap()
    }

    #[test]
    fn floor_examples() {
        assert_eq!(quantize_floor(&[0.0], &qp(1.0, 0.0, 2)).unwrap(), vec![0]);
        assert_eq!(quantize_floor(&[1e6], &qp(1.0, 0.0, 2)).unwrap(), vec![3]);
        // floor(0.3 / 0.4 + 2) = floor(2.75) = 2
        assert_eq!(quantize_floor(&[0.3], &qp(0.4, 2.0, 2)).unwrap(), vec![2]);
    }

    #[test]
    fn dequant_examples() {
        assert_eq!(dequantize_centered(&[0], &qp(1.0, 0.0, 2)).unwrap(), vec![0.5]);
        let v = dequantize_centered(&[2], &qp(0.4, 2.0, 2)).unwrap()[0];
        assert!((v - 0.2).abs() < 1e-15);
        assert_eq!(dequantize_centered(&[0], &qp(1.0, 0.5, 2)).unwrap(), vec![0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let err = quantize_floor(&[0.0, f64::NAN], &qp(1.0, 0.0, 2)).unwrap_err();
        assert!(matches!(err, QuantError::NonFinite { index: 1 }));
        assert!(QuantParams::uniform(0.0, 0.0, 2).is_err());
        assert!(QuantParams::uniform(-1.0, 0.0, 2).is_err());
        assert!(QuantParams::uniform(1.0, 0.0, 0).is_err());
        assert!(QuantParams::uniform(1.0, 0.0, 9).is_err());
        let err = dequantize_centered(&[4], &qp(1.0, 0.0, 2)).unwrap_err();
        assert!(matches!(err, QuantError::CodeOutOfRange { code: 4, .. }));
        let short = QuantParams::new(vec![1.0], vec![0.0], 2, 2).unwrap();
        assert!(quantize_floor(&[0.0; 3], &short).is_err());
    }

    #[test]
    fn clip_examples() {
        // squash = 1 exactly is unreachable; use the limit by large logits.
        let p = params_from_clip(&[-1.0, 1.0], 40.0, 40.0, 2).unwrap();
        assert!((p.scales[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.zeros[0] - 1.5).abs() < 1e-14);
        let p = params_from_clip(&[-1.0, 1.0], 0.0, 0.0, 2).unwrap();
        assert!((p.scales[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.zeros[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn constant_group_floors_scale() {
        let group = [0.0, 0.0, 0.0];
        let p = params_from_clip(&group, CLIP_INIT_LOGIT, CLIP_INIT_LOGIT, 2).unwrap();
        assert_eq!(p.scales[0], SCALE_EPSILON);
        let codes = quantize_floor(&group, &p).unwrap();
        assert!(codes.iter().all(|&c| c == codes[0]));
        for v in dequantize_centered(&codes, &p).unwrap() {
            assert!(v.abs() <= SCALE_EPSILON);
        }
        let p = params_from_clip(&[5.0; 4], 0.0, 0.0, 3).unwrap();
        let deq = dequantize_centered(&quantize_floor(&[5.0; 4], &p).unwrap(), &p).unwrap();
        assert!(deq.iter().all(|v| (v - 5.0).abs() <= 1e-6), "{deq:?}");
    }

    #[test]
    fn one_sided_group_interpolates() {
        // All-positive group: anchor at the minimum, hi interpolates toward max.
        let p = params_from_clip(&[1.0, 3.0], 0.0, 0.0, 2).unwrap();
        assert!((p.scales[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.zeros[0] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn ste_examples() {
        let q = qp(1.0, 0.0, 2);
        let g = quant_grad_ste(&[1.0, 1.0], &[1.3, 10.0], &q).unwrap();
        assert_eq!(g.input, vec![1.0, 0.0]);
        assert!(quant_grad_ste(&[1.0], &[1.0, 2.0], &q).is_err());
    }

    /// Finite differences through a frozen-offset surrogate reproduce the
    /// analytic STE partials w.r.t. scale, zero and the clip logits.
    #[test]
    fn ste_scale_zero_match_frozen_offset_differences() {
        let xs = [-0.9, -0.31, 0.07, 0.44, 0.88, 1.7];
        let range = GroupRange::of(&xs).unwrap();
        let (gl, gh, bits) = (1.3, 0.4, 2u8);
        let base = clip_derive(range, gl, gh, bits);
        let q = QuantParams::uniform(base.scale, base.zero, bits).unwrap();
        let up: Vec<f64> = (0..xs.len()).map(|i| 0.3 + i as f64 * 0.1).collect();
        let g = quant_grad_ste(&up, &xs, &q).unwrap();

        let anchors: Vec<(u8, bool, f64)> = xs
            .iter()
            .map(|&x| {
                let (c, cl) = quantize_scalar(x, base.scale, base.zero, bits);
                (c, cl, pre_code(x, base.scale, base.zero))
            })
            .collect();
        let surrogate = |s: f64, z: f64| -> f64 {
            xs.iter()
                .zip(&anchors)
                .zip(&up)
                .map(|((&x, &(c, cl, u0)), &w)| {
                    let code = if cl { c as f64 } else { c as f64 + pre_code(x, s, z) - u0 };
                    w * s * (code - z + 0.5)
                })
                .sum()
        };
        let h = 1e-6;
        let fd_s = (surrogate(base.scale + h, base.zero) - surrogate(base.scale - h, base.zero)) / (2.0 * h);
        let fd_z = (surrogate(base.scale, base.zero + h) - surrogate(base.scale, base.zero - h)) / (2.0 * h);
        assert!((fd_s - g.scale[0]).abs() <= 1e-7 * fd_s.abs().max(1.0), "{fd_s} vs {}", g.scale[0]);
        assert!((fd_z - g.zero[0]).abs() <= 1e-7 * fd_z.abs().max(1.0), "{fd_z} vs {}", g.zero[0]);

        // Chain to the logits.
        let through_clip = |gl: f64, gh: f64| {
            let d = clip_derive(range, gl, gh, bits);
            surrogate(d.scale, d.zero)
        };
        let analytic_lo = g.scale[0] * base.d_scale[0] + g.zero[0] * base.d_zero[0];
        let analytic_hi = g.scale[0] * base.d_scale[1] + g.zero[0] * base.d_zero[1];
        let fd_lo = (through_clip(gl + h, gh) - through_clip(gl - h, gh)) / (2.0 * h);
        let fd_hi = (through_clip(gl, gh + h) - through_clip(gl, gh - h)) / (2.0 * h);
        assert!((fd_lo - analytic_lo).abs() <= 1e-6 * fd_lo.abs().max(1e-3));
        assert!((fd_hi - analytic_hi).abs() <= 1e-6 * fd_hi.abs().max(1e-3));
    }

    proptest! {
        #[test]
        fn codes_stay_in_range(x in -1e12f64..1e12, s in 1e-6f64..1e3, z in -300.0f64..300.0, b in 1u8..=8) {
            let c = quantize_floor(&[x], &qp(s, z, b)).unwrap()[0];
            prop_assert!((c as u32) < (1u32 << b));
        }

        #[test]
        fn monotone_in_input(x in -50.0f64..50.0, dx in 0.0f64..10.0, s in 1e-3f64..10.0, z in -10.0f64..10.0, b in 1u8..=8) {
            let q = qp(s, z, b);
            let c = quantize_floor(&[x, x + dx], &q).unwrap();
            prop_assert!(c[0] <= c[1]);
        }

        #[test]
        fn centered_error_is_half_step(frac in 0.0f64..1.0, code in 0u32..16, s in 1e-3f64..10.0, z in -3.0f64..3.0) {
            // x drawn strictly inside the representable range of a 4-bit grid
            let x = s * (code as f64 + frac - z);
            let q = qp(s, z, 4);
            let c = quantize_floor(&[x], &q).unwrap();
            let d = dequantize_centered(&c, &q).unwrap()[0];
            prop_assert!((d - x).abs() <= s / 2.0 * (1.0 + 1e-12));
        }

        #[test]
        fn deterministic(xs in proptest::collection::vec(-5.0f64..5.0, 1..64)) {
            let q = qp(0.37, 1.3, 3);
            prop_assert_eq!(quantize_floor(&xs, &q).unwrap(), quantize_floor(&xs, &q).unwrap());
        }
    }
}
