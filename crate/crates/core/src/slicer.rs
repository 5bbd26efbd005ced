//! Recursive residual bit slicing.
//!
//! Slice 1 quantizes the weight with the calibrated base parameters; slice
//! `e + 1` quantizes what is left over with scale `s_e / 2^{b_e}` and the
//! midpoint zero point `2^{b_{e+1} - 1}`. Summing any prefix of slices gives a
//! weight at the prefix's combined bit width, and the concatenated slice
//! codes form one floor-aligned integer code at the finest scale.

use crate::error::{QuantError, Result};
use crate::matrix::Matrix;
use crate::qcore::{check_bits, pre_code, quantize_scalar, QuantParams};

pub const DEFAULT_SLICE_BITS: [u8; 4] = [2, 2, 2, 2];

/// Upper bound on the summed slice widths; merged codes are stored as `u8`.
pub const MAX_TOTAL_BITS: u32 = 8;

pub fn validate_slice_bits(slice_bits: &[u8]) -> Result<u32> {
    if slice_bits.is_empty() {
        return Err(QuantError::Empty("slice_bits"));
    }
    for &b in slice_bits {
        check_bits(b)?;
    }
    let total: u32 = slice_bits.iter().map(|&b| b as u32).sum();
    if total > MAX_TOTAL_BITS {
        return Err(QuantError::InvalidBits {
            bits: total,
            reason: "slice widths must sum to at most 8",
        });
    }
    Ok(total)
}

// ── Per-element residual chain ─────────────────────────────────────────────

/// Floor decision recorded at some reference point. Replaying a chain against
/// anchors keeps the clamp pattern and fractional offsets fixed, which turns
/// the quantizer into its straight-through linearization around that point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainAnchor {
    pub code: u8,
    pub clamped: bool,
    pub pre: f64,
}

/// One slice's result for one element, with forward-mode partials of the
/// dequantized value w.r.t. the base `(scale, zero)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChainLink {
    pub code: u8,
    pub clamped: bool,
    pub pre: f64,
    pub value: f64,
    pub d_scale: f64,
    pub d_zero: f64,
}

impl ChainLink {
    pub fn anchor(&self) -> ChainAnchor {
        ChainAnchor {
            code: self.code,
            clamped: self.clamped,
            pre: self.pre,
        }
    }
}

#[inline]
pub fn residual_zero(bits: u8) -> f64 {
    (1u32 << (bits - 1)) as f64
}

/// Runs the residual recursion for a single weight value.
///
/// Without anchors the codes come from the real floor and the partials are
/// the straight-through ones. With anchors the codes become
/// `anchor.code + (pre - anchor.pre)` on unclamped links and stay frozen on
/// clamped ones; at the anchor point both give identical values.
pub fn residual_chain(
    w: f64,
    scale: f64,
    zero: f64,
    slice_bits: &[u8],
    anchors: Option<&[ChainAnchor]>,
    out: &mut [ChainLink],
) {
    let mut r = w;
    let mut dr = [0.0f64; 2];
    let mut s = scale;
    let mut ds = [1.0f64, 0.0];
    for (e, &bits) in slice_bits.iter().enumerate() {
        let (z, dz) = if e == 0 {
            (zero, [0.0, 1.0])
        } else {
            (residual_zero(bits), [0.0, 0.0])
        };
        let u = pre_code(r, s, z);
        let du = [
            dr[0] / s - r * ds[0] / (s * s) + dz[0],
            dr[1] / s - r * ds[1] / (s * s) + dz[1],
        ];
        let (code, clamped, c) = match anchors {
            Some(a) => {
                let a = a[e];
                let c = if a.clamped { a.code as f64 } else { a.code as f64 + (u - a.pre) };
                (a.code, a.clamped, c)
            }
            None => {
                let (code, clamped) = quantize_scalar(r, s, z, bits);
                (code, clamped, code as f64)
            }
        };
        let dc = if clamped { [0.0, 0.0] } else { du };
        let value = s * (c - z + 0.5);
        let dv = [
            ds[0] * (c - z + 0.5) + s * (dc[0] - dz[0]),
            ds[1] * (c - z + 0.5) + s * (dc[1] - dz[1]),
        ];
        out[e] = ChainLink {
            code,
            clamped,
            pre: u,
            value,
            d_scale: dv[0],
            d_zero: dv[1],
        };
        r -= value;
        dr = [dr[0] - dv[0], dr[1] - dv[1]];
        let step = (1u32 << bits) as f64;
        s /= step;
        ds = [ds[0] / step, ds[1] / step];
    }
}

// ── Slice stack ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    /// One code tensor per slice, row-major over `weight_shape`.
    pub slices: Vec<Vec<u8>>,
    pub slice_bits: Vec<u8>,
    /// Parameters of every slice; index 0 is the calibrated base.
    pub slice_params: Vec<QuantParams>,
    /// `(out_features, in_features)`
    pub weight_shape: (usize, usize),
    /// Bit `e` set when slice `e` clamped that element.
    pub clamp_mask: Vec<u8>,
}

impl SliceStack {
    pub fn num_slices(&self) -> usize {
        self.slice_bits.len()
    }

    pub fn base_params(&self) -> &QuantParams {
        &self.slice_params[0]
    }

    pub fn total_bits(&self) -> u32 {
        self.slice_bits.iter().map(|&b| b as u32).sum()
    }

    pub fn len(&self) -> usize {
        self.weight_shape.0 * self.weight_shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clamp_counts(&self) -> Vec<usize> {
        (0..self.num_slices())
            .map(|e| self.clamp_mask.iter().filter(|&&m| m & (1 << e) != 0).count())
            .collect()
    }

    pub fn any_clamp(&self) -> bool {
        self.clamp_mask.iter().any(|&m| m != 0)
    }

    /// Dequantized slice `e` (0-based) as an `out × in` matrix.
    pub fn slice_weight(&self, e: usize) -> Matrix {
        let qp = &self.slice_params[e];
        let (rows, cols) = self.weight_shape;
        let data = self.slices[e]
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let g = qp.group_of(i);
                qp.scales[g] * (c as f64 - qp.zeros[g] + 0.5)
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("slice shape")
    }

    /// Sum of the first `k` dequantized slices (`1 ≤ k ≤ E`).
    pub fn reconstruct(&self, k: usize) -> Result<Matrix> {
        self.check_k(k, 1)?;
        let mask: Vec<bool> = (0..self.num_slices()).map(|e| e < k).collect();
        self.reconstruct_subset(&mask)
    }

    /// Sum over an arbitrary slice subset. Only prefixes carry the nesting
    /// guarantees; other subsets are supported for measurement.
    pub fn reconstruct_subset(&self, active: &[bool]) -> Result<Matrix> {
        if active.len() != self.num_slices() {
            return Err(QuantError::ShapeMismatch {
                what: "slice subset mask",
                expected: self.num_slices(),
                got: active.len(),
            });
        }
        let (rows, cols) = self.weight_shape;
        let mut out = Matrix::zeros(rows, cols);
        for (e, _) in active.iter().enumerate().filter(|(_, &on)| on) {
            out.add_assign(&self.slice_weight(e))?;
        }
        Ok(out)
    }

    fn check_k(&self, k: usize, min: usize) -> Result<()> {
        if k < min || k > self.num_slices() {
            return Err(QuantError::OutOfRange {
                what: "slice count k",
                value: k as f64,
                lo: min as f64,
                hi: self.num_slices() as f64,
            });
        }
        Ok(())
    }

    /// Concatenated codes of the first `k` slices, most significant first.
    pub fn merge_codes(&self, k: usize) -> Result<Vec<u8>> {
        self.check_k(k, 1)?;
        let mut merged = vec![0u32; self.len()];
        for e in 0..k {
            let b = self.slice_bits[e];
            for (m, &c) in merged.iter_mut().zip(&self.slices[e]) {
                *m = (*m << b) + c as u32;
            }
        }
        Ok(merged.into_iter().map(|m| m as u8).collect())
    }

    /// Parameters under which the merged code of the first `k` slices
    /// dequantizes to `reconstruct(k)`: the finest scale of the prefix and
    /// the base zero point lifted by the prefix's residual bits.
    pub fn merged_params(&self, k: usize) -> Result<QuantParams> {
        self.check_k(k, 1)?;
        let base = self.base_params();
        let lift: u32 = self.slice_bits[1..k].iter().map(|&b| b as u32).sum();
        let factor = (1u64 << lift) as f64;
        let bits: u32 = self.slice_bits[..k].iter().map(|&b| b as u32).sum();
        QuantParams::new(
            self.slice_params[k - 1].scales.clone(),
            base.zeros.iter().map(|z| z * factor).collect(),
            bits as u8,
            base.group_size,
        )
    }

    /// Parameters for evaluating only the top `total - p` bit planes of the
    /// full merged code at the finest scale: dropping `p` bits turns the
    /// centered `+0.5` into `+2^{p-1}`, which is folded into the zero point.
    pub fn truncated_plane_params(&self, p: u32) -> Result<QuantParams> {
        let total = self.total_bits();
        if p >= total {
            return Err(QuantError::OutOfRange {
                what: "truncated bits p",
                value: p as f64,
                lo: 0.0,
                hi: (total - 1) as f64,
            });
        }
        let mut qp = self.merged_params(self.num_slices())?;
        let shift = 0.5 - (1u64 << p) as f64 / 2.0;
        for z in &mut qp.zeros {
            *z += shift;
        }
        Ok(qp)
    }

    /// Drops the `p` least significant bits of the full merged code.
    pub fn truncate(&self, p: u32) -> Result<(Matrix, TruncationReport)> {
        let total = self.total_bits();
        if p >= total {
            return Err(QuantError::OutOfRange {
                what: "truncated bits p",
                value: p as f64,
                lo: 0.0,
                hi: (total - 1) as f64,
            });
        }
        let merged = self.merge_codes(self.num_slices())?;
        let base = self.base_params();
        let fine = &self.slice_params[self.num_slices() - 1];
        let lift = total - self.slice_bits[0] as u32;
        let pow_p = (1u64 << p) as f64;
        let half = pow_p / 2.0;
        let (rows, cols) = self.weight_shape;
        let mut recon = Vec::with_capacity(merged.len());
        let mut residue = Vec::with_capacity(merged.len());
        let mut coarse = Vec::with_capacity(merged.len());
        let mut noise = Vec::with_capacity(merged.len());
        for (i, &int) in merged.iter().enumerate() {
            let g = base.group_of(i);
            let s_fine = fine.scales[g];
            let i_code = (int as u32) >> p;
            let r = int as u32 - (i_code << p);
            let s_coarse = pow_p * s_fine;
            let z_coarse = base.zeros[g] * (1u64 << lift) as f64 / pow_p;
            recon.push(s_coarse * (i_code as f64 - z_coarse + 0.5));
            noise.push(s_fine * (r as f64 + 0.5 - half));
            residue.push(r as u8);
            coarse.push(i_code as u8);
        }
        Ok((
            Matrix::from_vec(rows, cols, recon)?,
            TruncationReport {
                p,
                residue,
                noise,
                coarse_codes: coarse,
            },
        ))
    }
}

/// Outcome of dropping `p` low bits from the merged code.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationReport {
    pub p: u32,
    pub residue: Vec<u8>,
    /// `s_fine * (residue + 0.5 - 2^{p-1})`
    pub noise: Vec<f64>,
    pub coarse_codes: Vec<u8>,
}

/// Splits a merged code back into per-slice codes.
pub fn split_merged(code: u8, slice_bits: &[u8]) -> Vec<u8> {
    let mut rest = code as u32;
    let mut out = vec![0u8; slice_bits.len()];
    for (e, &b) in slice_bits.iter().enumerate().rev() {
        out[e] = (rest & ((1 << b) - 1)) as u8;
        rest >>= b;
    }
    out
}

/// Residual decomposition of `w` into `slice_bits.len()` slices.
pub fn decompose(w: &Matrix, base: &QuantParams, slice_bits: &[u8]) -> Result<SliceStack> {
    validate_slice_bits(slice_bits)?;
    base.validate()?;
    if base.bits != slice_bits[0] {
        return Err(QuantError::InvalidBits {
            bits: base.bits as u32,
            reason: "base params must match the first slice width",
        });
    }
    let n = w.rows() * w.cols();
    base.check_covers(n)?;
    if let Some(index) = w.first_non_finite() {
        return Err(QuantError::NonFinite { index });
    }

    let e_count = slice_bits.len();
    let mut slice_params = Vec::with_capacity(e_count);
    slice_params.push(base.clone());
    for e in 1..e_count {
        let prev = &slice_params[e - 1];
        let step = (1u32 << slice_bits[e - 1]) as f64;
        slice_params.push(QuantParams::new(
            prev.scales.iter().map(|s| s / step).collect(),
            vec![residual_zero(slice_bits[e]); prev.num_groups()],
            slice_bits[e],
            base.group_size,
        )?);
    }

    let mut slices = vec![Vec::with_capacity(n); e_count];
    let mut clamp_mask = Vec::with_capacity(n);
    let mut links = vec![ChainLink::default(); e_count];
    for (i, &v) in w.as_slice().iter().enumerate() {
        let g = base.group_of(i);
        residual_chain(v, base.scales[g], base.zeros[g], slice_bits, None, &mut links);
        let mut mask = 0u8;
        for (e, link) in links.iter().enumerate() {
            slices[e].push(link.code);
            if link.clamped {
                mask |= 1 << e;
            }
        }
        clamp_mask.push(mask);
    }
    Ok(SliceStack {
        slices,
        slice_bits: slice_bits.to_vec(),
        slice_params,
        weight_shape: (w.rows(), w.cols()),
        clamp_mask,
    })
}

// ── Outlier migration ──────────────────────────────────────────────────────

/// Indices of the `ceil(top_frac * T)` largest errors; ties go to the lowest
/// token index.
pub fn top_outliers(err: &[f64], top_frac: f64) -> Result<Vec<usize>> {
    if err.is_empty() {
        return Err(QuantError::Empty("per-token errors"));
    }
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(QuantError::OutOfRange {
            what: "top_frac",
            value: top_frac,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let m = ((top_frac * err.len() as f64).ceil() as usize).clamp(1, err.len());
    let mut idx: Vec<usize> = (0..err.len()).collect();
    idx.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

/// Fraction of the top outlier tokens under `err_a` that are also top
/// outliers under `err_b`.
pub fn migration_overlap(err_a: &[f64], err_b: &[f64], top_frac: f64) -> Result<f64> {
    if err_a.len() != err_b.len() {
        return Err(QuantError::ShapeMismatch {
            what: "per-token error count",
            expected: err_a.len(),
            got: err_b.len(),
        });
    }
    let a = top_outliers(err_a, top_frac)?;
    let b = top_outliers(err_b, top_frac)?;
    let (mut i, mut j, mut shared) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(shared as f64 / a.len() as f64)
}
