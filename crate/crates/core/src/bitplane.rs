//! Bit-major weight packing and plane-wise matrix multiplication.
//!
//! A `k`-bit code tensor is stored as `k` independent bit matrices, each row
//! padded to whole 64-bit words. Multiplying by any subset of planes only
//! touches those planes' words, which is what the cost model counts.

use std::ops::AddAssign;

use crate::error::{QuantError, Result};
use crate::matrix::Matrix;
use crate::qcore::{check_bits, dequantize_centered, QuantParams};

pub const WORD_BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedPlanes {
    /// Most significant plane first.
    pub planes: Vec<Vec<u64>>,
    pub bits: u8,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl PackedPlanes {
    pub fn words_per_row(&self) -> usize {
        self.in_dim.div_ceil(WORD_BITS)
    }

    pub fn padded_in(&self) -> usize {
        self.words_per_row() * WORD_BITS
    }

    /// Words of the plane holding bit `p` (0 = least significant).
    pub fn plane(&self, p: u32) -> &[u64] {
        &self.planes[self.bits as usize - 1 - p as usize]
    }

    /// Plane `p` expanded to one 0/1 byte per element.
    pub fn plane_bits(&self, p: u32) -> Vec<u8> {
        let words = self.plane(p);
        let wpr = self.words_per_row();
        let mut out = Vec::with_capacity(self.out_dim * self.in_dim);
        for o in 0..self.out_dim {
            for i in 0..self.in_dim {
                out.push(((words[o * wpr + i / WORD_BITS] >> (i % WORD_BITS)) & 1) as u8);
            }
        }
        out
    }

    pub fn unpack(&self) -> Vec<u8> {
        let mut codes = vec![0u8; self.out_dim * self.in_dim];
        for p in 0..self.bits as u32 {
            for (c, b) in codes.iter_mut().zip(self.plane_bits(p)) {
                *c |= b << p;
            }
        }
        codes
    }

    pub fn all_planes(&self) -> Vec<u32> {
        (0..self.bits as u32).rev().collect()
    }

    fn check_active(&self, active: &[u32]) -> Result<()> {
        if active.is_empty() {
            return Err(QuantError::Empty("active plane set"));
        }
        let mut seen = 0u32;
        for &p in active {
            if p >= self.bits as u32 || seen & (1 << p) != 0 {
                return Err(QuantError::OutOfRange {
                    what: "active plane",
                    value: p as f64,
                    lo: 0.0,
                    hi: self.bits as f64 - 1.0,
                });
            }
            seen |= 1 << p;
        }
        Ok(())
    }
}

/// Packs a row-major `out × in` code matrix into bit planes.
pub fn pack_bit_major(codes: &[u8], out_dim: usize, in_dim: usize, bits: u8) -> Result<PackedPlanes> {
    check_bits(bits)?;
    if codes.len() != out_dim * in_dim {
        return Err(QuantError::ShapeMismatch {
            what: "code matrix",
            expected: out_dim * in_dim,
            got: codes.len(),
        });
    }
    if let Some((index, &c)) = codes.iter().enumerate().find(|(_, &c)| (c as u32) >> bits != 0) {
        return Err(QuantError::CodeOutOfRange {
            index,
            code: c as u32,
            bits,
        });
    }
    let wpr = in_dim.div_ceil(WORD_BITS);
    let mut planes = vec![vec![0u64; out_dim * wpr]; bits as usize];
    for o in 0..out_dim {
        for i in 0..in_dim {
            let c = codes[o * in_dim + i];
            for p in 0..bits {
                if (c >> p) & 1 == 1 {
                    planes[(bits - 1 - p) as usize][o * wpr + i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
                }
            }
        }
    }
    Ok(PackedPlanes {
        planes,
        bits,
        out_dim,
        in_dim,
    })
}

// ── Plane-wise multiplication ──────────────────────────────────────────────

/// Sum of `x[i]` over the set bits of one packed row within columns `lo..hi`.
fn masked_sum<T: Copy + AddAssign + Default>(row: &[u64], x: &[T], lo: usize, hi: usize) -> T {
    let mut acc = T::default();
    if lo >= hi {
        return acc;
    }
    let first = lo / WORD_BITS;
    for (w, &packed) in row.iter().enumerate().take((hi - 1) / WORD_BITS + 1).skip(first) {
        let base = w * WORD_BITS;
        let mut word = packed;
        if base < lo {
            word &= !0u64 << (lo - base);
        }
        if hi - base < WORD_BITS {
            word &= (1u64 << (hi - base)) - 1;
        }
        while word != 0 {
            let b = word.trailing_zeros() as usize;
            acc += x[base + b];
            word &= word - 1;
        }
    }
    acc
}

fn check_tokens(len: usize, in_dim: usize) -> Result<usize> {
    if in_dim == 0 || !len.is_multiple_of(in_dim) {
        return Err(QuantError::ShapeMismatch {
            what: "token width",
            expected: in_dim,
            got: len,
        });
    }
    Ok(len / in_dim)
}

/// Exact pre-affine accumulation `Σ_p 2^p · (plane_p · x_t)` for integer
/// tokens (`T × in`, row-major). Result is `T × out`.
pub fn plane_accumulate_int(x: &[i64], pp: &PackedPlanes, active: &[u32]) -> Result<Vec<i64>> {
    pp.check_active(active)?;
    let tokens = check_tokens(x.len(), pp.in_dim)?;
    let wpr = pp.words_per_row();
    let mut out = vec![0i64; tokens * pp.out_dim];
    for t in 0..tokens {
        let xt = &x[t * pp.in_dim..(t + 1) * pp.in_dim];
        for o in 0..pp.out_dim {
            let mut acc = 0i64;
            for &p in active {
                let row = &pp.plane(p)[o * wpr..(o + 1) * wpr];
                acc += masked_sum(row, xt, 0, pp.in_dim) << p;
            }
            out[t * pp.out_dim + o] = acc;
        }
    }
    Ok(out)
}

/// Dense integer reference `Σ_i code[o,i] · x[t,i]`.
pub fn dense_accumulate_int(x: &[i64], codes: &[u8], out_dim: usize, in_dim: usize) -> Result<Vec<i64>> {
    let tokens = check_tokens(x.len(), in_dim)?;
    let mut out = vec![0i64; tokens * out_dim];
    for t in 0..tokens {
        for o in 0..out_dim {
            out[t * out_dim + o] = (0..in_dim)
                .map(|i| codes[o * in_dim + i] as i64 * x[t * in_dim + i])
                .sum();
        }
    }
    Ok(out)
}

/// Real-valued output `X · Ŵᵀ` from the active planes. Each contiguous run
/// of a row that shares a quantization group contributes
/// `s · (acc − (z − ½) · Σx)` over that run.
pub fn bitplane_matmul(x: &Matrix, pp: &PackedPlanes, qp: &QuantParams, active: &[u32]) -> Result<(Matrix, CostLedger)> {
    pp.check_active(active)?;
    if x.cols() != pp.in_dim {
        return Err(QuantError::ShapeMismatch {
            what: "token width",
            expected: pp.in_dim,
            got: x.cols(),
        });
    }
    qp.check_covers(pp.out_dim * pp.in_dim)?;
    let wpr = pp.words_per_row();
    let mut out = Matrix::zeros(x.rows(), pp.out_dim);
    for t in 0..x.rows() {
        let xt = x.row(t);
        for o in 0..pp.out_dim {
            let mut y = 0.0;
            let mut lo = 0;
            while lo < pp.in_dim {
                let g = qp.group_of(o * pp.in_dim + lo);
                let hi = if qp.group_size == usize::MAX {
                    pp.in_dim
                } else {
                    ((g + 1) * qp.group_size - o * pp.in_dim).min(pp.in_dim)
                };
                let mut acc = 0.0;
                for &p in active {
                    let row = &pp.plane(p)[o * wpr..(o + 1) * wpr];
                    acc += masked_sum(row, xt, lo, hi) * (1u64 << p) as f64;
                }
                let xsum: f64 = xt[lo..hi].iter().sum();
                y += qp.scales[g] * (acc - (qp.zeros[g] - 0.5) * xsum);
                lo = hi;
            }
            out.set(t, o, y);
        }
    }
    let tokens = x.rows() as u64;
    let k = active.len() as u64;
    let ledger = CostLedger {
        words_fetched: k * (pp.out_dim * wpr) as u64,
        bit_ops: tokens * k * pp.padded_in() as u64,
        tokens_permuted: 0,
        per_slice_work: vec![tokens * k * pp.padded_in() as u64],
        overlap_makespan: tokens * k * pp.padded_in() as u64,
    };
    Ok((out, ledger))
}

/// Dense reference `X · dequantize(codes)ᵀ`.
pub fn dense_reference(x: &Matrix, codes: &[u8], out_dim: usize, in_dim: usize, qp: &QuantParams) -> Result<Matrix> {
    let w = Matrix::from_vec(out_dim, in_dim, dequantize_centered(codes, qp)?)?;
    x.matmul_nt(&w)
}

// ── Token permutation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Permuted {
    pub tokens: Matrix,
    /// `perm[new] = old`
    pub perm: Vec<usize>,
    /// `inverse[old] = new`
    pub inverse: Vec<usize>,
    /// `(active-slice set, start, len)` per contiguous group.
    pub groups: Vec<(Vec<usize>, usize, usize)>,
}

fn normalize(set: &[usize]) -> Vec<usize> {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Stable reorder so tokens with identical active-slice sets are contiguous.
pub fn permute_by_slice(tokens: &Matrix, assignments: &[Vec<usize>]) -> Result<Permuted> {
    if assignments.len() != tokens.rows() {
        return Err(QuantError::ShapeMismatch {
            what: "slice assignments",
            expected: tokens.rows(),
            got: assignments.len(),
        });
    }
    let keys: Vec<Vec<usize>> = assignments.iter().map(|a| normalize(a)).collect();
    let mut perm: Vec<usize> = (0..keys.len()).collect();
    perm.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut inverse = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let mut groups: Vec<(Vec<usize>, usize, usize)> = Vec::new();
    for (new, &old) in perm.iter().enumerate() {
        match groups.last_mut() {
            Some((k, _, len)) if *k == keys[old] => *len += 1,
            _ => groups.push((keys[old].clone(), new, 1)),
        }
    }
    let out = Matrix::from_fn(tokens.rows(), tokens.cols(), |r, c| tokens.get(perm[r], c));
    Ok(Permuted {
        tokens: out,
        perm,
        inverse,
        groups,
    })
}

pub fn unpermute(m: &Matrix, inverse: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(inverse[r], c))
}

// ── Cost model ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostLedger {
    pub words_fetched: u64,
    pub bit_ops: u64,
    pub tokens_permuted: u64,
    pub per_slice_work: Vec<u64>,
    pub overlap_makespan: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostShape {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Tokens per tile after permutation; each tile fetches its planes once.
    pub tile_tokens: usize,
}

/// Abstract cost of one routed matmul. `assignments[t]` lists the slices
/// token `t` uses (slice 0 is the MSB).
pub fn cost_model(assignments: &[Vec<usize>], slice_bits: &[u8], shape: CostShape, overlap: bool) -> Result<CostLedger> {
    crate::slicer::validate_slice_bits(slice_bits)?;
    if shape.tile_tokens == 0 {
        return Err(QuantError::Empty("tile"));
    }
    let keys: Vec<Vec<usize>> = assignments.iter().map(|a| normalize(a)).collect();
    if let Some(&bad) = keys.iter().flatten().find(|&&e| e >= slice_bits.len()) {
        return Err(QuantError::OutOfRange {
            what: "slice index",
            value: bad as f64,
            lo: 0.0,
            hi: slice_bits.len() as f64 - 1.0,
        });
    }
    let wpr = shape.in_dim.div_ceil(WORD_BITS) as u64;
    let padded = wpr * WORD_BITS as u64;

    let mut per_slice_work = vec![0u64; slice_bits.len()];
    for k in &keys {
        for &e in k {
            per_slice_work[e] += slice_bits[e] as u64 * padded;
        }
    }
    let bit_ops = per_slice_work.iter().sum();

    let mut perm: Vec<usize> = (0..keys.len()).collect();
    perm.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let tokens_permuted = perm.iter().enumerate().filter(|(new, &old)| *new != old).count() as u64;

    let mut words_fetched = 0u64;
    for tile in perm.chunks(shape.tile_tokens) {
        let mut needed = vec![false; slice_bits.len()];
        for &t in tile {
            for &e in &keys[t] {
                needed[e] = true;
            }
        }
        let planes: u64 = needed
            .iter()
            .zip(slice_bits)
            .filter(|(n, _)| **n)
            .map(|(_, &b)| b as u64)
            .sum();
        words_fetched += planes * shape.out_dim as u64 * wpr;
    }

    let residual: u64 = per_slice_work[1..].iter().sum();
    let overlap_makespan = if overlap {
        per_slice_work[0].max(residual)
    } else {
        per_slice_work[0] + residual
    };
    Ok(CostLedger {
        words_fetched,
        bit_ops,
        tokens_permuted,
        per_slice_work,
        overlap_makespan,
    })
}
