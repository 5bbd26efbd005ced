//! Invariants of slicing, routing, bit-plane execution and scheduling, each
//! checked against a small independent oracle.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slicequant::bitplane::{dense_accumulate_int, pack_bit_major, plane_accumulate_int};
use slicequant::qcore::QuantParams;
use slicequant::router::{forward_elastic, gate_soft, GateMode, GateSchedule, Temperature};
use slicequant::slicer::{decompose, split_merged};
use slicequant::trainer::{BudgetSchedule, ScheduleShape};
use slicequant::Matrix;

const SHAPES: [ScheduleShape; 4] = [
    ScheduleShape::Logarithmic,
    ScheduleShape::Linear,
    ScheduleShape::Cosine,
    ScheduleShape::Exponential,
];

fn random_matrix(rows: usize, cols: usize, seed: u64, span: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-span..span))
}

/// Plain recursive residual quantization written out from the formulas.
fn oracle_recursion(w: f64, s1: f64, z1: f64, bits: &[u8]) -> (Vec<u8>, f64) {
    let mut r = w;
    let mut s = s1;
    let mut z = z1;
    let mut codes = Vec::new();
    let mut recon = 0.0;
    for (e, &b) in bits.iter().enumerate() {
        if e > 0 {
            s /= (1u32 << bits[e - 1]) as f64;
            z = (1u32 << (b - 1)) as f64;
        }
        let max = ((1u32 << b) - 1) as f64;
        let c = (r / s + z).floor().clamp(0.0, max);
        let deq = s * (c - z + 0.5);
        codes.push(c as u8);
        recon += deq;
        r -= deq;
    }
    (codes, recon)
}

// ── Slicer ────────────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn decompose_matches_recursion_oracle(seed: u64, s1 in 0.05f64..1.0, z1 in 0.0f64..4.0) {
        let w = random_matrix(6, 8, seed, 1.0);
        let bits = [2u8, 2, 2, 2];
        let st = decompose(&w, &QuantParams::uniform(s1, z1, 2).unwrap(), &bits).unwrap();
        let full = st.reconstruct(4).unwrap();
        for (i, &v) in w.as_slice().iter().enumerate() {
            let (codes, recon) = oracle_recursion(v, s1, z1, &bits);
            for e in 0..4 {
                prop_assert_eq!(st.slices[e][i], codes[e]);
            }
            prop_assert!((full.as_slice()[i] - recon).abs() <= 1e-12);
        }
    }

    #[test]
    fn unclamped_residuals_shrink(seed: u64, s1 in 0.05f64..1.0, z1 in 0.0f64..4.0) {
        let w = random_matrix(8, 8, seed, 1.0);
        let st = decompose(&w, &QuantParams::uniform(s1, z1, 2).unwrap(), &[2, 2, 2, 2]).unwrap();
        for e in 0..4 {
            let residual = w.sub(&st.reconstruct(e + 1).unwrap()).unwrap();
            let bound = st.slice_params[e].scales[0] / 2.0;
            for (i, r) in residual.as_slice().iter().enumerate() {
                if st.clamp_mask[i] >> e & 1 == 0 {
                    prop_assert!(r.abs() <= bound * (1.0 + 1e-12), "slice {} element {}", e, i);
                }
            }
        }
    }

    #[test]
    fn truncation_identity_and_half_step(seed: u64, s1 in 0.05f64..1.0, z1 in 0.0f64..4.0, p in 0u32..8) {
        let w = random_matrix(8, 8, seed, 1.0);
        let st = decompose(&w, &QuantParams::uniform(s1, z1, 2).unwrap(), &[2, 2, 2, 2]).unwrap();
        let full = st.reconstruct(4).unwrap();
        let (trunc, rep) = st.truncate(p).unwrap();
        let s_fine = st.slice_params[3].scales[0];
        let half = (1u32 << p) as f64 / 2.0;
        for i in 0..64 {
            let e = rep.noise[i];
            prop_assert_eq!(e, s_fine * (rep.residue[i] as f64 + 0.5 - half));
            prop_assert!(e.abs() < half * s_fine);
            let lhs = full.as_slice()[i];
            let rhs = trunc.as_slice()[i] + e;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(s1), "{} vs {}", lhs, rhs);
        }
    }

    /// Adding or dropping fine slices never moves a coarser code.
    #[test]
    fn fine_slices_leave_coarse_codes(seed: u64, s1 in 0.05f64..1.0, z1 in 0.0f64..4.0) {
        let w = random_matrix(4, 8, seed, 1.0);
        let base = QuantParams::uniform(s1, z1, 2).unwrap();
        let wide = decompose(&w, &base, &[2, 2, 2, 2]).unwrap();
        for k in 1..4 {
            let narrow = decompose(&w, &base, &[2; 4][..k]).unwrap();
            prop_assert_eq!(&narrow.slices[..], &wide.slices[..k]);
            let (_, rep) = wide.truncate(2 * (4 - k) as u32).unwrap();
            prop_assert_eq!(&rep.coarse_codes, &wide.merge_codes(k).unwrap());
            for (i, &c) in rep.coarse_codes.iter().enumerate() {
                let split = split_merged(c, &[2; 4][..k]);
                for e in 0..k {
                    prop_assert_eq!(split[e], wide.slices[e][i]);
                }
            }
        }
    }
}

#[test]
fn truncation_noise_is_exactly_zero_mean() {
    // Dyadic fine step so every term is exact.
    let s_fine = 2f64.powi(-7);
    for p in 0..8u32 {
        let half = (1u32 << p) as f64 / 2.0;
        let total: f64 = (0..1u32 << p).map(|r| s_fine * (r as f64 + 0.5 - half)).sum();
        assert_eq!(total, 0.0, "p = {p}");
    }
}

// ── Router ────────────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn hard_and_soft_agree_on_binary_gates(seed: u64, mask in proptest::collection::vec(any::<bool>(), 15)) {
        let w = random_matrix(6, 8, seed, 1.0);
        let st = decompose(&w, &QuantParams::uniform(0.5, 2.0, 2).unwrap(), &[2, 2, 2, 2]).unwrap();
        let x = random_matrix(5, 8, seed ^ 1, 2.0);
        let g = Matrix::from_vec(5, 3, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let hard = forward_elastic(&x, &st, &g, GateMode::Hard).unwrap();
        let soft = forward_elastic(&x, &st, &g, GateMode::Soft).unwrap();
        prop_assert_eq!(hard, soft);
    }

    /// The shared slice's output does not depend on which routed gates are on.
    #[test]
    fn shared_slice_ignores_routing(seed: u64, gates in proptest::collection::vec(0.0f64..1.0, 12)) {
        let w = random_matrix(6, 8, seed, 1.0);
        let st = decompose(&w, &QuantParams::uniform(0.5, 2.0, 2).unwrap(), &[2, 2, 2, 2]).unwrap();
        let x = random_matrix(4, 8, seed ^ 2, 2.0);
        let g = Matrix::from_vec(4, 3, gates).unwrap();
        let y = forward_elastic(&x, &st, &g, GateMode::Soft).unwrap();
        let mut routed = Matrix::zeros(4, 6);
        for e in 1..4 {
            let part = x.matmul_nt(&st.slice_weight(e)).unwrap();
            for t in 0..4 {
                for o in 0..6 {
                    routed.set(t, o, routed.get(t, o) + g.get(t, e - 1) * part.get(t, o));
                }
            }
        }
        let shared = x.matmul_nt(&st.slice_weight(0)).unwrap();
        let rebuilt = y.sub(&routed).unwrap();
        for (a, b) in rebuilt.as_slice().iter().zip(shared.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn temperature_rises_strictly(l in 3usize..5000, frac in 0.0f64..1.0) {
        let sched = GateSchedule::new(l).unwrap();
        let t = 1 + ((l - 2) as f64 * frac) as usize;
        let (Temperature::Finite(a), Temperature::Finite(b)) =
            (sched.temperature(t).unwrap(), sched.temperature(t + 1).unwrap())
        else {
            prop_assert!(t + 1 == l);
            return Ok(());
        };
        prop_assert!(b > a);
    }

    #[test]
    fn zero_score_stays_half_until_the_end(l in 2usize..500, frac in 0.0f64..1.0) {
        let sched = GateSchedule::new(l).unwrap();
        let t = 1 + ((l - 2) as f64 * frac) as usize;
        let g = gate_soft(&Matrix::zeros(1, 3), &sched, t).unwrap();
        prop_assert!(g.as_slice().iter().all(|&v| v == 0.5));
    }
}

// ── Bit planes ─────────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn disjoint_planes_add(seed: u64, out in 1usize..24, inp in 1usize..130, split in any::<u8>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<u8> = (0..out * inp).map(|_| rng.random()).collect();
        let x: Vec<i64> = (0..3 * inp).map(|_| rng.random_range(-1000..1000)).collect();
        let pp = pack_bit_major(&codes, out, inp, 8).unwrap();
        let (a, b): (Vec<u32>, Vec<u32>) = (0..8u32).partition(|p| split >> p & 1 == 1);
        prop_assume!(!a.is_empty() && !b.is_empty());
        let ra = plane_accumulate_int(&x, &pp, &a).unwrap();
        let rb = plane_accumulate_int(&x, &pp, &b).unwrap();
        let all = plane_accumulate_int(&x, &pp, &pp.all_planes()).unwrap();
        let sum: Vec<i64> = ra.iter().zip(&rb).map(|(p, q)| p + q).collect();
        prop_assert_eq!(&sum, &all);
        prop_assert_eq!(all, dense_accumulate_int(&x, &codes, out, inp).unwrap());
    }
}

// ── Budget schedule ────────────────────────────────────────────────────────

proptest! {
    #[test]
    fn schedules_never_rise(l in 2usize..3000, b_init in 3.0f64..8.0, drop in 0.0f64..1.0, frac in 0.0f64..1.0) {
        for shape in SHAPES {
            let sched = BudgetSchedule {
                b_init,
                b_target: b_init - drop * (b_init - 2.0),
                total_steps: l,
                shape,
                ..Default::default()
            };
            let t = 1 + ((l - 1) as f64 * frac) as usize;
            let now = sched.value(t).unwrap();
            if t < l {
                prop_assert!(sched.value(t + 1).unwrap() <= now, "{:?} at {}", shape, t);
            }
            prop_assert!(now <= b_init && now >= sched.b_target - 1e-12);
        }
    }
}
