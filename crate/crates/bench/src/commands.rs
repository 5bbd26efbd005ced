//! The work behind each CLI subcommand. Each command writes its tables into
//! an output directory.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slicequant::bitplane::{bitplane_matmul, cost_model, dense_reference, pack_bit_major, CostShape};
use slicequant::qcore::ClipParams;
use slicequant::router::{gate_hard_with, score, RouterState};
use slicequant::trainer::{grad_check, BudgetSchedule, GradCheckConfig, GradCheckReport, LayerParams, LayerSetup};
use slicequant::Matrix;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::eval::{eval_sweep, migration_report, MigrationReport, Sweep};
use crate::pipeline::{calibrate, eval_tokens, fp_model, threshold_tokens};
use crate::report::{create_dir, write_csv, write_text, write_train_log, Column};
use crate::BenchError;

pub const CHECKPOINT_FILE: &str = "checkpoint.mobi";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

// ── calibrate ──────────────────────────────────────────────────────────────

pub fn run_calibrate(cfg: &RunConfig) -> Result<Vec<String>, BenchError> {
    let out = &cfg.out_dir;
    create_dir(out)?;
    let cal = calibrate(cfg)?;
    cal.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    write_train_log(
        &out.join("train_log.jsonl"),
        cal.reports.iter().flat_map(|r| r.records.iter()),
    )?;
    const COLS: &[Column] = &[
        ("layer", "layer index"),
        ("final_avg_bits", "hard-gated AvgBits on the calibration set at the trained thresholds"),
        ("clamps", "residual clamp events per slice, space separated"),
        ("stage1_final_loss", "last MSB-stage loss"),
        ("stage2_final_loss", "last joint-stage loss"),
        ("warnings", "number of warnings raised for the layer"),
    ];
    let rows = cal
        .reports
        .iter()
        .map(|r| {
            vec![
                r.layer.to_string(),
                r.final_avg_bits.to_string(),
                join(&r.clamp_counts),
                r.stage1_losses.last().copied().unwrap_or(f64::NAN).to_string(),
                r.records.last().map_or(f64::NAN, |x| x.loss).to_string(),
                r.warnings.len().to_string(),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(&out.join("layers.csv"), "layers", COLS, &rows)?;
    Ok(cal.reports.iter().flat_map(|r| r.warnings.clone()).collect())
}

// ── eval ───────────────────────────────────────────────────────────────────

pub fn write_sweep(out: &Path, sweep: &Sweep) -> Result<(), BenchError> {
    const MAIN: &[Column] = &[
        ("target_bits", "requested average bits"),
        ("rho", "activation ratio of routed slices"),
        ("realized_bits", "hard-gated AvgBits averaged over layers"),
        ("output_mse", "mean squared error of the final output against full precision"),
        ("prefix_violation", "share of tokens whose active slices are not a prefix, averaged over layers"),
    ];
    const BLOCKS: &[Column] = &[
        ("target_bits", "requested average bits"),
        ("layer", "layer index"),
        ("avg_bits", "realized AvgBits of the layer"),
    ];
    const HIST: &[Column] = &[
        ("target_bits", "requested average bits"),
        ("bits", "effective bits of a token at one layer"),
        ("tokens", "token-layer pairs at that precision"),
    ];
    let mut main = Vec::new();
    let mut blocks = Vec::new();
    let mut hist = Vec::new();
    for r in &sweep.rows {
        main.push(vec![
            r.target_bits.to_string(),
            r.rho.to_string(),
            r.realized_bits.to_string(),
            r.output_mse.to_string(),
            r.prefix_violation.to_string(),
        ]);
        for (l, b) in r.layer_bits.iter().enumerate() {
            blocks.push(vec![r.target_bits.to_string(), l.to_string(), b.to_string()]);
        }
        for (bits, n) in &r.histogram {
            hist.push(vec![r.target_bits.to_string(), bits.to_string(), n.to_string()]);
        }
    }
    write_csv(&out.join("eval.csv"), "eval", MAIN, &main)?;
    write_csv(&out.join("eval_blocks.csv"), "eval_blocks", BLOCKS, &blocks)?;
    write_csv(&out.join("eval_hist.csv"), "eval_hist", HIST, &hist)?;
    let notes: String = sweep.notes.iter().map(|n| format!("{n}\n")).collect();
    write_text(&out.join("eval_notes.txt"), &notes)
}

/// Targets from bit budgets plus any activation ratios converted to bits.
pub fn eval_targets(cfg: &RunConfig, bits: &[f64], ratios: &[f64]) -> Vec<f64> {
    let b1 = cfg.quant.slice_bits[0] as f64;
    let routed: f64 = cfg.quant.slice_bits[1..].iter().map(|&b| b as f64).sum();
    bits.iter().copied().chain(ratios.iter().map(|r| b1 + r * routed)).collect()
}

pub fn run_eval(ckpt: &Checkpoint, targets: &[f64], out: &Path) -> Result<Sweep, BenchError> {
    create_dir(out)?;
    let x = eval_tokens(&ckpt.config)?;
    let fit = threshold_tokens(&ckpt.config)?;
    let sweep = eval_sweep(ckpt, &x, fit.as_ref(), targets)?;
    write_sweep(out, &sweep)?;
    Ok(sweep)
}

// ── sweep ──────────────────────────────────────────────────────────────────

/// Trains one checkpoint per `b_target` and tabulates where each landed.
pub fn run_train_sweep(cfg: &RunConfig, b_targets: &[f64]) -> Result<(), BenchError> {
    create_dir(&cfg.out_dir)?;
    const COLS: &[Column] = &[
        ("b_target", "training budget"),
        ("layer_bits", "hard-gated AvgBits of each layer at the trained thresholds, space separated"),
        ("mean_bits", "mean over layers"),
        ("output_mse", "final-output mean squared error against full precision"),
    ];
    let x = eval_tokens(cfg)?;
    let mut rows = Vec::new();
    for &b in b_targets {
        let mut c = cfg.clone();
        c.sched.b_target = b;
        c.sched.b_init = c.sched.b_init.max(b);
        c.validate()?;
        let cal = calibrate(&c)?;
        let bits: Vec<f64> = cal.reports.iter().map(|r| r.final_avg_bits).collect();
        let layers = cal.checkpoint.calibrated_layers();
        let mut h = x.clone();
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(&h)?.0;
            if i + 1 < layers.len() {
                h = c.model.activation.apply(&h);
            }
        }
        let reference = fp_model(&cal.checkpoint).forward(&x)?;
        let d = h.sub(&reference)?;
        let err = d.as_slice().iter().map(|v| v * v).sum::<f64>() / d.as_slice().len() as f64;
        rows.push(vec![
            b.to_string(),
            join(&bits),
            (bits.iter().sum::<f64>() / bits.len() as f64).to_string(),
            err.to_string(),
        ]);
    }
    write_csv(&cfg.out_dir.join("sweep.csv"), "sweep", COLS, &rows)
}

// ── pack ───────────────────────────────────────────────────────────────────

pub fn run_pack(ckpt: &Checkpoint, out: &Path) -> Result<(), BenchError> {
    create_dir(out)?;
    const COLS: &[Column] = &[
        ("layer", "layer index"),
        ("planes", "packed bit planes (merged code width)"),
        ("words_per_plane", "64-bit words per plane"),
        ("max_abs_dev", "max |bit-plane output - dense reference| over calibration tokens"),
        ("bit_ops_routed", "bit operations under the trained routing"),
        ("bit_ops_all", "bit operations with every slice on"),
        ("words_fetched_routed", "plane words fetched under the trained routing"),
        ("words_fetched_all", "plane words fetched with every slice on"),
        ("tokens_permuted", "tokens moved by the slice-major permutation"),
        ("makespan_overlap", "work with the MSB slice overlapped against residual slices"),
        ("makespan_sequential", "work with every slice run back to back"),
    ];
    let x = eval_tokens(&ckpt.config)?;
    let mut h = x.clone();
    let mut rows = Vec::new();
    let n = ckpt.layers.len();
    for (i, layer) in ckpt.layers.iter().enumerate() {
        let stack = &layer.stack;
        let (out_dim, in_dim) = stack.weight_shape;
        let total = stack.total_bits();
        let merged = stack.merge_codes(stack.num_slices())?;
        let pp = pack_bit_major(&merged, out_dim, in_dim, total as u8)?;
        let qp = stack.merged_params(stack.num_slices())?;
        let (y, _) = bitplane_matmul(&h, &pp, &qp, &pp.all_planes())?;
        let dense = dense_reference(&h, &merged, out_dim, in_dim, &qp)?;
        let dev = y.sub(&dense)?.max_abs();

        let router = &layer.params.router;
        let g = gate_hard_with(&score(&h, router)?, router);
        let routed: Vec<Vec<usize>> = (0..g.rows())
            .map(|t| {
                std::iter::once(0)
                    .chain((0..g.cols()).filter(|&j| g.get(t, j) > 0.5).map(|j| j + 1))
                    .collect()
            })
            .collect();
        let all: Vec<Vec<usize>> = vec![(0..stack.num_slices()).collect(); g.rows()];
        let shape = CostShape {
            out_dim,
            in_dim,
            tile_tokens: 64,
        };
        let on = cost_model(&routed, &stack.slice_bits, shape, true)?;
        let off = cost_model(&routed, &stack.slice_bits, shape, false)?;
        let full = cost_model(&all, &stack.slice_bits, shape, false)?;
        rows.push(vec![
            i.to_string(),
            total.to_string(),
            pp.words_per_row().to_string(),
            dev.to_string(),
            on.bit_ops.to_string(),
            full.bit_ops.to_string(),
            on.words_fetched.to_string(),
            full.words_fetched.to_string(),
            on.tokens_permuted.to_string(),
            on.overlap_makespan.to_string(),
            off.overlap_makespan.to_string(),
        ]);
        h = layer.calibrated().forward(&h)?.0;
        if i + 1 < n {
            h = ckpt.config.model.activation.apply(&h);
        }
    }
    write_csv(&out.join("pack.csv"), "pack", COLS, &rows)
}

// ── grad-check ─────────────────────────────────────────────────────────────

/// A 16×16 layer with random clipping and a non-trivial router, evaluated
/// at step 37 of 100 with the default regularizer weight.
pub struct GradCheckInstance {
    pub setup: LayerSetup,
    pub params: LayerParams,
    pub x: Matrix,
    pub y: Matrix,
    pub sched: BudgetSchedule,
    pub config: GradCheckConfig,
}

pub fn grad_check_instance(seed: u64) -> Result<GradCheckInstance, BenchError> {
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
    let x = Matrix::from_fn(32, d, |_, _| rng.random_range(-1.0..1.0));
    let y = x.matmul_nt(&w)?;
    let setup = LayerSetup::new(w, &[2, 2, 2, 2], d)?;
    let mut router = RouterState::init(d, 3, &mut rng);
    for v in router.w2.as_mut_slice() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in &mut router.b2 {
        *v = rng.random_range(-0.2..0.2);
    }
    let mut clip = ClipParams::identity_init(setup.num_groups());
    for v in clip.gamma_lo.iter_mut().chain(clip.gamma_hi.iter_mut()) {
        *v = rng.random_range(0.5..3.0);
    }
    Ok(GradCheckInstance {
        setup,
        params: LayerParams { clip, router },
        x,
        y,
        sched: BudgetSchedule {
            total_steps: 100,
            ..Default::default()
        },
        config: GradCheckConfig {
            t: 37,
            ..Default::default()
        },
    })
}

pub fn run_grad_check(seed: u64) -> Result<GradCheckReport, BenchError> {
    let inst = grad_check_instance(seed)?;
    Ok(grad_check(&inst.setup, &inst.params, &inst.x, &inst.y, &inst.sched, &inst.config)?)
}

// ── migration ──────────────────────────────────────────────────────────────

pub fn write_migration(out: &Path, rep: &MigrationReport) -> Result<(), BenchError> {
    const SUMMARY: &[Column] = &[
        ("mode", "static (uniform truncation) or routed (quantile thresholds)"),
        ("bits_a", "requested budget a"),
        ("bits_b", "requested budget b"),
        ("realized_a", "realized bits at budget a"),
        ("realized_b", "realized bits at budget b"),
        ("top_frac", "share of tokens counted as outliers"),
        ("overlap", "share of budget-a outlier tokens that stay outliers at budget b"),
    ];
    const TOKENS: &[Column] = &[
        ("token", "pooled token index"),
        ("static_a", "squared final-output error, static gating at budget a"),
        ("static_b", "squared final-output error, static gating at budget b"),
        ("routed_a", "squared final-output error, routed gating at budget a"),
        ("routed_b", "squared final-output error, routed gating at budget b"),
    ];
    let s = |v: f64| v.to_string();
    let summary = vec![
        vec![
            "static".into(),
            s(rep.bits_a),
            s(rep.bits_b),
            rep.static_bits.0.to_string(),
            rep.static_bits.1.to_string(),
            s(rep.top_frac),
            s(rep.static_overlap),
        ],
        vec![
            "routed".into(),
            s(rep.bits_a),
            s(rep.bits_b),
            s(rep.routed_bits.0),
            s(rep.routed_bits.1),
            s(rep.top_frac),
            s(rep.routed_overlap),
        ],
    ];
    let tokens = (0..rep.static_a.len())
        .map(|t| {
            vec![
                t.to_string(),
                s(rep.static_a[t]),
                s(rep.static_b[t]),
                s(rep.routed_a[t]),
                s(rep.routed_b[t]),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(&out.join("migration.csv"), "migration", SUMMARY, &summary)?;
    write_csv(&out.join("migration_tokens.csv"), "migration_tokens", TOKENS, &tokens)
}

pub fn run_migration(
    ckpt: &Checkpoint,
    bits_a: f64,
    bits_b: f64,
    top_frac: f64,
    out: &Path,
) -> Result<MigrationReport, BenchError> {
    create_dir(out)?;
    let x = eval_tokens(&ckpt.config)?;
    let fit = threshold_tokens(&ckpt.config)?;
    let rep = migration_report(ckpt, &x, fit.as_ref(), bits_a, bits_b, top_frac)?;
    write_migration(out, &rep)?;
    Ok(rep)
}

// ── report ─────────────────────────────────────────────────────────────────

/// Human-readable checkpoint summary.
pub fn describe(ckpt: &Checkpoint) -> String {
    let mut s = format!(
        "format: v{}\nlayers: {}\nslice_bits: {}\nseed: {}\n",
        crate::checkpoint::FORMAT_VERSION,
        ckpt.layers.len(),
        join(&ckpt.config.quant.slice_bits),
        ckpt.config.seed
    );
    for (i, l) in ckpt.layers.iter().enumerate() {
        let (o, inn) = l.stack.weight_shape;
        s += &format!(
            "layer {i}: {o}x{inn} groups={} clamps=[{}] thresholds=[{}] router_step={}/{}\n",
            l.stack.base_params().num_groups(),
            join(&l.stack.clamp_counts()),
            join(&l.params.router.thresholds),
            l.params.router.step,
            l.params.router.total_steps,
        );
    }
    s
}

pub fn default_checkpoint(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
