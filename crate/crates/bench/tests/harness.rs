//! Evaluation, migration and checkpoint behaviour on a small calibrated stack.

use std::sync::OnceLock;

use slicequant::trainer::Activation;
use slicequant::Matrix;
use slicequant_bench::checkpoint::{Checkpoint, CheckpointError};
use slicequant_bench::commands::eval_targets;
use slicequant_bench::config::RunConfig;
use slicequant_bench::eval::{eval_sweep, migration_report};
use slicequant_bench::pipeline::{calibrate, eval_tokens, fp_model, threshold_tokens};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.d = 16;
    cfg.calib.nsamples = 8;
    cfg.calib.seq_len = 16;
    cfg.train.epochs = 2;
    cfg.seed = 3;
    cfg
}

fn checkpoint() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| calibrate(&small_config()).unwrap().checkpoint)
}

/// Forward pass with every layer's first `k` slices, all tokens alike.
fn prefix_forward(ckpt: &Checkpoint, x: &Matrix, k: usize) -> Matrix {
    let mut h = x.clone();
    for (i, l) in ckpt.layers.iter().enumerate() {
        h = h.matmul_nt(&l.stack.reconstruct(k).unwrap()).unwrap();
        if i + 1 < ckpt.layers.len() {
            h = Activation::Silu.apply(&h);
        }
    }
    h
}

fn mse(a: &Matrix, b: &Matrix) -> f64 {
    let d = a.sub(b).unwrap();
    d.as_slice().iter().map(|v| v * v).sum::<f64>() / d.as_slice().len() as f64
}

// ── Eval ───────────────────────────────────────────────────────────────────

#[test]
fn extreme_targets_match_prefix_reconstructions() {
    let ckpt = checkpoint();
    let x = eval_tokens(&ckpt.config).unwrap();
    let reference = fp_model(ckpt).forward(&x).unwrap();
    let sweep = eval_sweep(ckpt, &x, None, &[8.0, 2.0]).unwrap();
    let full = mse(&prefix_forward(ckpt, &x, 4), &reference);
    let msb = mse(&prefix_forward(ckpt, &x, 1), &reference);

    let top = &sweep.rows[0];
    assert_eq!(top.realized_bits, 8.0);
    assert!((top.output_mse - full).abs() <= 1e-12 * full, "{} vs {full}", top.output_mse);
    let bottom = &sweep.rows[1];
    assert_eq!(bottom.realized_bits, 2.0);
    assert!((bottom.output_mse - msb).abs() <= 1e-12 * msb, "{} vs {msb}", bottom.output_mse);
    assert!(full < msb);
}

#[test]
fn out_of_range_targets_become_notes() {
    let ckpt = checkpoint();
    let x = eval_tokens(&ckpt.config).unwrap();
    let sweep = eval_sweep(ckpt, &x, None, &[99.0, 4.0, 1.0]).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    assert_eq!(sweep.rows[0].target_bits, 4.0);
    assert_eq!(sweep.notes.len(), 2);
    assert!(sweep.notes[0].contains("99"));
}

#[test]
fn ratios_convert_to_budgets() {
    let cfg = RunConfig::default();
    assert_eq!(eval_targets(&cfg, &[3.0], &[0.0, 0.5, 1.0]), vec![3.0, 2.0, 5.0, 8.0]);
}

#[test]
fn held_out_thresholds_still_hit_targets() {
    let mut cfg = small_config();
    cfg.calib.split = 0.5;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        layers: checkpoint().layers.clone(),
    };
    let fit = threshold_tokens(&cfg).unwrap().expect("held-out tokens");
    let x = eval_tokens(&cfg).unwrap();
    assert_eq!(fit.rows(), x.rows() / 2);
    assert_ne!(fit.row(0), x.row(0));
    let sweep = eval_sweep(&ckpt, &x, Some(&fit), &[3.0, 5.0]).unwrap();
    for row in &sweep.rows {
        assert!((row.realized_bits - row.target_bits).abs() < 0.5, "{row:?}");
    }
}

// ── Migration ──────────────────────────────────────────────────────────────

#[test]
fn equal_budgets_overlap_fully() {
    let ckpt = checkpoint();
    let x = eval_tokens(&ckpt.config).unwrap();
    let rep = migration_report(ckpt, &x, None, 3.5, 3.5, 0.1).unwrap();
    assert_eq!(rep.static_overlap, 1.0);
    assert_eq!(rep.routed_overlap, 1.0);
}

#[test]
fn everything_is_an_outlier_at_full_fraction() {
    let ckpt = checkpoint();
    let x = eval_tokens(&ckpt.config).unwrap();
    let rep = migration_report(ckpt, &x, None, 2.99, 3.99, 1.0).unwrap();
    assert_eq!(rep.static_overlap, 1.0);
    assert_eq!(rep.routed_overlap, 1.0);
    assert_eq!(rep.static_bits, (3, 4));
}

// ── Checkpoint ─────────────────────────────────────────────────────────────

#[test]
fn checkpoint_round_trips_through_disk() {
    let ckpt = checkpoint();
    let dir = std::env::temp_dir().join(format!("slicequant-harness-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("c.mobi");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(&back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = checkpoint().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(CheckpointError::Truncated(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut old = bytes.clone();
    old[4..8].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&old),
        Err(CheckpointError::Version { found: 0, expected: 1 })
    ));
    let mut magic = bytes;
    magic[..4].copy_from_slice(b"NOPE");
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic(_))));
}
