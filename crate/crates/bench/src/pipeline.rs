//! End-to-end calibration of the toy stack into a checkpoint.

use slicequant::trainer::{calibrate_model, LayerReport, LinearStack};
use slicequant::Matrix;

use crate::checkpoint::{Checkpoint, LayerRecord};
use crate::config::RunConfig;
use crate::data::{gen_calibset, gen_heldout, toy_model};
use crate::BenchError;

pub struct Calibration {
    pub checkpoint: Checkpoint,
    pub reports: Vec<LayerReport>,
}

pub fn calibrate(cfg: &RunConfig) -> Result<Calibration, BenchError> {
    cfg.validate()?;
    let calib = gen_calibset(cfg, cfg.seed);
    let model = toy_model(cfg, cfg.seed);
    let out = calibrate_model(&model, &calib, &cfg.train_config(), &cfg.schedule())?;
    let layers = model
        .layers
        .iter()
        .zip(out.layers)
        .map(|(w, l)| LayerRecord {
            weight: w.clone(),
            params: l.params,
            stack: l.stack,
        })
        .collect();
    Ok(Calibration {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            layers,
        },
        reports: out.reports,
    })
}

pub fn fp_model(ckpt: &Checkpoint) -> LinearStack {
    LinearStack {
        layers: ckpt.layers.iter().map(|l| l.weight.clone()).collect(),
        activation: ckpt.config.model.activation,
    }
}

fn pooled(samples: &[Matrix]) -> Result<Matrix, BenchError> {
    let refs: Vec<&Matrix> = samples.iter().collect();
    Ok(Matrix::vstack(&refs)?)
}

/// Pooled calibration tokens, regenerated from the checkpoint's config.
pub fn eval_tokens(cfg: &RunConfig) -> Result<Matrix, BenchError> {
    pooled(&gen_calibset(cfg, cfg.seed))
}

/// Tokens the elastic thresholds are fitted on: the calibration set itself
/// unless `calib.split` asks for a held-out set of that relative size.
pub fn threshold_tokens(cfg: &RunConfig) -> Result<Option<Matrix>, BenchError> {
    if cfg.calib.split == 0.0 {
        return Ok(None);
    }
    let n = ((cfg.calib.split * cfg.calib.nsamples as f64).round() as usize).max(1);
    Ok(Some(pooled(&gen_heldout(cfg, cfg.seed, n))?))
}
