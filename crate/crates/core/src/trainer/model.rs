//! Sequential calibration over a stack of linear layers.
//!
//! Two activation streams run side by side: the full-precision one supplies
//! each layer's targets, the quantized one (hard-gated through every layer
//! already committed) supplies its inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{QuantError, Result};
use crate::matrix::Matrix;
use crate::qcore::ClipParams;
use crate::router::{silu, RouterState};
use crate::slicer::SliceStack;

use super::layer::{calibrate_layer, hard_forward, LayerReport, Stage2Options};
use super::objective::LayerSetup;
use super::{BudgetSchedule, LayerParams, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Identity,
    #[default]
    Silu,
}

impl Activation {
    pub fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Identity => m.clone(),
            Activation::Silu => m.map(silu),
        }
    }
}

/// Frozen pretrained weights (`out × in` each) with an activation between
/// consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStack {
    pub layers: Vec<Matrix>,
    pub activation: Activation,
}

impl LinearStack {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (i, w) in self.layers.iter().enumerate() {
            h = h.matmul_nt(w)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(&h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct CalibratedLayer {
    pub params: LayerParams,
    pub stack: SliceStack,
}

impl CalibratedLayer {
    /// Hard-gated output and the gates used.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        hard_forward(&self.params, &self.stack, x)
    }
}

#[derive(Debug, Clone)]
pub struct CalibratedModel {
    pub layers: Vec<CalibratedLayer>,
    pub reports: Vec<LayerReport>,
    pub activation: Activation,
    /// Per layer, the quantized-stream input of every calibration sample.
    pub quantized_inputs: Vec<Vec<Matrix>>,
}

impl CalibratedModel {
    /// Hard-gated forward through every layer at the stored thresholds.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?.0;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(&h);
            }
        }
        Ok(h)
    }
}

/// Router seed for `layer`, derived from the run seed.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(layer as u64)
}

fn make_batches(inputs: &[Matrix], targets: &[Matrix], batch_size: usize) -> Result<Vec<(Matrix, Matrix)>> {
    inputs
        .chunks(batch_size)
        .zip(targets.chunks(batch_size))
        .map(|(xs, ys)| {
            let xs: Vec<&Matrix> = xs.iter().collect();
            let ys: Vec<&Matrix> = ys.iter().collect();
            Ok((Matrix::vstack(&xs)?, Matrix::vstack(&ys)?))
        })
        .collect()
}

/// Calibrates every layer in order. `calib` holds one `seq × d` matrix per
/// sample; `cfg.nsamples` of them are used.
pub fn calibrate_model(
    model: &LinearStack,
    calib: &[Matrix],
    cfg: &TrainConfig,
    sched: &BudgetSchedule,
) -> Result<CalibratedModel> {
    cfg.validate()?;
    if model.layers.is_empty() {
        return Err(QuantError::Empty("model layers"));
    }
    if calib.len() < cfg.nsamples {
        return Err(QuantError::ShapeMismatch {
            what: "calibration samples",
            expected: cfg.nsamples,
            got: calib.len(),
        });
    }
    let mut h_fp: Vec<Matrix> = calib[..cfg.nsamples].to_vec();
    let mut h_q = h_fp.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut reports = Vec::with_capacity(model.layers.len());
    let mut quantized_inputs = Vec::with_capacity(model.layers.len());
    let n_routed = cfg.slice_bits.len() - 1;

    for (idx, w) in model.layers.iter().enumerate() {
        let last = idx + 1 == model.layers.len();
        let y_fp: Vec<Matrix> = h_fp.iter().map(|h| h.matmul_nt(w)).collect::<Result<_>>()?;
        let batches = make_batches(&h_q, &y_fp, cfg.batch_size)?;

        let setup = LayerSetup::new(w.clone(), &cfg.slice_bits, cfg.group_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(cfg.seed, idx));
        let init = LayerParams {
            clip: ClipParams::identity_init(setup.num_groups()),
            router: RouterState::init(w.cols(), n_routed, &mut rng),
        };
        let outcome = calibrate_layer(idx, &setup, &batches, init, cfg, sched, Stage2Options::default())
            .map_err(|e| QuantError::Layer {
                layer: idx,
                source: Box::new(e),
            })?;
        let layer = CalibratedLayer {
            params: outcome.params,
            stack: outcome.stack,
        };

        let y_q: Vec<Matrix> = h_q.iter().map(|h| layer.forward(h).map(|(y, _)| y)).collect::<Result<_>>()?;
        quantized_inputs.push(std::mem::take(&mut h_q));
        if !last {
            h_fp = y_fp.iter().map(|y| model.activation.apply(y)).collect();
            h_q = y_q.iter().map(|y| model.activation.apply(y)).collect();
        }
        layers.push(layer);
        reports.push(outcome.report);
    }
    Ok(CalibratedModel {
        layers,
        reports,
        activation: model.activation,
        quantized_inputs,
    })
}
