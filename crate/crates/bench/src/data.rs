//! Synthetic calibration tokens and the toy linear stack.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slicequant::trainer::{Activation, LinearStack};
use slicequant::Matrix;

use crate::config::RunConfig;

const CALIB_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Channels scaled up as outliers, chosen by a seeded shuffle.
pub fn outlier_channels(d: usize, frac: f64, seed: u64) -> Vec<usize> {
    let count = (frac * d as f64).round() as usize;
    let mut idx: Vec<usize> = (0..d).collect();
    idx.shuffle(&mut rng_for(seed, CALIB_STREAM + 100));
    let mut chosen = idx[..count.min(d)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// `nsamples` sequences of `seq_len × d` standard-normal tokens with the
/// outlier channels multiplied by `outlier_scale`.
pub fn gen_calibset(cfg: &RunConfig, seed: u64) -> Vec<Matrix> {
    gen_tokens(cfg, seed, CALIB_STREAM, cfg.calib.nsamples)
}

/// Extra samples from the same distribution (same outlier channels) that
/// never enter calibration.
pub fn gen_heldout(cfg: &RunConfig, seed: u64, nsamples: usize) -> Vec<Matrix> {
    gen_tokens(cfg, seed, HELDOUT_STREAM, nsamples)
}

fn gen_tokens(cfg: &RunConfig, seed: u64, stream: u64, nsamples: usize) -> Vec<Matrix> {
    let d = cfg.model.d;
    let mut scale = vec![1.0; d];
    for c in outlier_channels(d, cfg.calib.outlier_frac, seed) {
        scale[c] = cfg.calib.outlier_scale;
    }
    let mut rng = rng_for(seed, stream);
    (0..nsamples)
        .map(|_| {
            Matrix::from_fn(cfg.calib.seq_len, d, |_, c| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale[c]
            })
        })
        .collect()
}

/// `depth` square layers with entries drawn from `N(0, 1/d)`.
pub fn toy_model(cfg: &RunConfig, seed: u64) -> LinearStack {
    let d = cfg.model.d;
    let std = 1.0 / (d as f64).sqrt();
    let mut rng = rng_for(seed, MODEL_STREAM);
    let layers = (0..cfg.model.depth)
        .map(|_| {
            Matrix::from_fn(d, d, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
        })
        .collect();
    LinearStack {
        layers,
        activation: cfg.model.activation,
    }
}

pub fn parse_activation(s: &str) -> Option<Activation> {
    match s {
        "silu" => Some(Activation::Silu),
        "identity" | "none" => Some(Activation::Identity),
        _ => None,
    }
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Silu => "silu",
        Activation::Identity => "identity",
    }
}
