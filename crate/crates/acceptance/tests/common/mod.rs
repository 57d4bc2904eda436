#![allow(dead_code)]

use deskbc_core::data::{Frame, QuantileBinning, TruncatedNormalParams};
use deskbc_core::policy::{BackboneConfig, DecoderConfig, ModelConfig, PolicyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Bins fitted on synthetic mouse motion (10 per side, 21 total).
pub fn synthetic_binning(seed: u64) -> (QuantileBinning, TruncatedNormalParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nx = Normal::<f64>::new(0.0, 96.0).unwrap();
    let ny = Normal::<f64>::new(0.0, 22.0).unwrap();
    let mut dx: Vec<f64> = (0..4000).map(|_| nx.sample(&mut rng).round()).collect();
    let mut dy: Vec<f64> = (0..4000).map(|_| ny.sample(&mut rng).round()).collect();
    dx.extend([0.0; 400]);
    dy.extend([0.0; 400]);
    (QuantileBinning::fit(&dx, &dy, 10), TruncatedNormalParams::fit(&dx, &dy))
}

/// Small configuration for fast structural tests.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        frame_resolution: 16,
        history_length: 8,
        backbone: BackboneConfig { num_layers: 2, hidden_dim: 16, query_heads: 2, kv_heads: 2, mlp_ratio: 2 },
        action_decoder: DecoderConfig { num_layers: 1, query_heads: 2, kv_heads: 2 },
        encoder_channels: vec![4, 8],
        ..ModelConfig::default()
    }
}

pub fn model(config: ModelConfig, seed: u64) -> PolicyModel {
    let (b, tn) = synthetic_binning(7);
    PolicyModel::new(config, b, tn, seed).unwrap()
}

pub fn random_frames(n: usize, res: usize, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Frame::new(res, res, (0..3 * res * res).map(|_| rng.random()).collect()).unwrap())
        .collect()
}
