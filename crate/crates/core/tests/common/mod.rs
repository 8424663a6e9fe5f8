#![allow(dead_code)]

use enzymeflow::config::{ModelConfig, Stage};
use enzymeflow::data::{canonical_record, EnzymeRecord};
use enzymeflow::engine::corrupt_sample;
use enzymeflow::network::FlowState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Narrow network so property tests stay fast.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        node_dim: 32,
        edge_dim: 16,
        blocks: 2,
        heads: 2,
        head_dim: 8,
        query_points: 3,
        value_points: 3,
        index_embed_dim: 16,
        time_embed_dim: 16,
        edge_proj_dim: 8,
        relpos_dim: 8,
        coevo_dim: 16,
        coevo_heads: 2,
        n_msa: 2,
        n_token: 16,
        init_seed: 11,
        ..ModelConfig::default()
    }
}

pub fn canonical_state(cfg: &ModelConfig, t: f64, seed: u64) -> (EnzymeRecord, FlowState) {
    let record = canonical_record(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = corrupt_sample(&record, t, Stage::Enzyme, &mut rng).unwrap();
    (record, state)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    max_abs_diff(a, b) / scale
}
