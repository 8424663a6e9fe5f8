//! Run configuration as plain `key = value` text with explicit defaults.

use crate::error::{Error, Result};
use crate::io_util::sha256_hex;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    Ligand,
    Enzyme,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Ligand => "ligand",
            Stage::Enzyme => "enzyme",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Stage::Backbone),
            "ligand" => Ok(Stage::Ligand),
            "enzyme" => Ok(Stage::Enzyme),
            _ => Err(Error::Config(format!(
                "unknown stage {s:?} (expected backbone, ligand or enzyme)"
            ))),
        }
    }
}

/// Network widths and feature ranges. Distances are in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub node_dim: usize,
    pub edge_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub query_points: usize,
    pub value_points: usize,
    pub index_embed_dim: usize,
    pub time_embed_dim: usize,
    pub edge_proj_dim: usize,
    pub relpos_dim: usize,
    pub dgram_bins: usize,
    pub dgram_min: f64,
    pub dgram_max: f64,
    pub rbf_bins: usize,
    pub rbf_min: f64,
    pub rbf_max: f64,
    pub mol3d_layers: usize,
    pub mol2d_layers: usize,
    pub coevo_dim: usize,
    pub coevo_heads: usize,
    pub coevo_layers: usize,
    pub n_msa: usize,
    pub n_token: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            node_dim: 64,
            edge_dim: 32,
            blocks: 3,
            heads: 4,
            head_dim: 16,
            query_points: 4,
            value_points: 4,
            index_embed_dim: 32,
            time_embed_dim: 32,
            edge_proj_dim: 16,
            relpos_dim: 16,
            dgram_bins: 22,
            dgram_min: 1e-3,
            dgram_max: 2.0,
            rbf_bins: 16,
            rbf_min: 0.0,
            rbf_max: 2.0,
            mol3d_layers: 2,
            mol2d_layers: 2,
            coevo_dim: 32,
            coevo_heads: 4,
            coevo_layers: 1,
            n_msa: 8,
            n_token: 128,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub w_trans: f64,
    pub w_rot: f64,
    pub w_aa: f64,
    pub w_ec: f64,
    pub w_coevo: f64,
    pub w_inter: f64,
    pub w_dist: f64,
    pub w_kd: f64,
    /// Surface level-set value and smoothing, in Å.
    pub gamma: f64,
    pub rho: f64,
    /// Distance-loss gate in model units.
    pub dist_threshold: f64,
    pub t_max: f64,
    pub divisor_floor: f64,
    /// Keep the interaction and distance terms active in the enzyme stage.
    pub enzyme_keeps_ligand_terms: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_trans: 1.0,
            w_rot: 1.0,
            w_aa: 1.0,
            w_ec: 1.0,
            w_coevo: 1.0,
            w_inter: 1.0,
            w_dist: 1.0,
            w_kd: 1.0,
            gamma: 6.0,
            rho: 2.0,
            dist_threshold: 0.8,
            t_max: 0.98,
            divisor_floor: 0.05,
            enzyme_keeps_ligand_terms: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Enzyme,
            steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 50,
            n_samples: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ ),* $(,)?) => {
        impl RunConfig {
            /// Sets one key without cross-field validation. Unknown keys are
            /// configuration errors.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => { self.$($field).+ = parse_value(key, value)?; } )*
                    _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
                }
                Ok(())
            }

            /// Every key with its current value, in a fixed order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( ($key, self.$($field).+.to_string()) ),* ]
            }
        }
    };
}

config_keys! {
    "model.node_dim" => model.node_dim,
    "model.edge_dim" => model.edge_dim,
    "model.blocks" => model.blocks,
    "model.heads" => model.heads,
    "model.head_dim" => model.head_dim,
    "model.query_points" => model.query_points,
    "model.value_points" => model.value_points,
    "model.index_embed_dim" => model.index_embed_dim,
    "model.time_embed_dim" => model.time_embed_dim,
    "model.edge_proj_dim" => model.edge_proj_dim,
    "model.relpos_dim" => model.relpos_dim,
    "model.dgram_bins" => model.dgram_bins,
    "model.dgram_min" => model.dgram_min,
    "model.dgram_max" => model.dgram_max,
    "model.rbf_bins" => model.rbf_bins,
    "model.rbf_min" => model.rbf_min,
    "model.rbf_max" => model.rbf_max,
    "model.mol3d_layers" => model.mol3d_layers,
    "model.mol2d_layers" => model.mol2d_layers,
    "model.coevo_dim" => model.coevo_dim,
    "model.coevo_heads" => model.coevo_heads,
    "model.coevo_layers" => model.coevo_layers,
    "model.n_msa" => model.n_msa,
    "model.n_token" => model.n_token,
    "model.init_seed" => model.init_seed,
    "loss.w_trans" => loss.w_trans,
    "loss.w_rot" => loss.w_rot,
    "loss.w_aa" => loss.w_aa,
    "loss.w_ec" => loss.w_ec,
    "loss.w_coevo" => loss.w_coevo,
    "loss.w_inter" => loss.w_inter,
    "loss.w_dist" => loss.w_dist,
    "loss.w_kd" => loss.w_kd,
    "loss.gamma" => loss.gamma,
    "loss.rho" => loss.rho,
    "loss.dist_threshold" => loss.dist_threshold,
    "loss.t_max" => loss.t_max,
    "loss.divisor_floor" => loss.divisor_floor,
    "loss.enzyme_keeps_ligand_terms" => loss.enzyme_keeps_ligand_terms,
    "train.stage" => train.stage,
    "train.steps" => train.steps,
    "train.batch_size" => train.batch_size,
    "train.lr" => train.lr,
    "train.beta1" => train.beta1,
    "train.beta2" => train.beta2,
    "train.eps" => train.eps,
    "train.seed" => train.seed,
    "sample.steps" => sample.steps,
    "sample.n_samples" => sample.n_samples,
    "sample.seed" => sample.seed,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Digest of the full configuration.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Digest of the keys that determine parameter shapes and values at
    /// initialization; stored in checkpoints.
    pub fn model_hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("model."))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        sha256_hex(text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.node_dim", m.node_dim),
            ("model.edge_dim", m.edge_dim),
            ("model.heads", m.heads),
            ("model.head_dim", m.head_dim),
            ("model.query_points", m.query_points),
            ("model.value_points", m.value_points),
            ("model.index_embed_dim", m.index_embed_dim),
            ("model.time_embed_dim", m.time_embed_dim),
            ("model.edge_proj_dim", m.edge_proj_dim),
            ("model.relpos_dim", m.relpos_dim),
            ("model.coevo_dim", m.coevo_dim),
            ("model.coevo_heads", m.coevo_heads),
            ("model.n_msa", m.n_msa),
            ("model.n_token", m.n_token),
            ("train.batch_size", self.train.batch_size),
            ("sample.n_samples", self.sample.n_samples),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !m.node_dim.is_multiple_of(m.heads) {
            return Err(Error::Config("model.node_dim must be divisible by model.heads".into()));
        }
        if !m.coevo_dim.is_multiple_of(m.coevo_heads) {
            return Err(Error::Config("model.coevo_dim must be divisible by model.coevo_heads".into()));
        }
        if m.dgram_bins < 2 || m.rbf_bins < 2 {
            return Err(Error::Config("distance feature bins must be at least 2".into()));
        }
        if m.dgram_min >= m.dgram_max || m.rbf_min >= m.rbf_max {
            return Err(Error::Config("distance feature ranges must be increasing".into()));
        }
        if self.sample.steps < 2 {
            return Err(Error::Config("sample.steps must be at least 2".into()));
        }
        let l = &self.loss;
        if !(0.0..1.0).contains(&l.t_max) || !(l.divisor_floor > 0.0 && l.divisor_floor <= 1.0) {
            return Err(Error::Config("loss.t_max must lie in [0,1) and loss.divisor_floor in (0,1]".into()));
        }
        let weights = [l.w_trans, l.w_rot, l.w_aa, l.w_ec, l.w_coevo, l.w_inter, l.w_dist, l.w_kd];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("train.lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}
