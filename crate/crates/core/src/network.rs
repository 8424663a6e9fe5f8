//! The conditional vector-field network.
//!
//! Residue nodes are embedded from index, time and amino-acid state; pair
//! edges from node projections, relative positions and distograms. The
//! substrate (3D) and product (2D) embeddings are fused into the nodes by
//! cross-attention. A stack of invariant-point-attention blocks then updates
//! node features and rigid frames, attending over residues and substrate
//! atoms together. Heads read out amino-acid, EC and co-evolution logits,
//! affinity, and backbone atoms of the predicted clean frames.

use crate::coevolution::{CoEvoFormer, CoEvoMatrix};
use crate::config::ModelConfig;
use crate::discrete::{AMINO_ACID_SPACE, COEVO_SPACE, EC_SPACE};
use crate::error::{Error, Result};
use crate::geometry::{
    so3_log_unchecked, RigidTransform, Rotation, BACKBONE_TEMPLATE_ANGSTROM, MODEL_UNITS_PER_ANGSTROM,
};
use crate::molecule::{rbf_featurize, Molecule2D, Molecule3D, MolEncoder2D, MolEncoder3D, RbfConfig};
use crate::nn::{Bound, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::tape::{AttentionMask, AttentionShape, Tape, Var};
use crate::tensor::Tensor;
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INDEX_MAX_LEN: f64 = 2056.0;
const TIME_MAX_POSITIONS: f64 = 10000.0;

/// Sinusoidal embedding of `t·10000` with log-spaced frequencies: the sine
/// block, then the cosine block, then one zero if `dim` is odd.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    if half == 0 {
        return out;
    }
    let step = if half > 1 {
        TIME_MAX_POSITIONS.ln() / (half - 1) as f64
    } else {
        0.0
    };
    for k in 0..half {
        let arg = t * TIME_MAX_POSITIONS * (-(k as f64) * step).exp();
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Sinusoidal embedding of a (possibly negative) residue offset: sines then
/// cosines of `i·π / 2056^(2k/dim)`.
pub fn index_embedding(i: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let arg = i * std::f64::consts::PI / INDEX_MAX_LEN.powf(2.0 * k as f64 / dim as f64);
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Pairwise one-hot distance bins. Bin b fires iff lower[b] < d < upper[b],
/// lowers evenly spaced on [min_bin, max_bin], the last upper 1e8.
/// Returns an `(N·N) × num_bins` tensor with row `i·N + j`.
pub fn distogram(positions: &[Vector3<f64>], min_bin: f64, max_bin: f64, num_bins: usize) -> Tensor {
    assert!(num_bins >= 2, "distogram needs at least two bins");
    let n = positions.len();
    let lower: Vec<f64> = (0..num_bins)
        .map(|b| min_bin + (max_bin - min_bin) * b as f64 / (num_bins - 1) as f64)
        .collect();
    let upper: Vec<f64> = (0..num_bins)
        .map(|b| if b + 1 < num_bins { lower[b + 1] } else { 1e8 })
        .collect();
    let mut out = Tensor::zeros(n * n, num_bins);
    for i in 0..n {
        for j in 0..n {
            let d = (positions[i] - positions[j]).norm();
            for b in 0..num_bins {
                if d > lower[b] && d < upper[b] {
                    out.set(i * n + j, b, 1.0);
                }
            }
        }
    }
    out
}

/// A corrupted sample at time `t`. Translations are in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub frames: Vec<RigidTransform>,
    pub aatypes: Vec<usize>,
    pub ec: Option<usize>,
    pub coevo: Option<CoEvoMatrix>,
    pub res_mask: Vec<bool>,
    /// Prior translations drawn at corruption time.
    pub trans_0: Vec<Vector3<f64>>,
    /// Prior rotations drawn at corruption time.
    pub rots_0: Vec<Rotation>,
}

impl FlowState {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::Shape("flow state has no residues".into()));
        }
        if self.aatypes.len() != n || self.res_mask.len() != n {
            return Err(Error::Shape(format!(
                "{n} frames, {} amino-acid states, {} mask entries",
                self.aatypes.len(),
                self.res_mask.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Domain { op: "forward", t: self.t });
        }
        if let Some(&bad) = self.aatypes.iter().find(|&&a| a > AMINO_ACID_SPACE.mask_index()) {
            return Err(Error::InvalidState {
                state: bad,
                num_real: AMINO_ACID_SPACE.num_real(),
            });
        }
        if let Some(ec) = self.ec {
            if ec > EC_SPACE.mask_index() {
                return Err(Error::InvalidState {
                    state: ec,
                    num_real: EC_SPACE.num_real(),
                });
            }
        }
        if let Some(c) = &self.coevo {
            if c.rows != cfg.n_msa || c.cols != cfg.n_token {
                return Err(Error::Shape(format!(
                    "co-evolution grid is {}×{}, configuration expects {}×{}",
                    c.rows, c.cols, cfg.n_msa, cfg.n_token
                )));
            }
        }
        Ok(())
    }
}

/// Conditioning molecules for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    pub substrate: Option<&'a Molecule3D>,
    pub product: Option<&'a Molecule2D>,
}

/// Network outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub frames: Vec<RigidTransform>,
    /// N × 20.
    pub aa_logits: Tensor,
    pub ec_logits: Option<Vec<f64>>,
    /// (N_MSA·N_token) × 64, row-major over cells.
    pub coevo_logits: Option<Tensor>,
    pub affinity: Option<f64>,
    /// N × 12: N, CA, C, O coordinates in model units.
    pub atoms: Tensor,
}

/// Network outputs as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// N × 9 row-major rotations.
    pub rots: Var,
    /// N × 3.
    pub trans: Var,
    pub aa_logits: Var,
    pub ec_logits: Option<Var>,
    pub coevo_logits: Option<Var>,
    pub affinity: Option<Var>,
    pub atoms: Var,
}

pub fn rotation_rows(rots: impl Iterator<Item = Rotation>) -> Tensor {
    let rows: Vec<f64> = rots
        .flat_map(|r| {
            let m = *r.matrix();
            (0..9).map(move |k| m[(k / 3, k % 3)])
        })
        .collect();
    let n = rows.len() / 9;
    Tensor::from_vec(n, 9, rows)
}

pub fn rotation_from_row(row: &[f64]) -> Rotation {
    Rotation::from_matrix_unchecked(Matrix3::from_row_slice(row))
}

fn check_finite(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage: stage.to_string(),
        })
    }
}

fn weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone)]
struct IpaBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    ligand_k: Linear,
    ligand_v: Linear,
    q_points: Linear,
    k_points: Linear,
    v_points: Linear,
    pair_bias: Linear,
    ligand_bias: Linear,
    head_weights: ParamId,
    output: Linear,
    norm: LayerNorm,
    transition: Mlp,
    transition_norm: LayerNorm,
    frame_update: Linear,
}

/// Module layout and the parameter store it indexes.
#[derive(Debug, Clone)]
pub struct VectorFieldNetwork {
    pub config: ModelConfig,
    pub params: ParamStore,
    node_embed: Mlp,
    node_norm: LayerNorm,
    edge_proj: Linear,
    edge_embed: Mlp,
    edge_norm: LayerNorm,
    substrate_encoder: MolEncoder3D,
    substrate_attention: MultiHeadAttention,
    substrate_norm: LayerNorm,
    product_encoder: MolEncoder2D,
    product_attention: MultiHeadAttention,
    product_norm: LayerNorm,
    blocks: Vec<IpaBlock>,
    aa_head: Mlp,
    ec_embedding: ParamId,
    ec_attention: MultiHeadAttention,
    ec_head: Mlp,
    coevo_encoder: CoEvoFormer,
    coevo_attention: MultiHeadAttention,
    coevo_head: Linear,
    affinity_head: Mlp,
}

impl VectorFieldNetwork {
    /// Builds the modules and initializes parameters from `config.init_seed`.
    pub fn new(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let c = config;
        let d = c.node_dim;
        let e = c.edge_dim;
        let h = c.heads;
        let node_in = c.index_embed_dim + c.time_embed_dim + AMINO_ACID_SPACE.num_states() + 1 + AMINO_ACID_SPACE.num_real();
        let node_embed = Mlp::new(s, rng, "node_embed", &[node_in, d, d], 1.0);
        let node_norm = LayerNorm::new(s, "node_norm", d);
        let edge_proj = Linear::new(s, rng, "edge_proj", d, c.edge_proj_dim, true, 1.0);
        let edge_in = 2 * c.edge_proj_dim + c.relpos_dim + 2 * c.dgram_bins;
        let edge_embed = Mlp::new(s, rng, "edge_embed", &[edge_in, e, e], 1.0);
        let edge_norm = LayerNorm::new(s, "edge_norm", e);
        let rbf = RbfConfig {
            d_min: c.rbf_min,
            d_max: c.rbf_max,
            bins: c.rbf_bins,
        };
        let substrate_encoder = MolEncoder3D::new(s, rng, "substrate", d, rbf, c.mol3d_layers);
        let substrate_attention = MultiHeadAttention::new(s, rng, "substrate_fuse", d, d, d, d, h);
        let substrate_norm = LayerNorm::new(s, "substrate_fuse_norm", d);
        let product_encoder = MolEncoder2D::new(s, rng, "product", d, h, c.mol2d_layers);
        let product_attention = MultiHeadAttention::new(s, rng, "product_fuse", d, d, d, d, h);
        let product_norm = LayerNorm::new(s, "product_fuse_norm", d);
        let hc = h * c.head_dim;
        let blocks = (0..c.blocks)
            .map(|b| {
                let n = format!("trunk{b}");
                let out_in = hc + h * c.value_points * 4;
                IpaBlock {
                    q: Linear::new(s, rng, &format!("{n}.q"), d, hc, false, 1.0),
                    k: Linear::new(s, rng, &format!("{n}.k"), d, hc, false, 1.0),
                    v: Linear::new(s, rng, &format!("{n}.v"), d, hc, false, 1.0),
                    ligand_k: Linear::new(s, rng, &format!("{n}.ligand_k"), d, hc, false, 1.0),
                    ligand_v: Linear::new(s, rng, &format!("{n}.ligand_v"), d, hc, false, 1.0),
                    q_points: Linear::new(s, rng, &format!("{n}.q_points"), d, h * c.query_points * 3, true, 1.0),
                    k_points: Linear::new(s, rng, &format!("{n}.k_points"), d, h * c.query_points * 3, true, 1.0),
                    v_points: Linear::new(s, rng, &format!("{n}.v_points"), d, h * c.value_points * 3, true, 1.0),
                    pair_bias: Linear::new(s, rng, &format!("{n}.pair_bias"), e, h, false, 1.0),
                    ligand_bias: Linear::new(s, rng, &format!("{n}.ligand_bias"), c.rbf_bins, h, false, 1.0),
                    // softplus(0.5413) ≈ 1
                    head_weights: s.add(format!("{n}.head_weights"), Tensor::filled(1, h, 0.5413)),
                    output: Linear::new(s, rng, &format!("{n}.output"), out_in, d, true, 1.0),
                    norm: LayerNorm::new(s, &format!("{n}.norm"), d),
                    transition: Mlp::new(s, rng, &format!("{n}.transition"), &[d, d, d], 1.0),
                    transition_norm: LayerNorm::new(s, &format!("{n}.transition_norm"), d),
                    frame_update: Linear::new(s, rng, &format!("{n}.frame_update"), d, 6, true, 0.1),
                }
            })
            .collect();
        let aa_head = Mlp::new(s, rng, "aa_head", &[d, d, AMINO_ACID_SPACE.num_real()], 1.0);
        let ec_embedding = s.add(
            "ec_embedding",
            crate::nn::uniform_tensor(rng, EC_SPACE.num_states(), d, 1.0),
        );
        let ec_attention = MultiHeadAttention::new(s, rng, "ec_attention", d, d, d, d, h);
        let ec_head = Mlp::new(s, rng, "ec_head", &[d, d, EC_SPACE.num_real()], 1.0);
        let dc = c.coevo_dim;
        let coevo_encoder = CoEvoFormer::new(s, rng, "coevo", dc, c.coevo_heads, c.coevo_layers);
        let coevo_attention = MultiHeadAttention::new(s, rng, "coevo_attention", dc, d, dc, dc, c.coevo_heads);
        let coevo_head = Linear::new(s, rng, "coevo_head", dc, COEVO_SPACE.num_real(), true, 1.0);
        let affinity_head = Mlp::new(s, rng, "affinity_head", &[2 * d, d, 1], 1.0);
        VectorFieldNetwork {
            config: config.clone(),
            params: store,
            node_embed,
            node_norm,
            edge_proj,
            edge_embed,
            edge_norm,
            substrate_encoder,
            substrate_attention,
            substrate_norm,
            product_encoder,
            product_attention,
            product_norm,
            blocks,
            aa_head,
            ec_embedding,
            ec_attention,
            ec_head,
            coevo_encoder,
            coevo_attention,
            coevo_head,
            affinity_head,
        }
    }

    /// Evaluates the network without recording gradients.
    pub fn predict(
        &self,
        state: &FlowState,
        cond: Conditioning<'_>,
        self_condition: Option<&Prediction>,
    ) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let vars = self.forward(&mut tape, &p, state, cond, self_condition)?;
        Ok(read_prediction(&tape, &vars))
    }

    /// Records the forward pass on `tape` with parameters bound as `p`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        state: &FlowState,
        cond: Conditioning<'_>,
        self_condition: Option<&Prediction>,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        state.validate(c)?;
        let n = state.len();
        let res_w = weights(&state.res_mask);
        let trans_t: Vec<Vector3<f64>> = state.frames.iter().map(|f| f.trans).collect();
        if let Some(sc) = self_condition {
            if sc.frames.len() != n || sc.aa_logits.rows() != n {
                return Err(Error::Shape("self-conditioning prediction length".into()));
            }
        }

        // (a) nodes
        let time = timestep_embedding(state.t, c.time_embed_dim);
        let aa_states = AMINO_ACID_SPACE.num_states();
        let aa_real = AMINO_ACID_SPACE.num_real();
        let node_in = c.index_embed_dim + c.time_embed_dim + aa_states + 1 + aa_real;
        let mut node_features = Tensor::zeros(n, node_in);
        for i in 0..n {
            let row = node_features.row_mut(i);
            let mut o = 0;
            row[..c.index_embed_dim].copy_from_slice(&index_embedding(i as f64, c.index_embed_dim));
            o += c.index_embed_dim;
            row[o..o + c.time_embed_dim].copy_from_slice(&time);
            o += c.time_embed_dim;
            row[o + state.aatypes[i]] = 1.0;
            o += aa_states;
            row[o] = res_w[i];
            o += 1;
            if let Some(sc) = self_condition {
                let logits = sc.aa_logits.row(i);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for k in 0..aa_real {
                    row[o + k] = (logits[k] - max).exp() / total;
                }
            }
        }
        let x = tape.constant(node_features);
        let s = self.node_embed.forward(tape, p, x);
        let s = self.node_norm.forward(tape, p, s);
        let mut s = tape.mask_rows(s, &res_w);
        check_finite(tape, s, "node_embedding")?;

        // (b) edges
        let src: Vec<usize> = (0..n * n).map(|e| e / n).collect();
        let dst: Vec<usize> = (0..n * n).map(|e| e % n).collect();
        let proj = self.edge_proj.forward(tape, p, s);
        let pi = tape.gather_rows(proj, &src);
        let pj = tape.gather_rows(proj, &dst);
        let relpos = Tensor::from_fn(n * n, c.relpos_dim, |e, k| {
            index_embedding(src[e] as f64 - dst[e] as f64, c.relpos_dim)[k]
        });
        let relpos = tape.constant(relpos);
        let dgram = tape.constant(distogram(&trans_t, c.dgram_min, c.dgram_max, c.dgram_bins));
        let sc_dgram = match self_condition {
            Some(sc) => {
                let pos: Vec<Vector3<f64>> = sc.frames.iter().map(|f| f.trans).collect();
                distogram(&pos, c.dgram_min, c.dgram_max, c.dgram_bins)
            }
            None => Tensor::zeros(n * n, c.dgram_bins),
        };
        let sc_dgram = tape.constant(sc_dgram);
        let edge_in = tape.concat_cols(&[pi, pj, relpos, dgram, sc_dgram]);
        let z = self.edge_embed.forward(tape, p, edge_in);
        let z = self.edge_norm.forward(tape, p, z);
        let edge_w: Vec<f64> = (0..n * n).map(|e| res_w[src[e]] * res_w[dst[e]]).collect();
        let z = tape.mask_rows(z, &edge_w);
        check_finite(tape, z, "edge_embedding")?;

        // (c) substrate
        let ligand = match cond.substrate {
            Some(mol) => {
                let h = self.substrate_encoder.forward(tape, p, mol)?;
                check_finite(tape, h, "substrate_encoder")?;
                let keys = AttentionMask {
                    keys: Some(mol.atom_mask.clone()),
                    pairs: None,
                };
                let a = self.substrate_attention.forward(tape, p, s, h, 1, n, mol.len(), &keys);
                let sum = tape.add(s, a);
                let out = self.substrate_norm.forward(tape, p, sum);
                s = tape.mask_rows(out, &res_w);
                Some((mol, h))
            }
            None => None,
        };

        // (d) product
        if let Some(mol) = cond.product {
            // keys: atom states plus the pooled graph vector
            let (atoms, pooled) = self.product_encoder.encode(tape, p, mol)?;
            let g = tape.concat_rows(&[atoms, pooled]);
            check_finite(tape, g, "product_encoder")?;
            let mut key_mask = mol.atom_mask.clone();
            key_mask.push(true);
            let keys = AttentionMask {
                keys: Some(key_mask),
                pairs: None,
            };
            let a = self.product_attention.forward(tape, p, s, g, 1, n, mol.len() + 1, &keys);
            let sum = tape.add(s, a);
            let out = self.product_norm.forward(tape, p, sum);
            s = tape.mask_rows(out, &res_w);
        }

        // (e) residue–substrate distance features, from the input positions
        let ligand_rbf = ligand.map(|(mol, _)| {
            let l = mol.len();
            let mut t = Tensor::zeros(n * l, c.rbf_bins);
            for i in 0..n {
                for j in 0..l {
                    let d = (trans_t[i] - mol.coords[j]).norm();
                    t.row_mut(i * l + j)
                        .copy_from_slice(&rbf_featurize(d, c.rbf_min, c.rbf_max, c.rbf_bins));
                }
            }
            tape.constant(t)
        });

        // (f) trunk
        let mut rots = tape.constant(rotation_rows(state.frames.iter().map(|f| f.rot)));
        let mut trans = tape.constant(Tensor::from_fn(n, 3, |i, k| trans_t[i][k]));
        for (b, block) in self.blocks.iter().enumerate() {
            let lig = ligand.map(|(mol, h)| (mol, h, ligand_rbf.expect("rbf built with ligand")));
            let (s_new, r_new, x_new) = self.ipa_block(tape, p, block, s, z, rots, trans, lig, &state.res_mask);
            s = s_new;
            rots = r_new;
            trans = x_new;
            check_finite(tape, s, &format!("trunk_block{b}"))?;
            check_finite(tape, trans, &format!("trunk_block{b}"))?;
        }

        // (g) heads
        let aa = self.aa_head.forward(tape, p, s);
        let aa_logits = tape.mask_rows(aa, &res_w);

        let node_keys = AttentionMask {
            keys: Some(state.res_mask.clone()),
            pairs: None,
        };
        let ec_logits = state.ec.map(|ec| {
            let q = tape.gather_rows(p.var(self.ec_embedding), &[ec]);
            let a = self.ec_attention.forward(tape, p, q, s, 1, 1, n, &node_keys);
            self.ec_head.forward(tape, p, a)
        });

        let coevo_logits = match &state.coevo {
            Some(grid) => Some(self.coevo_head_forward(tape, p, grid, s, n, &node_keys)?),
            None => None,
        };

        let affinity = ligand.map(|(mol, h)| {
            let count = res_w.iter().sum::<f64>().max(1.0);
            let pool = tape.constant(Tensor::from_vec(1, n, res_w.iter().map(|w| w / count).collect()));
            let node_pool = tape.matmul(pool, s);
            let lw = weights(&mol.atom_mask);
            let lcount = lw.iter().sum::<f64>().max(1.0);
            let lpool = tape.constant(Tensor::from_vec(1, mol.len(), lw.iter().map(|w| w / lcount).collect()));
            let lig_pool = tape.matmul(lpool, h);
            let both = tape.concat_cols(&[node_pool, lig_pool]);
            self.affinity_head.forward(tape, p, both)
        });

        let template = Tensor::from_fn(n, 12, |_, k| {
            BACKBONE_TEMPLATE_ANGSTROM[k / 3][k % 3] * MODEL_UNITS_PER_ANGSTROM
        });
        let template = tape.constant(template);
        let atoms = tape.frame_apply(rots, trans, template, false);

        for (v, name) in [(aa_logits, "aa_head"), (atoms, "atoms")] {
            check_finite(tape, v, name)?;
        }
        for (v, name) in [(ec_logits, "ec_head"), (coevo_logits, "coevo_head"), (affinity, "affinity_head")] {
            if let Some(v) = v {
                check_finite(tape, v, name)?;
            }
        }
        Ok(ForwardVars {
            rots,
            trans,
            aa_logits,
            ec_logits,
            coevo_logits,
            affinity,
            atoms,
        })
    }

    fn coevo_head_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        grid: &CoEvoMatrix,
        s: Var,
        n: usize,
        node_keys: &AttentionMask,
    ) -> Result<Var> {
        let (m_rows, n_cols) = (grid.rows, grid.cols);
        let enc = self.coevo_encoder.forward(tape, p, grid)?;
        // mean over unmasked rows per token column
        let to_columns: Vec<usize> = (0..n_cols * m_rows)
            .map(|i| (i % m_rows) * n_cols + i / m_rows)
            .collect();
        let mut col_w = vec![0.0; n_cols * m_rows];
        for t in 0..n_cols {
            let count = (0..m_rows).filter(|&m| grid.cell_mask[m * n_cols + t]).count();
            for m in 0..m_rows {
                if grid.cell_mask[m * n_cols + t] {
                    col_w[t * m_rows + m] = 1.0 / count as f64;
                }
            }
        }
        let by_col = tape.gather_rows(enc, &to_columns);
        let by_col = tape.mask_rows(by_col, &col_w);
        let pooled = tape.group_sum_rows(by_col, m_rows);
        let context = self.coevo_attention.forward(tape, p, pooled, s, 1, n_cols, n, node_keys);
        let per_cell: Vec<usize> = (0..m_rows * n_cols).map(|i| i % n_cols).collect();
        let context = tape.gather_rows(context, &per_cell);
        let x = tape.add(enc, context);
        let x = tape.silu(x);
        let logits = self.coevo_head.forward(tape, p, x);
        Ok(tape.mask_rows(logits, &weights(&grid.cell_mask)))
    }

    #[allow(clippy::too_many_arguments)]
    fn ipa_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        block: &IpaBlock,
        s: Var,
        z: Var,
        rots: Var,
        trans: Var,
        ligand: Option<(&Molecule3D, Var, Var)>,
        res_mask: &[bool],
    ) -> (Var, Var, Var) {
        let c = &self.config;
        let n = res_mask.len();
        let h = c.heads;
        let cd = c.head_dim;
        let qp = c.query_points;
        let vp = c.value_points;
        let l = ligand.map_or(0, |(mol, _, _)| mol.len());
        let m = n + l;
        let w_l = (1.0f64 / 3.0).sqrt();
        let w_c = (2.0 / (9.0 * qp as f64)).sqrt();

        // per-head point weights, tiled to (rows·H) × 1
        let gamma = tape.softplus(p.var(block.head_weights));
        let gamma = tape.reshape(gamma, h, 1);
        let tile = |rows: usize| -> Vec<usize> { (0..rows * h).map(|r| r % h).collect() };
        let gamma_q = tape.gather_rows(gamma, &tile(n));

        // queries
        let q = block.q.forward(tape, p, s);
        let q = tape.reshape(q, n * h, cd);
        let q = tape.scale(q, w_l / (cd as f64).sqrt());
        let q_pts = block.q_points.forward(tape, p, s);
        let q_pts = tape.frame_apply(rots, trans, q_pts, false);
        let q_pts = tape.reshape(q_pts, n * h, 3 * qp);
        let q_pts = tape.mul_col(q_pts, gamma_q);
        let q_pts = tape.scale(q_pts, w_l * w_c);
        let q_last = tape.scale(gamma_q, -0.5 * w_l * w_c);
        let q_aug = tape.concat_cols(&[q, q_pts, q_last]);
        let q_aug = tape.reshape(q_aug, n, h * (cd + 3 * qp + 1));

        // keys and values over residues, then substrate atoms
        let mut k_s = block.k.forward(tape, p, s);
        let mut v_s = block.v.forward(tape, p, s);
        let k_local = block.k_points.forward(tape, p, s);
        let mut k_pts = tape.frame_apply(rots, trans, k_local, false);
        let v_local = block.v_points.forward(tape, p, s);
        let mut v_pts = tape.frame_apply(rots, trans, v_local, false);
        let mut key_mask = res_mask.to_vec();
        if let Some((mol, hl, _)) = ligand {
            let lk = block.ligand_k.forward(tape, p, hl);
            let lv = block.ligand_v.forward(tape, p, hl);
            k_s = tape.concat_rows(&[k_s, lk]);
            v_s = tape.concat_rows(&[v_s, lv]);
            let lk_pts = Tensor::from_fn(l, h * qp * 3, |j, k| mol.coords[j][k % 3]);
            let lv_pts = Tensor::from_fn(l, h * vp * 3, |j, k| mol.coords[j][k % 3]);
            let lk_pts = tape.constant(lk_pts);
            let lv_pts = tape.constant(lv_pts);
            k_pts = tape.concat_rows(&[k_pts, lk_pts]);
            v_pts = tape.concat_rows(&[v_pts, lv_pts]);
            key_mask.extend_from_slice(&mol.atom_mask);
        }
        let k_s = tape.reshape(k_s, m * h, cd);
        let k_pts = tape.reshape(k_pts, m * h, 3 * qp);
        let k_sq = tape.square(k_pts);
        let k_norm = tape.sum_cols(k_sq);
        let k_aug = tape.concat_cols(&[k_s, k_pts, k_norm]);
        let k_aug = tape.reshape(k_aug, m, h * (cd + 3 * qp + 1));
        let v_s = tape.reshape(v_s, m * h, cd);
        let v_pts = tape.reshape(v_pts, m * h, 3 * vp);
        let v_aug = tape.concat_cols(&[v_s, v_pts]);
        let v_aug = tape.reshape(v_aug, m, h * (cd + 3 * vp));

        // pair bias: row i·M + j
        let rr = block.pair_bias.forward(tape, p, z);
        let bias = match ligand {
            Some((_, _, rbf)) => {
                let rl = block.ligand_bias.forward(tape, p, rbf);
                let both = tape.concat_rows(&[rr, rl]);
                let index: Vec<usize> = (0..n * m)
                    .map(|r| {
                        let (i, j) = (r / m, r % m);
                        if j < n {
                            i * n + j
                        } else {
                            n * n + i * l + (j - n)
                        }
                    })
                    .collect();
                tape.gather_rows(both, &index)
            }
            None => rr,
        };
        let bias = tape.scale(bias, w_l);

        let shape = AttentionShape {
            blocks: 1,
            query_len: n,
            key_len: m,
            heads: h,
            scale: 1.0,
        };
        let mask = AttentionMask {
            keys: Some(key_mask),
            pairs: None,
        };
        let o = tape.attention(q_aug, k_aug, v_aug, Some(bias), shape, &mask);

        // split scalar and point outputs; points back to the local frame
        let o = tape.reshape(o, n * h, cd + 3 * vp);
        let o_s = tape.slice_cols(o, 0, cd);
        let o_s = tape.reshape(o_s, n, h * cd);
        let o_pts = tape.slice_cols(o, cd, cd + 3 * vp);
        let o_pts = tape.reshape(o_pts, n, h * vp * 3);
        let o_local = tape.frame_apply(rots, trans, o_pts, true);
        let o_sq = tape.square(o_local);
        let o_sq = tape.reshape(o_sq, n * h * vp, 3);
        let o_norm = tape.sum_cols(o_sq);
        let o_norm = tape.add_scalar(o_norm, 1e-8);
        let o_norm = tape.sqrt(o_norm);
        let o_norm = tape.reshape(o_norm, n, h * vp);
        let cat = tape.concat_cols(&[o_s, o_local, o_norm]);
        let update = block.output.forward(tape, p, cat);

        let res_w = weights(res_mask);
        let sum = tape.add(s, update);
        let s = block.norm.forward(tape, p, sum);
        let s = tape.mask_rows(s, &res_w);
        let t = block.transition.forward(tape, p, s);
        let sum = tape.add(s, t);
        let s = block.transition_norm.forward(tape, p, sum);
        let s = tape.mask_rows(s, &res_w);

        // rigid update: R ← R·exp(ω), x ← x + R·δ
        let u = block.frame_update.forward(tape, p, s);
        let u = tape.mask_rows(u, &res_w);
        let omega = tape.slice_cols(u, 0, 3);
        let delta = tape.slice_cols(u, 3, 6);
        let step = tape.so3_exp(omega);
        let new_rots = tape.rot_mul(rots, step, false);
        let new_trans = tape.frame_apply(rots, trans, delta, false);
        (s, new_rots, new_trans)
    }
}

/// Copies network outputs off the tape.
pub fn read_prediction(tape: &Tape, vars: &ForwardVars) -> Prediction {
    let rots = tape.value(vars.rots);
    let trans = tape.value(vars.trans);
    let frames = (0..rots.rows())
        .map(|i| {
            let rot = rotation_from_row(rots.row(i)).renormalized();
            RigidTransform::new(rot, Vector3::from_column_slice(trans.row(i)))
        })
        .collect();
    Prediction {
        frames,
        aa_logits: tape.value(vars.aa_logits).clone(),
        ec_logits: vars.ec_logits.map(|v| tape.value(v).data().to_vec()),
        coevo_logits: vars.coevo_logits.map(|v| tape.value(v).clone()),
        affinity: vars.affinity.map(|v| tape.value(v).scalar_value()),
        atoms: tape.value(vars.atoms).clone(),
    }
}

/// Translation and rotation tangent fields toward the predicted clean
/// frames: (x̂₁ − x_t)/d and log(r_tᵀ r̂₁)/d with d = max(1 − t, floor).
pub fn compute_vector_fields(
    pred: &Prediction,
    state: &FlowState,
    divisor_floor: f64,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if !(0.0..1.0).contains(&state.t) {
        return Err(Error::Domain {
            op: "compute_vector_fields",
            t: state.t,
        });
    }
    if pred.frames.len() != state.frames.len() {
        return Err(Error::Shape("prediction and state lengths differ".into()));
    }
    let d = (1.0 - state.t).max(divisor_floor);
    let mut trans = Vec::with_capacity(state.len());
    let mut rots = Vec::with_capacity(state.len());
    for (hat, cur) in pred.frames.iter().zip(&state.frames) {
        trans.push((hat.trans - cur.trans) / d);
        let rel = cur.rot.transpose().matrix() * hat.rot.matrix();
        rots.push(so3_log_unchecked(&rel) / d);
    }
    Ok((trans, rots))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding(0.0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_eq!(timestep_embedding(0.3, 7).len(), 7);
        assert_eq!(timestep_embedding(0.3, 7)[6], 0.0);
    }

    #[test]
    fn timestep_embedding_formula() {
        let t = 0.37;
        let e = timestep_embedding(t, 8);
        for k in 0..4 {
            let freq = (-(k as f64) * (10000f64).ln() / 3.0).exp();
            assert!((e[k] - (t * 10000.0 * freq).sin()).abs() < 1e-12);
            assert!((e[4 + k] - (t * 10000.0 * freq).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn distogram_semantics() {
        let pos = vec![Vector3::zeros(), Vector3::new(5.0, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0)];
        let d = distogram(&pos, 1e-3, 2.0, 22);
        assert!(d.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(d.row(1)[21], 1.0);
        assert_eq!(d.row(1).iter().sum::<f64>(), 1.0);
        for r in 0..9 {
            assert!(d.row(r).iter().sum::<f64>() <= 1.0);
        }
    }
}
