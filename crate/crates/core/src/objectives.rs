//! Training losses. Every term is recorded on a tape so the same code serves
//! training (parameters tracked) and plain evaluation of a `Prediction`.

use crate::coevolution::CoEvoMatrix;
use crate::config::{LossConfig, Stage};
use crate::discrete::{AMINO_ACID_SPACE, COEVO_SPACE, EC_SPACE};
use crate::error::{Error, Result};
use crate::geometry::{backbone_atoms_from_frame, so3_log_unchecked, Pocket, MODEL_UNITS_PER_ANGSTROM};
use crate::molecule::Molecule3D;
use crate::network::{rotation_rows, FlowState, ForwardVars, Prediction};
use crate::tape::{surface_value_with_weights, Tape, Var};
use crate::tensor::Tensor;

/// Clean targets for one record. Coordinates are in model units.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub pocket: &'a Pocket,
    pub ec: Option<usize>,
    pub coevo: Option<&'a CoEvoMatrix>,
    pub ligand: Option<&'a Molecule3D>,
    /// Standardized affinity label.
    pub affinity: Option<f64>,
}

/// Loss components; `None` marks a component inactive in the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub trans: Option<f64>,
    pub rot: Option<f64>,
    pub aa: Option<f64>,
    pub ec: Option<f64>,
    pub coevo: Option<f64>,
    pub inter: Option<f64>,
    pub dist: Option<f64>,
    pub kd: Option<f64>,
    pub total: f64,
    pub weights: LossConfig,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 8] = ["trans", "rot", "aa", "ec", "coevo", "inter", "dist", "kd"];

    pub fn components(&self) -> [Option<f64>; 8] {
        [
            self.trans, self.rot, self.aa, self.ec, self.coevo, self.inter, self.dist, self.kd,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite() && self.components().iter().flatten().all(|v| v.is_finite())
    }
}

/// Components active in a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub ec: bool,
    pub coevo: bool,
    pub inter: bool,
    pub dist: bool,
    pub kd: bool,
}

impl ActiveTerms {
    pub fn for_stage(stage: Stage, cfg: &LossConfig) -> Self {
        match stage {
            Stage::Backbone => ActiveTerms {
                ec: false,
                coevo: false,
                inter: false,
                dist: false,
                kd: false,
            },
            Stage::Ligand => ActiveTerms {
                ec: false,
                coevo: false,
                inter: true,
                dist: true,
                kd: true,
            },
            Stage::Enzyme => ActiveTerms {
                ec: true,
                coevo: true,
                inter: cfg.enzyme_keeps_ligand_terms,
                dist: cfg.enzyme_keeps_ligand_terms,
                kd: false,
            },
        }
    }

    pub fn needs_ligand(&self) -> bool {
        self.inter || self.dist || self.kd
    }
}

/// S(a) = −ρ log Σ_j exp(−‖a − a_j‖²/ρ), stable under widely separated atoms.
pub fn surface_value(a: &[f64; 3], ligand: &[[f64; 3]], rho: f64) -> f64 {
    assert!(!ligand.is_empty(), "surface needs ligand atoms");
    surface_value_with_weights(a, ligand, rho, None)
}

fn residue_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

fn divisor(t: f64, floor: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain {
            op: "flow_matching_losses",
            t,
        });
    }
    Ok((1.0 - t).max(floor))
}

/// Translation and rotation flow-matching terms, summed over unmasked
/// residues. `rots` is N×9 and `trans` N×3, the predicted clean frames.
pub fn flow_matching_terms(
    tape: &mut Tape,
    rots: Var,
    trans: Var,
    state: &FlowState,
    target: &Pocket,
    floor: f64,
) -> Result<(Var, Var)> {
    let n = state.len();
    if target.len() != n || state.trans_0.len() != n {
        return Err(Error::Shape(format!(
            "state has {n} residues, target {}, prior cache {}",
            target.len(),
            state.trans_0.len()
        )));
    }
    let d = divisor(state.t, floor)?;
    let w = residue_weights(&state.res_mask);

    let x_t = Tensor::from_fn(n, 3, |i, k| state.frames[i].trans[k]);
    let x_t = tape.constant(x_t);
    // x1 − x0, rescaled by (1 − t)/d so the target stays consistent with the
    // prediction once the divisor is clamped
    let gain = (1.0 - state.t) / d;
    let target_v = Tensor::from_fn(n, 3, |i, k| gain * (target.residues[i].trans[k] - state.trans_0[i][k]));
    let target_v = tape.constant(target_v);
    let v = tape.sub(trans, x_t);
    let v = tape.scale(v, 1.0 / d);
    let diff = tape.sub(v, target_v);
    let sq = tape.square(diff);
    let sq = tape.mask_rows(sq, &w);
    let trans_loss = tape.sum_all(sq);

    let r_t = tape.constant(rotation_rows(state.frames.iter().map(|f| f.rot)));
    let target_r = Tensor::from_fn(n, 3, |i, k| {
        let rel = state.frames[i].rot.transpose().matrix() * target.residues[i].rot.matrix();
        so3_log_unchecked(&rel)[k] / d
    });
    let target_r = tape.constant(target_r);
    let rel = tape.rot_mul(r_t, rots, true);
    let v = tape.so3_log(rel);
    let v = tape.scale(v, 1.0 / d);
    let diff = tape.sub(v, target_r);
    let sq = tape.square(diff);
    let sq = tape.mask_rows(sq, &w);
    let rot_loss = tape.sum_all(sq);
    Ok((trans_loss, rot_loss))
}

fn check_targets(targets: &[usize], space_real: usize, what: &str) -> Result<()> {
    match targets.iter().find(|&&t| t >= space_real) {
        Some(&t) => Err(Error::InvalidTarget(format!(
            "{what} target {t} is not a real state (0..{space_real})"
        ))),
        None => Ok(()),
    }
}

/// Weighted-mean cross-entropy; an empty weight set gives 0.
pub fn masked_mean_cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
    let count: f64 = weights.iter().sum();
    let ce = tape.cross_entropy(logits, targets, weights);
    tape.scale(ce, if count > 0.0 { 1.0 / count } else { 0.0 })
}

/// Amino-acid cross-entropy, summed over unmasked residues like the frame
/// terms. A per-residue mean lets the structural sums drown it out and the
/// sequence never gets memorized.
pub fn aa_term(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    check_targets(targets, AMINO_ACID_SPACE.num_real(), "amino-acid")?;
    Ok(tape.cross_entropy(logits, targets, &residue_weights(mask)))
}

pub fn ec_term(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    check_targets(&[target], EC_SPACE.num_real(), "EC")?;
    Ok(tape.cross_entropy(logits, &[target], &[1.0]))
}

/// Co-evolution cross-entropy, mean over unmasked cells.
pub fn coevo_term(tape: &mut Tape, logits: Var, target: &CoEvoMatrix) -> Result<Var> {
    check_targets(&target.tokens, COEVO_SPACE.num_real(), "co-evolution")?;
    let w: Vec<f64> = residue_weights(&target.cell_mask);
    Ok(masked_mean_cross_entropy(tape, logits, &target.tokens, &w))
}

/// Σ over unmasked residues and their four atoms of max(0, γ − S(Â)), with
/// S evaluated in Å. `atoms` is N×12 in model units.
pub fn interaction_term(
    tape: &mut Tape,
    atoms: Var,
    ligand: &Molecule3D,
    mask: &[bool],
    gamma: f64,
    rho: f64,
) -> Var {
    let n = mask.len();
    let to_angstrom = 1.0 / MODEL_UNITS_PER_ANGSTROM;
    let lig: Vec<[f64; 3]> = ligand
        .active_coords()
        .iter()
        .map(|c| [c[0] * to_angstrom, c[1] * to_angstrom, c[2] * to_angstrom])
        .collect();
    let pts = tape.reshape(atoms, n * 4, 3);
    let pts = tape.scale(pts, to_angstrom);
    let s = tape.surface(pts, &lig, rho);
    let neg = tape.scale(s, -1.0);
    let gap = tape.add_scalar(neg, gamma);
    let hinge = tape.relu(gap);
    let w: Vec<f64> = (0..n * 4).map(|r| if mask[r / 4] { 1.0 } else { 0.0 }).collect();
    let hinge = tape.mask_rows(hinge, &w);
    tape.sum_all(hinge)
}

/// True atom–ligand distances (rows residue·4 + atom, model units).
pub fn true_atom_distances(pocket: &Pocket, ligand: &Molecule3D) -> Tensor {
    let lig = ligand.active_coords();
    let mut out = Tensor::zeros(pocket.len() * 4, lig.len());
    for (i, res) in pocket.residues.iter().enumerate() {
        for (a, atom) in backbone_atoms_from_frame(res).iter().enumerate() {
            for (j, l) in lig.iter().enumerate() {
                let d = ((atom[0] - l[0]).powi(2) + (atom[1] - l[1]).powi(2) + (atom[2] - l[2]).powi(2)).sqrt();
                out.set(i * 4 + a, j, d);
            }
        }
    }
    out
}

/// Mean squared distance error over entries whose true distance is below
/// `threshold` and whose residue is unmasked; 0 if no entry qualifies.
pub fn distance_term(
    tape: &mut Tape,
    atoms: Var,
    d_true: &Tensor,
    ligand: &Molecule3D,
    mask: &[bool],
    threshold: f64,
) -> Var {
    let n = mask.len();
    let pts = tape.reshape(atoms, n * 4, 3);
    let d_pred = tape.point_distances(pts, &ligand.active_coords());
    let gate = Tensor::from_fn(d_true.rows(), d_true.cols(), |r, j| {
        if mask[r / 4] && d_true.get(r, j) < threshold {
            1.0
        } else {
            0.0
        }
    });
    let count: f64 = gate.data().iter().sum();
    let target = tape.constant(d_true.clone());
    let gate = tape.constant(gate);
    let diff = tape.sub(d_pred, target);
    let sq = tape.square(diff);
    let sq = tape.mul(sq, gate);
    let total = tape.sum_all(sq);
    tape.scale(total, if count > 0.0 { 1.0 / count } else { 0.0 })
}

/// Plain form of the gated distance loss over precomputed distances.
pub fn distance_loss(d_true: &Tensor, d_pred: &Tensor, threshold: f64) -> f64 {
    assert_eq!(d_true.shape(), d_pred.shape(), "distance_loss shapes");
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, p) in d_true.data().iter().zip(d_pred.data()) {
        if *t < threshold {
            sum += (t - p).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Plain form of `interaction_term`: `atoms` is N×12 model units.
pub fn interaction_loss(atoms: &Tensor, ligand: &Molecule3D, mask: &[bool], gamma: f64, rho: f64) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(atoms.clone());
    let v = interaction_term(&mut tape, a, ligand, mask, gamma, rho);
    tape.value(v).scalar_value()
}

/// Weighted stage loss on the tape; returns the total and its breakdown.
pub fn total_loss_tape(
    tape: &mut Tape,
    vars: &ForwardVars,
    state: &FlowState,
    targets: &Targets<'_>,
    stage: Stage,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let active = ActiveTerms::for_stage(stage, cfg);
    let (trans, rot) = flow_matching_terms(tape, vars.rots, vars.trans, state, targets.pocket, cfg.divisor_floor)?;
    let aa_targets = targets.pocket.aatypes();
    let aa = aa_term(tape, vars.aa_logits, &aa_targets, &state.res_mask)?;

    let mut terms: Vec<(Var, f64)> = vec![(trans, cfg.w_trans), (rot, cfg.w_rot), (aa, cfg.w_aa)];
    let missing = |what: &str| Error::Config(format!("{stage} stage needs {what}"));

    let ec = if active.ec {
        let target = targets.ec.ok_or_else(|| missing("an EC target"))?;
        let logits = vars.ec_logits.ok_or_else(|| missing("an EC state"))?;
        let v = ec_term(tape, logits, target)?;
        terms.push((v, cfg.w_ec));
        Some(v)
    } else {
        None
    };
    let coevo = if active.coevo {
        let target = targets.coevo.ok_or_else(|| missing("a co-evolution target"))?;
        let logits = vars.coevo_logits.ok_or_else(|| missing("a co-evolution state"))?;
        let v = coevo_term(tape, logits, target)?;
        terms.push((v, cfg.w_coevo));
        Some(v)
    } else {
        None
    };
    let ligand = if active.needs_ligand() {
        Some(targets.ligand.ok_or_else(|| missing("a substrate"))?)
    } else {
        None
    };
    let inter = match ligand {
        Some(lig) if active.inter => {
            let v = interaction_term(tape, vars.atoms, lig, &state.res_mask, cfg.gamma, cfg.rho);
            terms.push((v, cfg.w_inter));
            Some(v)
        }
        _ => None,
    };
    let dist = match ligand {
        Some(lig) if active.dist => {
            let d_true = true_atom_distances(targets.pocket, lig);
            let v = distance_term(tape, vars.atoms, &d_true, lig, &state.res_mask, cfg.dist_threshold);
            terms.push((v, cfg.w_dist));
            Some(v)
        }
        _ => None,
    };
    let kd = if active.kd {
        let label = targets.affinity.ok_or_else(|| missing("an affinity label"))?;
        let pred = vars.affinity.ok_or_else(|| missing("a substrate for the affinity head"))?;
        let y = tape.constant(Tensor::scalar(label));
        let diff = tape.sub(pred, y);
        let v = tape.square(diff);
        terms.push((v, cfg.w_kd));
        Some(v)
    } else {
        None
    };

    let scaled: Vec<Var> = terms.iter().map(|&(v, w)| tape.scale(v, w)).collect();
    let mut total = scaled[0];
    for &v in &scaled[1..] {
        total = tape.add(total, v);
    }
    let read = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).scalar_value());
    let breakdown = LossBreakdown {
        trans: read(tape, Some(trans)),
        rot: read(tape, Some(rot)),
        aa: read(tape, Some(aa)),
        ec: read(tape, ec),
        coevo: read(tape, coevo),
        inter: read(tape, inter),
        dist: read(tape, dist),
        kd: read(tape, kd),
        total: tape.value(total).scalar_value(),
        weights: cfg.clone(),
    };
    Ok((total, breakdown))
}

/// Evaluates the stage loss of a finished prediction.
pub fn total_loss(
    pred: &Prediction,
    state: &FlowState,
    targets: &Targets<'_>,
    stage: Stage,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = prediction_constants(&mut tape, pred);
    total_loss_tape(&mut tape, &vars, state, targets, stage, cfg).map(|(_, b)| b)
}

/// Flow-matching terms of a finished prediction.
pub fn flow_matching_losses(pred: &Prediction, state: &FlowState, target: &Pocket, floor: f64) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars = prediction_constants(&mut tape, pred);
    let (a, b) = flow_matching_terms(&mut tape, vars.rots, vars.trans, state, target, floor)?;
    Ok((tape.value(a).scalar_value(), tape.value(b).scalar_value()))
}

/// Puts a prediction on a tape as constants.
pub fn prediction_constants(tape: &mut Tape, pred: &Prediction) -> ForwardVars {
    let n = pred.frames.len();
    let rots = tape.constant(rotation_rows(pred.frames.iter().map(|f| f.rot)));
    let trans = tape.constant(Tensor::from_fn(n, 3, |i, k| pred.frames[i].trans[k]));
    ForwardVars {
        rots,
        trans,
        aa_logits: tape.constant(pred.aa_logits.clone()),
        ec_logits: pred
            .ec_logits
            .as_ref()
            .map(|l| tape.constant(Tensor::row_vector(l))),
        coevo_logits: pred.coevo_logits.as_ref().map(|l| tape.constant(l.clone())),
        affinity: pred.affinity.map(|a| tape.constant(Tensor::scalar(a))),
        atoms: tape.constant(pred.atoms.clone()),
    }
}
