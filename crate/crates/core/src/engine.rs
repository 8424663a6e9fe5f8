//! Joint corruption, staged training, gradient checking and the Euler sampler.

use crate::coevolution::CoEvoMatrix;
use crate::config::{LossConfig, Stage, TrainConfig};
use crate::data::EnzymeRecord;
use crate::discrete::{corrupt_discrete, euler_discrete_step, DiscreteSpace, AMINO_ACID_SPACE, COEVO_SPACE, EC_SPACE};
use crate::error::{Error, Result};
use crate::geometry::{
    geodesic_interpolate, sample_uniform_rotation, so3_exp, translation_interpolate, Pocket, ResidueFrame,
    RigidTransform,
};
use crate::molecule::{Molecule2D, Molecule3D};
use crate::network::{compute_vector_fields, Conditioning, FlowState, Prediction, VectorFieldNetwork};
use crate::nn::Adam;
use crate::objectives::{total_loss_tape, ActiveTerms, LossBreakdown, Targets};
use crate::tape::Tape;
use crate::tensor::Tensor;
use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Inputs the network sees in a stage: the backbone stage is unconditioned,
/// the ligand stage sees the substrate, the enzyme stage both molecules.
pub fn stage_conditioning(stage: Stage, record: &EnzymeRecord) -> Conditioning<'_> {
    match stage {
        Stage::Backbone => Conditioning::default(),
        Stage::Ligand => Conditioning {
            substrate: Some(&record.substrate),
            product: None,
        },
        Stage::Enzyme => Conditioning {
            substrate: Some(&record.substrate),
            product: Some(&record.product),
        },
    }
}

fn corrupt_grid<R: Rng + ?Sized>(grid: &CoEvoMatrix, t: f64, rng: &mut R) -> Result<CoEvoMatrix> {
    let mut out = grid.clone();
    for (tok, &active) in out.tokens.iter_mut().zip(&grid.cell_mask) {
        if active {
            *tok = corrupt_discrete(*tok, t, COEVO_SPACE, rng)?;
        }
    }
    Ok(out)
}

/// Draws priors and interpolates every variable of `record` to time `t`.
/// EC and co-evolution are carried only in the enzyme stage.
pub fn corrupt_sample<R: Rng + ?Sized>(record: &EnzymeRecord, t: f64, stage: Stage, rng: &mut R) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain { op: "corrupt_sample", t });
    }
    let n = record.pocket.len();
    let mut frames = Vec::with_capacity(n);
    let mut aatypes = Vec::with_capacity(n);
    let mut trans_0 = Vec::with_capacity(n);
    let mut rots_0 = Vec::with_capacity(n);
    for res in &record.pocket.residues {
        let x0 = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let r0 = sample_uniform_rotation(rng);
        frames.push(RigidTransform::new(
            geodesic_interpolate(&r0, &res.rot, t),
            translation_interpolate(&x0, &res.trans, t),
        ));
        aatypes.push(corrupt_discrete(res.aatype, t, AMINO_ACID_SPACE, rng)?);
        trans_0.push(x0);
        rots_0.push(r0);
    }
    let (ec, coevo) = if stage == Stage::Enzyme {
        (
            Some(corrupt_discrete(record.ec, t, EC_SPACE, rng)?),
            Some(corrupt_grid(&record.coevo, t, rng)?),
        )
    } else {
        (None, None)
    };
    Ok(FlowState {
        t,
        frames,
        aatypes,
        ec,
        coevo,
        res_mask: vec![true; n],
        trans_0,
        rots_0,
    })
}

/// Affinity labels standardized over the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityScale {
    pub mean: f64,
    pub std: f64,
}

impl AffinityScale {
    pub fn fit(records: &[EnzymeRecord]) -> Option<Self> {
        let vals: Vec<f64> = records.iter().filter_map(|r| r.affinity).collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        Some(AffinityScale { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Rejects datasets that cannot feed the stage's losses.
pub fn check_stage_dataset(stage: Stage, records: &[EnzymeRecord], loss: &LossConfig) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let active = ActiveTerms::for_stage(stage, loss);
    if active.kd {
        if let Some(r) = records.iter().find(|r| r.affinity.is_none()) {
            return Err(Error::Config(format!(
                "{stage} stage needs an affinity label for every record; {} has none",
                r.id
            )));
        }
    }
    Ok(())
}

pub fn record_targets<'a>(record: &'a EnzymeRecord, scale: Option<AffinityScale>) -> Targets<'a> {
    Targets {
        pocket: &record.pocket,
        ec: Some(record.ec),
        coevo: Some(&record.coevo),
        ligand: Some(&record.substrate),
        affinity: record.affinity.zip(scale).map(|(a, s)| s.apply(a)),
    }
}

/// Per-step training record: batch means of the loss components.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub components: [Option<f64>; 8],
    pub total: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "step\ttotal\ttrans\trot\taa\tec\tcoevo\tinter\tdist\tkd";

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\t{:.9e}", self.step, self.total);
        for c in self.components {
            match c {
                Some(v) => s.push_str(&format!("\t{v:.9e}")),
                None => s.push_str("\t-"),
            }
        }
        s
    }
}

/// Loss and parameter gradients for one record at one corruption.
pub fn loss_and_gradients(
    net: &VectorFieldNetwork,
    record: &EnzymeRecord,
    state: &FlowState,
    stage: Stage,
    loss: &LossConfig,
    scale: Option<AffinityScale>,
) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape, true);
    let vars = net.forward(&mut tape, &bound, state, stage_conditioning(stage, record), None)?;
    let targets = record_targets(record, scale);
    let (total, breakdown) = total_loss_tape(&mut tape, &vars, state, &targets, stage, loss)?;
    if !breakdown.all_finite() {
        return Err(Error::Numeric { stage: "loss".into() });
    }
    let mut grads = tape.backward(total);
    Ok((breakdown, bound.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Loss value only, parameters untracked.
pub fn loss_value(
    net: &VectorFieldNetwork,
    record: &EnzymeRecord,
    state: &FlowState,
    stage: Stage,
    loss: &LossConfig,
    scale: Option<AffinityScale>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape, false);
    let vars = net.forward(&mut tape, &bound, state, stage_conditioning(stage, record), None)?;
    let targets = record_targets(record, scale);
    total_loss_tape(&mut tape, &vars, state, &targets, stage, loss).map(|(_, b)| b)
}

/// Minimizes the stage loss with Adam. Steps are appended to `log` as they
/// finish. A non-finite loss aborts before the update, so `net` keeps the
/// last good parameters.
pub fn train_stage(
    net: &mut VectorFieldNetwork,
    records: &[EnzymeRecord],
    train: &TrainConfig,
    loss: &LossConfig,
    log: &mut Vec<StepLog>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<()> {
    let stage = train.stage;
    check_stage_dataset(stage, records, loss)?;
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let scale = AffinityScale::fit(records);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut adam = Adam::new(&net.params, train.lr, train.beta1, train.beta2, train.eps);
    let indices: Vec<usize> = (0..records.len()).collect();
    for step in 0..train.steps {
        let mut sum: Vec<Option<Tensor>> = vec![None; net.params.len()];
        let mut components = [None; 8];
        let mut total = 0.0;
        for _ in 0..train.batch_size {
            let record = &records[*indices.choose(&mut rng).expect("nonempty dataset")];
            let t = rng.random_range(0.0..loss.t_max);
            let state = corrupt_sample(record, t, stage, &mut rng)?;
            let (b, grads) = loss_and_gradients(net, record, &state, stage, loss, scale).map_err(|e| match e {
                Error::Numeric { stage: s } => Error::Numeric {
                    stage: format!("{s} at training step {step}"),
                },
                other => other,
            })?;
            total += b.total;
            for (acc, v) in components.iter_mut().zip(b.components()) {
                if let Some(v) = v {
                    *acc = Some(acc.unwrap_or(0.0) + v);
                }
            }
            for (acc, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.add_assign(&g),
                        None => *acc = Some(g),
                    }
                }
            }
        }
        let inv = 1.0 / train.batch_size as f64;
        for g in sum.iter_mut().flatten() {
            *g = g.map(|v| v * inv);
        }
        if sum.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::Numeric {
                stage: format!("gradient at training step {step}"),
            });
        }
        adam.update(&mut net.params, &sum);
        let entry = StepLog {
            step,
            components: components.map(|c| c.map(|v| v * inv)),
            total: total * inv,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(())
}

// ---- gradient check --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub h: f64,
    /// Entries compared per tensor: the largest-gradient entries first,
    /// then seeded random ones.
    pub entries_per_tensor: usize,
    /// Denominator floor in |a − n| / max(|a|, |n|, floor).
    pub floor: f64,
    pub seed: u64,
    pub t: f64,
    /// Negative control: scales the analytic gradient of this tensor.
    pub corrupt_tensor: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-4,
            entries_per_tensor: 4,
            floor: 1e-6,
            seed: 0,
            t: 0.45,
            corrupt_tensor: None,
        }
    }
}

/// Central finite differences against the tape gradient of the stage loss,
/// one report line per named tensor, worst first.
pub fn gradcheck(
    net: &VectorFieldNetwork,
    record: &EnzymeRecord,
    stage: Stage,
    loss: &LossConfig,
    opts: &GradcheckOptions,
) -> Result<Vec<TensorCheck>> {
    let scale = AffinityScale::fit(std::slice::from_ref(record));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let state = corrupt_sample(record, opts.t, stage, &mut rng)?;
    let (_, grads) = loss_and_gradients(net, record, &state, stage, loss, scale)?;
    let mut probe = net.clone();
    let mut report = Vec::new();
    for (i, id) in net.params.ids().enumerate() {
        let name = net.params.name(id).to_string();
        let shape = net.params.get(id).shape();
        let mut analytic = grads[i].clone().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        if opts.corrupt_tensor.as_deref() == Some(name.as_str()) {
            analytic = analytic.map(|g| g * 1.01 + 1e-3);
        }
        let mut order: Vec<usize> = (0..analytic.len()).collect();
        order.sort_by(|&a, &b| {
            analytic.data()[b]
                .abs()
                .partial_cmp(&analytic.data()[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let k = opts.entries_per_tensor.min(order.len());
        let top = k.div_ceil(2);
        let mut picked: Vec<usize> = order[..top].to_vec();
        while picked.len() < k {
            let e = rng.random_range(0..order.len());
            if !picked.contains(&e) {
                picked.push(e);
            }
        }
        let mut worst: f64 = 0.0;
        for &e in &picked {
            let base = probe.params.get(id).data()[e];
            probe.params.get_mut(id).data_mut()[e] = base + opts.h;
            let plus = loss_value(&probe, record, &state, stage, loss, scale)?.total;
            probe.params.get_mut(id).data_mut()[e] = base - opts.h;
            let minus = loss_value(&probe, record, &state, stage, loss, scale)?.total;
            probe.params.get_mut(id).data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(rel);
        }
        report.push(TensorCheck {
            name,
            max_rel_error: worst,
            entries_checked: picked.len(),
            max_abs_grad: analytic.max_abs(),
        });
    }
    report.sort_by(|a, b| {
        b.max_rel_error
            .partial_cmp(&a.max_rel_error)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.name.cmp(&b.name))
    });
    Ok(report)
}

// ---- sampling --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Model units, substrate-centered frame.
    pub pocket: Pocket,
    /// EC state 0..6.
    pub ec: usize,
    pub coevo: CoEvoMatrix,
    pub trajectory: Option<Vec<Pocket>>,
}

/// Prior draws for `n_res` residues.
pub fn sample_prior_frames<R: Rng + ?Sized>(n_res: usize, rng: &mut R) -> Vec<RigidTransform> {
    (0..n_res)
        .map(|_| {
            let x = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            RigidTransform::new(sample_uniform_rotation(rng), x)
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn step_site<R: Rng + ?Sized>(
    state: usize,
    logits: &[f64],
    t: f64,
    dt: f64,
    last: bool,
    space: DiscreteSpace,
    rng: &mut R,
) -> Result<usize> {
    if !space.is_mask(state) {
        return Ok(state);
    }
    if last {
        return Ok(argmax(logits));
    }
    euler_discrete_step(state, &softmax(logits), t, dt, space, rng)
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub steps: usize,
    pub divisor_floor: f64,
    pub keep_trajectory: bool,
}

/// Euler integration from `prior` frames and all-mask discrete states to t = 1.
pub fn sample_from_prior<R: Rng + ?Sized>(
    net: &VectorFieldNetwork,
    substrate: Option<&Molecule3D>,
    product: Option<&Molecule2D>,
    prior: Vec<RigidTransform>,
    opts: SampleOptions,
    rng: &mut R,
) -> Result<SampleOutput> {
    let n = prior.len();
    if opts.steps < 2 {
        return Err(Error::Config("sampling needs at least 2 steps".into()));
    }
    if n == 0 {
        return Err(Error::Config("sampling needs at least one residue".into()));
    }
    let cfg = &net.config;
    let cells = cfg.n_msa * cfg.n_token;
    let mut state = FlowState {
        t: 0.0,
        trans_0: prior.iter().map(|f| f.trans).collect(),
        rots_0: prior.iter().map(|f| f.rot).collect(),
        frames: prior,
        aatypes: vec![AMINO_ACID_SPACE.mask_index(); n],
        ec: Some(EC_SPACE.mask_index()),
        coevo: Some(CoEvoMatrix {
            rows: cfg.n_msa,
            cols: cfg.n_token,
            tokens: vec![COEVO_SPACE.mask_index(); cells],
            row_mask: vec![true; cfg.n_msa],
            cell_mask: vec![true; cells],
        }),
        res_mask: vec![true; n],
    };
    let cond = Conditioning { substrate, product };
    let dt = 1.0 / opts.steps as f64;
    let mut trajectory = opts.keep_trajectory.then(Vec::new);
    for k in 0..opts.steps {
        let t = k as f64 * dt;
        let last = k + 1 == opts.steps;
        state.t = t;
        let pred: Prediction = net.predict(&state, cond, None).map_err(|e| match e {
            Error::Numeric { stage } => Error::Sampling {
                step: k,
                reason: format!("non-finite values in {stage}"),
            },
            other => other,
        })?;
        let (v_x, v_r) = compute_vector_fields(&pred, &state, opts.divisor_floor)?;
        for (i, f) in state.frames.iter_mut().enumerate() {
            let trans = f.trans + v_x[i] * dt;
            let rot = f.rot.compose(&so3_exp(&(v_r[i] * dt))).renormalized();
            *f = RigidTransform::new(rot, trans);
        }
        for i in 0..n {
            state.aatypes[i] = step_site(state.aatypes[i], pred.aa_logits.row(i), t, dt, last, AMINO_ACID_SPACE, rng)?;
        }
        if let (Some(ec), Some(logits)) = (state.ec.as_mut(), pred.ec_logits.as_ref()) {
            *ec = step_site(*ec, logits, t, dt, last, EC_SPACE, rng)?;
        }
        if let (Some(grid), Some(logits)) = (state.coevo.as_mut(), pred.coevo_logits.as_ref()) {
            for c in 0..cells {
                grid.tokens[c] = step_site(grid.tokens[c], logits.row(c), t, dt, last, COEVO_SPACE, rng)?;
            }
        }
        if state.frames.iter().any(|f| !f.rot.is_finite() || !f.trans.iter().all(|v| v.is_finite())) {
            return Err(Error::Sampling {
                step: k,
                reason: "non-finite frame".into(),
            });
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(pocket_of(&state));
        }
    }
    Ok(SampleOutput {
        pocket: pocket_of(&state),
        ec: state.ec.expect("sampler carries an EC state"),
        coevo: state.coevo.expect("sampler carries a co-evolution grid"),
        trajectory,
    })
}

fn pocket_of(state: &FlowState) -> Pocket {
    Pocket::new(
        state
            .frames
            .iter()
            .zip(&state.aatypes)
            .map(|(f, &a)| ResidueFrame {
                trans: f.trans,
                rot: f.rot,
                aatype: a,
            })
            .collect(),
    )
}

/// Draws priors from `rng`, then integrates.
pub fn sample<R: Rng + ?Sized>(
    net: &VectorFieldNetwork,
    substrate: Option<&Molecule3D>,
    product: Option<&Molecule2D>,
    n_res: usize,
    opts: SampleOptions,
    rng: &mut R,
) -> Result<SampleOutput> {
    let prior = sample_prior_frames(n_res, rng);
    sample_from_prior(net, substrate, product, prior, opts, rng)
}
