mod common;

use common::{canonical_state, small_config};
use enzymeflow::config::{LossConfig, Stage};
use enzymeflow::engine::{record_targets, AffinityScale};
use enzymeflow::geometry::{
    geodesic_interpolate, so3_exp, Pocket, ResidueFrame, RigidTransform, Rotation,
};
use enzymeflow::molecule::Molecule3D;
use enzymeflow::network::{FlowState, Prediction, VectorFieldNetwork};
use enzymeflow::objectives::{
    aa_term, distance_loss, distance_term, flow_matching_losses, interaction_loss, surface_value, total_loss,
    true_atom_distances,
};
use enzymeflow::tape::Tape;
use enzymeflow::tensor::Tensor;
use enzymeflow_oracles::{enumerate_gated_distance, enumerate_interaction, naive_surface};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ligand_at(points: &[[f64; 3]]) -> Molecule3D {
    Molecule3D::new(
        vec![0; points.len()],
        points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
    )
    .unwrap()
}

/// N×12 atom tensor from per-residue atom positions.
fn atom_tensor(atoms: &[[[f64; 3]; 4]]) -> Tensor {
    Tensor::from_fn(atoms.len(), 12, |i, c| atoms[i][c / 3][c % 3])
}

proptest! {
    #[test]
    fn surface_matches_naive_sum(
        atoms in prop::collection::vec(prop::array::uniform3(-9.0f64..9.0), 1..=32),
        query in prop::array::uniform3(-9.0f64..9.0),
        rho in 0.5f64..4.0,
    ) {
        let stable = surface_value(&query, &atoms, rho);
        let naive = naive_surface(&query, &atoms, rho);
        prop_assert!((stable - naive).abs() < 1e-10, "{stable} vs {naive}");
    }

    #[test]
    fn losses_are_nonnegative(
        seed in 0u64..1000,
        n in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lig: Vec<[f64; 3]> = (0..3).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect();
        let atoms: Vec<[[f64; 3]; 4]> = (0..n)
            .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
            .collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        prop_assert!(interaction_loss(&atom_tensor(&atoms), &ligand_at(&lig), &mask, 6.0, 2.0) >= 0.0);
        let d_true = Tensor::from_fn(n * 4, 3, |_, _| rng.random_range(0.0..1.5));
        let d_pred = Tensor::from_fn(n * 4, 3, |_, _| rng.random_range(0.0..1.5));
        prop_assert!(distance_loss(&d_true, &d_pred, 0.8) >= 0.0);
    }
}

#[test]
fn surface_is_stable_far_from_every_atom() {
    // 100 Å away the naive sum underflows; compare with the shifted closed form
    let atoms = [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
    let q = [100.0, 0.0, 0.0];
    let (d1, d2) = (97.0f64 * 97.0, 100.0f64 * 100.0);
    let expected = d1 - 2.0 * (1.0 + (-(d2 - d1) / 2.0).exp()).ln();
    let got = surface_value(&q, &atoms, 2.0);
    assert!(got.is_finite());
    assert!((got - expected).abs() < 1e-9);
}

#[test]
fn hinge_fixtures() {
    // one ligand atom at the origin, ρ = 2: S = d² in Å
    let lig = ligand_at(&[[0.0, 0.0, 0.0]]);
    let at = |angstrom: f64| [0.1 * angstrom, 0.0, 0.0];
    let s4 = atom_tensor(&[[at(2.0), at(3.0), at(3.0), at(3.0)]]);
    assert!((interaction_loss(&s4, &lig, &[true], 6.0, 2.0) - 2.0).abs() < 1e-12);
    let s9 = atom_tensor(&[[at(3.0); 4]]);
    assert_eq!(interaction_loss(&s9, &lig, &[true], 6.0, 2.0), 0.0);

    // three residues, the middle one masked; hand sum of max(0, 6 − d²)
    let dists = [[1.0, 2.0, 2.5, 0.5], [0.1, 0.2, 0.3, 0.4], [1.5, 3.0, 4.0, 2.2]];
    let atoms: Vec<[[f64; 3]; 4]> = dists
        .iter()
        .map(|row| std::array::from_fn(|a| [0.0, 0.1 * row[a], 0.0]))
        .collect();
    let mut expected = 0.0;
    for (i, row) in dists.iter().enumerate() {
        if i == 1 {
            continue;
        }
        for d in row {
            expected += (6.0 - d * d).max(0.0);
        }
    }
    let got = interaction_loss(&atom_tensor(&atoms), &lig, &[true, false, true], 6.0, 2.0);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn interaction_loss_by_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.random_range(1..5);
        let lig: Vec<[f64; 3]> = (0..rng.random_range(1..6))
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.4..0.4)))
            .collect();
        let atoms: Vec<[[f64; 3]; 4]> = (0..n)
            .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.6..0.6))))
            .collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        // the hinge is evaluated in Å
        let lig_a: Vec<[f64; 3]> = lig.iter().map(|p| p.map(|v| v * 10.0)).collect();
        let atoms_a: Vec<[[f64; 3]; 4]> = atoms.iter().map(|r| r.map(|a| a.map(|v| v * 10.0))).collect();
        let expected = enumerate_interaction(&atoms_a, &mask, &lig_a, 6.0, 2.0);
        let got = interaction_loss(&atom_tensor(&atoms), &ligand_at(&lig), &mask, 6.0, 2.0);
        assert!((got - expected).abs() < 1e-9 * expected.max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn distance_loss_by_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (rows, cols) = (rng.random_range(1..9), rng.random_range(1..5));
        let d_true = Tensor::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.6));
        let d_pred = Tensor::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.6));
        let table = |t: &Tensor| (0..rows).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let expected = enumerate_gated_distance(&table(&d_true), &table(&d_pred), 0.8);
        assert_eq!(distance_loss(&d_true, &d_pred, 0.8), expected);
    }
}

#[test]
fn distance_term_matches_plain_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lig_pts: Vec<[f64; 3]> = (0..3).map(|_| std::array::from_fn(|_| rng.random_range(-0.3..0.3))).collect();
    let lig = ligand_at(&lig_pts);
    let truth = Pocket::new(
        (0..3)
            .map(|i| ResidueFrame {
                trans: Vector3::new(0.2 * i as f64, 0.3, -0.1),
                rot: so3_exp(&Vector3::new(0.1, 0.4 * i as f64, -0.3)),
                aatype: i,
            })
            .collect(),
    );
    let d_true = true_atom_distances(&truth, &lig);
    let atoms: Vec<[[f64; 3]; 4]> = (0..3)
        .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.6..0.6))))
        .collect();
    let d_pred = Tensor::from_fn(12, 3, |r, j| {
        let a = atoms[r / 4][r % 4];
        (0..3).map(|k| (a[k] - lig_pts[j][k]).powi(2)).sum::<f64>().sqrt()
    });
    let mut tape = Tape::new();
    let av = tape.constant(atom_tensor(&atoms));
    let v = distance_term(&mut tape, av, &d_true, &lig, &[true; 3], 0.8);
    let expected = distance_loss(&d_true, &d_pred, 0.8);
    assert!((tape.value(v).scalar_value() - expected).abs() < 1e-12);
}

#[test]
fn ligand_losses_ignore_common_rigid_motions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lig_pts: Vec<Vector3<f64>> = (0..4).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3))).collect();
    let atoms: Vec<[Vector3<f64>; 4]> = (0..3)
        .map(|_| std::array::from_fn(|_| Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6))))
        .collect();
    let as_tensor = |atoms: &[[Vector3<f64>; 4]]| Tensor::from_fn(atoms.len(), 12, |i, c| atoms[i][c / 3][c % 3]);
    let mol = |pts: &[Vector3<f64>]| Molecule3D::new(vec![0; pts.len()], pts.to_vec()).unwrap();
    let base = interaction_loss(&as_tensor(&atoms), &mol(&lig_pts), &[true; 3], 6.0, 2.0);
    let d_true = Tensor::from_fn(12, 4, |_, _| rng.random_range(0.0..1.2));
    let pred_d = |atoms: &[[Vector3<f64>; 4]], lig: &[Vector3<f64>]| {
        Tensor::from_fn(12, 4, |r, j| (atoms[r / 4][r % 4] - lig[j]).norm())
    };
    let base_d = distance_loss(&d_true, &pred_d(&atoms, &lig_pts), 0.8);
    for _ in 0..10 {
        let g = RigidTransform::random(&mut rng, 2.0);
        let moved: Vec<[Vector3<f64>; 4]> = atoms.iter().map(|r| r.map(|a| g.apply(&a))).collect();
        let lig_m: Vec<Vector3<f64>> = lig_pts.iter().map(|p| g.apply(p)).collect();
        let v = interaction_loss(&as_tensor(&moved), &mol(&lig_m), &[true; 3], 6.0, 2.0);
        assert!((v - base).abs() < 1e-9);
        let d = distance_loss(&d_true, &pred_d(&moved, &lig_m), 0.8);
        assert!((d - base_d).abs() < 1e-9);
    }
}

#[test]
fn two_residue_cross_entropy() {
    let logits = Tensor::from_fn(2, 20, |i, k| ((i * 7 + k * 3) % 11) as f64 * 0.37 - 1.0);
    let targets = [4, 13];
    let mut expected = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected += -(row[y].exp() / z).ln();
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let v = aa_term(&mut tape, l, &targets, &[true, true]).unwrap();
    assert!((tape.value(v).scalar_value() - expected).abs() < 1e-12);
}

fn rotvec(r: &Rotation) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r.matrix()).scaled_axis()
}

#[test]
fn single_residue_flow_matching_by_hand() {
    let x0 = Vector3::new(0.3, -1.2, 0.5);
    let x1 = Vector3::new(-0.4, 0.2, 0.9);
    let r0 = so3_exp(&Vector3::new(0.2, -0.9, 0.4));
    let r1 = so3_exp(&Vector3::new(-0.5, 0.3, 1.1));
    let t = 0.5;
    let r_t = geodesic_interpolate(&r0, &r1, t);
    let x_t = (x0 + x1) * 0.5;
    let state = FlowState {
        t,
        frames: vec![RigidTransform::new(r_t, x_t)],
        aatypes: vec![20],
        ec: None,
        coevo: None,
        res_mask: vec![true],
        trans_0: vec![x0],
        rots_0: vec![r0],
    };
    let x_hat = Vector3::new(-0.1, 0.5, 0.7);
    let r_hat = so3_exp(&Vector3::new(-0.3, 0.1, 0.8));
    let pred = Prediction {
        frames: vec![RigidTransform::new(r_hat, x_hat)],
        aa_logits: Tensor::zeros(1, 20),
        ec_logits: None,
        coevo_logits: None,
        affinity: None,
        atoms: Tensor::zeros(1, 12),
    };
    let target = Pocket::new(vec![ResidueFrame {
        trans: x1,
        rot: r1,
        aatype: 0,
    }]);
    let (trans, rot) = flow_matching_losses(&pred, &state, &target, 0.05).unwrap();
    let hand_trans = ((x_hat - x_t) / 0.5 - (x1 - x0)).norm_squared();
    let rel_hat = r_t.transpose().compose(&r_hat);
    let rel_true = r_t.transpose().compose(&r1);
    let hand_rot = (rotvec(&rel_hat) / 0.5 - rotvec(&rel_true) / 0.5).norm_squared();
    assert!((trans - hand_trans).abs() < 1e-12, "{trans} vs {hand_trans}");
    assert!((rot - hand_rot).abs() < 1e-9, "{rot} vs {hand_rot}");

    // exact prediction gives zero on both terms
    let exact = Prediction {
        frames: vec![RigidTransform::new(r1, x1)],
        ..pred
    };
    let (a, b) = flow_matching_losses(&exact, &state, &target, 0.05).unwrap();
    assert!(a < 1e-20 && b < 1e-18);
    let late = FlowState { t: 1.0, ..state };
    assert!(flow_matching_losses(&exact, &late, &target, 0.05).is_err());
}

#[test]
fn stage_gating_and_weighted_total() {
    let cfg = small_config();
    let net = VectorFieldNetwork::new(&cfg);
    let (mut record, state) = canonical_state(&cfg, 0.4, 3);
    // a ligand atom near the pocket so the ligand terms are non-trivial
    record.substrate.coords[0] = record.pocket.residues[0].trans * 0.9;
    let pred = net
        .predict(
            &state,
            enzymeflow::network::Conditioning {
                substrate: Some(&record.substrate),
                product: Some(&record.product),
            },
            None,
        )
        .unwrap();
    let scale = AffinityScale {
        mean: 0.5,
        std: 2.0,
    };
    let targets = record_targets(&record, Some(scale));

    let weights = LossConfig {
        w_trans: 0.7,
        w_rot: 1.3,
        w_aa: 2.0,
        w_ec: 0.4,
        w_coevo: 3.0,
        w_inter: 0.25,
        w_dist: 5.0,
        w_kd: 9.0,
        ..LossConfig::default()
    };
    let backbone = total_loss(&pred, &state, &targets, Stage::Backbone, &weights).unwrap();
    assert!(backbone.ec.is_none() && backbone.coevo.is_none() && backbone.kd.is_none());
    assert!(backbone.inter.is_none() && backbone.dist.is_none());
    let hand = 0.7 * backbone.trans.unwrap() + 1.3 * backbone.rot.unwrap() + 2.0 * backbone.aa.unwrap();
    assert!((backbone.total - hand).abs() < 1e-12 * hand.abs().max(1.0));

    let enzyme = total_loss(&pred, &state, &targets, Stage::Enzyme, &weights).unwrap();
    assert!(enzyme.kd.is_none());
    let c = enzyme.components();
    let w = [0.7, 1.3, 2.0, 0.4, 3.0, 0.25, 5.0];
    let hand: f64 = (0..7).map(|k| w[k] * c[k].expect("enzyme component active")).sum();
    assert!((enzyme.total - hand).abs() < 1e-12 * hand.abs().max(1.0));
    assert!(c.iter().flatten().all(|&v| v >= 0.0));

    let dropped = LossConfig {
        enzyme_keeps_ligand_terms: false,
        ..weights.clone()
    };
    let lean = total_loss(&pred, &state, &targets, Stage::Enzyme, &dropped).unwrap();
    assert!(lean.inter.is_none() && lean.dist.is_none());

    // the ligand stage needs the substrate prediction and the affinity label
    let lig_state = FlowState {
        ec: None,
        coevo: None,
        ..state.clone()
    };
    let lig_pred = net
        .predict(
            &lig_state,
            enzymeflow::network::Conditioning {
                substrate: Some(&record.substrate),
                product: None,
            },
            None,
        )
        .unwrap();
    let ligand = total_loss(&lig_pred, &lig_state, &targets, Stage::Ligand, &weights).unwrap();
    assert!(ligand.kd.is_some() && ligand.ec.is_none());
    let no_label = enzymeflow::objectives::Targets {
        affinity: None,
        ..targets
    };
    assert!(matches!(
        total_loss(&lig_pred, &lig_state, &no_label, Stage::Ligand, &weights),
        Err(enzymeflow::Error::Config(_))
    ));
}

#[test]
fn zero_components_give_zero_total() {
    let pocket = Pocket::new(vec![ResidueFrame {
        trans: Vector3::new(0.1, 0.2, 0.3),
        rot: so3_exp(&Vector3::new(0.3, 0.2, 0.1)),
        aatype: 2,
    }]);
    let state = FlowState {
        t: 0.3,
        frames: vec![RigidTransform::new(pocket.residues[0].rot, pocket.residues[0].trans)],
        aatypes: vec![2],
        ec: None,
        coevo: None,
        res_mask: vec![true],
        trans_0: vec![pocket.residues[0].trans],
        rots_0: vec![pocket.residues[0].rot],
    };
    let mut logits = Tensor::zeros(1, 20);
    logits.set(0, 2, 800.0);
    let pred = Prediction {
        frames: state.frames.clone(),
        aa_logits: logits,
        ec_logits: None,
        coevo_logits: None,
        affinity: None,
        atoms: Tensor::zeros(1, 12),
    };
    let targets = enzymeflow::objectives::Targets {
        pocket: &pocket,
        ec: None,
        coevo: None,
        ligand: None,
        affinity: None,
    };
    let b = total_loss(&pred, &state, &targets, Stage::Backbone, &LossConfig::default()).unwrap();
    assert_eq!(b.total, 0.0);
}
