use enzymeflow::config::ModelConfig;
use enzymeflow::data::{
    cluster_by_homology, debias, extract_pocket, filter_min_residues, format_structure, generate_synthetic_dataset,
    parse_structure, sequence_identity, synthetic_digest, ProteinStructure, StructureResidue, SynthConfig,
    MIN_POCKET_RESIDUES, POCKET_RADIUS_ANGSTROM,
};
use enzymeflow::coevolution::CoEvoVocabulary;
use enzymeflow::Error;
use enzymeflow_oracles::{brute_cluster, brute_debias, brute_identity, scan_pocket};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const LETTERS: &[u8] = b"ACDEFGHIKLMNPQRSTVWY";

fn helix(n: usize) -> ProteinStructure {
    let residues = (0..n)
        .map(|i| {
            let phi = (100.0f64 * i as f64).to_radians();
            let ca = Vector3::new(2.3 * phi.cos(), 2.3 * phi.sin(), 1.5 * i as f64);
            StructureResidue {
                index: i as i64 + 1,
                aa: LETTERS[i % 20] as char,
                atoms: [
                    ca + Vector3::new(-1.2, 0.8, 0.1),
                    ca,
                    ca + Vector3::new(1.5, 0.0, -0.2),
                    ca + Vector3::new(2.2, 1.0, -0.3),
                ],
            }
        })
        .collect();
    ProteinStructure { residues }
}

#[test]
fn extraction_equals_brute_force_scan() {
    let protein = helix(20);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let atom = Vector3::new(
            rng.random_range(-6.0..6.0),
            rng.random_range(-6.0..6.0),
            rng.random_range(-5.0..35.0),
        );
        let radius = rng.random_range(2.0..12.0);
        let cas: Vec<[f64; 3]> = protein.residues.iter().map(|r| r.atoms[1].into()).collect();
        let expected = scan_pocket(&cas, &[atom.into()], radius);
        match extract_pocket(&protein, &[atom], radius) {
            Ok(p) => {
                assert_eq!(p.len(), expected.len());
                for (res, &i) in p.residues.iter().zip(&expected) {
                    assert_eq!(res.aa_letter(), protein.residues[i].aa);
                    assert!((res.trans - protein.residues[i].atoms[1]).norm() < 1e-12);
                }
            }
            Err(Error::EmptyPocket { .. }) => assert!(expected.is_empty()),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn extraction_radius_is_inclusive() {
    let protein = helix(3);
    let ca = protein.residues[1].atoms[1];
    let atom = ca + Vector3::new(0.0, 0.0, 10.0);
    let p = extract_pocket(&protein, &[atom], 10.0).unwrap();
    assert!(p.sequence().contains(protein.residues[1].aa));
}

#[test]
fn filter_boundary_at_minimum_size() {
    let protein = helix(40);
    let far = Vector3::new(0.0, 0.0, 1e4);
    let mut pocket = extract_pocket(&protein, &[far, protein.residues[0].atoms[1]], 1e6).unwrap();
    assert_eq!(pocket.len(), 40);
    pocket.residues.truncate(MIN_POCKET_RESIDUES);
    assert!(filter_min_residues(&pocket, MIN_POCKET_RESIDUES));
    pocket.residues.truncate(MIN_POCKET_RESIDUES - 1);
    assert!(!filter_min_residues(&pocket, MIN_POCKET_RESIDUES));
}

// ---- alignment oracle -------------------------------------------------------

fn random_seq(rng: &mut impl Rng, len: usize, alphabet: usize) -> String {
    (0..len).map(|_| LETTERS[rng.random_range(0..alphabet)] as char).collect()
}

#[test]
fn identity_equals_exhaustive_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..150 {
        let la = rng.random_range(1..=6);
        let a = random_seq(&mut rng, la, 4);
        let lb = rng.random_range(1..=6);
        let b = random_seq(&mut rng, lb, 4);
        let got = sequence_identity(&a, &b).unwrap();
        let want = brute_identity(a.as_bytes(), b.as_bytes());
        assert_eq!(got, want, "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn identity_is_symmetric_and_bounded(a in "[ACDEFG]{1,12}", b in "[ACDEFG]{1,12}") {
        let ab = sequence_identity(&a, &b).unwrap();
        let ba = sequence_identity(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(sequence_identity(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn identity_rejects_bad_input() {
    assert!(matches!(sequence_identity("", "A"), Err(Error::Length(_))));
    assert!(matches!(sequence_identity("AZ", "A"), Err(Error::Alphabet { ch: 'Z' })));
}

// ---- clustering oracle ------------------------------------------------------

fn fixture(seed: u64, count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<String> = (0..3).map(|_| random_seq(&mut rng, 6, 5)).collect();
    (0..count)
        .map(|_| {
            let base = &bases[rng.random_range(0..bases.len())];
            let mut s: Vec<char> = base.chars().collect();
            for _ in 0..rng.random_range(0..3) {
                let k = rng.random_range(0..s.len());
                s[k] = LETTERS[rng.random_range(0..5)] as char;
            }
            if rng.random_bool(0.3) {
                s.pop();
            }
            s.into_iter().collect()
        })
        .collect()
}

#[test]
fn clustering_equals_exhaustive_reexecution() {
    for seed in 0..6 {
        let seqs = fixture(seed, 8 + seed as usize % 5);
        for threshold in [0.3, 0.6, 0.8] {
            assert_eq!(
                cluster_by_homology(&seqs, threshold).unwrap(),
                brute_cluster(&seqs, threshold),
                "seed {seed} threshold {threshold}"
            );
        }
    }
}

#[test]
fn clustering_extremes() {
    let seqs = fixture(9, 10);
    let (assign, centroids) = cluster_by_homology(&seqs, 0.0).unwrap();
    assert_eq!(centroids.len(), 1);
    assert!(assign.iter().all(|&a| a == 0));
    let (_, centroids) = cluster_by_homology(&seqs, 1.01).unwrap();
    assert_eq!(centroids.len(), seqs.len());
}

#[test]
fn debias_on_fixture() {
    // repeated enzymes with several reactions keep all their records
    let seqs: Vec<String> = ["ACDEFG", "ACDEFG", "ACDEFA", "WYWYWY", "WYWYWA", "KLMNPQ", "KLMNPQ", "ACDEF", "WYW", "KLMNPA"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let threshold = 0.6;
    let kept = debias(&seqs, threshold).unwrap();
    assert_eq!(kept, brute_debias(&seqs, threshold));
    assert_eq!(kept, vec![0, 1, 3, 5, 6, 8]);
    // distinct representatives are pairwise below the threshold
    let mut reps: Vec<&String> = kept.iter().map(|&i| &seqs[i]).collect();
    reps.dedup();
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            if reps[i] != reps[j] {
                assert!(sequence_identity(reps[i], reps[j]).unwrap() < threshold);
            }
        }
    }
}

// ---- structures and synthetic data -----------------------------------------

#[test]
fn structure_text_round_trips() {
    let protein = helix(5);
    let text = format_structure(&protein);
    let back = parse_structure(&text, Path::new("helix.pdb")).unwrap();
    assert_eq!(back.sequence(), protein.sequence());
    for (a, b) in back.residues.iter().zip(&protein.residues) {
        for k in 0..4 {
            assert!((a.atoms[k] - b.atoms[k]).norm() < 1e-3);
        }
    }
}

#[test]
fn structure_parser_reports_missing_atoms() {
    let text = format_structure(&helix(2));
    let dropped: String = text.lines().filter(|l| !l.contains(" O  ")).map(|l| format!("{l}\n")).collect();
    assert!(parse_structure(&dropped, Path::new("x.pdb")).is_err());
}

#[test]
fn synthetic_data_is_seed_deterministic() {
    let cfg = SynthConfig::default();
    let a = generate_synthetic_dataset(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
    let b = generate_synthetic_dataset(&mut ChaCha8Rng::seed_from_u64(0), &cfg);
    let c = generate_synthetic_dataset(&mut ChaCha8Rng::seed_from_u64(1), &cfg);
    assert_eq!(synthetic_digest(&a), synthetic_digest(&b));
    assert_ne!(synthetic_digest(&a), synthetic_digest(&c));
    let model = ModelConfig::default();
    let vocab = CoEvoVocabulary::standard();
    for e in &a {
        let r = e.to_record(&model, &vocab).unwrap();
        assert_eq!(r.pocket.len(), cfg.pocket_residues);
        assert!(filter_min_residues(&r.pocket, MIN_POCKET_RESIDUES));
        assert!(r.pocket.residues.iter().all(|x| x.trans.norm() * 10.0 < POCKET_RADIUS_ANGSTROM + 3.0));
    }
}
