use enzymeflow::coevolution::format_msa;
use enzymeflow::data::{
    dataset_stats, format_labels, format_raw_list, format_stats_tsv, format_structure, generate_synthetic_dataset,
    sequence_identity, Label, RawEntry, StatsEntry, SynthConfig, SyntheticEntry,
};
use enzymeflow::discrete::AMINO_ACIDS;
use enzymeflow::molecule::format_molecule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn enzymeflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enzymeflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_model() -> Vec<&'static str> {
    vec![
        "--set", "model.node_dim=16", "--set", "model.edge_dim=8", "--set", "model.blocks=1",
        "--set", "model.heads=2", "--set", "model.head_dim=4", "--set", "model.coevo_dim=8",
        "--set", "model.coevo_heads=2", "--set", "model.n_msa=2", "--set", "model.n_token=48",
    ]
}

/// synth-data, curate and a short training run in `dir`.
fn prepared(dir: &Path) {
    ok(&enzymeflow(dir, &["synth-data", "--seed", "2", "--records", "2", "--out", "raw"]));
    ok(&enzymeflow(dir, &["curate", "--list", "raw/raw.tsv", "--labels", "raw/labels.tsv", "--out", "ds"]));
    let mut args = small_model();
    args.extend(["train", "--data", "ds/dataset.tsv", "--steps", "2", "--out", "m.ckpt"]);
    ok(&enzymeflow(dir, &args));
}

#[test]
fn sampling_twice_with_one_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepared(dir);
    let run = |out: &str, seed: &str| {
        let mut args = small_model();
        args.extend([
            "sample", "--checkpoint", "m.ckpt", "--data", "ds/dataset.tsv", "--T", "50", "--n-samples", "2",
            "--seed", seed, "--out", out,
        ]);
        ok(&enzymeflow(dir, &args));
    };
    run("a", "7");
    run("b", "7");
    run("c", "8");
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    for id in ["synth0000", "synth0001"] {
        for k in ["sample_000.txt", "sample_001.txt"] {
            let a = read(&format!("a/{id}/{k}"));
            assert_eq!(a, read(&format!("b/{id}/{k}")), "{id}/{k}");
            assert_ne!(a, read(&format!("c/{id}/{k}")), "{id}/{k}");
        }
    }
    let text = String::from_utf8(read("a/synth0000/sample_000.txt")).unwrap();
    assert!(text.contains("# T = 50\n") && text.contains("# seed = 7\n"));
}

fn mutated(seq: &str, rng: &mut ChaCha8Rng, n: usize) -> String {
    let mut chars: Vec<char> = seq.chars().collect();
    for _ in 0..n {
        let i = rng.random_range(0..chars.len());
        chars[i] = AMINO_ACIDS[(AMINO_ACIDS.iter().position(|&c| c == chars[i]).unwrap() + 1) % 20];
    }
    chars.into_iter().collect()
}

fn random_seq(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| AMINO_ACIDS[rng.random_range(0..20)]).collect()
}

/// Ten entries: 0–2 identical, 3 a close variant of them, 4–5 close variants
/// of one another, 6–9 unrelated, and 9 one residue short of the size
/// filter. At 0.6 homology debiasing keeps 0, 1, 2, 4, 6, 7, 8.
fn homology_fixture() -> Vec<SyntheticEntry> {
    let mut entries = generate_synthetic_dataset(
        &mut ChaCha8Rng::seed_from_u64(5),
        &SynthConfig {
            records: 10,
            ..SynthConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = entries[0].structure.residues.len();
    let family_a = random_seq(&mut rng, n);
    let family_b = random_seq(&mut rng, n);
    let seqs: Vec<String> = vec![
        family_a.clone(),
        family_a.clone(),
        family_a.clone(),
        mutated(&family_a, &mut rng, 4),
        mutated(&family_b, &mut rng, 3),
        mutated(&family_b, &mut rng, 3),
        random_seq(&mut rng, n),
        random_seq(&mut rng, n),
        random_seq(&mut rng, n),
        random_seq(&mut rng, n),
    ];
    for (e, s) in entries.iter_mut().zip(&seqs) {
        for (r, c) in e.structure.residues.iter_mut().zip(s.chars()) {
            r.aa = c;
        }
    }
    // the first pocket residue sits after the four leading distal ones
    entries[9].structure.residues.remove(4);
    entries
}

#[test]
fn curate_matches_the_debias_oracle() {
    let entries = homology_fixture();
    let seqs: Vec<String> = entries.iter().map(|e| e.structure.sequence()).collect();
    for (i, j, related) in [(0, 3, true), (4, 5, true), (0, 4, false), (6, 7, false), (3, 8, false), (5, 6, false)] {
        let id = sequence_identity(&seqs[i], &seqs[j]).unwrap();
        assert_eq!(id >= 0.6, related, "fixture premise {i}~{j}: {id}");
    }
    for i in 6..9 {
        for j in 0..9 {
            if i != j {
                assert!(sequence_identity(&seqs[i], &seqs[j]).unwrap() < 0.6, "{i}~{j}");
            }
        }
    }

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut raw = Vec::new();
    let mut labels = BTreeMap::new();
    for e in &entries {
        let write = |name: String, text: String| -> std::path::PathBuf {
            std::fs::write(dir.join(&name), text).unwrap();
            name.into()
        };
        raw.push(RawEntry {
            id: e.id.clone(),
            structure: write(format!("{}.pdb", e.id), format_structure(&e.structure)),
            substrate: write(format!("{}.sub.mol", e.id), format_molecule(&e.substrate)),
            product: write(format!("{}.prod.mol", e.id), format_molecule(&e.product)),
            msa: write(format!("{}.msa", e.id), format_msa(&e.alignment)),
        });
        labels.insert(
            e.id.clone(),
            Label {
                ec: e.ec,
                affinity: e.affinity,
            },
        );
    }
    std::fs::write(dir.join("raw.tsv"), format_raw_list(&raw)).unwrap();
    std::fs::write(dir.join("labels.tsv"), format_labels(&labels)).unwrap();
    ok(&enzymeflow(
        dir,
        &["curate", "--list", "raw.tsv", "--labels", "labels.tsv", "--homology", "0.6", "--out", "ds"],
    ));

    let stats: Vec<StatsEntry> = entries
        .iter()
        .map(|e| StatsEntry {
            sequence: e.structure.sequence(),
            substrate_key: format_molecule(&e.substrate),
            substrate_atoms: e.substrate.elements.len(),
            product_key: format_molecule(&e.product),
            product_atoms: e.product.elements.len(),
            ec_digit: e.ec,
        })
        .collect();
    let pick = |idx: &[usize]| idx.iter().map(|&i| &stats[i]).collect::<Vec<_>>();
    let kept = [0, 1, 2, 4, 6, 7, 8];
    let expected = format_stats_tsv(&[
        dataset_stats("extracted", &pick(&(0..10).collect::<Vec<_>>())),
        dataset_stats("filtered", &pick(&(0..9).collect::<Vec<_>>())),
        dataset_stats("debiased", &pick(&kept)),
    ]);
    assert_eq!(std::fs::read_to_string(dir.join("ds/stats.tsv")).unwrap(), expected);
    let manifest = std::fs::read_to_string(dir.join("ds/dataset.tsv")).unwrap();
    let ids: Vec<&str> = manifest.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    let want: Vec<String> = kept.iter().map(|&i| entries[i].id.clone()).collect();
    assert_eq!(ids, want);
}

#[test]
fn ligand_stage_without_affinity_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&enzymeflow(dir, &["synth-data", "--records", "2", "--out", "raw"]));
    let labels = std::fs::read_to_string(dir.join("raw/labels.tsv")).unwrap();
    let stripped: String = labels
        .lines()
        .map(|l| match l.rsplit_once('\t') {
            Some((head, _)) if !l.starts_with("id\t") => format!("{head}\t-\n"),
            _ => format!("{l}\n"),
        })
        .collect();
    std::fs::write(dir.join("raw/labels.tsv"), stripped).unwrap();
    ok(&enzymeflow(dir, &["curate", "--list", "raw/raw.tsv", "--labels", "raw/labels.tsv", "--out", "ds"]));
    let mut args = small_model();
    args.extend(["train", "--stage", "ligand", "--data", "ds/dataset.tsv", "--steps", "1", "--out", "m.ckpt"]);
    let out = enzymeflow(dir, &args);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("configuration error") && err.contains("affinity"), "{err}");
    assert!(!dir.join("m.ckpt").exists());
}

#[test]
fn exit_codes_follow_the_error_family() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(enzymeflow(dir, &["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(enzymeflow(dir, &[]).status.code(), Some(2));
    assert_eq!(enzymeflow(dir, &["--set", "train.lr=x", "--print-config"]).status.code(), Some(2));
    assert_eq!(enzymeflow(dir, &["--set", "nope=1", "--print-config"]).status.code(), Some(2));
    let missing = enzymeflow(dir, &["train", "--data", "missing.tsv", "--out", "m.ckpt"]);
    assert_eq!(missing.status.code(), Some(3));
    std::fs::write(dir.join("bad.tsv"), "not a header\n").unwrap();
    assert_eq!(
        enzymeflow(dir, &["train", "--data", "bad.tsv", "--out", "m.ckpt"]).status.code(),
        Some(3)
    );
}

#[test]
fn print_config_lists_every_default() {
    let tmp = tempfile::tempdir().unwrap();
    let out = enzymeflow(tmp.path(), &["--set", "train.lr=0.01", "--print-config"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("train.lr = 0.01\n"));
    assert!(text.contains("sample.steps = 50\n"));
    std::fs::write(tmp.path().join("run.cfg"), &text).unwrap();
    let again = enzymeflow(tmp.path(), &["--config", "run.cfg", "--print-config"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn replay_reproduces_and_detects_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepared(dir);
    let mut args = small_model();
    args.extend(["sample", "--checkpoint", "m.ckpt", "--data", "ds/dataset.tsv", "--T", "5", "--out", "s"]);
    ok(&enzymeflow(dir, &args));
    let first = std::fs::read(dir.join("s/synth0001/sample_000.txt")).unwrap();
    std::fs::remove_file(dir.join("s/synth0001/sample_000.txt")).unwrap();
    let replay = enzymeflow(dir, &["replay", "s/manifest.json"]);
    ok(&replay);
    assert!(String::from_utf8_lossy(&replay.stdout).contains("outputs identical"));
    assert_eq!(std::fs::read(dir.join("s/synth0001/sample_000.txt")).unwrap(), first);

    ok(&enzymeflow(dir, &["replay", "m.ckpt.manifest.json"]));
    let mut labels = std::fs::read_to_string(dir.join("raw/labels.tsv")).unwrap();
    labels.push('\n');
    std::fs::write(dir.join("raw/labels.tsv"), labels).unwrap();
    assert_eq!(enzymeflow(dir, &["replay", "ds/manifest.json"]).status.code(), Some(5));
}
