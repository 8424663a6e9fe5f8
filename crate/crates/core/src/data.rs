//! Curation: structure input, pocket extraction, size filtering, sequence
//! identity, homology clustering and debiasing; record assembly from the
//! on-disk dataset layout; and a synthetic generator for desk-scale runs.

use crate::coevolution::{read_msa, tokenize_coevolution, Alignment, CoEvoMatrix, CoEvoVocabulary, PAD};
use crate::config::ModelConfig;
use crate::discrete::{amino_acid_index, AMINO_ACIDS, EC_SPACE};
use crate::error::{Error, Result};
use crate::geometry::{
    frame_from_backbone, sample_uniform_rotation, so3_exp, Pocket, ResidueFrame, Rotation,
    BACKBONE_TEMPLATE_ANGSTROM, MODEL_UNITS_PER_ANGSTROM,
};
use crate::io_util::{read_to_string, sha256_hex};
use crate::molecule::{element_index, format_molecule, read_molecule, Bond, Molecule2D, Molecule3D, MoleculeFile};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const POCKET_RADIUS_ANGSTROM: f64 = 10.0;
pub const MIN_POCKET_RESIDUES: usize = 32;

const THREE_LETTER: [&str; 20] = [
    "ALA", "CYS", "ASP", "GLU", "PHE", "GLY", "HIS", "ILE", "LYS", "LEU", "MET", "ASN", "PRO", "GLN", "ARG",
    "SER", "THR", "VAL", "TRP", "TYR",
];

pub fn three_letter_code(aa: usize) -> &'static str {
    THREE_LETTER[aa]
}

/// One residue of an input structure, in Å.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureResidue {
    pub index: i64,
    pub aa: char,
    /// N, CA, C, O.
    pub atoms: [Vector3<f64>; 4],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProteinStructure {
    pub residues: Vec<StructureResidue>,
}

impl ProteinStructure {
    pub fn sequence(&self) -> String {
        self.residues.iter().map(|r| r.aa).collect()
    }
}

fn columns(line: &str, start: usize, end: usize) -> &str {
    let end = end.min(line.len());
    if start >= end {
        ""
    } else {
        line.get(start..end).unwrap_or("").trim()
    }
}

/// Reads the fixed-column ATOM subset: atom name (13–16), residue name
/// (18–20), residue number (23–26), x/y/z (31–54). Only N, CA, C and O are
/// kept and every residue needs all four.
pub fn parse_structure(text: &str, path: &Path) -> Result<ProteinStructure> {
    let mut residues: Vec<StructureResidue> = Vec::new();
    let mut pending: Option<(i64, char, [Option<Vector3<f64>>; 4], usize)> = None;
    let finish = |p: (i64, char, [Option<Vector3<f64>>; 4], usize), out: &mut Vec<StructureResidue>| -> Result<()> {
        let (index, aa, atoms, line) = p;
        let mut full = [Vector3::zeros(); 4];
        for (k, a) in atoms.iter().enumerate() {
            full[k] = a.ok_or_else(|| {
                Error::parse(
                    path,
                    line,
                    format!("residue {index} lacks backbone atom {}", ["N", "CA", "C", "O"][k]),
                )
            })?;
        }
        if let Some(last) = out.last() {
            if index <= last.index {
                return Err(Error::parse(path, line, format!("residue number {index} is not increasing")));
            }
        }
        out.push(StructureResidue { index, aa, atoms: full });
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if !line.starts_with("ATOM  ") {
            continue;
        }
        let name = columns(line, 12, 16);
        let slot = match name {
            "N" => 0,
            "CA" => 1,
            "C" => 2,
            "O" => 3,
            _ => continue,
        };
        let res_name = columns(line, 17, 20);
        let aa = THREE_LETTER
            .iter()
            .position(|&c| c == res_name)
            .map(|k| AMINO_ACIDS[k])
            .ok_or_else(|| Error::parse(path, ln, format!("unknown residue name {res_name:?}")))?;
        let index: i64 = columns(line, 22, 26)
            .parse()
            .map_err(|_| Error::parse(path, ln, "bad residue number"))?;
        let mut xyz = [0.0f64; 3];
        for (k, range) in [(30, 38), (38, 46), (46, 54)].iter().enumerate() {
            let f = columns(line, range.0, range.1);
            xyz[k] = f
                .parse()
                .map_err(|_| Error::parse(path, ln, format!("bad coordinate {f:?}")))?;
            if !xyz[k].is_finite() {
                return Err(Error::parse(path, ln, "non-finite coordinate"));
            }
        }
        let same = matches!(&pending, Some((idx, _, _, _)) if *idx == index);
        if !same {
            if let Some(p) = pending.take() {
                finish(p, &mut residues)?;
            }
            pending = Some((index, aa, [None; 4], ln));
        }
        let p = pending.as_mut().expect("pending residue");
        if p.1 != aa {
            return Err(Error::parse(path, ln, format!("residue {index} changes name")));
        }
        p.2[slot] = Some(Vector3::from(xyz));
    }
    if let Some(p) = pending.take() {
        finish(p, &mut residues)?;
    }
    Ok(ProteinStructure { residues })
}

pub fn read_structure(path: &Path) -> Result<ProteinStructure> {
    parse_structure(&read_to_string(path)?, path)
}

pub fn format_structure(protein: &ProteinStructure) -> String {
    let mut s = String::new();
    let mut serial = 1;
    for r in &protein.residues {
        let aa = amino_acid_index(r.aa).map_or("UNK", three_letter_code);
        for (k, name) in ["N", "CA", "C", "O"].iter().enumerate() {
            let p = r.atoms[k];
            let _ = writeln!(
                s,
                "ATOM  {:>5} {:<4} {:>3} A{:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00           {}",
                serial,
                format!(" {name}"),
                aa,
                r.index,
                p.x,
                p.y,
                p.z,
                &name[..1]
            );
            serial += 1;
        }
    }
    s.push_str("END\n");
    s
}

/// Residues whose CA lies within `radius` (Å) of any ligand atom, in input
/// order, as frames in Å with CA at the origin.
pub fn extract_pocket(protein: &ProteinStructure, ligand: &[Vector3<f64>], radius: f64) -> Result<Pocket> {
    let r2 = radius * radius;
    let mut residues = Vec::new();
    for res in &protein.residues {
        let ca = res.atoms[1];
        if ligand.iter().any(|a| (a - ca).norm_squared() <= r2) {
            let frame = frame_from_backbone(&res.atoms[0], &ca, &res.atoms[2])?;
            residues.push(ResidueFrame {
                trans: frame.trans,
                rot: frame.rot,
                aatype: amino_acid_index(res.aa).ok_or(Error::Alphabet { ch: res.aa })?,
            });
        }
    }
    if residues.is_empty() {
        return Err(Error::EmptyPocket { radius });
    }
    Ok(Pocket::new(residues))
}

pub fn filter_min_residues(pocket: &Pocket, min_n: usize) -> bool {
    pocket.len() >= min_n
}

/// Alignment scores ×10 so ties compare exactly: match 10, mismatch 0, gap
/// open −10 (covers the first gapped column), each further column −1.
const MATCH: i64 = 10;
const GAP_OPEN: i64 = -10;
const GAP_EXTEND: i64 = -1;

/// (score, matches, −length): optimal alignments compare lexicographically,
/// so ties in score go to more matches, then to shorter alignments.
type Cell = (i64, i64, i64);

const NEG: Cell = (i64::MIN / 4, 0, 0);

fn add(c: Cell, score: i64, matches: i64) -> Cell {
    (c.0 + score, c.1 + matches, c.2 - 1)
}

fn check_alphabet(s: &str) -> Result<()> {
    match s.chars().find(|&c| amino_acid_index(c).is_none()) {
        Some(ch) => Err(Error::Alphabet { ch }),
        None => Ok(()),
    }
}

/// Global affine-gap alignment identity: matches / alignment length of the
/// optimal alignment (ties broken toward more matches, then fewer columns).
pub fn sequence_identity(a: &str, b: &str) -> Result<f64> {
    check_alphabet(a)?;
    check_alphabet(b)?;
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::Length("sequence identity needs nonempty sequences".into()));
    }
    let (n, m) = (a.len(), b.len());
    // m_: ends in an aligned pair; x: ends with a gap in b; y: gap in a
    let mut mm = vec![vec![NEG; m + 1]; n + 1];
    let mut x = vec![vec![NEG; m + 1]; n + 1];
    let mut y = vec![vec![NEG; m + 1]; n + 1];
    mm[0][0] = (0, 0, 0);
    for i in 0..=n {
        for j in 0..=m {
            if i > 0 && j > 0 {
                let hit = a[i - 1] == b[j - 1];
                let best = mm[i - 1][j - 1].max(x[i - 1][j - 1]).max(y[i - 1][j - 1]);
                mm[i][j] = add(best, if hit { MATCH } else { 0 }, hit as i64);
            }
            if i > 0 {
                let open = mm[i - 1][j].max(y[i - 1][j]);
                x[i][j] = add(open, GAP_OPEN, 0).max(add(x[i - 1][j], GAP_EXTEND, 0));
            }
            if j > 0 {
                let open = mm[i][j - 1].max(x[i][j - 1]);
                y[i][j] = add(open, GAP_OPEN, 0).max(add(y[i][j - 1], GAP_EXTEND, 0));
            }
        }
    }
    let best = mm[n][m].max(x[n][m]).max(y[n][m]);
    Ok(best.1 as f64 / (-best.2) as f64)
}

/// Greedy centroid clustering. Sequences are visited longest first (ties in
/// input order); each joins the earliest-founded centroid with identity
/// ≥ `threshold`, else founds a cluster. Returns (cluster id per input,
/// centroid input index per cluster).
pub fn cluster_by_homology(seqs: &[String], threshold: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by(|&i, &j| seqs[j].len().cmp(&seqs[i].len()).then(i.cmp(&j)));
    let mut assignment = vec![usize::MAX; seqs.len()];
    let mut centroids: Vec<usize> = Vec::new();
    for &i in &order {
        let mut joined = None;
        for (c, &rep) in centroids.iter().enumerate() {
            if sequence_identity(&seqs[i], &seqs[rep])? >= threshold {
                joined = Some(c);
                break;
            }
        }
        assignment[i] = match joined {
            Some(c) => c,
            None => {
                centroids.push(i);
                centroids.len() - 1
            }
        };
    }
    Ok((assignment, centroids))
}

/// Indices of records kept by debiasing: each cluster's centroid plus every
/// record whose sequence equals that centroid's, in input order.
pub fn debias(seqs: &[String], threshold: f64) -> Result<Vec<usize>> {
    let (assignment, centroids) = cluster_by_homology(seqs, threshold)?;
    Ok((0..seqs.len())
        .filter(|&i| seqs[i] == seqs[centroids[assignment[i]]])
        .collect())
}

/// One row of the dataset statistics table.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub label: String,
    pub reactions: usize,
    pub enzymes: usize,
    pub substrates: usize,
    pub substrate_avg_atoms: f64,
    pub products: usize,
    pub product_avg_atoms: f64,
    /// Counts for EC1..EC7.
    pub ec_counts: [usize; 7],
}

/// Summary keys of one record: sequence, substrate and product content keys,
/// their atom counts, and the EC digit (1..7).
#[derive(Debug, Clone, PartialEq)]
pub struct StatsEntry {
    pub sequence: String,
    pub substrate_key: String,
    pub substrate_atoms: usize,
    pub product_key: String,
    pub product_atoms: usize,
    pub ec_digit: usize,
}

pub fn dataset_stats(label: &str, entries: &[&StatsEntry]) -> DatasetStats {
    let mut substrates: BTreeMap<&str, usize> = BTreeMap::new();
    let mut products: BTreeMap<&str, usize> = BTreeMap::new();
    let mut enzymes = BTreeSet::new();
    let mut reactions = BTreeSet::new();
    let mut ec_counts = [0; 7];
    for e in entries {
        substrates.insert(&e.substrate_key, e.substrate_atoms);
        products.insert(&e.product_key, e.product_atoms);
        enzymes.insert(e.sequence.as_str());
        reactions.insert((e.substrate_key.as_str(), e.product_key.as_str()));
        if (1..=7).contains(&e.ec_digit) {
            ec_counts[e.ec_digit - 1] += 1;
        }
    }
    let avg = |m: &BTreeMap<&str, usize>| {
        if m.is_empty() {
            0.0
        } else {
            m.values().sum::<usize>() as f64 / m.len() as f64
        }
    };
    DatasetStats {
        label: label.to_string(),
        reactions: reactions.len(),
        enzymes: enzymes.len(),
        substrates: substrates.len(),
        substrate_avg_atoms: avg(&substrates),
        products: products.len(),
        product_avg_atoms: avg(&products),
        ec_counts,
    }
}

pub fn format_stats_tsv(rows: &[DatasetStats]) -> String {
    let mut s = String::from("data\treactions\tenzymes\tsubstrates\tsubstrate_avg_atoms\tproducts\tproduct_avg_atoms");
    for k in 1..=7 {
        let _ = write!(s, "\tEC{k}\tEC{k}_pct");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{:.2}\t{}\t{:.2}",
            r.label, r.reactions, r.enzymes, r.substrates, r.substrate_avg_atoms, r.products, r.product_avg_atoms
        );
        let total: usize = r.ec_counts.iter().sum();
        for c in r.ec_counts {
            let pct = if total > 0 { 100.0 * c as f64 / total as f64 } else { 0.0 };
            let _ = write!(s, "\t{c}\t{pct:.2}");
        }
        s.push('\n');
    }
    s
}

// ---- pocket files --------------------------------------------------------

/// `index letter qw qx qy qz tx ty tz` per residue (translations in Å).
pub fn format_pocket_lines(pocket: &Pocket) -> String {
    let mut s = String::new();
    for (i, r) in pocket.residues.iter().enumerate() {
        let rec = r.to_record();
        let _ = write!(s, "{i} {}", r.aa_letter());
        for v in rec {
            let _ = write!(s, " {v:.9}");
        }
        s.push('\n');
    }
    s
}

fn parse_pocket_line(line: &str, path: &Path, ln: usize) -> Result<ResidueFrame> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 9 {
        return Err(Error::parse(path, ln, "residue rows are `index letter qw qx qy qz tx ty tz`"));
    }
    let letter = fields[1]
        .chars()
        .next()
        .filter(|_| fields[1].chars().count() == 1)
        .ok_or_else(|| Error::parse(path, ln, "amino-acid letter"))?;
    let aatype = amino_acid_index(letter).ok_or_else(|| Error::parse(path, ln, format!("unknown amino acid {letter:?}")))?;
    let mut rec = [0.0; 7];
    for (k, f) in fields[2..].iter().enumerate() {
        rec[k] = f
            .parse()
            .map_err(|_| Error::parse(path, ln, format!("bad number {f:?}")))?;
    }
    ResidueFrame::from_record(&rec, aatype).map_err(|e| Error::parse(path, ln, e.to_string()))
}

pub fn parse_pocket(text: &str, path: &Path) -> Result<Pocket> {
    let mut residues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        residues.push(parse_pocket_line(line, path, i + 1)?);
    }
    Ok(Pocket::new(residues))
}

pub fn read_pocket(path: &Path) -> Result<Pocket> {
    parse_pocket(&read_to_string(path)?, path)
}

/// Scales translations; rotations and types are unchanged.
pub fn scale_pocket(pocket: &Pocket, factor: f64) -> Pocket {
    Pocket::new(
        pocket
            .residues
            .iter()
            .map(|r| ResidueFrame {
                trans: r.trans * factor,
                ..*r
            })
            .collect(),
    )
}

// ---- manifests -------------------------------------------------------------

/// A line of the raw input list.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEntry {
    pub id: String,
    pub structure: PathBuf,
    pub substrate: PathBuf,
    pub product: PathBuf,
    pub msa: PathBuf,
}

/// A line of the curated dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub pocket: PathBuf,
    pub substrate: PathBuf,
    pub product: PathBuf,
    pub msa: PathBuf,
    /// EC digit 1..7.
    pub ec: usize,
    pub affinity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub ec: usize,
    pub affinity: Option<f64>,
}

fn tsv_rows<'a>(text: &'a str, header: &str, path: &Path, width: usize) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            seen_header = true;
            if line.trim_end() != header {
                return Err(Error::parse(path, ln, format!("expected header {header:?}")));
            }
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != width {
            return Err(Error::parse(path, ln, format!("expected {width} tab-separated fields")));
        }
        rows.push((ln, fields));
    }
    if !seen_header {
        return Err(Error::parse(path, 1, format!("missing header {header:?}")));
    }
    Ok(rows)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub const RAW_HEADER: &str = "id\tstructure\tsubstrate\tproduct\tmsa";
pub const LABELS_HEADER: &str = "id\tec\taffinity";
pub const DATASET_HEADER: &str = "id\tpocket\tsubstrate\tproduct\tmsa\tec\taffinity";

pub fn read_raw_list(path: &Path) -> Result<Vec<RawEntry>> {
    let text = read_to_string(path)?;
    let base = base_dir(path);
    tsv_rows(&text, RAW_HEADER, path, 5)?
        .into_iter()
        .map(|(_, f)| {
            Ok(RawEntry {
                id: f[0].to_string(),
                structure: resolve(&base, f[1]),
                substrate: resolve(&base, f[2]),
                product: resolve(&base, f[3]),
                msa: resolve(&base, f[4]),
            })
        })
        .collect()
}

fn parse_ec(s: &str, path: &Path, ln: usize) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(d) if (1..=EC_SPACE.num_real()).contains(&d) => Ok(d),
        _ => Err(Error::parse(path, ln, format!("EC class must be a digit 1..7, found {s:?}"))),
    }
}

fn parse_affinity(s: &str, path: &Path, ln: usize) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::parse(path, ln, format!("bad affinity {s:?}"))),
    }
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Label>> {
    let text = read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (ln, f) in tsv_rows(&text, LABELS_HEADER, path, 3)? {
        let label = Label {
            ec: parse_ec(f[1], path, ln)?,
            affinity: parse_affinity(f[2], path, ln)?,
        };
        if out.insert(f[0].to_string(), label).is_some() {
            return Err(Error::parse(path, ln, format!("duplicate id {:?}", f[0])));
        }
    }
    Ok(out)
}

pub fn read_dataset_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let text = read_to_string(path)?;
    let base = base_dir(path);
    tsv_rows(&text, DATASET_HEADER, path, 7)?
        .into_iter()
        .map(|(ln, f)| {
            Ok(DatasetEntry {
                id: f[0].to_string(),
                pocket: resolve(&base, f[1]),
                substrate: resolve(&base, f[2]),
                product: resolve(&base, f[3]),
                msa: resolve(&base, f[4]),
                ec: parse_ec(f[5], path, ln)?,
                affinity: parse_affinity(f[6], path, ln)?,
            })
        })
        .collect()
}

fn affinity_field(a: Option<f64>) -> String {
    a.map_or_else(|| "-".to_string(), |v| format!("{v}"))
}

/// Writes paths as given; callers pass paths relative to the manifest.
pub fn format_dataset_manifest(entries: &[DatasetEntry]) -> String {
    let mut s = format!("{DATASET_HEADER}\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.pocket.display(),
            e.substrate.display(),
            e.product.display(),
            e.msa.display(),
            e.ec,
            affinity_field(e.affinity)
        );
    }
    s
}

pub fn format_raw_list(entries: &[RawEntry]) -> String {
    let mut s = format!("{RAW_HEADER}\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            e.id,
            e.structure.display(),
            e.substrate.display(),
            e.product.display(),
            e.msa.display()
        );
    }
    s
}

pub fn format_labels(labels: &BTreeMap<String, Label>) -> String {
    let mut s = format!("{LABELS_HEADER}\n");
    for (id, l) in labels {
        let _ = writeln!(s, "{id}\t{}\t{}", l.ec, affinity_field(l.affinity));
    }
    s
}

// ---- training records ------------------------------------------------------

/// A training or evaluation record in model units, centered on the
/// substrate centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnzymeRecord {
    pub id: String,
    pub pocket: Pocket,
    pub substrate: Molecule3D,
    pub product: Molecule2D,
    /// EC state 0..6 (EC1..EC7).
    pub ec: usize,
    pub coevo: CoEvoMatrix,
    pub sequence: String,
    /// Raw label as read; standardized copies live in the trainer.
    pub affinity: Option<f64>,
    /// Substrate centroid in Å, subtracted from all input coordinates.
    pub origin: Vector3<f64>,
}

impl EnzymeRecord {
    /// Centers Å inputs on the substrate centroid and converts to model units.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        id: &str,
        pocket_angstrom: &Pocket,
        substrate: &MoleculeFile,
        product: &MoleculeFile,
        alignment: &Alignment,
        ec_digit: usize,
        affinity: Option<f64>,
        cfg: &ModelConfig,
        vocab: &CoEvoVocabulary,
    ) -> Result<Self> {
        if !(1..=EC_SPACE.num_real()).contains(&ec_digit) {
            return Err(Error::Config(format!("{id}: EC digit {ec_digit} is not in 1..7")));
        }
        if substrate.elements.is_empty() {
            return Err(Error::Graph(format!("{id}: substrate has no atoms")));
        }
        let origin = substrate.coords.iter().sum::<Vector3<f64>>() / substrate.coords.len() as f64;
        let centered = MoleculeFile {
            coords: substrate.coords.iter().map(|c| c - origin).collect(),
            ..substrate.clone()
        };
        let pocket = Pocket::new(
            pocket_angstrom
                .residues
                .iter()
                .map(|r| ResidueFrame {
                    trans: (r.trans - origin) * MODEL_UNITS_PER_ANGSTROM,
                    ..*r
                })
                .collect(),
        );
        let pad = vocab.state(PAD)?;
        let coevo = tokenize_coevolution(&alignment.enzyme_rows, &alignment.reaction_rows, vocab, cfg.n_token)?
            .fit_rows(cfg.n_msa, pad);
        Ok(EnzymeRecord {
            id: id.to_string(),
            sequence: pocket.sequence(),
            pocket,
            substrate: centered.to_3d()?,
            product: product.to_2d()?,
            ec: ec_digit - 1,
            coevo,
            affinity,
            origin,
        })
    }
}

/// Loads every record listed in a curated manifest.
pub fn load_dataset(manifest: &Path, cfg: &ModelConfig) -> Result<Vec<EnzymeRecord>> {
    let vocab = CoEvoVocabulary::standard();
    read_dataset_manifest(manifest)?
        .iter()
        .map(|e| {
            EnzymeRecord::assemble(
                &e.id,
                &read_pocket(&e.pocket)?,
                &read_molecule(&e.substrate)?,
                &read_molecule(&e.product)?,
                &read_msa(&e.msa)?,
                e.ec,
                e.affinity,
                cfg,
                &vocab,
            )
        })
        .collect()
}

// ---- synthetic data --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub records: usize,
    pub pocket_residues: usize,
    /// Residues placed far from the ligand so extraction has work to do.
    pub distal_residues: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub msa_rows: usize,
    /// Radius (Å) of the shell carrying the pocket CAs.
    pub shell_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            records: 5,
            pocket_residues: 32,
            distal_residues: 8,
            min_atoms: 3,
            max_atoms: 6,
            msa_rows: 4,
            shell_radius: 6.5,
        }
    }
}

/// One generated enzyme–reaction pair in file-level form (Å).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEntry {
    pub id: String,
    pub structure: ProteinStructure,
    pub substrate: MoleculeFile,
    pub product: MoleculeFile,
    pub alignment: Alignment,
    pub ec: usize,
    pub affinity: Option<f64>,
}

impl SyntheticEntry {
    /// Curates the entry in memory: pocket extraction, then record assembly.
    pub fn to_record(&self, cfg: &ModelConfig, vocab: &CoEvoVocabulary) -> Result<EnzymeRecord> {
        let pocket = extract_pocket(&self.structure, &self.substrate.coords, POCKET_RADIUS_ANGSTROM)?;
        EnzymeRecord::assemble(
            &self.id,
            &pocket,
            &self.substrate,
            &self.product,
            &self.alignment,
            self.ec,
            self.affinity,
            cfg,
            vocab,
        )
    }
}

const SYNTH_ELEMENTS: [&str; 4] = ["C", "N", "O", "S"];
const REACTION_CHARS: [char; 10] = ['C', 'N', 'O', 'c', 'n', '(', ')', '=', '1', 'O'];

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn synth_molecule<R: Rng + ?Sized>(rng: &mut R, atoms: usize, center: Vector3<f64>) -> MoleculeFile {
    let mut coords = vec![Vector3::zeros()];
    let mut bonds = Vec::new();
    // self-avoiding chain with 1.5 Å bonds, kept within 3 Å of the start
    while coords.len() < atoms {
        let parent = rng.random_range(0..coords.len());
        let candidate = coords[parent] + random_unit(rng) * 1.5;
        if candidate.norm() <= 3.0 && coords.iter().all(|c| (c - candidate).norm() > 1.2) {
            bonds.push(Bond {
                a: parent,
                b: coords.len(),
                kind: rng.random_range(0..2),
            });
            coords.push(candidate);
        }
    }
    let mean = coords.iter().sum::<Vector3<f64>>() / atoms as f64;
    MoleculeFile {
        elements: (0..atoms)
            .map(|_| element_index(SYNTH_ELEMENTS[rng.random_range(0..SYNTH_ELEMENTS.len())]))
            .collect(),
        coords: coords.iter().map(|c| c - mean + center).collect(),
        bonds,
    }
}

fn residue_atoms(rot: &Rotation, ca: &Vector3<f64>) -> [Vector3<f64>; 4] {
    std::array::from_fn(|k| rot.apply(&Vector3::from(BACKBONE_TEMPLATE_ANGSTROM[k])) + ca)
}

/// Frames along a spiral on a sphere around `center`, jittered.
fn shell_residues<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    center: &Vector3<f64>,
    radius: f64,
    jitter: f64,
) -> Vec<(Rotation, Vector3<f64>)> {
    let turns = (n as f64 / 6.0).max(1.0);
    let spin = sample_uniform_rotation(rng);
    let point = |s: f64| {
        let z = 1.0 - 2.0 * s;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = 2.0 * std::f64::consts::PI * turns * s;
        spin.apply(&Vector3::new(r * phi.cos(), r * phi.sin(), z))
    };
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) / n as f64;
            let dir = point(s);
            let ahead = point(s + 0.25 / n as f64) - point(s - 0.25 / n as f64);
            let e1 = (ahead - dir * dir.dot(&ahead)).normalize();
            let e2 = -dir;
            let e3 = e1.cross(&e2);
            let base = Rotation::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[e1, e2, e3]));
            let wobble = so3_exp(&(random_unit(rng) * rng.random_range(0.0..0.3)));
            let r = radius + rng.random_range(-jitter..=jitter);
            (base.compose(&wobble), center + dir * r)
        })
        .collect()
}

fn mutate(seq: &str, rng: &mut impl Rng, rate: f64) -> String {
    seq.chars()
        .map(|c| {
            let u: f64 = rng.random();
            if u < rate * 0.3 {
                '-'
            } else if u < rate {
                AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())]
            } else {
                c
            }
        })
        .collect()
}

/// Procedural enzyme–reaction pairs; deterministic for a given RNG state.
pub fn generate_synthetic_dataset<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> Vec<SyntheticEntry> {
    (0..cfg.records)
        .map(|k| {
            let center = Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0));
            let atoms = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
            let substrate = synth_molecule(rng, atoms, center);
            let mut product = substrate.clone();
            if let Some(b) = product.bonds.first_mut() {
                b.kind = (b.kind + 1) % 3;
            }
            product.elements.push(element_index("O"));
            product.coords.push(center);
            product.bonds.push(Bond {
                a: 0,
                b: atoms,
                kind: 0,
            });

            let pocket = shell_residues(rng, cfg.pocket_residues, &center, cfg.shell_radius, 0.3);
            let distal = shell_residues(rng, cfg.distal_residues, &center, 25.0, 1.0);
            let split = cfg.distal_residues / 2;
            let mut residues = Vec::new();
            let placed = distal[..split].iter().chain(&pocket).chain(&distal[split..]);
            for (i, (rot, ca)) in placed.enumerate() {
                residues.push(StructureResidue {
                    index: i as i64 + 1,
                    aa: AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())],
                    atoms: residue_atoms(rot, ca),
                });
            }
            let structure = ProteinStructure { residues };
            let pocket_seq: String = structure.residues[split..split + cfg.pocket_residues]
                .iter()
                .map(|r| r.aa)
                .collect();

            let rlen = rng.random_range(8..16);
            let reaction: String = (0..rlen)
                .map(|_| REACTION_CHARS[rng.random_range(0..REACTION_CHARS.len())])
                .collect::<String>()
                + ">"
                + &(0..rlen)
                    .map(|_| REACTION_CHARS[rng.random_range(0..REACTION_CHARS.len())])
                    .collect::<String>();
            let mut enzyme_rows = vec![pocket_seq.clone()];
            for _ in 1..cfg.msa_rows {
                enzyme_rows.push(mutate(&pocket_seq, rng, 0.15));
            }
            let alignment = Alignment {
                reaction_rows: vec![reaction; cfg.msa_rows],
                enzyme_rows,
            };
            let ec = rng.random_range(1..=EC_SPACE.num_real());
            let noise: f64 = StandardNormal.sample(rng);
            let affinity = 6.0 + 1.5 * noise;
            SyntheticEntry {
                id: format!("synth{k:04}"),
                structure,
                substrate,
                product,
                alignment,
                ec,
                affinity: Some(affinity),
            }
        })
        .collect()
}

/// Small fixed record: four residues, a three-atom substrate, a three-atom
/// product and a two-row alignment. Used by gradient checks and tests.
pub fn canonical_record(cfg: &ModelConfig) -> EnzymeRecord {
    let residues: Vec<ResidueFrame> = (0..4)
        .map(|i| {
            let phi = 1.7 * i as f64;
            let ca = Vector3::new(4.6 * phi.cos(), 4.6 * phi.sin(), 1.5 * i as f64 - 2.0);
            ResidueFrame {
                trans: ca,
                rot: so3_exp(&Vector3::new(0.3 * i as f64, -0.2, 0.5 + 0.4 * i as f64)),
                aatype: [3, 11, 0, 17][i],
            }
        })
        .collect();
    let substrate = MoleculeFile {
        elements: vec![element_index("C"), element_index("O"), element_index("N")],
        coords: vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.4, 0.2, 0.0),
            Vector3::new(-0.6, 1.3, 0.3),
        ],
        bonds: vec![Bond { a: 0, b: 1, kind: 0 }, Bond { a: 0, b: 2, kind: 0 }],
    };
    let product = MoleculeFile {
        bonds: vec![Bond { a: 0, b: 1, kind: 1 }, Bond { a: 0, b: 2, kind: 0 }],
        ..substrate.clone()
    };
    let alignment = Alignment {
        enzyme_rows: vec!["EMAV".into(), "EM-V".into()],
        reaction_rows: vec!["CO>C=O".into(), "CO>C=O".into()],
    };
    EnzymeRecord::assemble(
        "canonical",
        &Pocket::new(residues),
        &substrate,
        &product,
        &alignment,
        2,
        Some(1.0),
        cfg,
        &CoEvoVocabulary::standard(),
    )
    .expect("canonical record is valid")
}

/// Content hash over the serialized files of a synthetic dataset.
pub fn synthetic_digest(entries: &[SyntheticEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&e.id);
        s.push_str(&format_structure(&e.structure));
        s.push_str(&format_molecule(&e.substrate));
        s.push_str(&format_molecule(&e.product));
        s.push_str(&crate::coevolution::format_msa(&e.alignment));
        let _ = writeln!(s, "{}\t{}", e.ec, affinity_field(e.affinity));
    }
    sha256_hex(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_examples() {
        assert_eq!(sequence_identity("AAAA", "AAAA").unwrap(), 1.0);
        assert_eq!(sequence_identity("AAAA", "TTTT").unwrap(), 0.0);
        assert_eq!(sequence_identity("AAAA", "AATT").unwrap(), 0.5);
        assert!(matches!(sequence_identity("AAXA", "AAAA"), Err(Error::Alphabet { ch: 'X' })));
    }

    #[test]
    fn filter_boundary() {
        let pocket = |n| Pocket::new(vec![ResidueFrame {
            trans: Vector3::zeros(),
            rot: Rotation::identity(),
            aatype: 0,
        }; n]);
        for n in 0..40 {
            assert_eq!(filter_min_residues(&pocket(n), 32), n >= 32);
        }
    }

    #[test]
    fn structure_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries = generate_synthetic_dataset(&mut rng, &SynthConfig::default());
        let s = &entries[0].structure;
        let text = format_structure(s);
        let back = parse_structure(&text, Path::new("mem")).unwrap();
        assert_eq!(back.sequence(), s.sequence());
        for (a, b) in back.residues.iter().zip(&s.residues) {
            for k in 0..4 {
                assert!((a.atoms[k] - b.atoms[k]).norm() < 1e-3);
            }
        }
    }

    #[test]
    fn synthetic_pockets_extract_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SynthConfig::default();
        for e in generate_synthetic_dataset(&mut rng, &cfg) {
            let pocket = extract_pocket(&e.structure, &e.substrate.coords, POCKET_RADIUS_ANGSTROM).unwrap();
            assert_eq!(pocket.len(), cfg.pocket_residues);
            assert!(filter_min_residues(&pocket, MIN_POCKET_RESIDUES));
        }
    }
}
