//! Conditioning molecules: substrate conformers (3D) and product graphs (2D),
//! their text format, distance features, and the two encoders.

use crate::error::{Error, Result};
use crate::geometry::MODEL_UNITS_PER_ANGSTROM;
use crate::nn::{Bound, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::tape::{AttentionMask, AttentionShape, Tape, Var};
use crate::tensor::Tensor;
use nalgebra::Vector3;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Element categories; anything else maps to the trailing "other" bucket.
pub const ELEMENTS: [&str; 12] = ["H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "B", "Se"];
pub const NUM_ELEMENT_TYPES: usize = ELEMENTS.len() + 1;
pub const OTHER_ELEMENT: usize = ELEMENTS.len();

/// Bond categories: single, double, triple, aromatic.
pub const NUM_BOND_TYPES: usize = 4;

pub fn element_index(symbol: &str) -> usize {
    match ELEMENTS.iter().position(|e| e.eq_ignore_ascii_case(symbol)) {
        Some(i) => i,
        None => {
            log::warn!("element {symbol:?} is not in the element table; using the other bucket");
            OTHER_ELEMENT
        }
    }
}

pub fn element_symbol(index: usize) -> &'static str {
    ELEMENTS.get(index).copied().unwrap_or("X")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule3D {
    pub atom_types: Vec<usize>,
    /// Model units.
    pub coords: Vec<Vector3<f64>>,
    pub atom_mask: Vec<bool>,
}

impl Molecule3D {
    pub fn new(atom_types: Vec<usize>, coords: Vec<Vector3<f64>>) -> Result<Self> {
        let n = atom_types.len();
        let mol = Molecule3D {
            atom_types,
            coords,
            atom_mask: vec![true; n],
        };
        mol.validate()?;
        Ok(mol)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atom_types.len();
        if n == 0 {
            return Err(Error::Graph("a molecule needs at least one atom".into()));
        }
        if self.coords.len() != n || self.atom_mask.len() != n {
            return Err(Error::Shape(format!(
                "{n} atom types, {} coordinates, {} mask entries",
                self.coords.len(),
                self.atom_mask.len()
            )));
        }
        if self.coords.iter().any(|c| !c.iter().all(|v| v.is_finite())) {
            return Err(Error::Graph("non-finite atom coordinate".into()));
        }
        if let Some(&t) = self.atom_types.iter().find(|&&t| t >= NUM_ELEMENT_TYPES) {
            return Err(Error::Graph(format!("atom type {t} out of range")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atom_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atom_types.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let (sum, count) = self
            .coords
            .iter()
            .zip(&self.atom_mask)
            .filter(|(_, &m)| m)
            .fold((Vector3::zeros(), 0usize), |(s, c), (p, _)| (s + p, c + 1));
        if count == 0 {
            Vector3::zeros()
        } else {
            sum / count as f64
        }
    }

    pub fn transformed(&self, g: &crate::geometry::RigidTransform) -> Self {
        Molecule3D {
            coords: self.coords.iter().map(|p| g.apply(p)).collect(),
            ..self.clone()
        }
    }

    pub fn translated(&self, d: &Vector3<f64>) -> Self {
        Molecule3D {
            coords: self.coords.iter().map(|p| p + d).collect(),
            ..self.clone()
        }
    }

    /// Unmasked coordinates as plain arrays.
    pub fn active_coords(&self) -> Vec<[f64; 3]> {
        self.coords
            .iter()
            .zip(&self.atom_mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| [p.x, p.y, p.z])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    /// 0 single, 1 double, 2 triple, 3 aromatic.
    pub kind: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule2D {
    pub atom_types: Vec<usize>,
    /// Each undirected bond once; the encoder uses both directions.
    pub bonds: Vec<Bond>,
    pub atom_mask: Vec<bool>,
}

impl Molecule2D {
    pub fn new(atom_types: Vec<usize>, bonds: Vec<Bond>) -> Result<Self> {
        let n = atom_types.len();
        let mol = Molecule2D {
            atom_types,
            bonds,
            atom_mask: vec![true; n],
        };
        mol.validate()?;
        Ok(mol)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atom_types.len();
        if n == 0 {
            return Err(Error::Graph("a molecule needs at least one atom".into()));
        }
        if self.atom_mask.len() != n {
            return Err(Error::Shape("atom mask length".into()));
        }
        if let Some(&t) = self.atom_types.iter().find(|&&t| t >= NUM_ELEMENT_TYPES) {
            return Err(Error::Graph(format!("atom type {t} out of range")));
        }
        for b in &self.bonds {
            if b.a >= n || b.b >= n || b.a == b.b {
                return Err(Error::Graph(format!("bond {}-{} is out of range or a self-loop", b.a, b.b)));
            }
            if !self.atom_mask[b.a] || !self.atom_mask[b.b] {
                return Err(Error::Graph(format!("bond {}-{} references a masked atom", b.a, b.b)));
            }
            if b.kind >= NUM_BOND_TYPES {
                return Err(Error::Graph(format!("bond type {} out of range", b.kind)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atom_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atom_types.is_empty()
    }

    /// Relabels atom `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        let mut atom_types = vec![0; n];
        let mut atom_mask = vec![false; n];
        for i in 0..n {
            atom_types[perm[i]] = self.atom_types[i];
            atom_mask[perm[i]] = self.atom_mask[i];
        }
        Molecule2D {
            atom_types,
            bonds: self
                .bonds
                .iter()
                .map(|b| Bond {
                    a: perm[b.a],
                    b: perm[b.b],
                    kind: b.kind,
                })
                .collect(),
            atom_mask,
        }
    }
}

/// Atoms and bonds as stored in a molecule file.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeFile {
    pub elements: Vec<usize>,
    /// Ångström.
    pub coords: Vec<Vector3<f64>>,
    pub bonds: Vec<Bond>,
}

impl MoleculeFile {
    /// Substrate view: coordinates scaled to model units.
    pub fn to_3d(&self) -> Result<Molecule3D> {
        Molecule3D::new(
            self.elements.clone(),
            self.coords.iter().map(|c| c * MODEL_UNITS_PER_ANGSTROM).collect(),
        )
    }

    pub fn to_2d(&self) -> Result<Molecule2D> {
        Molecule2D::new(self.elements.clone(), self.bonds.clone())
    }
}

/// Parses: atom count; `element x y z` rows (Å); optional `BONDS` then
/// `i j order` rows with 0-based atom indices and order 1, 2, 3 or 4
/// (aromatic).
pub fn parse_molecule(text: &str, path: &Path) -> Result<MoleculeFile> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (ln, first) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty molecule file"))?;
    let count: usize = first
        .parse()
        .map_err(|_| Error::parse(path, ln, format!("expected atom count, found {first:?}")))?;
    let mut elements = Vec::with_capacity(count);
    let mut coords = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::parse(path, ln, format!("expected {count} atom rows")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, ln, "atom rows are `element x y z`"));
        }
        let mut xyz = [0.0f64; 3];
        for (k, f) in fields[1..].iter().enumerate() {
            xyz[k] = f
                .parse()
                .map_err(|_| Error::parse(path, ln, format!("bad coordinate {f:?}")))?;
            if !xyz[k].is_finite() {
                return Err(Error::parse(path, ln, "non-finite coordinate"));
            }
        }
        elements.push(element_index(fields[0]));
        coords.push(Vector3::from(xyz));
    }
    let mut bonds = Vec::new();
    if let Some((ln, line)) = lines.next() {
        if !line.eq_ignore_ascii_case("BONDS") {
            return Err(Error::parse(path, ln, format!("expected BONDS, found {line:?}")));
        }
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, ln, "bond rows are `i j order`"));
            }
            let parse = |f: &str| -> Result<usize> {
                f.parse()
                    .map_err(|_| Error::parse(path, ln, format!("bad integer {f:?}")))
            };
            let (a, b, order) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
            if a >= count || b >= count || a == b {
                return Err(Error::parse(path, ln, format!("bond {a}-{b} out of range")));
            }
            if !(1..=4).contains(&order) {
                return Err(Error::parse(path, ln, format!("bond order {order} not in 1..4")));
            }
            bonds.push(Bond { a, b, kind: order - 1 });
        }
    }
    Ok(MoleculeFile {
        elements,
        coords,
        bonds,
    })
}

pub fn read_molecule(path: &Path) -> Result<MoleculeFile> {
    parse_molecule(&crate::io_util::read_to_string(path)?, path)
}

pub fn format_molecule(mol: &MoleculeFile) -> String {
    let mut s = format!("{}\n", mol.elements.len());
    for (e, c) in mol.elements.iter().zip(&mol.coords) {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6}", element_symbol(*e), c.x, c.y, c.z);
    }
    if !mol.bonds.is_empty() {
        s.push_str("BONDS\n");
        for b in &mol.bonds {
            let _ = writeln!(s, "{} {} {}", b.a, b.b, b.kind + 1);
        }
    }
    s
}

/// Gaussian radial basis: feature k = exp(−((d − μ_k)/σ)²), μ_k evenly
/// spaced on [d_min, d_max], σ = (d_max − d_min)/K.
pub fn rbf_featurize(d: f64, d_min: f64, d_max: f64, k: usize) -> Vec<f64> {
    assert!(k >= 2 && d_min < d_max, "rbf needs K ≥ 2 and d_min < d_max");
    let sigma = (d_max - d_min) / k as f64;
    (0..k)
        .map(|i| {
            let mu = d_min + (d_max - d_min) * i as f64 / (k - 1) as f64;
            (-((d - mu) / sigma).powi(2)).exp()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
}

impl Default for RbfConfig {
    fn default() -> Self {
        RbfConfig {
            d_min: 0.0,
            d_max: 2.0,
            bins: 16,
        }
    }
}

/// Distance-based message passing over all atom pairs of a conformer.
#[derive(Debug, Clone)]
pub struct MolEncoder3D {
    pub dim: usize,
    pub rbf: RbfConfig,
    type_embedding: ParamId,
    input: Linear,
    input_norm: LayerNorm,
    layers: Vec<Layer3D>,
}

#[derive(Debug, Clone)]
struct Layer3D {
    edge: Mlp,
    edge_norm: LayerNorm,
    update: Mlp,
    update_norm: LayerNorm,
}

impl MolEncoder3D {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        rbf: RbfConfig,
        layers: usize,
    ) -> Self {
        let type_embedding = store.add(
            format!("{name}.type_embedding"),
            crate::nn::uniform_tensor(rng, NUM_ELEMENT_TYPES, dim, 1.0),
        );
        let input = Linear::new(store, rng, &format!("{name}.input"), dim, dim, true, 1.0);
        let input_norm = LayerNorm::new(store, &format!("{name}.input_norm"), dim);
        let layers = (0..layers)
            .map(|l| {
                let n = format!("{name}.layer{l}");
                Layer3D {
                    edge: Mlp::new(store, rng, &format!("{n}.edge"), &[2 * dim + rbf.bins, dim, dim], 1.0),
                    edge_norm: LayerNorm::new(store, &format!("{n}.edge_norm"), dim),
                    update: Mlp::new(store, rng, &format!("{n}.update"), &[2 * dim, dim, dim], 1.0),
                    update_norm: LayerNorm::new(store, &format!("{n}.update_norm"), dim),
                }
            })
            .collect();
        MolEncoder3D {
            dim,
            rbf,
            type_embedding,
            input,
            input_norm,
            layers,
        }
    }

    /// `N_l × dim` atom embeddings; masked atoms give zero rows.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, mol: &Molecule3D) -> Result<Var> {
        mol.validate()?;
        let n = mol.len();
        let mask: Vec<f64> = mol.atom_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let h = tape.gather_rows(p.var(self.type_embedding), &mol.atom_types);
        let h = tape.silu(h);
        let h = self.input.forward(tape, p, h);
        let h = self.input_norm.forward(tape, p, h);
        let mut h = tape.mask_rows(h, &mask);

        let mut rbf = Tensor::zeros(n * n, self.rbf.bins);
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            let valid: Vec<usize> = (0..n)
                .filter(|&j| j != i && mol.atom_mask[j] && mol.atom_mask[i])
                .collect();
            for &j in &valid {
                weights[i * n + j] = 1.0 / valid.len() as f64;
            }
            for j in 0..n {
                let d = (mol.coords[i] - mol.coords[j]).norm();
                let f = rbf_featurize(d, self.rbf.d_min, self.rbf.d_max, self.rbf.bins);
                rbf.row_mut(i * n + j).copy_from_slice(&f);
            }
        }
        let rbf = tape.constant(rbf);
        let src: Vec<usize> = (0..n * n).map(|e| e / n).collect();
        let dst: Vec<usize> = (0..n * n).map(|e| e % n).collect();
        for layer in &self.layers {
            let hi = tape.gather_rows(h, &src);
            let hj = tape.gather_rows(h, &dst);
            let e = tape.concat_cols(&[hi, hj, rbf]);
            let e = layer.edge.forward(tape, p, e);
            let e = layer.edge_norm.forward(tape, p, e);
            let e = tape.mask_rows(e, &weights);
            let agg = tape.group_sum_rows(e, n);
            let u = tape.concat_cols(&[h, agg]);
            let u = layer.update.forward(tape, p, u);
            let sum = tape.add(h, u);
            let out = layer.update_norm.forward(tape, p, sum);
            h = tape.mask_rows(out, &mask);
        }
        Ok(h)
    }
}

/// Attentive message passing over bonds with a gated residual update and an
/// attention-pooled readout.
#[derive(Debug, Clone)]
pub struct MolEncoder2D {
    pub dim: usize,
    heads: usize,
    type_embedding: ParamId,
    input_norm: LayerNorm,
    layers: Vec<Layer2D>,
    readout_query: ParamId,
    readout: MultiHeadAttention,
}

#[derive(Debug, Clone)]
struct Layer2D {
    bond_bias: ParamId,
    attention: MultiHeadAttention,
    gate: Linear,
    message: Linear,
    norm: LayerNorm,
}

impl MolEncoder2D {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
    ) -> Self {
        let type_embedding = store.add(
            format!("{name}.type_embedding"),
            crate::nn::uniform_tensor(rng, NUM_ELEMENT_TYPES, dim, 1.0),
        );
        let input_norm = LayerNorm::new(store, &format!("{name}.input_norm"), dim);
        let layers = (0..layers)
            .map(|l| {
                let n = format!("{name}.layer{l}");
                Layer2D {
                    // one row per bond category plus the self-loop
                    bond_bias: store.add(
                        format!("{n}.bond_bias"),
                        crate::nn::uniform_tensor(rng, NUM_BOND_TYPES + 1, heads, 0.5),
                    ),
                    attention: MultiHeadAttention::new(store, rng, &format!("{n}.attention"), dim, dim, dim, dim, heads),
                    gate: Linear::new(store, rng, &format!("{n}.gate"), 2 * dim, dim, true, 1.0),
                    message: Linear::new(store, rng, &format!("{n}.message"), dim, dim, false, 1.0),
                    norm: LayerNorm::new(store, &format!("{n}.norm"), dim),
                }
            })
            .collect();
        let readout_query = store.add(
            format!("{name}.readout_query"),
            crate::nn::uniform_tensor(rng, 1, dim, 1.0),
        );
        let readout = MultiHeadAttention::new(store, rng, &format!("{name}.readout"), dim, dim, dim, dim, heads);
        MolEncoder2D {
            dim,
            heads,
            type_embedding,
            input_norm,
            layers,
            readout_query,
            readout,
        }
    }

    /// Pooled `1 × dim` graph vector.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, mol: &Molecule2D) -> Result<Var> {
        self.encode(tape, p, mol).map(|(_, pooled)| pooled)
    }

    /// Per-atom `n × dim` states (masked atoms zero) and the pooled vector.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, mol: &Molecule2D) -> Result<(Var, Var)> {
        mol.validate()?;
        let n = mol.len();
        let mask: Vec<f64> = mol.atom_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let h = tape.gather_rows(p.var(self.type_embedding), &mol.atom_types);
        let h = self.input_norm.forward(tape, p, h);
        let mut h = tape.mask_rows(h, &mask);

        // pair (i, j) → bias row: bond category, self-loop, or unused
        let self_loop = NUM_BOND_TYPES;
        let mut pair_kind = vec![self_loop; n * n];
        let mut pairs = vec![false; n * n];
        for i in 0..n {
            if mol.atom_mask[i] {
                pairs[i * n + i] = true;
            }
        }
        for b in &mol.bonds {
            for (x, y) in [(b.a, b.b), (b.b, b.a)] {
                pair_kind[x * n + y] = b.kind;
                pairs[x * n + y] = true;
            }
        }
        let mask_pairs = AttentionMask {
            keys: Some(mol.atom_mask.clone()),
            pairs: Some(pairs),
        };
        for layer in &self.layers {
            let bias = tape.gather_rows(p.var(layer.bond_bias), &pair_kind);
            let att = &layer.attention;
            let q = att.q.forward(tape, p, h);
            let k = att.k.forward(tape, p, h);
            let v = att.v.forward(tape, p, h);
            let shape = AttentionShape {
                blocks: 1,
                query_len: n,
                key_len: n,
                heads: self.heads,
                scale: 1.0 / ((self.dim / self.heads) as f64).sqrt(),
            };
            let a = tape.attention(q, k, v, Some(bias), shape, &mask_pairs);
            let c = att.o.forward(tape, p, a);
            let hc = tape.concat_cols(&[h, c]);
            let g = layer.gate.forward(tape, p, hc);
            let g = tape.sigmoid(g);
            let m = layer.message.forward(tape, p, c);
            let gm = tape.mul(g, m);
            let sum = tape.add(h, gm);
            let out = layer.norm.forward(tape, p, sum);
            h = tape.mask_rows(out, &mask);
        }
        let query = p.var(self.readout_query);
        let keys = AttentionMask {
            keys: Some(mol.atom_mask.clone()),
            pairs: None,
        };
        let pooled = self.readout.forward(tape, p, query, h, 1, 1, n, &keys);
        Ok((h, pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_peaks_at_centers_and_decays() {
        let f = rbf_featurize(0.0, 0.0, 2.0, 16);
        assert_eq!(f[0], 1.0);
        let mu3 = 2.0 * 3.0 / 15.0;
        assert!((rbf_featurize(mu3, 0.0, 2.0, 16)[3] - 1.0).abs() < 1e-15);
        let sigma = 2.0 / 16.0;
        assert!(rbf_featurize(2.0 + 10.0 * sigma, 0.0, 2.0, 16).iter().all(|&v| v < 1e-4));
    }

    #[test]
    fn molecule_file_roundtrip_and_scaling() {
        let text = "3\nC 0 0 0\nO 1.2 0 0\nN -1 0.5 0\nBONDS\n0 1 2\n0 2 1\n";
        let m = parse_molecule(text, Path::new("m")).unwrap();
        assert_eq!(m.elements, vec![1, 3, 2]);
        assert_eq!(m.bonds[0], Bond { a: 0, b: 1, kind: 1 });
        let again = parse_molecule(&format_molecule(&m), Path::new("m")).unwrap();
        assert_eq!(again, m);
        let m3 = m.to_3d().unwrap();
        assert!((m3.coords[1].x - 0.12).abs() < 1e-15);
    }

    #[test]
    fn molecule_file_errors() {
        assert!(parse_molecule("2\nC 0 0 0\n", Path::new("m")).is_err());
        assert!(parse_molecule("1\nC 0 0 0\nBONDS\n0 1 1\n", Path::new("m")).is_err());
        assert!(parse_molecule("1\nC 0 0 x\n", Path::new("m")).is_err());
    }

    #[test]
    fn unknown_element_uses_other_bucket() {
        assert_eq!(element_index("Fe"), OTHER_ELEMENT);
        assert_eq!(element_index("cl"), 7);
    }

    #[test]
    fn graph_validation_rejects_masked_endpoints() {
        let mut m = Molecule2D::new(vec![1, 1], vec![Bond { a: 0, b: 1, kind: 0 }]).unwrap();
        m.atom_mask[1] = false;
        assert!(matches!(m.validate(), Err(Error::Graph(_))));
    }
}
