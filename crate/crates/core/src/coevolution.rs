//! Co-evolution grids: the joint enzyme/reaction vocabulary, tokenization of
//! aligned rows, the MSA text format, and the axial transformer encoder.

use crate::discrete::COEVO_SPACE as SPACE;
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::tape::{AttentionMask, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::path::Path;

const COEVO_SPACE: usize = SPACE.num_real();

const VOCAB_TABLE: &str = include_str!("../assets/coevo_vocab_v1.txt");

pub const SEPARATOR: char = '|';
pub const PAD: char = '_';
pub const GAP: char = '-';

/// The 64-symbol table. States are the published 1-based indices minus one,
/// so state 64 is left free for the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoEvoVocabulary {
    symbols: Vec<char>,
}

impl CoEvoVocabulary {
    /// The table shipped with the crate.
    pub fn standard() -> Self {
        Self::parse(VOCAB_TABLE).expect("bundled vocabulary table is valid")
    }

    /// Parses `index<TAB>symbol` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut symbols = vec![None; COEVO_SPACE];
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (idx, sym) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("malformed vocabulary line {line:?}")))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad vocabulary index {idx:?}")))?;
            let mut chars = sym.chars();
            let ch = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(Error::Config(format!("vocabulary symbol {sym:?} is not one character"))),
            };
            if !(1..=COEVO_SPACE).contains(&idx) || symbols[idx - 1].is_some() {
                return Err(Error::Config(format!("vocabulary index {idx} out of range or repeated")));
            }
            symbols[idx - 1] = Some(ch);
        }
        let symbols: Option<Vec<char>> = symbols.into_iter().collect();
        let symbols =
            symbols.ok_or_else(|| Error::Config("vocabulary must define all 64 indices".into()))?;
        let mut sorted = symbols.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != COEVO_SPACE {
            return Err(Error::Config("vocabulary symbols must be distinct".into()));
        }
        Ok(CoEvoVocabulary { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn state(&self, ch: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&c| c == ch)
            .ok_or(Error::Vocabulary { ch })
    }

    pub fn symbol(&self, state: usize) -> Option<char> {
        self.symbols.get(state).copied()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }
}

/// Tokenized N_MSA × N_token grid. `tokens` is row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoEvoMatrix {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Vec<usize>,
    pub row_mask: Vec<bool>,
    pub cell_mask: Vec<bool>,
}

impl CoEvoMatrix {
    pub fn token(&self, m: usize, n: usize) -> usize {
        self.tokens[m * self.cols + n]
    }

    pub fn num_cells(&self) -> usize {
        self.tokens.len()
    }

    /// Keeps the first `n_rows` rows, appending fully masked rows if short.
    pub fn fit_rows(&self, n_rows: usize, pad_state: usize) -> CoEvoMatrix {
        let mut out = CoEvoMatrix {
            rows: n_rows,
            cols: self.cols,
            tokens: vec![pad_state; n_rows * self.cols],
            row_mask: vec![false; n_rows],
            cell_mask: vec![false; n_rows * self.cols],
        };
        for m in 0..n_rows.min(self.rows) {
            let src = m * self.cols..(m + 1) * self.cols;
            let dst = m * self.cols..(m + 1) * self.cols;
            out.tokens[dst.clone()].copy_from_slice(&self.tokens[src.clone()]);
            out.cell_mask[dst].copy_from_slice(&self.cell_mask[src]);
            out.row_mask[m] = self.row_mask[m];
        }
        out
    }
}

/// Concatenates `enzyme[m]`, the separator and `reaction[m]` per row, then
/// truncates or pads to `n_token`.
pub fn tokenize_coevolution(
    enzyme_rows: &[String],
    reaction_rows: &[String],
    vocab: &CoEvoVocabulary,
    n_token: usize,
) -> Result<CoEvoMatrix> {
    if enzyme_rows.is_empty() || reaction_rows.is_empty() {
        return Err(Error::EmptyAlignment(format!(
            "{} enzyme rows and {} reaction rows",
            enzyme_rows.len(),
            reaction_rows.len()
        )));
    }
    if enzyme_rows.len() != reaction_rows.len() {
        return Err(Error::Shape(format!(
            "{} enzyme rows but {} reaction rows",
            enzyme_rows.len(),
            reaction_rows.len()
        )));
    }
    let pad = vocab.state(PAD)?;
    let rows = enzyme_rows.len();
    let mut tokens = vec![pad; rows * n_token];
    let mut cell_mask = vec![false; rows * n_token];
    for (m, (e, r)) in enzyme_rows.iter().zip(reaction_rows).enumerate() {
        let combined = e.chars().chain(std::iter::once(SEPARATOR)).chain(r.chars());
        for (n, ch) in combined.enumerate() {
            let state = vocab.state(ch)?;
            if n < n_token {
                tokens[m * n_token + n] = state;
                cell_mask[m * n_token + n] = true;
            }
        }
    }
    Ok(CoEvoMatrix {
        rows,
        cols: n_token,
        tokens,
        row_mask: vec![true; rows],
        cell_mask,
    })
}

/// Inverse of [`tokenize_coevolution`] for rows that were not truncated:
/// returns `(enzyme, reaction)` per unmasked row.
pub fn detokenize_coevolution(matrix: &CoEvoMatrix, vocab: &CoEvoVocabulary) -> Vec<(String, String)> {
    (0..matrix.rows)
        .filter(|&m| matrix.row_mask[m])
        .map(|m| {
            let text: String = (0..matrix.cols)
                .filter(|&n| matrix.cell_mask[m * matrix.cols + n])
                .map(|n| vocab.symbol(matrix.token(m, n)).unwrap_or('?'))
                .collect();
            match text.split_once(SEPARATOR) {
                Some((e, r)) => (e.to_string(), r.to_string()),
                None => (text, String::new()),
            }
        })
        .collect()
}

/// Aligned rows as read from an MSA file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub enzyme_rows: Vec<String>,
    pub reaction_rows: Vec<String>,
}

/// Parses the MSA text format: enzyme rows, one blank line, reaction rows.
pub fn parse_msa(text: &str, path: &Path) -> Result<Alignment> {
    let mut enzyme_rows = Vec::new();
    let mut reaction_rows = Vec::new();
    let mut in_reactions = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            if !enzyme_rows.is_empty() {
                in_reactions = true;
            }
            continue;
        }
        if in_reactions {
            reaction_rows.push(line.to_string());
        } else {
            enzyme_rows.push(line.to_string());
        }
        if line.contains(char::is_whitespace) {
            return Err(Error::parse(path, i + 1, "aligned rows may not contain whitespace"));
        }
    }
    if !in_reactions {
        return Err(Error::parse(path, 0, "missing blank line before the reaction rows"));
    }
    Ok(Alignment {
        enzyme_rows,
        reaction_rows,
    })
}

pub fn read_msa(path: &Path) -> Result<Alignment> {
    parse_msa(&crate::io_util::read_to_string(path)?, path)
}

pub fn format_msa(alignment: &Alignment) -> String {
    let mut s = String::new();
    for r in &alignment.enzyme_rows {
        s.push_str(r);
        s.push('\n');
    }
    s.push('\n');
    for r in &alignment.reaction_rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Standard transformer positional table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(len, dim, |pos, c| {
        let k = (c / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Axial encoder over a co-evolution grid: token embedding plus positions
/// along the token axis, attention across depth within each token column,
/// then attention across tokens within each row.
#[derive(Debug, Clone)]
pub struct CoEvoFormer {
    pub dim: usize,
    embedding: ParamId,
    layers: Vec<AxialLayer>,
}

#[derive(Debug, Clone)]
struct AxialLayer {
    column: MultiHeadAttention,
    column_norm: LayerNorm,
    row: MultiHeadAttention,
    row_norm: LayerNorm,
    transition: Mlp,
    transition_norm: LayerNorm,
}

impl CoEvoFormer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
    ) -> Self {
        let embedding = store.add(
            format!("{name}.token_embedding"),
            crate::nn::uniform_tensor(rng, COEVO_SPACE + 1, dim, 1.0),
        );
        let layers = (0..layers)
            .map(|l| {
                let n = format!("{name}.layer{l}");
                AxialLayer {
                    column: MultiHeadAttention::new(store, rng, &format!("{n}.column"), dim, dim, dim, dim, heads),
                    column_norm: LayerNorm::new(store, &format!("{n}.column_norm"), dim),
                    row: MultiHeadAttention::new(store, rng, &format!("{n}.row"), dim, dim, dim, dim, heads),
                    row_norm: LayerNorm::new(store, &format!("{n}.row_norm"), dim),
                    transition: Mlp::new(store, rng, &format!("{n}.transition"), &[dim, 2 * dim, dim], 1.0),
                    transition_norm: LayerNorm::new(store, &format!("{n}.transition_norm"), dim),
                }
            })
            .collect();
        CoEvoFormer {
            dim,
            embedding,
            layers,
        }
    }

    /// Returns the `(rows·cols) × dim` embedding grid, row-major over cells.
    /// Masked cells are zero rows.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, grid: &CoEvoMatrix) -> Result<Var> {
        let (m_rows, n_cols) = (grid.rows, grid.cols);
        if grid.tokens.len() != m_rows * n_cols || grid.cell_mask.len() != m_rows * n_cols {
            return Err(Error::Shape("co-evolution grid size".into()));
        }
        if let Some(&bad) = grid.tokens.iter().find(|&&t| t > COEVO_SPACE) {
            return Err(Error::InvalidState {
                state: bad,
                num_real: COEVO_SPACE,
            });
        }
        let cell_weights: Vec<f64> = grid.cell_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let table = p.var(self.embedding);
        let mut h = tape.gather_rows(table, &grid.tokens);
        let pos = sinusoidal_positions(n_cols, self.dim);
        let pos_rows: Vec<usize> = (0..m_rows * n_cols).map(|i| i % n_cols).collect();
        let pos = tape.constant(pos);
        let pos = tape.gather_rows(pos, &pos_rows);
        h = tape.add(h, pos);
        h = tape.mask_rows(h, &cell_weights);

        // column-major order: row t·M + m holds cell (m, t)
        let to_columns: Vec<usize> = (0..n_cols * m_rows)
            .map(|i| (i % m_rows) * n_cols + i / m_rows)
            .collect();
        let to_rows: Vec<usize> = (0..m_rows * n_cols)
            .map(|i| (i % n_cols) * m_rows + i / n_cols)
            .collect();
        let column_keys = AttentionMask {
            keys: Some(to_columns.iter().map(|&i| grid.cell_mask[i]).collect()),
            pairs: None,
        };
        let row_keys = AttentionMask {
            keys: Some(grid.cell_mask.clone()),
            pairs: None,
        };
        for layer in &self.layers {
            let hc = tape.gather_rows(h, &to_columns);
            let a = layer.column.forward(tape, p, hc, hc, n_cols, m_rows, m_rows, &column_keys);
            let a = tape.gather_rows(a, &to_rows);
            let sum = tape.add(h, a);
            h = layer.column_norm.forward(tape, p, sum);
            h = tape.mask_rows(h, &cell_weights);

            let a = layer.row.forward(tape, p, h, h, m_rows, n_cols, n_cols, &row_keys);
            let sum = tape.add(h, a);
            h = layer.row_norm.forward(tape, p, sum);
            h = tape.mask_rows(h, &cell_weights);

            let t = layer.transition.forward(tape, p, h);
            let sum = tape.add(h, t);
            h = layer.transition_norm.forward(tape, p, sum);
            h = tape.mask_rows(h, &cell_weights);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_has_64_distinct_symbols() {
        let v = CoEvoVocabulary::standard();
        assert_eq!(v.len(), 64);
        for (i, &c) in v.symbols().iter().enumerate() {
            assert_eq!(v.state(c).unwrap(), i);
        }
        for (i, c) in "ACDEFGHIKLMNPQRSTVWY".chars().enumerate() {
            assert_eq!(v.state(c).unwrap(), i);
        }
    }

    #[test]
    fn tokenize_pads_and_masks() {
        let v = CoEvoVocabulary::standard();
        let m = tokenize_coevolution(&["AC".into()], &["CO".into()], &v, 6).unwrap();
        assert_eq!(m.cell_mask.iter().filter(|&&b| b).count(), 5);
        let expect: Vec<usize> = "AC|CO_".chars().map(|c| v.state(c).unwrap()).collect();
        assert_eq!(m.tokens, expect);
    }

    #[test]
    fn tokenize_truncates() {
        let v = CoEvoVocabulary::standard();
        let m = tokenize_coevolution(&["ACDEF".into()], &["CCOO".into()], &v, 8).unwrap();
        assert_eq!(m.tokens.len(), 8);
        assert!(m.cell_mask.iter().all(|&b| b));
    }

    #[test]
    fn tokenize_errors() {
        let v = CoEvoVocabulary::standard();
        assert!(matches!(
            tokenize_coevolution(&["AC".into()], &[], &v, 6),
            Err(Error::EmptyAlignment(_))
        ));
        assert!(matches!(
            tokenize_coevolution(&["AX".into()], &["C".into()], &v, 6),
            Err(Error::Vocabulary { ch: 'X' })
        ));
    }

    #[test]
    fn msa_roundtrip() {
        let a = Alignment {
            enzyme_rows: vec!["ACD-".into(), "AC-E".into()],
            reaction_rows: vec!["CC>O".into(), "CC>O".into()],
        };
        let text = format_msa(&a);
        assert_eq!(parse_msa(&text, Path::new("x")).unwrap(), a);
        assert!(parse_msa("ACD\nCC\n", Path::new("x")).is_err());
    }
}
