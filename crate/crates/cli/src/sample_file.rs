//! Text format for one generated pocket: `#` header lines, residue rows in
//! Å, an `EC` line, then the co-evolution block.

use enzymeflow::coevolution::{CoEvoMatrix, CoEvoVocabulary};
use enzymeflow::data::{format_pocket_lines, parse_pocket};
use enzymeflow::geometry::Pocket;
use enzymeflow::{Error, Result};
use std::fmt::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleHeader {
    pub record: String,
    pub seed: u64,
    pub stream: u64,
    pub steps: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub header: SampleHeader,
    pub pocket: Pocket,
    /// EC digit 1..7.
    pub ec_digit: usize,
    /// Co-evolution rows as vocabulary symbols.
    pub coevo_rows: Vec<String>,
}

pub fn format_sample(
    header: &SampleHeader,
    pocket: &Pocket,
    ec_digit: usize,
    coevo: &CoEvoMatrix,
    vocab: &CoEvoVocabulary,
) -> String {
    let mut s = String::from("# enzymeflow sample\n");
    let _ = writeln!(s, "# record = {}", header.record);
    let _ = writeln!(s, "# seed = {}", header.seed);
    let _ = writeln!(s, "# stream = {}", header.stream);
    let _ = writeln!(s, "# T = {}", header.steps);
    let _ = writeln!(s, "# config = {}", header.config_hash);
    s.push_str(&format_pocket_lines(pocket));
    let _ = writeln!(s, "EC {ec_digit}");
    let _ = writeln!(s, "COEVO {} {}", coevo.rows, coevo.cols);
    for m in 0..coevo.rows {
        for n in 0..coevo.cols {
            s.push(vocab.symbol(coevo.token(m, n)).unwrap_or('?'));
        }
        s.push('\n');
    }
    s
}

fn header_value<'a>(lines: &[&'a str], key: &str, path: &Path) -> Result<&'a str> {
    lines
        .iter()
        .filter_map(|l| l.strip_prefix('#'))
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("missing header `# {key} = ...`"),
        })
}

fn number<T: std::str::FromStr>(v: &str, what: &str, path: &Path, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad {what} {v:?}"),
    })
}

pub fn parse_sample(text: &str, path: &Path) -> Result<SampleFile> {
    let lines: Vec<&str> = text.lines().collect();
    let ec_at = lines
        .iter()
        .position(|l| l.starts_with("EC "))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "missing `EC` line".into(),
        })?;
    let header = SampleHeader {
        record: header_value(&lines[..ec_at], "record", path)?.to_string(),
        seed: number(header_value(&lines[..ec_at], "seed", path)?, "seed", path, 0)?,
        stream: number(header_value(&lines[..ec_at], "stream", path)?, "stream", path, 0)?,
        steps: number(header_value(&lines[..ec_at], "T", path)?, "T", path, 0)?,
        config_hash: header_value(&lines[..ec_at], "config", path)?.to_string(),
    };
    let pocket = parse_pocket(&lines[..ec_at].join("\n"), path)?;
    let ec_digit: usize = number(lines[ec_at][3..].trim(), "EC digit", path, ec_at + 1)?;
    let dims: Vec<&str> = lines
        .get(ec_at + 1)
        .and_then(|l| l.strip_prefix("COEVO "))
        .map(|l| l.split_whitespace().collect())
        .unwrap_or_default();
    if dims.len() != 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: ec_at + 2,
            msg: "expected `COEVO rows cols`".into(),
        });
    }
    let rows: usize = number(dims[0], "row count", path, ec_at + 2)?;
    let cols: usize = number(dims[1], "column count", path, ec_at + 2)?;
    // rows are positional: symbols such as `#` are data here
    let block = &lines[ec_at + 2..];
    if block.len() != rows || block.iter().any(|r| r.chars().count() != cols) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: ec_at + 3,
            msg: format!("co-evolution block must be {rows} rows of {cols} symbols"),
        });
    }
    Ok(SampleFile {
        header,
        pocket,
        ec_digit,
        coevo_rows: block.iter().map(|r| r.to_string()).collect(),
    })
}
