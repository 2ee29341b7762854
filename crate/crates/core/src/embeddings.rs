//! The word-embedding space: pretrained GloVe-style text vectors or a
//! seeded random table.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, Vocabulary, PAD};
use crate::error::{argument, Error, Result};

pub const DEFAULT_DIM: usize = 50;
const INIT_RANGE: f64 = 0.05;

/// Dense `|vocab| x dim` matrix, row-major. Row [`PAD`] is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub found: usize,
    pub total: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.found as f64 / self.total as f64
        }
    }
}

impl EmbeddingTable {
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(argument("embedding dimension must be at least 2"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(argument("embedding data is not a whole number of rows"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding contains non-finite values".into()));
        }
        let rows = data.len() / dim;
        let mut table = Self { dim, rows, data };
        table.row_mut(PAD).fill(0.0);
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn lookup(&self, index: TokenId) -> Result<&[f64]> {
        let i = index as usize;
        if i >= self.rows {
            return Err(argument(format!("token index {i} outside table of {} rows", self.rows)));
        }
        Ok(self.row(index))
    }

    /// Unchecked row access.
    pub fn row(&self, index: TokenId) -> &[f64] {
        let start = index as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub(crate) fn row_mut(&mut self, index: TokenId) -> &mut [f64] {
        let start = index as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Applies `update` to a row. The PAD row is never touched.
    pub fn update_row(&mut self, index: TokenId, update: impl FnOnce(&mut [f64])) {
        if index != PAD {
            update(self.row_mut(index));
        }
    }

    /// Writes the table in the `token v1 ... vd` text format.
    pub fn write_text(&self, vocab: &Vocabulary, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for (id, token) in vocab.entries() {
            write!(out, "{token}")?;
            for v in self.row(id) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Uniform(-0.05, 0.05) rows, PAD zero.
pub fn init_random(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim < 2 {
        return Err(argument("embedding dimension must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..vocab.len() * dim)
        .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
        .collect();
    EmbeddingTable::from_rows(dim, data)
}

/// Loads vectors for vocabulary tokens from a GloVe-style text file. Tokens
/// missing from the file keep a seeded uniform(-0.05, 0.05) row.
pub fn load_pretrained(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingTable, Coverage)> {
    let mut table = init_random(vocab, dim, seed)?;
    let mut found = vec![false; vocab.len()];
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i as u64 + 1;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let Some(id) = vocab.get(token) else { continue };
        if found[id as usize] {
            continue;
        }
        let row = table.row_mut(id);
        for (slot, raw) in row.iter_mut().zip(&values) {
            let v: f64 = raw.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: "non-finite value".into(),
                });
            }
            *slot = v;
        }
        found[id as usize] = true;
    }
    let coverage = Coverage {
        found: found.iter().skip(2).filter(|&&f| f).count(),
        total: vocab.len() - 2,
    };
    log::info!(
        "pretrained embeddings cover {}/{} vocabulary tokens ({:.1}%)",
        coverage.found,
        coverage.total,
        100.0 * coverage.fraction()
    );
    Ok((table, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UNK;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_entries(tokens.iter().map(|t| (t.to_string(), 1))).unwrap()
    }

    #[test]
    fn random_init_is_seeded_and_pad_is_zero() {
        let v = vocab(&["a", "b", "c"]);
        let a = init_random(&v, 4, 7).unwrap();
        assert_eq!(a, init_random(&v, 4, 7).unwrap());
        assert_ne!(a, init_random(&v, 4, 8).unwrap());
        assert!(a.lookup(PAD).unwrap().iter().all(|&x| x == 0.0));
        assert!(a.as_slice().iter().all(|x| x.is_finite() && x.abs() < 0.05));
        assert!(init_random(&v, 1, 7).is_err());
    }

    #[test]
    fn shape_of_larger_table() {
        let v = Vocabulary::from_entries((0..998).map(|i| (format!("w{i}"), 1))).unwrap();
        let t = init_random(&v, 50, 1).unwrap();
        assert_eq!((t.len(), t.dim()), (1000, 50));
    }

    #[test]
    fn lookup_bounds_and_stability() {
        let v = vocab(&["a"]);
        let t = init_random(&v, 3, 1).unwrap();
        assert_eq!(t.lookup(2).unwrap(), t.lookup(2).unwrap());
        assert!(t.lookup(3).is_err());
        assert_eq!(t.lookup(UNK).unwrap().len(), 3);
    }

    #[test]
    fn pretrained_rows_and_coverage() {
        let v = vocab(&["good", "bad"]);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "other 9 9 9").unwrap();
        writeln!(f, "good 0.1 -0.2 0.3").unwrap();
        let (t, cov) = load_pretrained(f.path(), &v, 3, 5).unwrap();
        assert_eq!(t.lookup(v.id("good")).unwrap(), [0.1, -0.2, 0.3]);
        assert!(t.lookup(v.id("bad")).unwrap().iter().all(|x| x.abs() < 0.05));
        assert_eq!(cov, Coverage { found: 1, total: 2 });
        assert!((0.0..=1.0).contains(&cov.fraction()));
        assert!(t.lookup(PAD).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pretrained_dimension_mismatch() {
        let v = vocab(&["good"]);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "good 0.1 0.2 0.3").unwrap();
        writeln!(f, "bad 0.1 0.2").unwrap();
        match load_pretrained(f.path(), &v, 3, 5).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let v = vocab(&["x", "y"]);
        let t = init_random(&v, 3, 2).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        t.write_text(&v, f.path()).unwrap();
        let (back, cov) = load_pretrained(f.path(), &v, 3, 99).unwrap();
        assert_eq!(cov.found, 2);
        // UNK is not written; everything else survives the text format exactly
        assert_eq!(back.row(2), t.row(2));
        assert_eq!(back.row(3), t.row(3));
    }
}
