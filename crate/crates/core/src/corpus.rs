//! Dataset ingestion, tokenization, vocabulary construction and
//! reproducible sampling of texts for annotation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};

/// Token index into a [`Vocabulary`].
pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const DEFAULT_MIN_FREQ: usize = 2;
pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub label: usize,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub num_classes: usize,
    pub split: Split,
}

impl Corpus {
    /// Builds a corpus, checking label range and id uniqueness.
    pub fn new(documents: Vec<Document>, num_classes: usize, split: Split) -> Result<Self> {
        if num_classes < 2 {
            return Err(argument("a corpus needs at least two classes"));
        }
        let mut seen = std::collections::HashSet::with_capacity(documents.len());
        for doc in &documents {
            if doc.label >= num_classes {
                return Err(Error::Validation(format!(
                    "document {} has label {} outside [0, {num_classes})",
                    doc.id, doc.label
                )));
            }
            if !seen.insert(doc.id) {
                return Err(Error::Validation(format!("duplicate document id {}", doc.id)));
            }
        }
        Ok(Self {
            documents,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Document> {
        // ids ascend with row order, so binary search works for loaded corpora
        match self.documents.binary_search_by_key(&id, |d| d.id) {
            Ok(i) => Some(&self.documents[i]),
            Err(_) => self.documents.iter().find(|d| d.id == id),
        }
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Reads a headerless CSV with a 1-based class in the first column and one
/// or more text columns (title, body, ...), which are joined with a space.
///
/// Document ids are the 0-based data row index. Rows whose text tokenizes
/// to nothing are skipped with a warning.
pub fn load_corpus(path: &Path, num_classes: usize, split: Split) -> Result<Corpus> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let mut documents = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 1);
        if record.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected a class column and at least one text column, got {} field(s)", record.len()),
            });
        }
        let class: usize = record[0].trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("class `{}` is not a positive integer", &record[0]),
        })?;
        if class == 0 || class > num_classes {
            return Err(Error::Validation(format!(
                "{}:{line}: class {class} outside declared range 1..={num_classes}",
                path.display()
            )));
        }
        let text = record.iter().skip(1).collect::<Vec<_>>().join(" ");
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            log::warn!("{}:{line}: empty text, row skipped", path.display());
            continue;
        }
        documents.push(Document {
            id: row as u64,
            label: class - 1,
            tokens,
        });
    }
    Corpus::new(documents, num_classes, split)
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    match err.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Number of documents drawn by [`sample_corpus`] for a corpus of `n`.
pub fn sample_size(n: usize, ratio: f64) -> usize {
    // 0.001 * 120000 is 120.00000000000001 in binary; absorb that before ceil
    let raw = ratio * n as f64;
    let size = (raw - raw.abs() * 1e-12).ceil() as usize;
    size.min(n)
}

/// Uniform sample without replacement of `ceil(ratio * |corpus|)` document ids.
pub fn sample_corpus(corpus: &Corpus, ratio: f64, seed: u64) -> Result<BTreeSet<u64>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(argument(format!("sample ratio {ratio} outside (0, 1]")));
    }
    let n = corpus.len();
    let amount = sample_size(n, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, amount)
        .into_iter()
        .map(|i| corpus.documents[i].id)
        .collect())
}

pub fn write_sample(path: &Path, ids: &BTreeSet<u64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(out, "{id}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<BTreeSet<u64>> {
    let reader = BufReader::new(File::open(path)?);
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        ids.insert(line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: format!("`{line}` is not a document id"),
        })?);
    }
    Ok(ids)
}

/// Bidirectional token/index map with reserved PAD (0) and UNK (1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<usize>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Creates a vocabulary from `(token, frequency)` pairs in index order.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, usize)>) -> Result<Self> {
        let mut vocab = Self {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            freqs: vec![0, 0],
            index: HashMap::new(),
        };
        for (token, freq) in entries {
            if token == PAD_TOKEN || token == UNK_TOKEN {
                return Err(Error::Validation(format!("`{token}` is reserved")));
            }
            let id = vocab.tokens.len() as TokenId;
            if vocab.index.insert(token.clone(), id).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry `{token}`")));
            }
            vocab.tokens.push(token);
            vocab.freqs.push(freq);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `token`, [`UNK`] when absent.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn freq(&self, id: TokenId) -> usize {
        self.freqs.get(id as usize).copied().unwrap_or(0)
    }

    /// Non-special entries in index order.
    pub fn entries(&self) -> impl Iterator<Item = (TokenId, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (i as TokenId, t.as_str()))
    }

    /// Maps tokens to indices, truncating the tail beyond `max_len`.
    pub fn encode(&self, tokens: &[String], max_len: usize) -> Vec<TokenId> {
        tokens.iter().take(max_len).map(|t| self.id(t)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for (id, token) in self.entries() {
            writeln!(out, "{token}\t{}", self.freq(id))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let (token, freq) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: "expected `token<TAB>frequency`".into(),
            })?;
            let freq = freq.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: format!("bad frequency `{freq}`"),
            })?;
            entries.push((token.to_string(), freq));
        }
        Self::from_entries(entries)
    }
}

/// Keeps tokens seen at least `min_freq` times, ordered by descending
/// frequency then lexicographically.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in &corpus.documents {
        for token in &doc.tokens {
            *counts.entry(token.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_entries(kept.into_iter().map(|(t, c)| (t.to_string(), c)))
        .expect("corpus tokens are alphanumeric and unique after counting")
}
