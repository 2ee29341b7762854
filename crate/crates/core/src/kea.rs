//! Keyword machinery: cluster-based expansion of crowd seeds, TF-IDF
//! keyword selection, and the per-document mask and slot views the models
//! consume.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::corpus::{Corpus, TokenId, Vocabulary, PAD, UNK};
use crate::error::{Error, Result};

pub const DEFAULT_SLOTS: usize = 10;
pub const TFIDF_PER_TEXT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Crowd,
    Cluster,
    Tfidf,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Crowd => "crowd",
            Provenance::Cluster => "cluster",
            Provenance::Tfidf => "tfidf",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crowd" => Ok(Self::Crowd),
            "cluster" => Ok(Self::Cluster),
            "tfidf" => Ok(Self::Tfidf),
            _ => Err(Error::Validation(format!("unknown provenance `{s}`"))),
        }
    }
}

/// Seed keywords and the expanded keyword set, with where each came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordSets {
    pub seeds: BTreeSet<String>,
    pub expanded: BTreeSet<String>,
    pub provenance: BTreeMap<String, Provenance>,
}

impl KeywordSets {
    /// Keywords used without expansion (`K = S`).
    pub fn from_seeds(seeds: BTreeSet<String>) -> Self {
        let provenance = seeds.iter().map(|s| (s.clone(), Provenance::Crowd)).collect();
        Self {
            expanded: seeds.clone(),
            seeds,
            provenance,
        }
    }

    /// Vocabulary ids of the expanded set; tokens outside the vocabulary are dropped.
    pub fn ids(&self, vocab: &Vocabulary) -> HashSet<TokenId> {
        self.expanded
            .iter()
            .filter_map(|t| vocab.get(t))
            .filter(|&id| id != PAD && id != UNK)
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for token in &self.expanded {
            let p = self.provenance.get(token).copied().unwrap_or(Provenance::Cluster);
            writeln!(out, "{token} {p}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut sets = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (token, p) = line.rsplit_once(' ').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: "expected `token provenance`".into(),
            })?;
            let p: Provenance = p.parse()?;
            if p == Provenance::Crowd {
                sets.seeds.insert(token.to_string());
            }
            sets.expanded.insert(token.to_string());
            sets.provenance.insert(token.to_string(), p);
        }
        Ok(sets)
    }
}

/// Keyword expansion: every cluster that contains at least one seed joins
/// `K` whole. Seeds that are noise points, or absent from `tokens`, are
/// kept as singletons.
///
/// `tokens[i]` names the point labelled by `assignment.labels[i]`.
pub fn expand_keywords(
    tokens: &[String],
    assignment: &ClusterAssignment,
    seeds: &BTreeSet<String>,
) -> KeywordSets {
    if seeds.is_empty() {
        log::warn!("no seed keywords; expanded keyword set is empty");
        return KeywordSets::default();
    }
    let mut hit = vec![false; assignment.num_clusters];
    for (token, label) in tokens.iter().zip(&assignment.labels) {
        if let Some(c) = label {
            if seeds.contains(token) {
                hit[*c] = true;
            }
        }
    }
    let mut sets = KeywordSets::from_seeds(seeds.clone());
    for (token, label) in tokens.iter().zip(&assignment.labels) {
        if let Some(c) = label {
            if hit[*c] && sets.expanded.insert(token.clone()) {
                sets.provenance.insert(token.clone(), Provenance::Cluster);
            }
        }
    }
    sets
}

/// Document frequencies for tf-idf scoring.
#[derive(Debug, Clone)]
pub struct Tfidf {
    num_docs: usize,
    df: HashMap<String, usize>,
}

impl Tfidf {
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut num_docs = 0;
        for tokens in docs {
            num_docs += 1;
            let distinct: HashSet<&String> = tokens.iter().collect();
            for t in distinct {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        Self { num_docs, df }
    }

    /// `ln(N / df)`; tokens never seen during fitting count as `df = 1`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(1).max(1);
        (self.num_docs as f64 / df as f64).ln()
    }

    /// Distinct tokens of one document ranked by raw count times idf,
    /// descending, ties lexicographic.
    pub fn ranked(&self, tokens: &[String]) -> Vec<(String, f64)> {
        let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        let mut scored: Vec<(String, f64)> = tf
            .into_iter()
            .map(|(t, c)| (t.to_string(), c as f64 * self.idf(t)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored
    }

    pub fn top(&self, tokens: &[String], per_text: usize) -> Vec<String> {
        self.ranked(tokens).into_iter().take(per_text).map(|(t, _)| t).collect()
    }
}

/// Top `per_text` tf-idf tokens of every document, in corpus order.
pub fn tfidf_keywords(corpus: &Corpus, per_text: usize) -> Vec<Vec<String>> {
    let model = Tfidf::fit(corpus.documents.iter().map(|d| d.tokens.as_slice()));
    corpus
        .documents
        .iter()
        .map(|d| model.top(&d.tokens, per_text))
        .collect()
}

/// Per-position keyword flags of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordMask(pub Vec<bool>);

impl KeywordMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Flags every occurrence of a keyword.
pub fn build_mask<T: Eq + Hash>(tokens: &[T], keywords: &HashSet<T>) -> KeywordMask {
    KeywordMask(tokens.iter().map(|t| keywords.contains(t)).collect())
}

/// Fixed-length list of keyword token ids, PAD filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSlots(pub Vec<TokenId>);

/// Keywords of the document in order of first appearance, deduplicated,
/// truncated to `s` and padded with [`PAD`].
pub fn build_slots(tokens: &[TokenId], keywords: &HashSet<TokenId>, s: usize) -> KeywordSlots {
    let mut seen = HashSet::new();
    let mut slots: Vec<TokenId> = tokens
        .iter()
        .copied()
        .filter(|t| keywords.contains(t) && seen.insert(*t))
        .take(s)
        .collect();
    slots.resize(s, PAD);
    KeywordSlots(slots)
}
