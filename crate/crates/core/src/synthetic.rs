//! Seeded synthetic corpora where one token per document fixes the label.
//!
//! Filler tokens get standard-normal embeddings. Indicator tokens sit in
//! tight balls far out along the first axis, one ball per class, offset from
//! each other by `class_separation` along a class-specific axis. Density
//! clustering therefore recovers the indicators, while telling the classes
//! apart from embeddings alone takes a small offset that filler noise
//! swamps.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Split};
use crate::error::{argument, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub train_docs: usize,
    pub test_docs: usize,
    pub num_classes: usize,
    pub filler_tokens: usize,
    pub indicators_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    /// Distance of each indicator centre from the origin.
    pub indicator_distance: f64,
    /// Offset of class `c`'s ball along axis `c + 1`.
    pub class_separation: f64,
    /// Per-coordinate standard deviation within an indicator ball.
    pub indicator_spread: f64,
    /// Fraction of training labels replaced by a different class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_docs: 1000,
            test_docs: 400,
            num_classes: 2,
            filler_tokens: 400,
            indicators_per_class: 40,
            min_len: 8,
            max_len: 16,
            dim: 16,
            indicator_distance: 4.0,
            class_separation: 1.0,
            indicator_spread: 0.1,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub train: Corpus,
    pub test: Corpus,
    /// Indicator tokens of each class.
    pub indicators: Vec<BTreeSet<String>>,
    /// Every token with its embedding vector.
    pub vectors: Vec<(String, Vec<f64>)>,
}

pub fn filler_name(i: usize) -> String {
    format!("w{i}")
}

pub fn indicator_name(class: usize, i: usize) -> String {
    format!("k{class}x{i}")
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    (-2.0 * (1.0 - u).ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Synthetic> {
    if cfg.num_classes < 2 || cfg.indicators_per_class == 0 || cfg.filler_tokens == 0 {
        return Err(argument("synthetic corpus needs 2+ classes, indicators and filler"));
    }
    if cfg.min_len < 1 || cfg.min_len > cfg.max_len {
        return Err(argument("document lengths must satisfy 1 <= min_len <= max_len"));
    }
    if cfg.dim <= cfg.num_classes || !(0.0..=1.0).contains(&cfg.label_noise) {
        return Err(argument("dimension must cover the classes and noise must be a fraction"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut vectors = Vec::new();
    for i in 0..cfg.filler_tokens {
        vectors.push((filler_name(i), (0..cfg.dim).map(|_| gaussian(&mut rng)).collect()));
    }
    let mut indicators = Vec::new();
    for c in 0..cfg.num_classes {
        let mut names = BTreeSet::new();
        for i in 0..cfg.indicators_per_class {
            let v = (0..cfg.dim)
                .map(|j| {
                    let centre = if j == 0 {
                        cfg.indicator_distance
                    } else if j == c + 1 {
                        cfg.class_separation
                    } else {
                        0.0
                    };
                    centre + cfg.indicator_spread * gaussian(&mut rng)
                })
                .collect();
            let name = indicator_name(c, i);
            names.insert(name.clone());
            vectors.push((name, v));
        }
        indicators.push(names);
    }

    let make = |n: usize, noise: f64, split: Split, rng: &mut ChaCha8Rng| {
        let docs = (0..n as u64)
            .map(|id| {
                let class = rng.random_range(0..cfg.num_classes);
                let len = rng.random_range(cfg.min_len..=cfg.max_len);
                let mut tokens: Vec<String> = (0..len)
                    .map(|_| filler_name(rng.random_range(0..cfg.filler_tokens)))
                    .collect();
                let at = rng.random_range(0..len);
                tokens[at] = indicator_name(class, rng.random_range(0..cfg.indicators_per_class));
                let label = if rng.random::<f64>() < noise {
                    (class + rng.random_range(1..cfg.num_classes)) % cfg.num_classes
                } else {
                    class
                };
                Document { id, label, tokens }
            })
            .collect();
        Corpus::new(docs, cfg.num_classes, split)
    };
    let train = make(cfg.train_docs, cfg.label_noise, Split::Train, &mut rng)?;
    let test = make(cfg.test_docs, 0.0, Split::Test, &mut rng)?;
    Ok(Synthetic {
        train,
        test,
        indicators,
        vectors,
    })
}

impl Synthetic {
    pub fn all_indicators(&self) -> BTreeSet<String> {
        self.indicators.iter().flatten().cloned().collect()
    }

    /// Headerless `class,text` rows with 1-based classes.
    pub fn write_csv(corpus: &Corpus, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
        for d in &corpus.documents {
            w.write_record([(d.label + 1).to_string(), d.tokens.join(" ")])
                .map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(())
    }

    /// GloVe-style `token v1 ... vd` lines.
    pub fn write_vectors(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (token, v) in &self.vectors {
            write!(w, "{token}")?;
            for x in v {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `train.csv`, `test.csv` and `vectors.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        Self::write_csv(&self.train, &dir.join("train.csv"))?;
        Self::write_csv(&self.test, &dir.join("test.csv"))?;
        self.write_vectors(&dir.join("vectors.txt"))
    }
}
