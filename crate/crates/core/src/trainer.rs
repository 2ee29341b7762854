//! Mini-batch training, evaluation and reporting for every model variant.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet};
use crate::corpus::{Corpus, TokenId, Vocabulary, PAD};
use crate::embeddings::EmbeddingTable;
use crate::error::{argument, Error, Result};
use crate::models::{predict, Example, Model, ModelKind};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(argument(format!("unknown optimizer `{s}`"))),
        }
    }
}

/// Which keywords a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// Crowd seeds expanded through the cluster graph.
    #[serde(rename = "full")]
    Full,
    /// No keywords at all.
    #[serde(rename = "N")]
    N,
    /// Per-document TF-IDF keywords.
    #[serde(rename = "T")]
    T,
    /// Crowd seeds without expansion.
    #[serde(rename = "NC")]
    NC,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::N, Ablation::T, Ablation::NC];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::N => "N",
            Ablation::T => "T",
            Ablation::NC => "NC",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "N" | "n" => Ok(Self::N),
            "T" | "t" => Ok(Self::T),
            "NC" | "nc" => Ok(Self::NC),
            _ => Err(argument(format!("unknown ablation variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Keyword-attention weight, applied to KA-RNN only.
    pub lambda: f64,
    pub seed: u64,
    /// Epochs without a test-accuracy improvement before stopping; `None`
    /// always runs every epoch.
    pub patience: Option<usize>,
    pub model: ModelKind,
    pub ablation: Ablation,
    /// Also update the embedding table.
    #[serde(default)]
    pub fine_tune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            lambda: crate::models::DEFAULT_LAMBDA,
            seed: 0,
            patience: Some(2),
            model: ModelKind::Karnn,
            ablation: Ablation::Full,
            fine_tune: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(argument("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(argument("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(argument("learning rate must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(argument("lambda must be a finite non-negative number"));
        }
        if self.ablation == Ablation::N && self.model == ModelKind::Karnn && self.lambda != 0.0 {
            return Err(argument("variant N trains KA-RNN without keywords, so lambda must be 0"));
        }
        Ok(())
    }
}

/// Keywords available to each document.
#[derive(Debug, Clone, PartialEq)]
pub enum KeywordContext {
    None,
    Global(HashSet<TokenId>),
    PerDocument(HashMap<u64, HashSet<TokenId>>),
}

impl KeywordContext {
    pub fn for_doc(&self, id: u64) -> Option<&HashSet<TokenId>> {
        match self {
            KeywordContext::None => None,
            KeywordContext::Global(k) => Some(k),
            KeywordContext::PerDocument(m) => m.get(&id),
        }
    }
}

/// Encodes a corpus for `model`: truncates to `max_len`, builds the keyword
/// views and pads documents shorter than the model's minimum with PAD.
pub fn prepare_examples(
    corpus: &Corpus,
    vocab: &Vocabulary,
    keywords: &KeywordContext,
    max_len: usize,
    model: &Model,
) -> Vec<Example> {
    corpus
        .documents
        .iter()
        .map(|doc| {
            let tokens = vocab.encode(&doc.tokens, max_len);
            let mut ex = Example::new(tokens, doc.label, keywords.for_doc(doc.id), model.num_slots());
            ex.pad_to(model.min_len());
            ex
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-document training loss.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Test accuracy of the retained model.
    pub final_accuracy: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// One JSON object per epoch followed by a summary object.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        let summary = serde_json::json!({
            "summary": true,
            "best_epoch": self.best_epoch,
            "final_accuracy": self.final_accuracy,
            "wall_seconds": self.wall_seconds,
            "config": self.config,
        });
        serde_json::to_writer(&mut w, &summary)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "model {} / variant {} / seed {}\n{:>5}  {:>12}  {:>9}  {:>8}\n",
            self.config.model, self.config.ablation, self.config.seed, "epoch", "train_loss", "test_acc", "seconds"
        );
        for e in &self.epochs {
            out.push_str(&format!(
                "{:>5}  {:>12.6}  {:>9.4}  {:>8.2}\n",
                e.epoch, e.train_loss, e.test_accuracy, e.seconds
            ));
        }
        out.push_str(&format!(
            "best epoch {}, accuracy {:.4}\n",
            self.best_epoch, self.final_accuracy
        ));
        out
    }
}

/// Per-tensor first and second moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Bias-corrected Adam step. Tensors without a gradient see a zero
/// gradient, so their moments still decay.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(crate::error::shape("optimizer state does not match the parameters"));
    }
    state.t += 1;
    for (i, t) in params.iter_mut().enumerate() {
        let n = t.data.len();
        if state.m[i].len() != n {
            return Err(crate::error::shape(format!("optimizer state for `{}` has the wrong size", t.name)));
        }
        let zeros;
        let g = match grads.params.get(i).and_then(|g| g.as_deref()) {
            Some(g) if g.len() == n => g,
            Some(_) => return Err(crate::error::shape(format!("gradient for `{}` has the wrong size", t.name))),
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        adam_update(&mut t.data, g, &mut state.m[i], &mut state.v[i], lr, state.t);
    }
    Ok(())
}

pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
    for (i, t) in params.iter_mut().enumerate() {
        if let Some(g) = grads.params.get(i).and_then(|g| g.as_deref()) {
            if g.len() != t.data.len() {
                return Err(crate::error::shape(format!("gradient for `{}` has the wrong size", t.name)));
            }
            for (p, g) in t.data.iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
    }
    Ok(())
}

/// Sparse optimiser state for the embedding table: only rows that received
/// a gradient are touched.
struct EmbeddingOptimizer {
    m: HashMap<TokenId, Vec<f64>>,
    v: HashMap<TokenId, Vec<f64>>,
}

impl EmbeddingOptimizer {
    fn step(&mut self, table: &mut EmbeddingTable, grads: &Gradients, optimizer: Optimizer, lr: f64, t: u64) {
        let dim = table.dim();
        for (&row, g) in &grads.embeddings {
            if row == PAD {
                continue;
            }
            match optimizer {
                Optimizer::Sgd => table.update_row(row, |r| {
                    for (p, g) in r.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }),
                Optimizer::Adam => {
                    let m = self.m.entry(row).or_insert_with(|| vec![0.0; dim]);
                    let v = self.v.entry(row).or_insert_with(|| vec![0.0; dim]);
                    table.update_row(row, |r| adam_update(r, g, m, v, lr, t));
                }
            }
        }
    }
}

fn scale_gradients(grads: &mut Gradients, f: f64) {
    for g in grads.params.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v *= f);
    }
    for g in grads.embeddings.values_mut() {
        g.iter_mut().for_each(|v| *v *= f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best test accuracy.
    pub model: Model,
    /// Fine-tuned embeddings from the same epoch, when fine-tuning.
    pub embeddings: Option<EmbeddingTable>,
    pub report: TrainReport,
}

fn check_context(examples: &[Example], ablation: Ablation) -> Result<()> {
    if ablation != Ablation::N {
        return Ok(());
    }
    let uses_keywords = examples
        .iter()
        .any(|e| e.mask.count() > 0 || e.slots.0.iter().any(|&t| t != PAD));
    if uses_keywords {
        return Err(argument("variant N must not see any keywords"));
    }
    Ok(())
}

/// Trains `model` on `train`, evaluating on `test` after every epoch. The
/// batch order is a seeded shuffle and batch gradients are reduced in a
/// fixed order, so the loss curve is reproducible bit for bit.
pub fn train(
    mut model: Model,
    table: &EmbeddingTable,
    train: &[Example],
    test: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(argument("training and test splits must be non-empty"));
    }
    if model.kind() != config.model {
        return Err(argument(format!(
            "configuration names {} but the model is {}",
            config.model,
            model.kind()
        )));
    }
    check_context(train, config.ablation)?;
    check_context(test, config.ablation)?;
    if let Model::Karnn(m) = &mut model {
        m.config.lambda = config.lambda;
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = AdamState::new(model.params());
    let mut emb_opt = EmbeddingOptimizer {
        m: HashMap::new(),
        v: HashMap::new(),
    };
    let mut tuned = config.fine_tune.then(|| table.clone());

    let mut best: Option<(f64, usize, Model, Option<EmbeddingTable>)> = None;
    let mut epochs = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let current = tuned.as_ref().unwrap_or(table);
            let (loss, mut grads) = model.loss_and_grad(current, &batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            total += loss;
            scale_gradients(&mut grads, 1.0 / batch.len() as f64);
            match config.optimizer {
                Optimizer::Sgd => sgd_step(model.params_mut(), &grads, config.learning_rate)?,
                Optimizer::Adam => adam_step(model.params_mut(), &grads, &mut adam, config.learning_rate)?,
            }
            if let Some(t) = tuned.as_mut() {
                emb_opt.step(t, &grads, config.optimizer, config.learning_rate, adam.t.max(1));
            }
            if !model.params().all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: f64::NAN,
                });
            }
        }
        let current = tuned.as_ref().unwrap_or(table);
        let accuracy = evaluate(&model, current, test)?;
        let train_loss = total / train.len() as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.6}, test accuracy {accuracy:.4}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            test_accuracy: accuracy,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(a, ..)| accuracy > *a) {
            best = Some((accuracy, epoch, model.clone(), tuned.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                log::info!("no improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    let (final_accuracy, best_epoch, model, embeddings) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        embeddings,
        report: TrainReport {
            config: config.clone(),
            epochs,
            best_epoch,
            final_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

/// Fraction of `examples` whose argmax prediction equals the label.
pub fn evaluate(model: &Model, table: &EmbeddingTable, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(argument("cannot evaluate on an empty split"));
    }
    let correct = examples
        .par_iter()
        .map(|ex| Ok(usize::from(predict(&model.probabilities(table, ex)?) == ex.label)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut p = ParamSet::new();
        let id = p.add("w", Shape::Vector(3), vec![1.0, 1.0, 1.0]);
        let grads = Gradients {
            params: vec![Some(vec![0.5, -2.0, 0.0])],
            embeddings: Default::default(),
        };
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut s, 0.01).unwrap();
        let d = &p.get(id).data;
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        assert!((d[0] - (1.0 - 0.01 * 0.5 / (0.5 + ADAM_EPS))).abs() < 1e-15);
        assert!((d[1] - (1.0 + 0.01 * 2.0 / (2.0 + ADAM_EPS))).abs() < 1e-15);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn adam_constant_gradient_asymptote() {
        let mut p = ParamSet::new();
        let id = p.add("w", Shape::Vector(2), vec![0.0, 0.0]);
        let grads = Gradients {
            params: vec![Some(vec![3.0, -0.1])],
            embeddings: Default::default(),
        };
        let mut s = AdamState::new(&p);
        for _ in 0..500 {
            let before = p.get(id).data.clone();
            adam_step(&mut p, &grads, &mut s, 1e-3).unwrap();
            let after = &p.get(id).data;
            assert!((before[0] - after[0] - 1e-3).abs() < 1e-9);
            assert!((after[1] - before[1] - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamSet::new();
        let id = p.add("w", Shape::Matrix(2, 2), vec![0.3, -0.1, 0.2, 0.9]);
        let before = p.get(id).data.clone();
        let mut s = AdamState::new(&p);
        let zero = Gradients::zeros_like(&p);
        adam_step(&mut p, &zero, &mut s, 0.1).unwrap();
        assert_eq!(p.get(id).data, before);
    }

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig {
            ablation: Ablation::N,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.lambda = 0.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
    }
}
