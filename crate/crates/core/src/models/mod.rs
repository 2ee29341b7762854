//! Keyword-guided classifiers: the attention GRU with a keyword-attention
//! penalty ([`Karnn`]) and the hybrid text/keyword network ([`Hdnn`]).

mod checkpoint;
mod hdnn;
mod karnn;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamSet, Var};
use crate::corpus::{TokenId, PAD};
use crate::embeddings::EmbeddingTable;
use crate::error::{argument, Error, Result};
use crate::kea::{build_mask, build_slots, KeywordMask, KeywordSlots};

pub use checkpoint::{keyword_hash, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use hdnn::{
    hdnn_forward, hdnn_loss, Hdnn, HdnnConfig, HdnnVariant, TextBranch, DEFAULT_CONV_CHANNELS, DEFAULT_CONV_WIDTH,
};
pub use karnn::{karnn_forward, karnn_loss, Karnn, KarnnConfig, KarnnOutput};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 128;

/// One encoded document with its keyword views.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub label: usize,
    pub mask: KeywordMask,
    pub slots: KeywordSlots,
}

impl Example {
    /// Builds the mask and `num_slots` keyword slots from `keywords`; `None`
    /// gives an all-zero mask and all-PAD slots.
    pub fn new(tokens: Vec<TokenId>, label: usize, keywords: Option<&HashSet<TokenId>>, num_slots: usize) -> Self {
        let empty = HashSet::new();
        let k = keywords.unwrap_or(&empty);
        let mask = build_mask(&tokens, k);
        let slots = build_slots(&tokens, k, num_slots);
        Self {
            tokens,
            label,
            mask,
            slots,
        }
    }

    /// Right-pads the token sequence with PAD up to `len`. The mask keeps
    /// matching the token count.
    pub fn pad_to(&mut self, len: usize) {
        while self.tokens.len() < len {
            self.tokens.push(PAD);
            self.mask.0.push(false);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Karnn,
    HdnnC,
    HdnnR,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Karnn => "karnn",
            ModelKind::HdnnC => "hdnn_c",
            ModelKind::HdnnR => "hdnn_r",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "karnn" => Ok(Self::Karnn),
            "hdnn_c" | "hdnn-c" => Ok(Self::HdnnC),
            "hdnn_r" | "hdnn-r" => Ok(Self::HdnnR),
            _ => Err(argument(format!("unknown model `{s}`"))),
        }
    }
}

/// Either classifier behind one interface for the trainer.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Karnn(Karnn),
    Hdnn(Hdnn),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Karnn(_) => ModelKind::Karnn,
            Model::Hdnn(h) => match h.config.variant {
                HdnnVariant::Cnn => ModelKind::HdnnC,
                HdnnVariant::Rnn => ModelKind::HdnnR,
            },
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Karnn(m) => &m.params,
            Model::Hdnn(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Karnn(m) => &mut m.params,
            Model::Hdnn(m) => &mut m.params,
        }
    }

    /// Minimum token count the model accepts.
    pub fn min_len(&self) -> usize {
        match self {
            Model::Karnn(_) => 1,
            Model::Hdnn(h) => h.min_len(),
        }
    }

    pub fn num_slots(&self) -> usize {
        match self {
            Model::Karnn(_) => 0,
            Model::Hdnn(h) => h.config.slots,
        }
    }

    /// Records the per-document training loss on `g`.
    pub fn record_loss(&self, g: &mut Graph, ex: &Example) -> Result<Var> {
        match self {
            Model::Karnn(m) => m.record_loss(g, ex),
            Model::Hdnn(m) => m.record_loss(g, ex),
        }
    }

    pub fn probabilities(&self, table: &EmbeddingTable, ex: &Example) -> Result<Vec<f64>> {
        match self {
            Model::Karnn(m) => Ok(m.forward(table, &ex.tokens)?.probs),
            Model::Hdnn(m) => m.forward(table, &ex.tokens, &ex.slots),
        }
    }

    pub fn predict(&self, table: &EmbeddingTable, ex: &Example) -> Result<usize> {
        Ok(predict(&self.probabilities(table, ex)?))
    }

    /// Summed loss of a batch and its gradient. Documents are evaluated in
    /// parallel and reduced in batch order, so the result does not depend on
    /// the thread count.
    pub fn loss_and_grad(&self, table: &EmbeddingTable, batch: &[&Example]) -> Result<(f64, Gradients)> {
        let per_doc: Vec<(f64, Gradients)> = batch
            .par_iter()
            .map(|ex| {
                let mut g = Graph::with_embeddings(self.params(), table);
                let loss = self.record_loss(&mut g, ex)?;
                Ok((g.scalar(loss), g.backward(loss)))
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(self.params());
        for (loss, g) in &per_doc {
            total += loss;
            grads.accumulate(g);
        }
        Ok((total, grads))
    }

    pub fn loss(&self, table: &EmbeddingTable, batch: &[&Example]) -> Result<f64> {
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|ex| {
                let mut g = Graph::with_embeddings(self.params(), table);
                let loss = self.record_loss(&mut g, ex)?;
                Ok(g.scalar(loss))
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum())
    }
}

/// Embedding nodes for a token sequence, rejecting ids outside the table.
pub(crate) fn embed_tokens(g: &mut Graph, tokens: &[TokenId]) -> Result<Vec<Var>> {
    let rows = g.table().map_or(0, |t| t.len());
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= rows) {
        return Err(argument(format!("token {bad} outside embedding table of {rows} rows")));
    }
    Ok(tokens.iter().map(|&t| g.embed(t)).collect())
}

/// Index of the largest probability, lowest index on ties.
pub fn predict(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}
