use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, DEFAULT_HIDDEN, DEFAULT_LAMBDA};
use crate::autodiff::nn::{attention, gru_sequence, Activation, AttentionParams, GruParams, Linear};
use crate::autodiff::{Graph, ParamSet, Var};
use crate::corpus::TokenId;
use crate::embeddings::EmbeddingTable;
use crate::error::{argument, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KarnnConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub num_classes: usize,
    /// Weight of the keyword-attention reward; zero disables keyword guidance.
    pub lambda: f64,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl KarnnConfig {
    pub fn new(embed_dim: usize, num_classes: usize) -> Self {
        Self {
            embed_dim,
            hidden_dim: DEFAULT_HIDDEN,
            attention_dim: DEFAULT_HIDDEN,
            num_classes,
            lambda: DEFAULT_LAMBDA,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

/// GRU encoder, word attention and a softmax layer over the attended
/// summary. Training minimises
/// `sum_d -ln p_d[label] - lambda * sum_d m_d . alpha_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Karnn {
    pub config: KarnnConfig,
    pub params: ParamSet,
    pub gru: GruParams,
    pub attention: AttentionParams,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KarnnOutput {
    pub probs: Vec<f64>,
    pub alpha: Vec<f64>,
}

struct Recorded {
    logits: Var,
    alpha: Var,
}

impl Karnn {
    pub fn new(config: KarnnConfig) -> Result<Self> {
        if config.lambda < 0.0 || !config.lambda.is_finite() {
            return Err(argument("lambda must be a finite non-negative number"));
        }
        if config.num_classes < 2 || config.embed_dim == 0 || config.hidden_dim == 0 || config.attention_dim == 0 {
            return Err(argument("KA-RNN dimensions must be positive and classes >= 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let gru = GruParams::register(&mut params, "gru", config.embed_dim, config.hidden_dim, &mut rng);
        let attention =
            AttentionParams::register(&mut params, "attention", config.hidden_dim, config.attention_dim, &mut rng);
        let output = Linear::register(&mut params, "output", config.hidden_dim, config.num_classes, &mut rng);
        Ok(Self {
            config,
            params,
            gru,
            attention,
            output,
        })
    }

    fn record(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<Recorded> {
        if tokens.is_empty() {
            return Err(argument("empty document"));
        }
        let xs = super::embed_tokens(g, tokens)?;
        let hs = gru_sequence(g, &xs, &self.gru)?;
        let att = attention(g, &hs, &self.attention, self.config.activation)?;
        let logits = self.output.forward(g, att.context);
        Ok(Recorded {
            logits,
            alpha: att.alpha,
        })
    }

    pub fn forward(&self, table: &EmbeddingTable, tokens: &[TokenId]) -> Result<KarnnOutput> {
        check_table(table, self.config.embed_dim)?;
        let mut g = Graph::with_embeddings(&self.params, table);
        let r = self.record(&mut g, tokens)?;
        Ok(KarnnOutput {
            probs: crate::autodiff::softmax(g.value(r.logits)),
            alpha: g.value(r.alpha).to_vec(),
        })
    }

    /// `-ln p[label] - lambda * m . alpha` for one document.
    pub fn record_loss(&self, g: &mut Graph, ex: &Example) -> Result<Var> {
        if ex.mask.len() != ex.tokens.len() {
            return Err(argument(format!(
                "mask of length {} for a document of {} tokens",
                ex.mask.len(),
                ex.tokens.len()
            )));
        }
        if ex.label >= self.config.num_classes {
            return Err(argument(format!("label {} outside {} classes", ex.label, self.config.num_classes)));
        }
        let r = self.record(g, &ex.tokens)?;
        let xent = g.softmax_xent(r.logits, ex.label);
        if self.config.lambda == 0.0 || ex.mask.count() == 0 {
            return Ok(xent);
        }
        let m = g.input(ex.mask.as_f64());
        let mass = g.dot(m, r.alpha);
        let penalty = g.scale(mass, self.config.lambda);
        Ok(g.sub(xent, penalty))
    }
}

fn check_table(table: &EmbeddingTable, dim: usize) -> Result<()> {
    if table.dim() != dim {
        return Err(crate::error::shape(format!(
            "embedding dimension {} but the model expects {dim}",
            table.dim()
        )));
    }
    Ok(())
}

pub fn karnn_forward(tokens: &[TokenId], table: &EmbeddingTable, model: &Karnn) -> Result<KarnnOutput> {
    model.forward(table, tokens)
}

/// Batch loss `sum_d (-ln p_d[label_d]) - lambda * sum_d m_d . alpha_d`.
pub fn karnn_loss(batch: &[Example], table: &EmbeddingTable, model: &Karnn) -> Result<f64> {
    check_table(table, model.config.embed_dim)?;
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::with_embeddings(&model.params, table);
        let loss = model.record_loss(&mut g, ex)?;
        total += g.scalar(loss);
    }
    Ok(total)
}
