use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, DEFAULT_HIDDEN};
use crate::autodiff::nn::{conv_wgram, gru_sequence, max_pool, ConvParams, GruParams, Linear};
use crate::autodiff::{Graph, ParamSet, Var};
use crate::corpus::TokenId;
use crate::embeddings::EmbeddingTable;
use crate::error::{argument, shape, Result};
use crate::kea::{KeywordSlots, DEFAULT_SLOTS};

pub const DEFAULT_CONV_WIDTH: usize = 3;
pub const DEFAULT_CONV_CHANNELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HdnnVariant {
    Cnn,
    Rnn,
}

/// The keyword branch and the fused representation are both `embed_dim`
/// wide, so `embed_dim` must be even.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdnnConfig {
    pub variant: HdnnVariant,
    pub embed_dim: usize,
    pub conv_width: usize,
    pub conv_channels: usize,
    pub hidden_dim: usize,
    pub slots: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl HdnnConfig {
    pub fn new(variant: HdnnVariant, embed_dim: usize, num_classes: usize) -> Self {
        Self {
            variant,
            embed_dim,
            conv_width: DEFAULT_CONV_WIDTH,
            conv_channels: DEFAULT_CONV_CHANNELS,
            hidden_dim: DEFAULT_HIDDEN,
            slots: DEFAULT_SLOTS,
            num_classes,
            seed: 0,
        }
    }

    /// Width of the text-branch summary `h_c`.
    pub fn text_dim(&self) -> usize {
        match self.variant {
            HdnnVariant::Cnn => self.conv_channels,
            HdnnVariant::Rnn => self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextBranch {
    Conv(ConvParams),
    Gru(GruParams),
}

/// Text branch (convolution + max-pool, or GRU final state) and keyword
/// branch (shared per-slot layer + max-pool), each projected to `d/2`,
/// concatenated and fed to a softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Hdnn {
    pub config: HdnnConfig,
    pub params: ParamSet,
    pub text: TextBranch,
    pub fcn: Linear,
    pub fuse_text: Linear,
    pub fuse_keywords: Linear,
    pub output: Linear,
}

impl Hdnn {
    pub fn new(config: HdnnConfig) -> Result<Self> {
        let c = &config;
        if c.num_classes < 2 || c.embed_dim == 0 || c.text_dim() == 0 {
            return Err(argument("HDNN dimensions must be positive and classes >= 2"));
        }
        if !c.embed_dim.is_multiple_of(2) {
            return Err(argument(format!("embedding dimension {} must be even", c.embed_dim)));
        }
        if c.slots == 0 {
            return Err(argument("at least one keyword slot is required"));
        }
        if c.variant == HdnnVariant::Cnn && c.conv_width == 0 {
            return Err(argument("filter width must be at least 1"));
        }
        let d = c.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut params = ParamSet::new();
        let text = match c.variant {
            HdnnVariant::Cnn => TextBranch::Conv(ConvParams::register(
                &mut params,
                "conv",
                d,
                c.conv_channels,
                c.conv_width,
                &mut rng,
            )),
            HdnnVariant::Rnn => TextBranch::Gru(GruParams::register(&mut params, "gru", d, c.hidden_dim, &mut rng)),
        };
        let fcn = Linear::register(&mut params, "fcn", d, d, &mut rng);
        let fuse_text = Linear::register(&mut params, "fuse_text", c.text_dim(), d / 2, &mut rng);
        let fuse_keywords = Linear::register(&mut params, "fuse_keywords", d, d / 2, &mut rng);
        let output = Linear::register(&mut params, "output", d, c.num_classes, &mut rng);
        Ok(Self {
            config,
            params,
            text,
            fcn,
            fuse_text,
            fuse_keywords,
            output,
        })
    }

    pub fn min_len(&self) -> usize {
        match self.config.variant {
            HdnnVariant::Cnn => self.config.conv_width,
            HdnnVariant::Rnn => 1,
        }
    }

    /// Logits for one document.
    fn record(&self, g: &mut Graph, tokens: &[TokenId], slots: &KeywordSlots) -> Result<Var> {
        if tokens.len() < self.min_len() || tokens.is_empty() {
            return Err(argument(format!(
                "document of {} tokens is shorter than the minimum {}",
                tokens.len(),
                self.min_len().max(1)
            )));
        }
        if slots.0.len() != self.config.slots {
            return Err(argument(format!(
                "{} keyword slots given, model has {}",
                slots.0.len(),
                self.config.slots
            )));
        }
        let xs = super::embed_tokens(g, tokens)?;
        let h_c = match &self.text {
            TextBranch::Conv(p) => {
                let feature_map = conv_wgram(g, &xs, p)?;
                max_pool(g, feature_map)?
            }
            TextBranch::Gru(p) => *gru_sequence(g, &xs, p)?.last().expect("non-empty"),
        };
        let ks = super::embed_tokens(g, &slots.0)?;
        let hidden: Vec<Var> = ks
            .into_iter()
            .map(|x| {
                let pre = self.fcn.forward(g, x);
                g.relu(pre)
            })
            .collect();
        let stacked = g.stack(&hidden);
        let h_f = max_pool(g, stacked)?;
        let h_ct = self.fuse_text.forward(g, h_c);
        let h_ft = self.fuse_keywords.forward(g, h_f);
        let h_t = g.concat(&[h_ct, h_ft]);
        Ok(self.output.forward(g, h_t))
    }

    pub fn forward(&self, table: &EmbeddingTable, tokens: &[TokenId], slots: &KeywordSlots) -> Result<Vec<f64>> {
        check_table(table, self.config.embed_dim)?;
        let mut g = Graph::with_embeddings(&self.params, table);
        let logits = self.record(&mut g, tokens, slots)?;
        Ok(crate::autodiff::softmax(g.value(logits)))
    }

    /// `-ln p[label]` for one document.
    pub fn record_loss(&self, g: &mut Graph, ex: &Example) -> Result<Var> {
        if ex.label >= self.config.num_classes {
            return Err(argument(format!("label {} outside {} classes", ex.label, self.config.num_classes)));
        }
        let logits = self.record(g, &ex.tokens, &ex.slots)?;
        Ok(g.softmax_xent(logits, ex.label))
    }
}

fn check_table(table: &EmbeddingTable, dim: usize) -> Result<()> {
    if table.dim() != dim {
        return Err(shape(format!(
            "embedding dimension {} but the model expects {dim}",
            table.dim()
        )));
    }
    Ok(())
}

pub fn hdnn_forward(
    tokens: &[TokenId],
    slots: &KeywordSlots,
    table: &EmbeddingTable,
    model: &Hdnn,
) -> Result<Vec<f64>> {
    model.forward(table, tokens, slots)
}

/// Batch cross-entropy `sum_d -ln p_d[label_d]`.
pub fn hdnn_loss(batch: &[Example], table: &EmbeddingTable, model: &Hdnn) -> Result<f64> {
    check_table(table, model.config.embed_dim)?;
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::with_embeddings(&model.params, table);
        let loss = model.record_loss(&mut g, ex)?;
        total += g.scalar(loss);
    }
    Ok(total)
}
