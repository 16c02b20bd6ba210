//! Bidirectional transformer text encoder with input-layer prompts.
//!
//! The internal sequence is `[CLS_TEXT, prompts, tokens]`. Padding positions
//! are dropped before the encoder runs, which under bidirectional attention is
//! the same as masking them out of every key set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamStore, INIT_STD};
use crate::peft::PeftStrategy;
use crate::textkit::{TokenSequence, CLS_TEXT_ID, DEFAULT_MAX_TOKENS, PAD_ID};
use crate::transformer::{init_layer, init_layer_norm, init_linear, layer_forward, layer_norm, project, project_rows};

pub const EMBED: &str = "text.embed";
pub const POS: &str = "text.pos";
pub const PROMPTS: &str = "text.prompts";
pub const PROJ: &str = "text.proj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    /// Filled in from the training vocabulary when omitted.
    #[serde(default)]
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub prompt_len: usize,
    pub mlp_ratio: usize,
}

impl TextConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            max_tokens: DEFAULT_MAX_TOKENS,
            prompt_len: 8,
            mlp_ratio: 4,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 768,
            layers: 12,
            heads: 12,
            max_tokens: DEFAULT_MAX_TOKENS,
            prompt_len: 30,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= CLS_TEXT_ID as usize {
            return Err(Error::config("text vocab must include the reserved tokens"));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "text embed dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.max_tokens == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("text layers, max tokens and mlp ratio must be >= 1"));
        }
        Ok(())
    }

    /// Internal sequence length for a full-length input.
    pub fn seq_len(&self) -> usize {
        1 + self.prompt_len + self.max_tokens
    }

    pub fn layer_prefixes(&self) -> Vec<String> {
        (0..self.layers).map(|l| format!("text.layers.{l}")).collect()
    }
}

/// Frozen embeddings and layers, trainable prompts and projection.
pub fn init_params<R: Rng + ?Sized>(cfg: &TextConfig, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.embed_dim;
    store.insert(EMBED, trunc_normal(rng, cfg.vocab_size, d, INIT_STD), false);
    store.insert(POS, trunc_normal(rng, 1 + cfg.max_tokens, d, INIT_STD), false);
    for prefix in cfg.layer_prefixes() {
        init_layer(store, &prefix, d, cfg.mlp_ratio, rng);
    }
    init_layer_norm(store, "text.norm", d, false);
    if cfg.prompt_len > 0 {
        store.insert(PROMPTS, trunc_normal(rng, cfg.prompt_len, d, INIT_STD), true);
    }
    init_linear(store, PROJ, d, d, false, true, rng);
}

fn check_sequence(cfg: &TextConfig, tokens: &TokenSequence) -> Result<Vec<usize>> {
    if tokens.max_len() > cfg.max_tokens {
        return Err(Error::invalid(format!(
            "token sequence of length {} exceeds the configured maximum {}",
            tokens.max_len(),
            cfg.max_tokens
        )));
    }
    if let Some(&bad) = tokens.indices.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "token index {bad} out of range for vocab of {}",
            cfg.vocab_size
        )));
    }
    Ok(tokens.content_positions())
}

/// Embedding-table rows for the non-pad tokens (n×d), without positions.
pub fn token_embeddings(store: &ParamStore, cfg: &TextConfig, tokens: &TokenSequence) -> Result<Mat> {
    let positions = check_sequence(cfg, tokens)?;
    let table = store.value(EMBED);
    let mut out = Mat::zeros((positions.len(), cfg.embed_dim));
    for (r, &p) in positions.iter().enumerate() {
        out.row_mut(r).assign(&table.row(tokens.indices[p] as usize));
    }
    Ok(out)
}

/// `n` copies of the `[PAD]` embedding, the attribution baseline.
pub fn pad_embeddings(store: &ParamStore, n: usize) -> Mat {
    let row = store.value(EMBED).row(PAD_ID as usize).to_owned();
    let d = row.len();
    Mat::from_shape_fn((n, d), |(_, j)| row[j])
}

/// Graph handles produced by the text encoder.
#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    pub cls: Var,
    /// Final-layer outputs at the non-pad token positions.
    pub tokens: Var,
}

/// Encoder forward from token embeddings `embeds` (n×d, positions not yet
/// added). `positions` are the original sequence positions of those rows.
pub fn forward_embeddings(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TextConfig,
    peft: &PeftStrategy,
    embeds: Var,
    positions: &[usize],
) -> TextVars {
    let n = positions.len();
    assert_eq!(g.shape(embeds).0, n, "embedding rows must match positions");
    let pos_table = store.value(POS);
    let mut pos = Mat::zeros((n + 1, cfg.embed_dim));
    pos.row_mut(0).assign(&pos_table.row(0));
    for (r, &p) in positions.iter().enumerate() {
        pos.row_mut(r + 1).assign(&pos_table.row(p + 1));
    }
    let cls_embed = store
        .value(EMBED)
        .row(CLS_TEXT_ID as usize)
        .to_owned()
        .insert_axis(ndarray::Axis(0));
    let cls = g.constant(cls_embed);
    let seq = g.concat_rows(&[cls, embeds]);
    let pos = g.constant(pos);
    let seq = g.add(seq, pos);

    let lr = cfg.prompt_len;
    let mut x = if lr > 0 {
        let head = g.slice_rows(seq, 0, 1);
        let tail = g.slice_rows(seq, 1, n);
        let p = g.param(store, PROMPTS);
        g.concat_rows(&[head, p, tail])
    } else {
        seq
    };
    for prefix in cfg.layer_prefixes() {
        x = layer_forward(g, store, &prefix, x, cfg.heads, peft);
    }
    let x = layer_norm(g, store, "text.norm", x);
    let cls = g.slice_rows(x, 0, 1);
    let tokens = g.slice_rows(x, 1 + lr, n);
    TextVars { cls, tokens }
}

pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TextConfig,
    peft: &PeftStrategy,
    tokens: &TokenSequence,
) -> Result<TextVars> {
    let embeds = token_embeddings(store, cfg, tokens)?;
    if embeds.nrows() == 0 {
        return Err(Error::invalid("token sequence has no non-pad tokens"));
    }
    let positions = tokens.content_positions();
    let e = g.constant(embeds);
    Ok(forward_embeddings(g, store, cfg, peft, e, &positions))
}

/// Unit text embedding `w` (or per-token unit vectors) through `f_t`.
pub fn project_text_graph(g: &mut Graph, store: &ParamStore, x: Var) -> Var {
    project(g, store, PROJ, x)
}

pub fn project_text(pooled: &Mat, store: &ParamStore) -> Result<Mat> {
    project_rows(store, PROJ, pooled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub pooled: Mat,
    pub token_out: Mat,
}

pub fn encode_text(
    tokens: &TokenSequence,
    store: &ParamStore,
    cfg: &TextConfig,
    peft: &PeftStrategy,
) -> Result<TextEncoding> {
    let mut g = Graph::new();
    let vars = forward(&mut g, store, cfg, peft, tokens)?;
    Ok(TextEncoding {
        pooled: g.value(vars.cls).clone(),
        token_out: g.value(vars.tokens).clone(),
    })
}
