//! Transformer text encoder mapping token sequences into the shared
//! semantic space.
//!
//! Token + learned positional embeddings feed pre-norm blocks (bidirectional
//! multi-head self-attention with PAD masking, then a 4x-width relu MLP,
//! both with residuals), a final layernorm, and an affine projection. The
//! hidden state at the END token is the pooled representation, which is
//! L2-normalized into the semantic space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndgrad::{DiffTensor, GradError, Graph};
use crate::params::{kaiming_uniform, small_uniform, LeafCache, ParamError, ParamStore};
use crate::stream;
use crate::textpipe::{BpeVocab, TokenSeq, MAX_SEQ_LEN};

#[derive(Debug, Error)]
pub enum TxtencError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("sequence without END token")]
    NoEnd,
    #[error("sequence length {0} exceeds maximum {1}")]
    TooLong(usize, usize),
    #[error("token id {0} outside vocabulary {1}")]
    BadToken(u32, u32),
    #[error("graph error: {0}")]
    Grad(#[from] GradError),
    #[error("param error: {0}")]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, TxtencError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: u32,
    pub semantic_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        // desk-scale defaults; the paper-scale (3, 512, 8, 49152) model
        // is constructible but not the default
        TextEncoderConfig {
            layers: 2,
            width: 64,
            heads: 4,
            max_len: MAX_SEQ_LEN,
            vocab_size: 771, // 256 + 512 merges + 3 specials
            semantic_dim: 64,
        }
    }
}

impl TextEncoderConfig {
    pub fn for_vocab(vocab: &BpeVocab, semantic_dim: usize) -> Self {
        TextEncoderConfig { vocab_size: vocab.size(), semantic_dim, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(TxtencError::BadConfig(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.semantic_dim == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return Err(TxtencError::BadConfig("all extents must be positive".into()));
        }
        Ok(())
    }
}

/// Granularity of a linguistic feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Coarse,
    Fine1,
    Fine2,
}

/// A unit-norm text embedding with its class label.
pub struct LinguisticFeature {
    pub vector: DiffTensor,
    pub label: u16,
    pub granularity: Granularity,
}

/// Register all text-encoder parameters under `txt.`; deterministic per
/// seed and independent of every other component's stream.
pub fn init_text_encoder(config: &TextEncoderConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    config.validate()?;
    let w = config.width;
    let mut rng = stream::rng(seed, "init.txt");

    store.insert(
        "txt.tok_embed",
        vec![config.vocab_size as usize, w],
        small_uniform(&mut rng, 0.02, config.vocab_size as usize * w),
        true,
    )?;
    store.insert(
        "txt.pos_embed",
        vec![config.max_len, w],
        small_uniform(&mut rng, 0.02, config.max_len * w),
        true,
    )?;

    let dense = |store: &mut ParamStore, prefix: String, rows: usize, cols: usize, rng: &mut _| -> Result<()> {
        store.insert(&format!("{prefix}.w"), vec![rows, cols], kaiming_uniform(rng, rows, rows * cols), true)?;
        store.insert(&format!("{prefix}.b"), vec![cols], vec![0.0; cols], true)?;
        Ok(())
    };
    let ln = |store: &mut ParamStore, prefix: String| -> Result<()> {
        store.insert(&format!("{prefix}.gamma"), vec![w], vec![1.0; w], true)?;
        store.insert(&format!("{prefix}.beta"), vec![w], vec![0.0; w], true)?;
        Ok(())
    };

    for layer in 0..config.layers {
        let p = format!("txt.l{layer}");
        ln(store, format!("{p}.ln1"))?;
        for proj in ["wq", "wk", "wv", "wo"] {
            dense(store, format!("{p}.attn.{proj}"), w, w, &mut rng)?;
        }
        ln(store, format!("{p}.ln2"))?;
        dense(store, format!("{p}.mlp.fc1"), w, 4 * w, &mut rng)?;
        dense(store, format!("{p}.mlp.fc2"), 4 * w, w, &mut rng)?;
    }
    ln(store, "txt.ln_f".into())?;
    dense(store, "txt.proj".into(), w, config.semantic_dim, &mut rng)?;
    store.insert(
        "txt.meta",
        vec![6],
        vec![
            config.layers as f64,
            config.width as f64,
            config.heads as f64,
            config.max_len as f64,
            config.vocab_size as f64,
            config.semantic_dim as f64,
        ],
        false,
    )?;
    Ok(())
}

pub fn config_from_store(store: &ParamStore) -> Result<TextEncoderConfig> {
    let meta = store.get("txt.meta")?;
    Ok(TextEncoderConfig {
        layers: meta.data[0] as usize,
        width: meta.data[1] as usize,
        heads: meta.data[2] as usize,
        max_len: meta.data[3] as usize,
        vocab_size: meta.data[4] as u32,
        semantic_dim: meta.data[5] as usize,
    })
}

/// Encode one token sequence to a unit-norm semantic vector [1, d_sem].
/// PAD positions are masked out of attention; pooling reads the first END
/// position.
pub fn encode_text(
    graph: &mut Graph,
    store: &ParamStore,
    leaves: &mut LeafCache,
    config: &TextEncoderConfig,
    seq: &TokenSeq,
    pad_id: u32,
    end_id: u32,
) -> Result<DiffTensor> {
    if seq.len() > config.max_len {
        return Err(TxtencError::TooLong(seq.len(), config.max_len));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(TxtencError::BadToken(bad, config.vocab_size));
    }
    let end_pos = seq.ids.iter().position(|&id| id == end_id).ok_or(TxtencError::NoEnd)?;
    let t = seq.len();
    let key_valid: Vec<bool> = seq.ids.iter().map(|&id| id != pad_id).collect();

    let mut leaf = |graph: &mut Graph, name: &str| leaves.leaf(graph, store, name);

    let tok_table = leaf(graph, "txt.tok_embed")?;
    let pos_table = leaf(graph, "txt.pos_embed")?;
    let ids: Vec<usize> = seq.ids.iter().map(|&id| id as usize).collect();
    let tok = graph.embedding(&tok_table, &ids)?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = graph.embedding(&pos_table, &positions)?;
    let mut h = graph.add(&tok, &pos)?;

    for layer in 0..config.layers {
        let p = format!("txt.l{layer}");
        let ln1g = leaf(graph, &format!("{p}.ln1.gamma"))?;
        let ln1b = leaf(graph, &format!("{p}.ln1.beta"))?;
        let normed = graph.layernorm(&h, &ln1g, &ln1b)?;
        let attn_params: Vec<DiffTensor> = {
            let mut v = Vec::with_capacity(8);
            for proj in ["wq", "wk", "wv", "wo"] {
                v.push(leaf(graph, &format!("{p}.attn.{proj}.w"))?);
                v.push(leaf(graph, &format!("{p}.attn.{proj}.b"))?);
            }
            v
        };
        let attended = graph.multihead_attention(
            &normed,
            [
                &attn_params[0],
                &attn_params[1],
                &attn_params[2],
                &attn_params[3],
                &attn_params[4],
                &attn_params[5],
                &attn_params[6],
                &attn_params[7],
            ],
            config.heads,
            false,
            &key_valid,
        )?;
        h = graph.add(&h, &attended)?;

        let ln2g = leaf(graph, &format!("{p}.ln2.gamma"))?;
        let ln2b = leaf(graph, &format!("{p}.ln2.beta"))?;
        let normed = graph.layernorm(&h, &ln2g, &ln2b)?;
        let fc1w = leaf(graph, &format!("{p}.mlp.fc1.w"))?;
        let fc1b = leaf(graph, &format!("{p}.mlp.fc1.b"))?;
        let fc2w = leaf(graph, &format!("{p}.mlp.fc2.w"))?;
        let fc2b = leaf(graph, &format!("{p}.mlp.fc2.b"))?;
        let up = graph.linear(&normed, &fc1w, &fc1b)?;
        let act = graph.relu(&up)?;
        let down = graph.linear(&act, &fc2w, &fc2b)?;
        h = graph.add(&h, &down)?;
    }

    let lng = leaf(graph, "txt.ln_f.gamma")?;
    let lnb = leaf(graph, "txt.ln_f.beta")?;
    let normed = graph.layernorm(&h, &lng, &lnb)?;

    // pool the END row with a one-hot selector
    let mut onehot = vec![0.0; t];
    onehot[end_pos] = 1.0;
    let sel = graph.constant(onehot, &[1, t])?;
    let pooled = graph.matmul(&sel, &normed, false, false)?;

    let pw = leaf(graph, "txt.proj.w")?;
    let pb = leaf(graph, "txt.proj.b")?;
    let projected = graph.linear(&pooled, &pw, &pb)?;
    Ok(graph.l2_normalize(&projected)?)
}
