//! Frozen text and image towers.

use std::sync::atomic::{AtomicUsize, Ordering};

use vkd_tensor::ops::{self, AttnMask};
use vkd_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{Result, VkdError};
use crate::nn::{add_positions, Block, BlockSpec, LayerNorm, Linear, WeightInit};
use crate::params::{Init, ParamId, ParamStore};
use crate::tokenizer::TokenBatch;

/// Per-token hidden states of a text batch.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    /// `[B, L_t, d_enc]`
    pub hidden: Tensor,
    /// `[B][L_t]`, false at padding.
    pub attention_mask: Vec<Vec<bool>>,
}

/// Per-patch hidden states of an image batch.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// `[B, P, d_enc]`
    pub hidden: Tensor,
    pub patch_grid: (usize, usize),
}

#[derive(Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<Block>,
    pub final_norm: LayerNorm,
    pub max_len: usize,
    pub truncate: bool,
}

impl TextEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        init.scope("text_encoder", |init| {
            let token_embedding = init.normal("token_embedding", &[cfg.vocab_size, cfg.d_enc], 1.0, true)?;
            let positions = init.normal("positions", &[cfg.max_text_len, cfg.d_enc], 0.1, true)?;
            let spec = BlockSpec { d: cfg.d_enc, heads: cfg.enc_heads, self_attn: true, cross_kv: None, cross_kv_norm: false };
            let layers = (0..cfg.enc_layers)
                .map(|i| Block::new(init, &format!("layers.{}", i), spec, WeightInit::FanIn))
                .collect::<Result<_>>()?;
            Ok(TextEncoder {
                token_embedding,
                positions,
                layers,
                final_norm: LayerNorm::new(init, "final_norm", cfg.d_enc)?,
                max_len: cfg.max_text_len,
                truncate: cfg.truncate_text,
            })
        })
    }

    pub fn batch(&self, seqs: &[Vec<usize>]) -> Result<TokenBatch> {
        TokenBatch::from_sequences(seqs, self.max_len, self.truncate)
    }

    pub fn encode_text(&self, ps: &ParamStore, tokens: &TokenBatch) -> Result<TextEncoding> {
        if tokens.len > self.max_len {
            return Err(VkdError::Truncation { len: tokens.len, max: self.max_len });
        }
        crate::tokenizer::check_ids(&tokens.ids)?;
        let (b, l) = (tokens.batch, tokens.len);
        let emb = ops::embedding(ps.get(self.token_embedding), &tokens.ids)?;
        let d = emb.dim(1);
        let mut x = add_positions(ps, self.positions, &ops::reshape(&emb, &[b, l, d])?)?;
        let mask_rows = tokens.valid_rows();
        let mask = AttnMask::key_padding(&mask_rows, l)?;
        for layer in &self.layers {
            x = layer.forward(ps, &x, Some(&mask), None)?;
        }
        Ok(TextEncoding { hidden: self.final_norm.forward(ps, &x)?, attention_mask: mask_rows })
    }
}

#[derive(Debug)]
pub struct ImageEncoder {
    pub patch_proj: Linear,
    pub positions: ParamId,
    pub layers: Vec<Block>,
    pub final_norm: LayerNorm,
    pub image_size: usize,
    pub patch: usize,
    calls: AtomicUsize,
}

impl ImageEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        init.scope("image_encoder", |init| {
            let p = cfg.patch_size;
            let (gh, gw) = cfg.patch_grid();
            let patch_proj = Linear::new(init, "patch_proj", 3 * p * p, cfg.d_enc, WeightInit::FanIn, true)?;
            let positions = init.normal("positions", &[gh * gw, cfg.d_enc], 0.1, true)?;
            let spec = BlockSpec { d: cfg.d_enc, heads: cfg.enc_heads, self_attn: true, cross_kv: None, cross_kv_norm: false };
            let layers = (0..cfg.enc_layers)
                .map(|i| Block::new(init, &format!("layers.{}", i), spec, WeightInit::FanIn))
                .collect::<Result<_>>()?;
            Ok(ImageEncoder {
                patch_proj,
                positions,
                layers,
                final_norm: LayerNorm::new(init, "final_norm", cfg.d_enc)?,
                image_size: cfg.image_size,
                patch: p,
                calls: AtomicUsize::new(0),
            })
        })
    }

    fn check(&self, pixels: &Tensor) -> Result<()> {
        let s = pixels.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(vkd_tensor::TensorError::Dimension {
                op: "encode_image",
                detail: format!("expected [B, 3, {0}, {0}], got {1:?}", self.image_size, s),
            }
            .into());
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VkdError::input(format!("pixel value {} outside [0, 1]", v)));
        }
        Ok(())
    }

    /// Linear patch embeddings plus positions, before any attention layer.
    pub fn patch_embeddings(&self, ps: &ParamStore, pixels: &Tensor) -> Result<Tensor> {
        self.check(pixels)?;
        let patches = ops::patchify(pixels, self.patch)?;
        add_positions(ps, self.positions, &self.patch_proj.forward(ps, &patches)?)
    }

    pub fn encode_image(&self, ps: &ParamStore, pixels: &Tensor) -> Result<ImageEncoding> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut x = self.patch_embeddings(ps, pixels)?;
        for layer in &self.layers {
            x = layer.forward(ps, &x, None, None)?;
        }
        let g = self.image_size / self.patch;
        Ok(ImageEncoding { hidden: self.final_norm.forward(ps, &x)?, patch_grid: (g, g) })
    }

    /// Number of `encode_image` calls so far.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}
