//! Learnable query transformer, knowledge fusion and the masked-modeling
//! heads.

use std::sync::Arc;

use vkd_tensor::ops::{self, AttnMask};
use vkd_tensor::Tensor;

use crate::config::ModelConfig;
use crate::encoders::{ImageEncoding, TextEncoding};
use crate::error::{Result, VkdError};
use crate::nn::{Attention, Block, BlockSpec, FeedForward, LayerNorm, Linear, WeightInit};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnowledgeSource {
    FromText,
    FromImage,
    Reconstructed,
}

/// `[B, n_queries, d_k]` knowledge vectors and where they came from.
#[derive(Debug, Clone)]
pub struct KnowledgeVectors {
    pub k: Tensor,
    pub source: KnowledgeSource,
}

impl KnowledgeVectors {
    pub fn batch(&self) -> usize {
        self.k.dim(0)
    }
}

#[derive(Debug)]
pub struct IqFormer {
    /// The single query bank shared by both modalities.
    pub queries: ParamId,
    pub layers: Vec<Block>,
    pub final_norm: LayerNorm,
    pub n_queries: usize,
}

impl IqFormer {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let wi = WeightInit::Std(cfg.init_std);
        let queries = init.normal("queries", &[cfg.n_queries, cfg.d_k], cfg.query_init_std, true)?;
        let spec = BlockSpec {
            d: cfg.d_k,
            heads: cfg.iq_heads,
            self_attn: true,
            cross_kv: Some(cfg.d_enc),
            cross_kv_norm: true,
        };
        let layers = (0..cfg.iq_layers)
            .map(|i| Block::new(init, &format!("layers.{}", i), spec, wi))
            .collect::<Result<_>>()?;
        Ok(IqFormer { queries, layers, final_norm: LayerNorm::new(init, "final_norm", cfg.d_k)?, n_queries: cfg.n_queries })
    }

    fn run(&self, ps: &ParamStore, memory: &Tensor, mask_rows: Option<&[Vec<bool>]>) -> Result<Tensor> {
        let b = memory.dim(0);
        let q = ps.get(self.queries);
        let per = q.numel();
        let map: Vec<usize> = (0..b).flat_map(|_| 0..per).collect();
        let mut x = ops::gather_map(q, &[b, q.dim(0), q.dim(1)], Arc::new(map))?;
        let mask = match mask_rows {
            Some(rows) => Some(AttnMask::key_padding(rows, self.n_queries)?),
            None => None,
        };
        for layer in &self.layers {
            x = layer.forward(ps, &x, None, Some((memory, mask.as_ref())))?;
        }
        self.final_norm.forward(ps, &x)
    }

    /// K_T. Takes only a text encoding, so this path cannot touch images.
    pub fn distill_from_text(&self, ps: &ParamStore, enc: &TextEncoding) -> Result<KnowledgeVectors> {
        Ok(KnowledgeVectors {
            k: self.run(ps, &enc.hidden, Some(&enc.attention_mask))?,
            source: KnowledgeSource::FromText,
        })
    }

    /// K_I.
    pub fn distill_from_image(&self, ps: &ParamStore, enc: &ImageEncoding) -> Result<KnowledgeVectors> {
        Ok(KnowledgeVectors { k: self.run(ps, &enc.hidden, None)?, source: KnowledgeSource::FromImage })
    }
}

/// Attention block where position-aligned features query a set of knowledge
/// vectors: `h = x + W_o MHA(LN(x), K, K)`, then `h + FFN(LN(h))`.
#[derive(Debug)]
pub struct FusionBlock {
    pub norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl FusionBlock {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let wi = WeightInit::Std(cfg.init_std);
        init.scope(name, |init| {
            Ok(FusionBlock {
                norm: LayerNorm::new(init, "norm", cfg.d_enc)?,
                attn: Attention::new(init, "attn", cfg.d_enc, cfg.d_k, cfg.enc_heads, wi)?,
                ffn_norm: LayerNorm::new(init, "ffn_norm", cfg.d_enc)?,
                ffn: FeedForward::new(init, "ffn", cfg.d_enc, wi)?,
            })
        })
    }

    /// `features: [B, L, d_enc]` fused with knowledge `[B, n, d_k]`.
    pub fn fuse_knowledge(&self, ps: &ParamStore, features: &Tensor, knowledge: &KnowledgeVectors) -> Result<Tensor> {
        if features.rank() != 3 || features.dim(0) != knowledge.batch() {
            return Err(vkd_tensor::TensorError::Dimension {
                op: "fuse_knowledge",
                detail: format!("features {:?} vs knowledge {:?}", features.shape(), knowledge.k.shape()),
            }
            .into());
        }
        let h = self.norm.forward(ps, features)?;
        let x = ops::add(features, &self.attn.forward(ps, &h, &knowledge.k, None)?)?;
        let h = self.ffn_norm.forward(ps, &x)?;
        Ok(ops::add(&x, &self.ffn.forward(ps, &h)?)?)
    }
}

/// 3x3 convolution to `3 * patch^2` channels followed by pixel shuffle.
#[derive(Debug)]
pub struct ImageDecoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub grid: (usize, usize),
    pub patch: usize,
}

impl ImageDecoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size;
        init.scope("image_decoder", |init| {
            Ok(ImageDecoder {
                weight: init.normal("weight", &[cfg.d_enc * 9, 3 * p * p], cfg.init_std, true)?,
                bias: init.constant("bias", &[3 * p * p], 0.0, false)?,
                grid: cfg.patch_grid(),
                patch: p,
            })
        })
    }

    /// `fused: [B, P, d]` to an image `[B, 3, H, W]`.
    pub fn decode_image_patches(&self, ps: &ParamStore, fused: &Tensor) -> Result<Tensor> {
        let (gh, gw) = self.grid;
        if fused.rank() != 3 || fused.dim(1) != gh * gw {
            return Err(vkd_tensor::TensorError::Dimension {
                op: "decode_image_patches",
                detail: format!("{:?} does not match a {}x{} patch grid", fused.shape(), gh, gw),
            }
            .into());
        }
        let (b, d) = (fused.dim(0), fused.dim(2));
        let x = ops::permute(&ops::reshape(fused, &[b, gh, gw, d])?, &[0, 3, 1, 2])?;
        let y = ops::conv2d(&x, ps.get(self.weight), Some(ps.get(self.bias)), 3)?;
        Ok(ops::pixel_shuffle(&y, self.patch)?)
    }
}

/// Linear vocabulary head over fused text features.
#[derive(Debug)]
pub struct MlmHead {
    pub proj: Linear,
}

impl MlmHead {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        Ok(MlmHead {
            proj: Linear::new(init, "mlm_head", cfg.d_enc, cfg.vocab_size, WeightInit::Std(cfg.init_std), true)?,
        })
    }

    /// `fused: [B, L_t, d]` to logits `[B, L_t, V]`.
    pub fn predict_masked_tokens(&self, ps: &ParamStore, fused: &Tensor) -> Result<Tensor> {
        self.proj.forward(ps, fused)
    }
}

/// Checks that knowledge vectors are of the expected kind.
pub fn expect_source(k: &KnowledgeVectors, want: KnowledgeSource, what: &str) -> Result<()> {
    if k.source != want {
        return Err(VkdError::Contract(format!("{} requires {:?} knowledge, got {:?}", what, want, k.source)));
    }
    Ok(())
}
