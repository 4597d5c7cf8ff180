//! Transformer building blocks on top of the tensor ops.

use vkd_tensor::ops::{self, AttnMask};
use vkd_tensor::Tensor;

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};

/// Normal-initialization scale of a weight matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// std = 1/sqrt(fan_in), used for the frozen towers.
    FanIn,
    Std(f64),
}

impl WeightInit {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            WeightInit::FanIn => 1.0 / (fan_in as f64).sqrt(),
            WeightInit::Std(s) => s,
        }
    }
}

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, wi: WeightInit, bias: bool) -> Result<Self> {
        init.scope(name, |init| {
            let w = init.normal("weight", &[d_in, d_out], wi.std(d_in), true)?;
            let b = if bias { Some(init.constant("bias", &[d_out], 0.0, false)?) } else { None };
            Ok(Linear { w, b, d_in, d_out })
        })
    }

    /// `x: [..., d_in]` to `[..., d_out]`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = ops::matmul(x, ps.get(self.w))?;
        Ok(match self.b {
            Some(b) => ops::add_trailing(&y, ps.get(b))?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        init.scope(name, |init| {
            Ok(LayerNorm {
                gain: init.constant("gain", &[d], 1.0, false)?,
                bias: init.constant("bias", &[d], 0.0, false)?,
            })
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(ops::layer_norm(x, Some(ps.get(self.gain)), Some(ps.get(self.bias)), NORM_EPS)?)
    }
}

/// Multi-head attention whose queries come from a `d`-wide stream and whose
/// keys/values come from a `d_kv`-wide stream. The output is `d` wide.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, d) = (x.dim(0), x.dim(1), x.dim(2));
    let x = ops::reshape(x, &[b, l, heads, d / heads])?;
    Ok(ops::permute(&x, &[0, 2, 1, 3])?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, l, dh) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let x = ops::permute(x, &[0, 2, 1, 3])?;
    Ok(ops::reshape(&x, &[b, l, h * dh])?)
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, d: usize, d_kv: usize, heads: usize, wi: WeightInit) -> Result<Self> {
        init.scope(name, |init| {
            Ok(Attention {
                q: Linear::new(init, "q", d, d, wi, true)?,
                k: Linear::new(init, "k", d_kv, d, wi, true)?,
                v: Linear::new(init, "v", d_kv, d, wi, true)?,
                o: Linear::new(init, "o", d, d, wi, true)?,
                heads,
            })
        })
    }

    /// `xq: [B, Lq, d]`, `xkv: [B, Lk, d_kv]`, mask `[B, Lq, Lk]`.
    pub fn forward(&self, ps: &ParamStore, xq: &Tensor, xkv: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
        let q = split_heads(&self.q.forward(ps, xq)?, self.heads)?;
        let k = split_heads(&self.k.forward(ps, xkv)?, self.heads)?;
        let v = split_heads(&self.v.forward(ps, xkv)?, self.heads)?;
        let o = ops::scaled_dot_product_attention(&q, &k, &v, mask)?;
        self.o.forward(ps, &merge_heads(&o)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d: usize, wi: WeightInit) -> Result<Self> {
        init.scope(name, |init| {
            Ok(FeedForward {
                up: Linear::new(init, "up", d, 4 * d, wi, true)?,
                down: Linear::new(init, "down", 4 * d, d, wi, true)?,
            })
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = ops::gelu(&self.up.forward(ps, x)?);
        self.down.forward(ps, &h)
    }
}

/// Which sublayers a [`Block`] has.
#[derive(Debug, Clone, Copy)]
pub struct BlockSpec {
    pub d: usize,
    pub heads: usize,
    pub self_attn: bool,
    /// Width of the cross-attended stream, if any.
    pub cross_kv: Option<usize>,
    /// Normalize the cross-attended stream before projecting it.
    pub cross_kv_norm: bool,
}

/// Pre-norm residual block: optional self-attention, optional
/// cross-attention, then a feed-forward layer.
#[derive(Debug, Clone)]
pub struct Block {
    pub self_attn: Option<(LayerNorm, Attention)>,
    pub cross: Option<(LayerNorm, Option<LayerNorm>, Attention)>,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, spec: BlockSpec, wi: WeightInit) -> Result<Self> {
        init.scope(name, |init| {
            let self_attn = if spec.self_attn {
                Some((
                    LayerNorm::new(init, "self_norm", spec.d)?,
                    Attention::new(init, "self_attn", spec.d, spec.d, spec.heads, wi)?,
                ))
            } else {
                None
            };
            let cross = match spec.cross_kv {
                Some(d_kv) => Some((
                    LayerNorm::new(init, "cross_norm", spec.d)?,
                    if spec.cross_kv_norm { Some(LayerNorm::new(init, "cross_kv_norm", d_kv)?) } else { None },
                    Attention::new(init, "cross_attn", spec.d, d_kv, spec.heads, wi)?,
                )),
                None => None,
            };
            Ok(Block {
                self_attn,
                cross,
                ffn_norm: LayerNorm::new(init, "ffn_norm", spec.d)?,
                ffn: FeedForward::new(init, "ffn", spec.d, wi)?,
            })
        })
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        self_mask: Option<&AttnMask>,
        memory: Option<(&Tensor, Option<&AttnMask>)>,
    ) -> Result<Tensor> {
        let mut x = x.clone();
        if let Some((norm, attn)) = &self.self_attn {
            let h = norm.forward(ps, &x)?;
            x = ops::add(&x, &attn.forward(ps, &h, &h, self_mask)?)?;
        }
        if let (Some((norm, kv_norm, attn)), Some((mem, mem_mask))) = (&self.cross, memory) {
            let h = norm.forward(ps, &x)?;
            let m = match kv_norm {
                Some(n) => n.forward(ps, mem)?,
                None => mem.clone(),
            };
            x = ops::add(&x, &attn.forward(ps, &h, &m, mem_mask)?)?;
        }
        let h = self.ffn_norm.forward(ps, &x)?;
        Ok(ops::add(&x, &self.ffn.forward(ps, &h)?)?)
    }
}

/// Adds rows `0..L` of a `[max_len, d]` position table to `x: [B, L, d]`.
pub fn add_positions(ps: &ParamStore, table: ParamId, x: &Tensor) -> Result<Tensor> {
    let pos = ops::narrow(ps.get(table), 0, 0, x.dim(1))?;
    Ok(ops::add_trailing(x, &pos)?)
}
