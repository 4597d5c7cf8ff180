//! Stage-1 objectives: text-image matching, text-assisted masked image
//! modeling and image-assisted masked text modeling.

use std::sync::Arc;

use vkd_tensor::ops;
use vkd_tensor::{Tensor, TensorError};

use crate::config::{KdWeights, TimPooling};
use crate::error::{Result, VkdError};
use crate::iqformer::KnowledgeVectors;
use crate::params::{Init, ParamId, ParamStore};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Learnable contrastive temperature, stored as `log_tau`.
#[derive(Debug)]
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    pub fn new(init: &mut Init, tau_init: f64) -> Result<Self> {
        init.scope("temperature", |init| Ok(Temperature { log_tau: init.constant("log_tau", &[], tau_init.ln(), false)? }))
    }

    /// `exp(log_tau)` clamped to `[TAU_MIN, TAU_MAX]`.
    pub fn tau(&self, ps: &ParamStore) -> Tensor {
        ops::clamp(&ops::exp(ps.get(self.log_tau)), TAU_MIN, TAU_MAX)
    }
}

fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norms = ops::sqrt(&ops::sum_axis(&ops::square(x), x.rank() - 1)?);
    if let Some(i) = norms.data().iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(VkdError::Numeric(format!("pooled vector {} has zero or non-finite norm", i)));
    }
    Ok(ops::mul_leading(x, &ops::recip(&norms))?)
}

/// `[N, N]` similarity matrix `S[i][j] = sim(K_T_i, K_I_j)`.
pub fn tim_similarity(kt: &Tensor, ki: &Tensor, pooling: TimPooling) -> Result<Tensor> {
    let (n, q, d) = (kt.dim(0), kt.dim(1), kt.dim(2));
    match pooling {
        TimPooling::Mean => {
            let zt = l2_normalize_rows(&ops::mean_axis(kt, 1)?)?;
            let zi = l2_normalize_rows(&ops::mean_axis(ki, 1)?)?;
            Ok(ops::matmul(&zt, &ops::transpose(&zi, 0, 1)?)?)
        }
        TimPooling::Max => {
            let qi = ki.dim(1);
            let zt = l2_normalize_rows(&ops::reshape(kt, &[n * q, d])?)?;
            let zi = l2_normalize_rows(&ops::reshape(ki, &[n * qi, d])?)?;
            let s = ops::matmul(&zt, &ops::transpose(&zi, 0, 1)?)?;
            let s = ops::permute(&ops::reshape(&s, &[n, q, n, qi])?, &[0, 2, 1, 3])?;
            Ok(ops::max_axis(&ops::reshape(&s, &[n, n, q * qi])?, 2)?)
        }
    }
}

/// Symmetric InfoNCE summed over the batch in both directions.
pub fn loss_tim(kt: &KnowledgeVectors, ki: &KnowledgeVectors, tau: &Tensor, pooling: TimPooling) -> Result<Tensor> {
    let n = kt.batch();
    if n == 0 {
        return Err(VkdError::input("text-image matching needs a non-empty batch"));
    }
    if kt.k.shape()[0] != ki.k.shape()[0] || kt.k.dim(2) != ki.k.dim(2) {
        return Err(TensorError::Dimension {
            op: "loss_tim",
            detail: format!("{:?} vs {:?}", kt.k.shape(), ki.k.shape()),
        }
        .into());
    }
    let s = ops::mul_scalar_tensor(&tim_similarity(&kt.k, &ki.k, pooling)?, &ops::recip(tau))?;
    let diag: Vec<usize> = (0..n).collect();
    let t2i = ops::sum_all(&ops::pick_last(&ops::log_softmax(&s)?, &diag)?);
    let i2t = ops::sum_all(&ops::pick_last(&ops::log_softmax(&ops::transpose(&s, 0, 1)?)?, &diag)?);
    Ok(ops::neg(&ops::add(&t2i, &i2t)?))
}

/// Per-pixel weights selecting every pixel of the masked patches.
pub fn masked_pixel_weights(
    batch: usize,
    image_size: usize,
    mask_patch: usize,
    patch_mask: &[bool],
) -> Result<(Vec<f64>, usize)> {
    let g = image_size / mask_patch;
    if patch_mask.len() != g * g {
        return Err(TensorError::Dimension {
            op: "masked_pixel_weights",
            detail: format!("{} mask entries for a {}x{} grid", patch_mask.len(), g, g),
        }
        .into());
    }
    let plane: Vec<f64> = (0..image_size * image_size)
        .map(|i| {
            let (y, x) = (i / image_size, i % image_size);
            if patch_mask[(y / mask_patch) * g + x / mask_patch] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let per_plane = plane.iter().filter(|&&v| v > 0.0).count();
    let mut w = Vec::with_capacity(batch * 3 * plane.len());
    for _ in 0..batch * 3 {
        w.extend_from_slice(&plane);
    }
    Ok((w, per_plane * 3 * batch))
}

/// Mean absolute error over every pixel of the masked patches.
pub fn loss_tamim(
    original: &Tensor,
    reconstructed: &Tensor,
    patch_mask: &[bool],
    mask_patch: usize,
) -> Result<Tensor> {
    if original.shape() != reconstructed.shape() || original.rank() != 4 {
        return Err(TensorError::Dimension {
            op: "loss_tamim",
            detail: format!("{:?} vs {:?}", original.shape(), reconstructed.shape()),
        }
        .into());
    }
    if !patch_mask.iter().any(|&m| m) {
        return Err(TensorError::DegenerateMask { op: "loss_tamim", detail: "no masked patch".into() }.into());
    }
    let (w, count) = masked_pixel_weights(original.dim(0), original.dim(2), mask_patch, patch_mask)?;
    let diff = ops::abs(&ops::sub(reconstructed, original)?);
    let total = ops::sum_all(&ops::mul_const(&diff, Arc::new(w))?);
    Ok(ops::scale(&total, 1.0 / count as f64))
}

/// Cross-entropy over the masked positions only.
pub fn loss_iamtm(logits: &Tensor, targets: &[usize], masked: &[bool]) -> Result<Tensor> {
    let rows = logits.numel() / logits.shape().last().copied().unwrap_or(1).max(1);
    if targets.len() != rows || masked.len() != rows {
        return Err(TensorError::Dimension {
            op: "loss_iamtm",
            detail: format!("{} targets / {} mask flags for {} positions", targets.len(), masked.len(), rows),
        }
        .into());
    }
    let count = masked.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TensorError::DegenerateMask { op: "loss_iamtm", detail: "no masked token".into() }.into());
    }
    let lp = ops::pick_last(&ops::log_softmax(logits)?, targets)?;
    let w: Vec<f64> = masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let total = ops::sum_all(&ops::mul_const(&lp, Arc::new(w))?);
    Ok(ops::scale(&total, -1.0 / count as f64))
}

/// Weighted stage-1 objective with its raw terms. A term is `None` when
/// its weight is zero; such terms are neither computed nor differentiated.
#[derive(Debug, Clone)]
pub struct KdLoss {
    pub total: Tensor,
    pub tim: Option<Tensor>,
    pub tamim: Option<Tensor>,
    pub iamtm: Option<Tensor>,
}

/// Combines already-computed raw terms with their weights.
pub fn combine_kd(
    weights: KdWeights,
    tim: Option<Tensor>,
    tamim: Option<Tensor>,
    iamtm: Option<Tensor>,
) -> Result<KdLoss> {
    let mut parts = Vec::new();
    for (w, t) in [(weights.lambda1, &tim), (weights.lambda2, &tamim), (weights.lambda3, &iamtm)] {
        if let (true, Some(t)) = (w != 0.0, t) {
            parts.push(ops::scale(t, w));
        }
    }
    let total = sum_terms(parts)?;
    Ok(KdLoss { total, tim, tamim, iamtm })
}

pub(crate) fn sum_terms(parts: Vec<Tensor>) -> Result<Tensor> {
    let mut it = parts.into_iter();
    let first = it.next().ok_or_else(|| VkdError::Contract("every objective term is disabled".into()))?;
    it.try_fold(first, |acc, t| Ok(ops::add(&acc, &t)?))
}
