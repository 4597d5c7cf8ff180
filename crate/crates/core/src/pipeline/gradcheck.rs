//! Finite-difference checks of every training objective against the
//! autodiff gradients of the learnable parameters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vkd_tensor::{grad_check, Tensor};

use crate::config::{KdWeights, KiWeights, ModelConfig};
use crate::data::{PairBatch, PairGenerator};
use crate::error::{Result, VkdError};
use crate::model::{Model, PretrainLosses};
use crate::params::ParamId;

/// An objective whose gradient can be checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Tim,
    Tamim,
    Iamtm,
    Iaci,
    Iakr,
    Kd,
    Ki,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] =
        [LossTerm::Tim, LossTerm::Tamim, LossTerm::Iamtm, LossTerm::Iaci, LossTerm::Iakr, LossTerm::Kd, LossTerm::Ki];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Tim => "tim",
            LossTerm::Tamim => "tamim",
            LossTerm::Iamtm => "iamtm",
            LossTerm::Iaci => "iaci",
            LossTerm::Iakr => "iakr",
            LossTerm::Kd => "kd",
            LossTerm::Ki => "ki",
        }
    }

    /// Weights under which only this term (or composite) is computed.
    fn weights(self, cfg: &ModelConfig) -> (KdWeights, KiWeights) {
        let kd0 = KdWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        let ki0 = KiWeights { lambda4: 0.0, lambda5: 0.0 };
        match self {
            LossTerm::Tim => (KdWeights { lambda1: 1.0, ..kd0 }, ki0),
            LossTerm::Tamim => (KdWeights { lambda2: 1.0, ..kd0 }, ki0),
            LossTerm::Iamtm => (KdWeights { lambda3: 1.0, ..kd0 }, ki0),
            LossTerm::Iaci => (kd0, KiWeights { lambda4: 1.0, ..ki0 }),
            LossTerm::Iakr => (kd0, KiWeights { lambda5: 1.0, ..ki0 }),
            LossTerm::Kd => (cfg.kd_weights(), ki0),
            LossTerm::Ki => (kd0, cfg.ki_weights()),
        }
    }

    fn select(self, l: PretrainLosses) -> Result<Tensor> {
        let missing = || VkdError::Contract(format!("{} was not computed", self));
        let kd = || l.kd.clone().ok_or_else(missing);
        let ki = || l.ki.clone().ok_or_else(missing);
        match self {
            LossTerm::Tim => kd()?.tim.ok_or_else(missing),
            LossTerm::Tamim => kd()?.tamim.ok_or_else(missing),
            LossTerm::Iamtm => kd()?.iamtm.ok_or_else(missing),
            LossTerm::Iaci => ki()?.iaci.ok_or_else(missing),
            LossTerm::Iakr => ki()?.iakr.ok_or_else(missing),
            LossTerm::Kd => Ok(kd()?.total),
            LossTerm::Ki => Ok(ki()?.total),
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = VkdError;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| VkdError::input(format!("unknown loss `{}` (tim, tamim, iamtm, iaci, iakr, kd, ki)", s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: LossTerm,
    pub max_rel_err: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub entries: usize,
}

/// Compares autodiff and central-difference gradients of `term` with
/// respect to every learnable parameter the term depends on.
pub fn check_term(model: &Model, batch: &PairBatch, term: LossTerm, h: f64) -> Result<TermCheck> {
    let (kdw, kiw) = term.weights(&model.cfg);
    let loss = term.select(model.losses_with(&model.params, batch, kdw, kiw)?)?;
    loss.backward()?;
    let ids: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, p)| !p.frozen && p.value.grad().is_some())
        .map(|(id, _)| id)
        .collect();
    for (_, p) in model.params.iter() {
        p.value.zero_grad();
    }
    drop(loss);
    let values: Vec<Tensor> = ids.iter().map(|&id| model.params.get(id).detach()).collect();
    let report = grad_check(
        |leaves| {
            let eval = || -> Result<Tensor> {
                let mut ps = model.params.clone();
                for (&id, leaf) in ids.iter().zip(leaves) {
                    ps.replace(id, leaf.clone())?;
                }
                term.select(model.losses_with(&ps, batch, kdw, kiw)?)
            };
            eval().map_err(|e| match e {
                VkdError::Tensor(t) => t,
                other => vkd_tensor::TensorError::Input(other.to_string()),
            })
        },
        &values,
        h,
    )?;
    let worst_param = ids.get(report.worst.0).map(|&id| model.params.param(id).name.clone()).unwrap_or_default();
    Ok(TermCheck { term, max_rel_err: report.max_rel_err, worst_param, entries: report.entries })
}

/// A random small configuration: batch at most 3, at most 4 queries,
/// widths at most 8.
pub fn toy_config(seed: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |xs: &[usize]| xs[rng.random_range(0..xs.len())];
    ModelConfig {
        seed,
        data_seed: seed.wrapping_add(1),
        max_text_len: 24,
        d_enc: pick(&[4, 8]),
        enc_layers: 1,
        enc_heads: 2,
        image_size: 8,
        patch_size: pick(&[2, 4]),
        mask_patch_size: 4,
        n_queries: pick(&[2, 3, 4]),
        d_k: pick(&[4, 8]),
        iq_layers: pick(&[1, 2]),
        iq_heads: 2,
        d_lm: pick(&[4, 8]),
        lm_layers: pick(&[1, 2]),
        lm_heads: 2,
        lm_max_len: 96,
        caption_prompt: "d:".into(),
        reconstruction_prompt: "i:".into(),
        init_std: 0.3,
        batch_size: pick(&[2, 3]),
        ..ModelConfig::desk()
    }
}

/// A model and one batch for `cfg`.
pub fn toy_setup(cfg: &ModelConfig) -> Result<(Model, PairBatch)> {
    let model = Model::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let pairs = PairGenerator::from_config(cfg)?.draw(&mut rng, cfg.batch_size);
    let batch = PairBatch::new(&pairs, cfg, &mut rng)?;
    Ok((model, batch))
}
