//! Model and training configuration.
//!
//! Serialized as flat TOML: every field is a top-level key. Unknown keys are
//! rejected so that typos fail loudly instead of silently using defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VkdError};
use crate::tokenizer::VOCAB_SIZE;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimPooling {
    /// Mean over queries, then L2 normalization.
    Mean,
    /// Maximum cosine over all query pairs.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OkExtraction {
    /// Learned placeholder slots appended after the text.
    Slots,
    /// Final hidden states of the last `n_queries` real positions.
    LastTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub config_version: u32,
    pub seed: u64,
    pub data_seed: u64,

    // tokenizer and text encoder
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub truncate_text: bool,
    pub d_enc: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,

    // images
    pub image_size: usize,
    pub patch_size: usize,
    pub mask_patch_size: usize,
    pub image_mask_ratio: f64,
    pub text_mask_ratio: f64,

    // query transformer
    pub n_queries: usize,
    pub d_k: usize,
    pub iq_layers: usize,
    pub iq_heads: usize,
    pub tim_pooling: TimPooling,
    pub tau_init: f64,

    // frozen decoder
    pub d_lm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_max_len: usize,
    pub lm_head_scale: f64,
    pub lm_attn_sharpness: f64,
    pub ok_extraction: OkExtraction,
    pub caption_prompt: String,
    pub reconstruction_prompt: String,

    // initialization of learnable weights
    pub init_std: f64,
    pub query_init_std: f64,
    pub slot_init_std: f64,

    // objective
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub stage_weight: f64,
    pub alternate_stages: bool,
    pub disable_tim: bool,
    pub disable_tamim: bool,
    pub disable_iamtm: bool,
    pub disable_bvif: bool,

    // optimization
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub lr_decay: LrDecay,
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,

    // data
    pub attribute_count: usize,
    pub train_pairs: usize,
    pub shuffle_attributes: bool,

    // logging
    pub log_wall_clock: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small defaults that train in minutes on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            config_version: CONFIG_VERSION,
            seed: 0,
            data_seed: 1,
            vocab_size: VOCAB_SIZE,
            max_text_len: 64,
            truncate_text: true,
            d_enc: 64,
            enc_layers: 2,
            enc_heads: 4,
            image_size: 32,
            patch_size: 4,
            mask_patch_size: 4,
            image_mask_ratio: 0.6,
            text_mask_ratio: 0.15,
            n_queries: 8,
            d_k: 64,
            iq_layers: 2,
            iq_heads: 4,
            tim_pooling: TimPooling::Mean,
            tau_init: 0.07,
            d_lm: 64,
            lm_layers: 4,
            lm_heads: 4,
            lm_max_len: 192,
            lm_head_scale: 4.0,
            lm_attn_sharpness: 1.0,
            ok_extraction: OkExtraction::Slots,
            caption_prompt: "Write a short description for the image.".into(),
            reconstruction_prompt: "Create an image that reflects the following description:".into(),
            init_std: 0.02,
            query_init_std: 0.5,
            slot_init_std: 0.1,
            lambda1: 0.5,
            lambda2: 0.2,
            lambda3: 0.2,
            lambda4: 1.0,
            lambda5: 0.5,
            stage_weight: 1.0,
            alternate_stages: false,
            disable_tim: false,
            disable_tamim: false,
            disable_iamtm: false,
            disable_bvif: false,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_frac: 0.1,
            lr_decay: LrDecay::Constant,
            total_steps: 5000,
            batch_size: 16,
            grad_clip: 1.0,
            attribute_count: 4,
            train_pairs: 4096,
            shuffle_attributes: false,
            log_wall_clock: false,
        }
    }

    /// A tiny model for exercising the tooling end to end in seconds.
    pub fn smoke() -> Self {
        ModelConfig {
            max_text_len: 48,
            d_enc: 8,
            enc_layers: 1,
            enc_heads: 2,
            image_size: 8,
            patch_size: 4,
            n_queries: 4,
            d_k: 8,
            iq_layers: 1,
            iq_heads: 2,
            d_lm: 8,
            lm_layers: 1,
            lm_heads: 2,
            lm_max_len: 96,
            caption_prompt: "describe:".into(),
            reconstruction_prompt: "imagine:".into(),
            total_steps: 20,
            batch_size: 4,
            train_pairs: 64,
            ..ModelConfig::desk()
        }
    }

    /// Hyperparameters at the published scale. Far too large for a CPU;
    /// kept so that configs can be diffed against it.
    pub fn paper() -> Self {
        ModelConfig {
            d_enc: 768,
            enc_layers: 12,
            enc_heads: 12,
            image_size: 224,
            patch_size: 14,
            mask_patch_size: 28,
            n_queries: 32,
            d_k: 768,
            iq_layers: 12,
            iq_heads: 12,
            d_lm: 4096,
            lm_layers: 32,
            lm_heads: 32,
            lm_max_len: 512,
            lr: 1e-4,
            total_steps: 100_000,
            batch_size: 128,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "paper" => Ok(ModelConfig::paper()),
            "smoke" => Ok(ModelConfig::smoke()),
            other => Err(VkdError::config("preset", format!("unknown preset `{}` (desk, paper, smoke)", other))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| VkdError::config("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: fixed key order, so equal configs give equal bytes.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Applies a `key=value` override, parsing `value` as a TOML literal
    /// (bare words are taken as strings).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).expect("config serializes to a table");
        if !table.contains_key(key) {
            return Err(VkdError::config(key, "unknown key"));
        }
        let parsed = format!("v = {}", value)
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let updated: ModelConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| VkdError::config(key, e.message().to_string()))?;
        *self = updated;
        Ok(())
    }

    /// Applies every key of a (possibly partial) TOML document on top of
    /// this config.
    pub fn overlay_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| VkdError::config("<file>", e.message().to_string()))?;
        for (key, value) in table {
            self.set(&key, &value.to_string())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, d: String| Err(VkdError::config(f, d));
        if self.config_version != CONFIG_VERSION {
            return err(
                "config_version",
                format!("version {} is not supported (expected {})", self.config_version, CONFIG_VERSION),
            );
        }
        if self.vocab_size != VOCAB_SIZE {
            return err("vocab_size", format!("byte tokenizer requires {}", VOCAB_SIZE));
        }
        for (f, v) in [
            ("max_text_len", self.max_text_len),
            ("d_enc", self.d_enc),
            ("enc_heads", self.enc_heads),
            ("n_queries", self.n_queries),
            ("d_k", self.d_k),
            ("iq_heads", self.iq_heads),
            ("d_lm", self.d_lm),
            ("lm_heads", self.lm_heads),
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("mask_patch_size", self.mask_patch_size),
        ] {
            if v == 0 {
                return err(f, "must be positive".into());
            }
        }
        for (f, d, h) in [
            ("enc_heads", self.d_enc, self.enc_heads),
            ("iq_heads", self.d_k, self.iq_heads),
            ("lm_heads", self.d_lm, self.lm_heads),
        ] {
            if d % h != 0 {
                return err(f, format!("{} heads do not divide width {}", h, d));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return err("patch_size", format!("does not divide image_size {}", self.image_size));
        }
        if !self.image_size.is_multiple_of(self.mask_patch_size) {
            return err("mask_patch_size", format!("does not divide image_size {}", self.image_size));
        }
        for (f, r) in [("image_mask_ratio", self.image_mask_ratio), ("text_mask_ratio", self.text_mask_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return err(f, format!("{} is not in (0, 1)", r));
            }
        }
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return err("lambda", "weights must be finite and non-negative".into());
        }
        if self.kd_weights().total() == 0.0 && self.ki_weights().total() == 0.0 {
            return err("lambda", "every objective weight is zero".into());
        }
        if !(self.tau_init >= 0.01 && self.tau_init <= 1.0) {
            return err("tau_init", "must lie in [0.01, 1]".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return err("lr", "lr and grad_clip must be positive, weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return err("warmup_frac", "must lie in [0, 1]".into());
        }
        if !(2..=16).contains(&self.attribute_count) {
            return err("attribute_count", "must lie in [2, 16]".into());
        }
        if self.caption_prompt.is_empty() || self.reconstruction_prompt.is_empty() {
            return err("caption_prompt", "prompts must be non-empty".into());
        }
        Ok(())
    }

    /// Stage-1 weights after applying the ablation switches.
    pub fn kd_weights(&self) -> KdWeights {
        KdWeights {
            lambda1: if self.disable_tim { 0.0 } else { self.lambda1 },
            lambda2: if self.disable_tamim { 0.0 } else { self.lambda2 },
            lambda3: if self.disable_iamtm { 0.0 } else { self.lambda3 },
        }
    }

    /// Stage-2 weights after applying the ablation switches.
    pub fn ki_weights(&self) -> KiWeights {
        KiWeights {
            lambda4: self.lambda4,
            lambda5: if self.disable_bvif { 0.0 } else { self.lambda5 },
        }
    }

    /// Fails naming the first architectural field that differs, which is
    /// what makes a checkpoint incompatible with this config.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let fields: [(&str, usize, usize); 16] = [
            ("vocab_size", self.vocab_size, other.vocab_size),
            ("max_text_len", self.max_text_len, other.max_text_len),
            ("d_enc", self.d_enc, other.d_enc),
            ("enc_layers", self.enc_layers, other.enc_layers),
            ("enc_heads", self.enc_heads, other.enc_heads),
            ("image_size", self.image_size, other.image_size),
            ("patch_size", self.patch_size, other.patch_size),
            ("n_queries", self.n_queries, other.n_queries),
            ("d_k", self.d_k, other.d_k),
            ("iq_layers", self.iq_layers, other.iq_layers),
            ("iq_heads", self.iq_heads, other.iq_heads),
            ("d_lm", self.d_lm, other.d_lm),
            ("lm_layers", self.lm_layers, other.lm_layers),
            ("lm_heads", self.lm_heads, other.lm_heads),
            ("lm_max_len", self.lm_max_len, other.lm_max_len),
            ("attribute_count", self.attribute_count, other.attribute_count),
        ];
        for (name, a, b) in fields {
            if a != b {
                return Err(VkdError::config(
                    name,
                    format!("checkpoint has {} but the requested config has {}", b, a),
                ));
            }
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn mask_grid(&self) -> (usize, usize) {
        let g = self.image_size / self.mask_patch_size;
        (g, g)
    }
}

/// Stage-1 loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl KdWeights {
    pub fn total(&self) -> f64 {
        self.lambda1 + self.lambda2 + self.lambda3
    }
}

/// Stage-2 loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KiWeights {
    pub lambda4: f64,
    pub lambda5: f64,
}

impl KiWeights {
    pub fn total(&self) -> f64 {
        self.lambda4 + self.lambda5
    }
}
