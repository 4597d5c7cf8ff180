//! Stage-2 objectives: soft visual prompts into the frozen decoder, the
//! contextual-inference NLL and the knowledge-reconstruction MSE.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vkd_tensor::ops::{self, AttnMask};
use vkd_tensor::{no_grad, Tensor, TensorError};

use crate::config::{KiWeights, ModelConfig, OkExtraction};
use crate::distillation::sum_terms;
use crate::error::{Result, VkdError};
use crate::iqformer::{expect_source, KnowledgeSource, KnowledgeVectors};
use crate::nn::{add_positions, Block, BlockSpec, LayerNorm, Linear, WeightInit};
use crate::params::{Init, ParamId, ParamStore};
use crate::tokenizer::{self, EOS, PAD};

/// Instruction prompts, stored as byte ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub caption: Vec<usize>,
    pub reconstruction: Vec<usize>,
}

impl PromptSet {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let p = PromptSet {
            caption: tokenizer::encode(&cfg.caption_prompt),
            reconstruction: tokenizer::encode(&cfg.reconstruction_prompt),
        };
        if p.caption.is_empty() || p.reconstruction.is_empty() {
            return Err(VkdError::config("caption_prompt", "prompts must be non-empty"));
        }
        Ok(p)
    }
}

/// One piece of a decoder input sequence.
#[derive(Debug, Clone)]
pub enum Segment {
    Tokens(Vec<usize>),
    /// Pre-computed input embeddings, `[m, d_lm]`.
    Rows(Tensor),
}

impl Segment {
    fn len(&self) -> usize {
        match self {
            Segment::Tokens(t) => t.len(),
            Segment::Rows(r) => r.dim(0),
        }
    }
}

/// Frozen causal decoder with learned absolute positions and an untied
/// output head.
#[derive(Debug)]
pub struct DecoderLm {
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<Block>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub max_len: usize,
    pub d: usize,
}

impl DecoderLm {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_lm;
        let lm = init.scope("decoder", |init| -> Result<DecoderLm> {
            let token_embedding = init.normal("token_embedding", &[cfg.vocab_size, d], 1.0, true)?;
            let positions = init.normal("positions", &[cfg.lm_max_len, d], 0.1, true)?;
            let spec = BlockSpec { d, heads: cfg.lm_heads, self_attn: true, cross_kv: None, cross_kv_norm: false };
            let layers = (0..cfg.lm_layers)
                .map(|i| Block::new(init, &format!("layers.{}", i), spec, WeightInit::FanIn))
                .collect::<Result<_>>()?;
            let final_norm = LayerNorm::new(init, "final_norm", d)?;
            let head = Linear::new(init, "head", d, cfg.vocab_size, WeightInit::Std(cfg.lm_head_scale / (d as f64).sqrt()), false)?;
            Ok(DecoderLm { token_embedding, positions, layers, final_norm, head, max_len: cfg.lm_max_len, d })
        })?;
        if cfg.lm_attn_sharpness != 1.0 {
            for layer in &lm.layers {
                let (_, attn) = layer.self_attn.as_ref().expect("decoder layers self-attend");
                let w = init.store.get(attn.q.w).data().iter().map(|v| v * cfg.lm_attn_sharpness).collect();
                init.store.set(attn.q.w, w)?;
            }
        }
        Ok(lm)
    }

    /// Embeds right-padded sequences: `[B, L, d]` plus each sample's length.
    pub fn assemble(&self, ps: &ParamStore, samples: &[Vec<Segment>]) -> Result<(Tensor, Vec<usize>)> {
        if samples.is_empty() {
            return Err(VkdError::input("empty decoder batch"));
        }
        let lens: Vec<usize> = samples.iter().map(|s| s.iter().map(Segment::len).sum()).collect();
        let len = *lens.iter().max().expect("non-empty");
        if len > self.max_len {
            return Err(VkdError::Truncation { len, max: self.max_len });
        }
        if len == 0 {
            return Err(VkdError::input("empty decoder sequence"));
        }
        let table = ps.get(self.token_embedding);
        let mut rows = Vec::with_capacity(samples.len());
        for (segs, &l) in samples.iter().zip(&lens) {
            let mut parts = Vec::with_capacity(segs.len() + 1);
            for seg in segs {
                match seg {
                    Segment::Tokens(t) if t.is_empty() => {}
                    Segment::Tokens(t) => parts.push(ops::embedding(table, t)?),
                    Segment::Rows(r) => {
                        if r.rank() != 2 || r.dim(1) != self.d {
                            return Err(TensorError::Dimension {
                                op: "assemble",
                                detail: format!("rows {:?} for width {}", r.shape(), self.d),
                            }
                            .into());
                        }
                        parts.push(r.clone())
                    }
                }
            }
            if l < len {
                parts.push(ops::embedding(table, &vec![PAD; len - l])?);
            }
            let seq = ops::concat(&parts, 0)?;
            rows.push(ops::reshape(&seq, &[1, len, self.d])?);
        }
        let x = ops::concat(&rows, 0)?;
        Ok((add_positions(ps, self.positions, &x)?, lens))
    }

    /// Final-layer hidden states `[B, L, d]` under a causal mask. Padding
    /// sits after every real position, so it never influences them.
    pub fn hidden(&self, ps: &ParamStore, emb: &Tensor) -> Result<Tensor> {
        let mask = AttnMask::causal(emb.dim(0), emb.dim(1));
        let mut x = emb.clone();
        for layer in &self.layers {
            x = layer.forward(ps, &x, Some(&mask), None)?;
        }
        self.final_norm.forward(ps, &x)
    }

    pub fn logits(&self, ps: &ParamStore, hidden: &Tensor) -> Result<Tensor> {
        self.head.forward(ps, hidden)
    }

    /// Rows `positions[b]` of sample `b`, flattened to `[sum, d]`.
    pub fn gather_rows(&self, hidden: &Tensor, positions: &[Vec<usize>]) -> Result<Tensor> {
        let (l, d) = (hidden.dim(1), hidden.dim(2));
        let mut map = Vec::new();
        for (b, ps) in positions.iter().enumerate() {
            for &p in ps {
                map.extend((0..d).map(|j| (b * l + p) * d + j));
            }
        }
        let rows = map.len() / d;
        Ok(ops::gather_map(hidden, &[rows, d], Arc::new(map))?)
    }
}

/// Teacher-forced next-token statistics of a decoder batch.
#[derive(Debug, Clone)]
pub struct NllOutput {
    /// Mean over samples of each sample's mean token NLL.
    pub loss: Tensor,
    pub sample_sums: Vec<f64>,
    pub sample_counts: Vec<usize>,
}

/// NLL of `targets[b]` given `[soft_b; prefix_b]`, predicting each target
/// from the position before it.
pub fn decoder_nll(
    lm: &DecoderLm,
    ps: &ParamStore,
    soft: Option<&Tensor>,
    prefixes: &[Vec<usize>],
    targets: &[Vec<usize>],
) -> Result<NllOutput> {
    let b = targets.len();
    if b == 0 || prefixes.len() != b || soft.is_some_and(|s| s.dim(0) != b) {
        return Err(VkdError::input("decoder batch sizes disagree"));
    }
    let n_soft = soft.map_or(0, |s| s.dim(1));
    let mut samples = Vec::with_capacity(b);
    let mut positions = Vec::with_capacity(b);
    let mut flat_targets = Vec::new();
    for i in 0..b {
        let t = &targets[i];
        if t.is_empty() {
            return Err(VkdError::input("empty target text"));
        }
        tokenizer::check_ids(t)?;
        tokenizer::check_ids(&prefixes[i])?;
        let start = n_soft + prefixes[i].len();
        if start == 0 {
            return Err(VkdError::input("nothing to condition the first target on"));
        }
        let mut segs = Vec::with_capacity(3);
        if let Some(s) = soft {
            let row = ops::narrow(s, 0, i, 1)?;
            segs.push(Segment::Rows(ops::reshape(&row, &[n_soft, s.dim(2)])?));
        }
        segs.push(Segment::Tokens(prefixes[i].clone()));
        segs.push(Segment::Tokens(t[..t.len() - 1].to_vec()));
        samples.push(segs);
        positions.push((0..t.len()).map(|j| start - 1 + j).collect::<Vec<_>>());
        flat_targets.extend_from_slice(t);
    }
    let (emb, _) = lm.assemble(ps, &samples)?;
    let hidden = lm.hidden(ps, &emb)?;
    let rows = lm.gather_rows(&hidden, &positions)?;
    let lp = ops::pick_last(&ops::log_softmax(&lm.logits(ps, &rows)?)?, &flat_targets)?;
    let mut weights = Vec::with_capacity(flat_targets.len());
    let mut sums = Vec::with_capacity(b);
    let mut off = 0;
    for t in targets {
        weights.extend(std::iter::repeat_n(-1.0 / (b * t.len()) as f64, t.len()));
        sums.push(-lp.data()[off..off + t.len()].iter().sum::<f64>());
        off += t.len();
    }
    let loss = ops::sum_all(&ops::mul_const(&lp, Arc::new(weights))?);
    Ok(NllOutput { loss, sample_sums: sums, sample_counts: targets.iter().map(Vec::len).collect() })
}

/// Learnable bridge between knowledge space and decoder space.
#[derive(Debug)]
pub struct KnowledgeProjector {
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub slots: ParamId,
    pub n_queries: usize,
    pub extraction: OkExtraction,
}

impl KnowledgeProjector {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let wi = WeightInit::Std(cfg.init_std);
        init.scope("projector", |init| {
            Ok(KnowledgeProjector {
                in_proj: Linear::new(init, "in_proj", cfg.d_k, cfg.d_lm, wi, true)?,
                out_proj: Linear::new(init, "out_proj", cfg.d_lm, cfg.d_k, wi, true)?,
                slots: init.normal("slots", &[cfg.n_queries, cfg.d_lm], cfg.slot_init_std, false)?,
                n_queries: cfg.n_queries,
                extraction: cfg.ok_extraction,
            })
        })
    }

    /// Soft visual prompts `[B, n, d_lm]`. Only text-derived knowledge may
    /// enter the decoder.
    pub fn project_knowledge_to_llm(&self, ps: &ParamStore, k: &KnowledgeVectors) -> Result<Tensor> {
        expect_source(k, KnowledgeSource::FromText, "project_knowledge_to_llm")?;
        self.in_proj.forward(ps, &k.k)
    }

    /// Runs the decoder over `[prompt; text; slots]` (or `[prompt; text]`
    /// with last-token extraction) and maps the selected hidden states back
    /// to knowledge space.
    pub fn reconstruct_knowledge(
        &self,
        lm: &DecoderLm,
        ps: &ParamStore,
        texts: &[Vec<usize>],
        prompts: &PromptSet,
    ) -> Result<KnowledgeVectors> {
        let n = self.n_queries;
        let p = prompts.reconstruction.len();
        let mut samples = Vec::with_capacity(texts.len());
        let mut positions = Vec::with_capacity(texts.len());
        for t in texts {
            if t.is_empty() {
                return Err(VkdError::input("empty text for knowledge reconstruction"));
            }
            tokenizer::check_ids(t)?;
            let mut segs = vec![Segment::Tokens(prompts.reconstruction.clone()), Segment::Tokens(t.clone())];
            let end = p + t.len();
            match self.extraction {
                OkExtraction::Slots => {
                    segs.push(Segment::Rows(ps.get(self.slots).clone()));
                    positions.push((end..end + n).collect::<Vec<_>>());
                }
                OkExtraction::LastTokens => {
                    if end < n {
                        return Err(VkdError::input(format!("{} positions cannot supply {} knowledge vectors", end, n)));
                    }
                    positions.push((end - n..end).collect());
                }
            }
            samples.push(segs);
        }
        let (emb, _) = lm.assemble(ps, &samples)?;
        let hidden = lm.hidden(ps, &emb)?;
        let rows = lm.gather_rows(&hidden, &positions)?;
        let rows = ops::reshape(&rows, &[texts.len(), n, lm.d])?;
        Ok(KnowledgeVectors { k: self.out_proj.forward(ps, &rows)?, source: KnowledgeSource::Reconstructed })
    }
}

/// Contextual-inference NLL: targets are `text + EOS`, conditioned on
/// `[soft prompts; caption prompt]`.
pub fn loss_iaci(
    proj: &KnowledgeProjector,
    lm: &DecoderLm,
    ps: &ParamStore,
    k: &KnowledgeVectors,
    prompt: &[usize],
    texts: &[Vec<usize>],
) -> Result<Tensor> {
    if texts.len() != k.batch() {
        return Err(VkdError::input("knowledge and text batch sizes differ"));
    }
    let soft = proj.project_knowledge_to_llm(ps, k)?;
    let prefixes = vec![prompt.to_vec(); texts.len()];
    let targets: Vec<Vec<usize>> = texts.iter().map(|t| with_eos(t)).collect::<Result<_>>()?;
    Ok(decoder_nll(lm, ps, Some(&soft), &prefixes, &targets)?.loss)
}

pub fn with_eos(t: &[usize]) -> Result<Vec<usize>> {
    if t.is_empty() {
        return Err(VkdError::input("empty text"));
    }
    let mut v = t.to_vec();
    v.push(EOS);
    Ok(v)
}

/// Mean squared error averaged over dimensions, queries and batch.
pub fn loss_iakr(k: &KnowledgeVectors, k_hat: &KnowledgeVectors) -> Result<Tensor> {
    if k.k.shape() != k_hat.k.shape() {
        return Err(TensorError::Dimension {
            op: "loss_iakr",
            detail: format!("{:?} vs {:?}", k.k.shape(), k_hat.k.shape()),
        }
        .into());
    }
    Ok(ops::mean_all(&ops::square(&ops::sub(&k.k, &k_hat.k)?)))
}

#[derive(Debug, Clone)]
pub struct KiLoss {
    pub total: Tensor,
    pub iaci: Option<Tensor>,
    pub iakr: Option<Tensor>,
}

pub fn combine_ki(weights: KiWeights, iaci: Option<Tensor>, iakr: Option<Tensor>) -> Result<KiLoss> {
    let mut parts = Vec::new();
    for (w, t) in [(weights.lambda4, &iaci), (weights.lambda5, &iakr)] {
        if let (true, Some(t)) = (w != 0.0, t) {
            parts.push(ops::scale(t, w));
        }
    }
    Ok(KiLoss { total: sum_terms(parts)?, iaci, iakr })
}

/// Token selection rule for autoregressive decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

/// Generates up to `max_new` tokens after `[soft; prefix]`, stopping at EOS
/// (which is not included in the output).
pub fn generate(
    lm: &DecoderLm,
    ps: &ParamStore,
    soft: Option<&Tensor>,
    prefix: &[usize],
    max_new: usize,
    decode: Decode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if let Decode::TopK { k, temperature } = decode {
        if k == 0 || !(temperature > 0.0) {
            return Err(VkdError::input("top-k decoding needs k >= 1 and a positive temperature"));
        }
    }
    let soft_rows = match soft {
        Some(s) => Some(ops::reshape(s, &[s.dim(s.rank() - 2), s.dim(s.rank() - 1)])?),
        None => None,
    };
    let mut out = Vec::new();
    no_grad(|| {
        while out.len() < max_new {
            let mut segs = Vec::with_capacity(3);
            if let Some(r) = &soft_rows {
                segs.push(Segment::Rows(r.clone()));
            }
            segs.push(Segment::Tokens(prefix.to_vec()));
            segs.push(Segment::Tokens(out.clone()));
            let (emb, lens) = lm.assemble(ps, &[segs])?;
            let hidden = lm.hidden(ps, &emb)?;
            let last = lm.gather_rows(&hidden, &[vec![lens[0] - 1]])?;
            let logits = lm.logits(ps, &last)?.to_vec();
            let next = match decode {
                Decode::Greedy => argmax(&logits),
                Decode::TopK { k, temperature } => sample_top_k(&logits, k, temperature, rng),
            };
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    })
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps ties in id order, so sampling is reproducible
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    idx.truncate(k.min(logits.len()));
    let m = logits[idx[0]];
    let w: Vec<f64> = idx.iter().map(|&i| ((logits[i] - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &wi) in idx.iter().zip(&w) {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    *idx.last().expect("k >= 1")
}
