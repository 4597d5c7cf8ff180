//! The assembled model: frozen towers plus every learnable component, and
//! the forward passes that produce each objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vkd_tensor::{ops, Tensor};

use crate::config::{KdWeights, KiWeights, ModelConfig};
use crate::data::{DialogueSample, PairBatch};
use crate::distillation::{combine_kd, loss_iamtm, loss_tamim, loss_tim, KdLoss, Temperature};
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Result, VkdError};
use crate::integration::{
    combine_ki, decoder_nll, generate, loss_iaci, loss_iakr, with_eos, Decode, DecoderLm, KiLoss, KnowledgeProjector,
    NllOutput, PromptSet,
};
use crate::iqformer::{FusionBlock, ImageDecoder, IqFormer, KnowledgeVectors, MlmHead};
use crate::params::{Init, ParamStore};

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub text_encoder: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub decoder: DecoderLm,
    pub iqformer: IqFormer,
    pub fuse_image: FusionBlock,
    pub fuse_text: FusionBlock,
    pub image_decoder: ImageDecoder,
    pub mlm_head: MlmHead,
    pub temperature: Temperature,
    pub projector: KnowledgeProjector,
    pub prompts: PromptSet,
}

/// Which stages a training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub kd: bool,
    pub ki: bool,
}

impl Stages {
    pub const BOTH: Stages = Stages { kd: true, ki: true };
}

/// Every objective of one pretraining forward pass.
#[derive(Debug, Clone)]
pub struct PretrainLosses {
    pub kd: Option<KdLoss>,
    pub ki: Option<KiLoss>,
    /// `L_kd + stage_weight * L_ki` over the active stages.
    pub total: Tensor,
    pub tau: f64,
}

impl Model {
    /// Builds a model with every parameter drawn from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init::new(&mut params, &mut rng, true);
        let text_encoder = TextEncoder::new(&mut init, cfg)?;
        let image_encoder = ImageEncoder::new(&mut init, cfg)?;
        let decoder = DecoderLm::new(&mut init, cfg)?;
        let (iqformer, fuse_image, fuse_text, image_decoder, mlm_head, temperature, projector) =
            init.with_frozen(false, |init| -> Result<_> {
                let (iq, fi, ft, dec, mlm) = init.scope("iqformer", |init| -> Result<_> {
                    Ok((
                        IqFormer::new(init, cfg)?,
                        FusionBlock::new(init, "fuse_image", cfg)?,
                        FusionBlock::new(init, "fuse_text", cfg)?,
                        ImageDecoder::new(init, cfg)?,
                        MlmHead::new(init, cfg)?,
                    ))
                })?;
                Ok((iq, fi, ft, dec, mlm, Temperature::new(init, cfg.tau_init)?, KnowledgeProjector::new(init, cfg)?))
            })?;
        Ok(Model {
            cfg: cfg.clone(),
            prompts: PromptSet::from_config(cfg)?,
            params,
            text_encoder,
            image_encoder,
            decoder,
            iqformer,
            fuse_image,
            fuse_text,
            image_decoder,
            mlm_head,
            temperature,
            projector,
        })
    }

    /// K_T for raw token sequences.
    pub fn knowledge_from_text(&self, texts: &[Vec<usize>]) -> Result<KnowledgeVectors> {
        let tokens = self.text_encoder.batch(texts)?;
        let enc = self.text_encoder.encode_text(&self.params, &tokens)?;
        self.iqformer.distill_from_text(&self.params, &enc)
    }

    /// K_I for an image batch `[B, 3, H, W]`.
    pub fn knowledge_from_images(&self, images: &Tensor) -> Result<KnowledgeVectors> {
        let enc = self.image_encoder.encode_image(&self.params, images)?;
        self.iqformer.distill_from_image(&self.params, &enc)
    }

    pub fn pretrain_losses(&self, batch: &PairBatch, stages: Stages) -> Result<PretrainLosses> {
        let kdw = if stages.kd { self.cfg.kd_weights() } else { KdWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 } };
        let kiw = if stages.ki { self.cfg.ki_weights() } else { KiWeights { lambda4: 0.0, lambda5: 0.0 } };
        self.losses_with(&self.params, batch, kdw, kiw)
    }

    /// The pretraining objectives evaluated on `ps` (a store with the same
    /// layout as `self.params`) under explicit weights. Terms with zero
    /// weight are skipped.
    pub fn losses_with(&self, ps: &ParamStore, batch: &PairBatch, kdw: KdWeights, kiw: KiWeights) -> Result<PretrainLosses> {
        let cfg = &self.cfg;
        let run_kd = kdw.total() > 0.0;
        let run_ki = kiw.total() > 0.0;
        if !run_kd && !run_ki {
            return Err(VkdError::Contract("no active objective in this step".into()));
        }
        let text = self.text_encoder.encode_text(ps, &batch.captions)?;
        let kt = self.iqformer.distill_from_text(ps, &text)?;
        let tau = self.temperature.tau(ps);

        let kd = if run_kd {
            let ki = if kdw.lambda1 > 0.0 || kdw.lambda3 > 0.0 {
                Some(self.knowledge_from_images(&batch.images)?)
            } else {
                None
            };
            let tim = match (&ki, kdw.lambda1 > 0.0) {
                (Some(ki), true) => Some(loss_tim(&kt, ki, &tau, cfg.tim_pooling)?),
                _ => None,
            };
            let tamim = if kdw.lambda2 > 0.0 {
                let masked = batch.masked_images(cfg.mask_patch_size)?;
                let enc = self.image_encoder.encode_image(ps, &masked)?;
                let fused = self.fuse_image.fuse_knowledge(ps, &enc.hidden, &kt)?;
                let rec = self.image_decoder.decode_image_patches(ps, &fused)?;
                Some(loss_tamim(&batch.images, &rec, &batch.image_mask_plan, cfg.mask_patch_size)?)
            } else {
                None
            };
            let iamtm = match (&ki, kdw.lambda3 > 0.0) {
                (Some(ki), true) => {
                    let enc = self.text_encoder.encode_text(ps, &batch.masked_captions)?;
                    let fused = self.fuse_text.fuse_knowledge(ps, &enc.hidden, ki)?;
                    let logits = self.mlm_head.predict_masked_tokens(ps, &fused)?;
                    Some(loss_iamtm(&logits, &batch.captions.ids, &batch.caption_mask_plan)?)
                }
                _ => None,
            };
            Some(combine_kd(kdw, tim, tamim, iamtm)?)
        } else {
            None
        };

        let ki = if run_ki {
            let iaci = if kiw.lambda4 > 0.0 {
                Some(loss_iaci(&self.projector, &self.decoder, ps, &kt, &self.prompts.caption, &batch.caption_seqs)?)
            } else {
                None
            };
            let iakr = if kiw.lambda5 > 0.0 {
                let k_hat = self.projector.reconstruct_knowledge(&self.decoder, ps, &batch.caption_seqs, &self.prompts)?;
                Some(loss_iakr(&kt, &k_hat)?)
            } else {
                None
            };
            Some(combine_ki(kiw, iaci, iakr)?)
        } else {
            None
        };

        let total = match (&kd, &ki) {
            (Some(a), Some(b)) => ops::add(&a.total, &ops::scale(&b.total, cfg.stage_weight))?,
            (Some(a), None) => a.total.clone(),
            (None, Some(b)) => ops::scale(&b.total, cfg.stage_weight),
            (None, None) => unreachable!("checked above"),
        };
        Ok(PretrainLosses { kd, ki, total, tau: tau.item() })
    }

    /// Response NLL conditioned on `[soft prompts from K_T(context); context]`.
    /// Builds no image tensor.
    pub fn dialogue_nll(&self, samples: &[DialogueSample]) -> Result<NllOutput> {
        if samples.is_empty() {
            return Err(VkdError::input("empty dialogue batch"));
        }
        let contexts: Vec<Vec<usize>> = samples.iter().map(DialogueSample::context_ids).collect();
        let tokens = self.text_encoder.batch(&contexts)?;
        let enc = self.text_encoder.encode_text(&self.params, &tokens)?;
        let kt = self.iqformer.distill_from_text(&self.params, &enc)?;
        let soft = self.projector.project_knowledge_to_llm(&self.params, &kt)?;
        let prefixes: Vec<Vec<usize>> = (0..tokens.batch).map(|b| tokens.sequence(b)).collect();
        let targets: Vec<Vec<usize>> = samples.iter().map(|s| with_eos(&s.response_ids())).collect::<Result<_>>()?;
        decoder_nll(&self.decoder, &self.params, Some(&soft), &prefixes, &targets)
    }

    fn decode_with_knowledge(
        &self,
        context: &[usize],
        prefix: &[usize],
        max_new: usize,
        decode: Decode,
        seed: u64,
    ) -> Result<Vec<usize>> {
        if context.is_empty() {
            return Err(VkdError::input("empty context"));
        }
        let kt = vkd_tensor::no_grad(|| self.knowledge_from_text(&[context.to_vec()]))?;
        let soft = self.projector.project_knowledge_to_llm(&self.params, &kt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate(&self.decoder, &self.params, Some(&soft), prefix, max_new, decode, &mut rng)
    }

    /// Zero-resource response generation from text alone.
    pub fn infer_response(&self, context: &[usize], max_new: usize, decode: Decode, seed: u64) -> Result<Vec<usize>> {
        self.decode_with_knowledge(context, context, max_new, decode, seed)
    }

    /// Describes the knowledge distilled from `context` using the caption
    /// prompt instead of the context as decoder prefix.
    pub fn textualize_knowledge(&self, context: &[usize], max_new: usize, decode: Decode, seed: u64) -> Result<Vec<usize>> {
        let prompt = self.prompts.caption.clone();
        self.decode_with_knowledge(context, &prompt, max_new, decode, seed)
    }
}
