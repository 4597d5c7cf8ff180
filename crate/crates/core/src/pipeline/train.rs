//! Training state, single steps and the step loops.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{DialogueSample, PairBatch, PairGenerator, SyntheticPair};
use crate::error::{Result, VkdError};
use crate::model::{Model, PretrainLosses, Stages};
use crate::pipeline::optim::{learning_rate, AdamW};

/// Everything a run needs to continue bit-for-bit: parameters, optimizer
/// moments, the step counter and the data generator.
#[derive(Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    /// Completed optimizer steps.
    pub step: u64,
    /// Drives batch sampling and mask plans.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let opt = AdamW::new(&model.params);
        Ok(TrainState { model, opt, step: 0, rng: ChaCha8Rng::seed_from_u64(cfg.data_seed) })
    }

    /// Starts a new training stage on the current parameters: fresh
    /// optimizer moments, step counter at zero and a reseeded generator.
    pub fn begin_stage(&mut self) {
        self.opt = AdamW::new(&self.model.params);
        self.step = 0;
        self.rng = ChaCha8Rng::seed_from_u64(self.model.cfg.data_seed);
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }
}

/// One line of the training log. Terms that were not computed are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_tim: Option<f64>,
    /// `l_tim` divided by the batch size.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tim_per_pair: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_tamim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_iamtm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_iaci: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_iakr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ki: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_nll: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_ms: Option<f64>,
}

impl TrainLogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

/// Where pretraining batches come from.
#[derive(Debug, Clone)]
pub enum PairSource {
    /// Fresh pairs drawn from the state's generator every step.
    Synthetic(PairGenerator),
    /// A fixed corpus, visited in order in windows of `batch_size`.
    Fixed(Vec<SyntheticPair>),
}

impl PairSource {
    pub fn next_batch(&self, state: &mut TrainState) -> Result<PairBatch> {
        let b = state.cfg().batch_size;
        let pairs = match self {
            PairSource::Synthetic(g) => g.draw(&mut state.rng, b),
            PairSource::Fixed(all) => window(all, state.step as usize, b)?,
        };
        PairBatch::new(&pairs, &state.model.cfg, &mut state.rng)
    }
}

fn window<T: Clone>(all: &[T], step: usize, b: usize) -> Result<Vec<T>> {
    if all.is_empty() {
        return Err(VkdError::input("empty training corpus"));
    }
    if all.len() <= b {
        return Ok(all.to_vec());
    }
    let start = (step * b) % all.len();
    Ok((0..b).map(|i| all[(start + i) % all.len()].clone()).collect())
}

fn stages_for(cfg: &ModelConfig, t: u64) -> (Stages, &'static str) {
    if !cfg.alternate_stages {
        return (Stages::BOTH, "joint");
    }
    let kd_on = cfg.kd_weights().total() > 0.0;
    let ki_on = cfg.ki_weights().total() > 0.0;
    match (t % 2 == 1 && kd_on) || !ki_on {
        true => (Stages { kd: true, ki: false }, "kd"),
        false => (Stages { kd: false, ki: true }, "ki"),
    }
}

fn finite_or_dump(rec: &TrainLogRecord) -> Result<()> {
    let terms = [
        ("l_tim", rec.l_tim),
        ("l_tamim", rec.l_tamim),
        ("l_iamtm", rec.l_iamtm),
        ("l_iaci", rec.l_iaci),
        ("l_iakr", rec.l_iakr),
        ("l_nll", rec.l_nll),
        ("loss", Some(rec.loss)),
    ];
    if terms.iter().all(|(_, v)| v.is_none_or(f64::is_finite)) {
        return Ok(());
    }
    let dump: Vec<String> = terms.iter().filter_map(|(n, v)| v.map(|v| format!("{}={}", n, v))).collect();
    Err(VkdError::Numeric(format!("non-finite loss at step {}: {}", rec.step, dump.join(" "))))
}

fn record_from(losses: &PretrainLosses, step: u64, stage: &str, lr: f64, batch: usize) -> TrainLogRecord {
    let kd = losses.kd.as_ref();
    let ki = losses.ki.as_ref();
    let l_tim = kd.and_then(|k| k.tim.as_ref()).map(|t| t.item());
    TrainLogRecord {
        step,
        stage: stage.to_string(),
        l_tim,
        tim_per_pair: l_tim.map(|t| t / batch as f64),
        l_tamim: kd.and_then(|k| k.tamim.as_ref()).map(|t| t.item()),
        l_iamtm: kd.and_then(|k| k.iamtm.as_ref()).map(|t| t.item()),
        l_kd: kd.map(|k| k.total.item()),
        l_iaci: ki.and_then(|k| k.iaci.as_ref()).map(|t| t.item()),
        l_iakr: ki.and_then(|k| k.iakr.as_ref()).map(|t| t.item()),
        l_ki: ki.map(|k| k.total.item()),
        l_nll: None,
        loss: losses.total.item(),
        lr,
        tau: Some(losses.tau),
        grad_norm: 0.0,
        wall_clock_ms: None,
    }
}

/// One joint optimizer update on `L_kd + stage_weight * L_ki`.
pub fn pretrain_step(state: &mut TrainState, batch: &PairBatch) -> Result<TrainLogRecord> {
    let started = Instant::now();
    let t = state.step + 1;
    let cfg = state.model.cfg.clone();
    let lr = learning_rate(&cfg, t as usize);
    let (stages, stage) = stages_for(&cfg, t);
    let losses = state.model.pretrain_losses(batch, stages)?;
    let mut rec = record_from(&losses, t, stage, lr, batch.len());
    finite_or_dump(&rec)?;
    losses.total.backward()?;
    drop(losses);
    rec.grad_norm = state.opt.step(&mut state.model.params, lr, cfg.weight_decay, cfg.grad_clip)?;
    state.step = t;
    if cfg.log_wall_clock {
        rec.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(rec)
}

/// One text-only update on the response NLL. No image enters this path.
pub fn finetune_step(state: &mut TrainState, samples: &[DialogueSample]) -> Result<TrainLogRecord> {
    let started = Instant::now();
    let t = state.step + 1;
    let cfg = state.model.cfg.clone();
    let lr = learning_rate(&cfg, t as usize);
    let out = state.model.dialogue_nll(samples)?;
    let loss = out.loss.item();
    let mut rec = TrainLogRecord {
        step: t,
        stage: "finetune".into(),
        l_tim: None,
        tim_per_pair: None,
        l_tamim: None,
        l_iamtm: None,
        l_kd: None,
        l_iaci: None,
        l_iakr: None,
        l_ki: None,
        l_nll: Some(loss),
        loss,
        lr,
        tau: None,
        grad_norm: 0.0,
        wall_clock_ms: None,
    };
    finite_or_dump(&rec)?;
    out.loss.backward()?;
    drop(out);
    rec.grad_norm = state.opt.step(&mut state.model.params, lr, cfg.weight_decay, cfg.grad_clip)?;
    state.step = t;
    if cfg.log_wall_clock {
        rec.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(rec)
}

/// Runs pretraining until `state.step == until`, passing each record to
/// `sink`.
pub fn pretrain(
    state: &mut TrainState,
    source: &PairSource,
    until: u64,
    sink: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<()> {
    while state.step < until {
        let batch = source.next_batch(state)?;
        let rec = pretrain_step(state, &batch)?;
        sink(&rec)?;
    }
    Ok(())
}

/// Runs fine-tuning over `corpus` (in order, in windows of `batch_size`)
/// until `state.step == until`.
pub fn finetune(
    state: &mut TrainState,
    corpus: &[DialogueSample],
    until: u64,
    sink: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<()> {
    while state.step < until {
        let batch = window(corpus, state.step as usize, state.cfg().batch_size)?;
        let rec = finetune_step(state, &batch)?;
        sink(&rec)?;
    }
    Ok(())
}
