//! Multi-run experiments: ablations and the query-count sweep.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::PairGenerator;
use crate::error::{Result, VkdError};
use crate::pipeline::probe::{knowledge_probe, reconstruction_error, ProbeReport};
use crate::pipeline::train::{pretrain, PairSource, TrainLogRecord, TrainState};

/// The four objective switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Tim,
    Tamim,
    Iamtm,
    Bvif,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Tim, Ablation::Tamim, Ablation::Iamtm, Ablation::Bvif];

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Ablation::Tim => cfg.disable_tim = true,
            Ablation::Tamim => cfg.disable_tamim = true,
            Ablation::Iamtm => cfg.disable_iamtm = true,
            Ablation::Bvif => cfg.disable_bvif = true,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Tim => "tim",
            Ablation::Tamim => "tamim",
            Ablation::Iamtm => "iamtm",
            Ablation::Bvif => "bvif",
        })
    }
}

impl FromStr for Ablation {
    type Err = VkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tim" => Ok(Ablation::Tim),
            "tamim" => Ok(Ablation::Tamim),
            "iamtm" => Ok(Ablation::Iamtm),
            "bvif" => Ok(Ablation::Bvif),
            other => Err(VkdError::input(format!("unknown ablation `{}` (tim, tamim, iamtm, bvif)", other))),
        }
    }
}

/// Held-out evaluation sizes and seeds shared by every run of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub seed: u64,
    pub n_fit: usize,
    pub n_eval: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings { seed: 999, n_fit: 400, n_eval: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub last: TrainLogRecord,
    pub probe: ProbeReport,
    pub reconstruction_error: f64,
}

/// Pretrains on freshly generated pairs for `cfg.total_steps` steps, then
/// probes the result.
pub fn train_and_probe(
    cfg: &ModelConfig,
    probe: ProbeSettings,
    sink: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<(TrainState, RunSummary)> {
    let mut state = TrainState::new(cfg)?;
    let source = PairSource::Synthetic(PairGenerator::from_config(cfg)?);
    let mut last = None;
    pretrain(&mut state, &source, cfg.total_steps as u64, &mut |r| {
        last = Some(r.clone());
        sink(r)
    })?;
    let last = last.ok_or_else(|| VkdError::config("total_steps", "must be positive"))?;
    let report = knowledge_probe(&state.model, probe.seed, probe.n_fit, probe.n_eval)?;
    let rec = reconstruction_error(&state.model, probe.seed + 1, probe.n_eval)?;
    let summary = RunSummary { steps: state.step, last, probe: report, reconstruction_error: rec };
    Ok((state, summary))
}

/// One row of the query-count sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_queries: usize,
    pub steps: u64,
    pub probe_accuracy: f64,
    pub probe_fit_accuracy: f64,
    pub reconstruction_error: f64,
    pub l_kd: Option<f64>,
    pub l_ki: Option<f64>,
    pub loss: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "n_queries,steps,probe_accuracy,probe_fit_accuracy,reconstruction_error,l_kd,l_ki,loss";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n_queries,
            self.steps,
            self.probe_accuracy,
            self.probe_fit_accuracy,
            self.reconstruction_error,
            opt(self.l_kd),
            opt(self.l_ki),
            self.loss
        )
    }
}

/// Trains and probes one model per query count, sequentially.
pub fn sweep_queries(
    base: &ModelConfig,
    counts: &[usize],
    probe: ProbeSettings,
    sink: &mut dyn FnMut(usize, &TrainLogRecord) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() {
        return Err(VkdError::input("sweep needs at least one query count"));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let cfg = ModelConfig { n_queries: n, ..base.clone() };
        cfg.validate()?;
        let (_, s) = train_and_probe(&cfg, probe, &mut |r| sink(n, r))?;
        rows.push(SweepRow {
            n_queries: n,
            steps: s.steps,
            probe_accuracy: s.probe.text_accuracy,
            probe_fit_accuracy: s.probe.fit_accuracy,
            reconstruction_error: s.reconstruction_error,
            l_kd: s.last.l_kd,
            l_ki: s.last.l_ki,
            loss: s.last.loss,
        });
    }
    Ok(rows)
}
