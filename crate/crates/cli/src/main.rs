//! `vkd`: pretraining, fine-tuning, decoding, evaluation and experiment
//! drivers.
//!
//! Exit status is 0 on success, 2 on a usage error and 1 on a runtime
//! failure, which is reported on stderr as a single `error[category]: ...`
//! line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vkd_core::data::{self, DialogueSample, PairGenerator};
use vkd_core::evalmetrics::{self, EmbeddingTable};
use vkd_core::integration::Decode;
use vkd_core::pipeline::checkpoint::decode_checkpoint;
use vkd_core::pipeline::{
    self, check_term, toy_config, toy_setup, Ablation, LossTerm, PairSource, ProbeSettings, SweepRow, TrainLogRecord,
    TrainState,
};
use vkd_core::{tokenizer, ModelConfig, VkdError};

const CHECKPOINT_FILE: &str = "checkpoint.vkd";

#[derive(Parser, Debug)]
#[command(name = "vkd", version, about = "Train and use knowledge query models on synthetic image-text data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Joint pretraining of both stages on image-text pairs.
    Pretrain(PretrainArgs),
    /// Text-only fine-tuning on dialogue pairs.
    Finetune(FinetuneArgs),
    /// Generate responses from text contexts alone.
    Infer(DecodeArgs),
    /// Describe the knowledge distilled from text contexts.
    Textualize(DecodeArgs),
    /// Score generated responses against references.
    Eval(EvalArgs),
    /// Pretrain with objectives switched off, then probe.
    Ablate(AblateArgs),
    /// Train and probe one model per query count.
    SweepQueries(SweepArgs),
    /// Write a synthetic pair corpus and a dialogue corpus.
    GenData(GenDataArgs),
    /// Compare autodiff gradients of every objective with central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Starting preset.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML file whose keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct OutArg {
    /// Directory receiving every output of the run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArg,
    /// Pair corpus directory (from `gen-data`); pairs are generated on the fly otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps (defaults to `total_steps`).
    #[arg(long)]
    steps: Option<u64>,
    /// Also save `step-<N>.vkd` every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArg,
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dialogue corpus (JSON lines with `context` and `response`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecodeKind {
    Greedy,
    TopK,
}

#[derive(Args, Debug)]
struct DecodeOpts {
    #[arg(long, value_enum, default_value = "greedy")]
    decode: DecodeKind,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Seed for sampled decoding.
    #[arg(long, default_value_t = 0)]
    decode_seed: u64,
    #[arg(long, default_value_t = 48)]
    max_new: usize,
}

impl DecodeOpts {
    fn decode(&self) -> Decode {
        match self.decode {
            DecodeKind::Greedy => Decode::Greedy,
            DecodeKind::TopK => Decode::TopK { k: self.top_k, temperature: self.temperature },
        }
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// A single context.
    #[arg(long, conflicts_with = "input")]
    context: Option<String>,
    /// Dialogue corpus whose contexts are decoded.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    opts: DecodeOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dialogue corpus with reference responses.
    #[arg(long)]
    data: PathBuf,
    /// Word vectors (`word v1 v2 ...` per line); the text encoder's token
    /// embeddings are used otherwise.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Also write `per_sample.csv`.
    #[arg(long)]
    per_sample: bool,
    #[command(flatten)]
    opts: DecodeOpts,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long, default_value_t = ProbeSettings::default().seed)]
    probe_seed: u64,
    #[arg(long, default_value_t = ProbeSettings::default().n_fit)]
    probe_fit: usize,
    #[arg(long, default_value_t = ProbeSettings::default().n_eval)]
    probe_eval: usize,
}

impl ProbeArgs {
    fn settings(&self) -> ProbeSettings {
        ProbeSettings { seed: self.probe_seed, n_fit: self.probe_fit, n_eval: self.probe_eval }
    }
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArg,
    /// Objective to switch off: tim, tamim, iamtm or bvif (repeatable).
    #[arg(long, required = true)]
    disable: Vec<Ablation>,
    #[command(flatten)]
    probe: ProbeArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArg,
    /// Comma-separated query counts.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[command(flatten)]
    probe: ProbeArgs,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArg,
    #[arg(long, default_value_t = 1000)]
    count: usize,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[command(flatten)]
    out: OutArg,
    /// Number of random toy configurations.
    #[arg(long, default_value_t = 5)]
    configs: u64,
    /// Seed of the first configuration.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Objectives to check; all of them by default.
    #[arg(long, value_delimiter = ',')]
    terms: Vec<LossTerm>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.downcast_ref::<VkdError>().map_or("runtime", VkdError::category);
            let msg = format!("{:#}", e).replace('\n', " ");
            eprintln!("error[{}]: {}", category, msg);
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Infer(a) => cmd_decode(a, false),
        Command::Textualize(a) => cmd_decode(a, true),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::SweepQueries(a) => cmd_sweep(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn apply_overrides(cfg: &mut ModelConfig, args: &ConfigArgs) -> anyhow::Result<()> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| VkdError::io(format!("reading {}", path.display()), e))?;
        cfg.overlay_toml(&text)?;
    }
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(VkdError::input(format!("override `{}` is not key=value", kv)).into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(())
}

fn resolve_config(args: &ConfigArgs) -> anyhow::Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(&args.preset)?;
    apply_overrides(&mut cfg, args)?;
    Ok(cfg)
}

fn has_overrides(args: &ConfigArgs) -> bool {
    args.config.is_some() || !args.set.is_empty() || args.seed.is_some()
}

/// Loads a checkpoint; overrides apply on top of the stored config and must
/// leave the architecture unchanged.
fn load_state(path: &Path, args: &ConfigArgs) -> anyhow::Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| VkdError::io(format!("reading {}", path.display()), e))?;
    let state = decode_checkpoint(&bytes, None)?;
    if !has_overrides(args) {
        return Ok(state);
    }
    let mut cfg = state.model.cfg.clone();
    apply_overrides(&mut cfg, args)?;
    Ok(decode_checkpoint(&bytes, Some(&cfg))?)
}

/// Creates the output directory and prints and stores the resolved config.
fn announce(out: &Path, cfg: &ModelConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).map_err(|e| VkdError::io(format!("creating {}", out.display()), e))?;
    let text = cfg.to_toml();
    println!("# resolved config\n{}", text);
    write_file(&out.join("config.toml"), text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(|e| VkdError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

struct LogWriter(BufWriter<File>);

impl LogWriter {
    fn create(path: &Path, append: bool) -> anyhow::Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| VkdError::io(format!("opening {}", path.display()), e))?;
        Ok(LogWriter(BufWriter::new(file)))
    }

    fn write(&mut self, rec: &TrainLogRecord) -> vkd_core::Result<()> {
        writeln!(self.0, "{}", rec.to_json()).map_err(|e| VkdError::io("writing train log", e))
    }

    fn finish(mut self) -> anyhow::Result<()> {
        self.0.flush().context("flushing train log")
    }
}

fn progress(rec: &TrainLogRecord, total: u64) {
    if rec.step == 1 || rec.step.is_multiple_of(100) || rec.step == total {
        eprintln!("step {:>6}/{} loss {:.5} lr {:.2e}", rec.step, total, rec.loss, rec.lr);
    }
}

fn cmd_pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let mut state = match &a.resume {
        Some(path) => load_state(path, &a.cfg)?,
        None => TrainState::new(&resolve_config(&a.cfg)?)?,
    };
    let out = &a.out.out;
    announce(out, state.cfg())?;
    let source = match &a.data {
        Some(dir) => {
            let (pairs, size) = data::load_pair_corpus(dir)?;
            if size != state.cfg().image_size {
                bail!(VkdError::config("image_size", format!("corpus images are {} px", size)));
            }
            PairSource::Fixed(pairs)
        }
        None => PairSource::Synthetic(PairGenerator::from_config(state.cfg())?),
    };
    let until = a.steps.unwrap_or(state.cfg().total_steps as u64);
    let mut log = LogWriter::create(&out.join("train_log.jsonl"), a.resume.is_some())?;
    let every = a.checkpoint_every.filter(|&n| n > 0);
    while state.step < until {
        let stop = match every {
            Some(n) => ((state.step / n + 1) * n).min(until),
            None => until,
        };
        pipeline::pretrain(&mut state, &source, stop, &mut |r| {
            progress(r, until);
            log.write(r)
        })?;
        if every.is_some() && stop < until {
            pipeline::save_checkpoint(&state, &out.join(format!("step-{}.vkd", stop)))?;
        }
    }
    log.finish()?;
    pipeline::save_checkpoint(&state, &out.join(CHECKPOINT_FILE))?;
    println!("saved {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let mut state = load_state(&a.checkpoint, &a.cfg)?;
    state.begin_stage();
    let out = &a.out.out;
    announce(out, state.cfg())?;
    let corpus = data::load_dialogue_corpus(&a.data)?;
    let until = a.steps.unwrap_or(state.cfg().total_steps as u64);
    let mut log = LogWriter::create(&out.join("finetune_log.jsonl"), false)?;
    pipeline::finetune(&mut state, &corpus, until, &mut |r| {
        progress(r, until);
        log.write(r)
    })?;
    log.finish()?;
    pipeline::save_checkpoint(&state, &out.join(CHECKPOINT_FILE))?;
    println!("saved {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_decode(a: DecodeArgs, textualize: bool) -> anyhow::Result<()> {
    let state = load_state(&a.checkpoint, &a.cfg)?;
    let out = &a.out.out;
    announce(out, state.cfg())?;
    let contexts: Vec<String> = match (&a.context, &a.input) {
        (Some(c), _) => vec![c.clone()],
        (None, Some(path)) => data::load_dialogue_corpus(path)?.into_iter().map(|s| s.context).collect(),
        (None, None) => bail!(VkdError::input("give --context or --input")),
    };
    let decode = a.opts.decode();
    let name = if textualize { "textualizations.jsonl" } else { "responses.jsonl" };
    let mut lines = String::new();
    for (i, c) in contexts.iter().enumerate() {
        let ids = tokenizer::encode(c);
        let seed = a.opts.decode_seed.wrapping_add(i as u64);
        let generated = if textualize {
            state.model.textualize_knowledge(&ids, a.opts.max_new, decode, seed)?
        } else {
            state.model.infer_response(&ids, a.opts.max_new, decode, seed)?
        };
        let text = tokenizer::decode(&generated);
        println!("{}\t{}", c, text);
        lines.push_str(&json!({ "context": c, "output": text }).to_string());
        lines.push('\n');
    }
    write_file(&out.join(name), lines.as_bytes())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let state = load_state(&a.checkpoint, &a.cfg)?;
    let out = &a.out.out;
    announce(out, state.cfg())?;
    let corpus: Vec<DialogueSample> = data::load_dialogue_corpus(&a.data)?;
    let table = match &a.embeddings {
        Some(path) => EmbeddingTable::load_words(path)?,
        None => EmbeddingTable::from_model(&state.model)?,
    };
    let mut report =
        evalmetrics::evaluate(&state.model, &corpus, &table, a.opts.max_new, a.opts.decode(), a.opts.decode_seed)?;
    for (name, value) in &report.metrics {
        println!("{:<8} {:.6}", name, value);
    }
    write_file(&out.join("eval.jsonl"), report.to_jsonl().as_bytes())?;
    if a.per_sample {
        write_file(&out.join("per_sample.csv"), report.per_sample_csv().as_bytes())?;
    }
    report.per_sample.clear();
    write_file(&out.join("eval_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    for ab in &a.disable {
        ab.apply(&mut cfg);
    }
    cfg.validate()?;
    let out = &a.out.out;
    announce(out, &cfg)?;
    let total = cfg.total_steps as u64;
    let mut log = LogWriter::create(&out.join("train_log.jsonl"), false)?;
    let (state, summary) = pipeline::train_and_probe(&cfg, a.probe.settings(), &mut |r| {
        progress(r, total);
        log.write(r)
    })?;
    log.finish()?;
    pipeline::save_checkpoint(&state, &out.join(CHECKPOINT_FILE))?;
    println!(
        "probe accuracy {:.4} (chance {:.4}), reconstruction error {:.6}",
        summary.probe.text_accuracy, summary.probe.chance, summary.reconstruction_error
    );
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let out = &a.out.out;
    announce(out, &cfg)?;
    let total = cfg.total_steps as u64;
    let mut logs = Vec::new();
    for &n in &a.n {
        let dir = out.join(format!("n{}", n));
        fs::create_dir_all(&dir).map_err(|e| VkdError::io(format!("creating {}", dir.display()), e))?;
        logs.push((n, LogWriter::create(&dir.join("train_log.jsonl"), false)?));
    }
    let rows = pipeline::sweep_queries(&cfg, &a.n, a.probe.settings(), &mut |n, r| {
        progress(r, total);
        let (_, log) = logs.iter_mut().find(|(m, _)| *m == n).expect("one log per query count");
        log.write(r)
    })?;
    for (_, log) in logs {
        log.finish()?;
    }
    let mut csv = String::from(SweepRow::CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    print!("{}", csv);
    write_file(&out.join("sweep.csv"), csv.as_bytes())
}

fn cmd_gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let out = &a.out.out;
    announce(out, &cfg)?;
    let generator = PairGenerator::from_config(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let pairs = generator.draw(&mut rng, a.count);
    data::save_pair_corpus(out, &pairs, cfg.image_size)?;
    let dialogues = data::synthetic_dialogues(cfg.data_seed, a.count, cfg.attribute_count)?;
    data::save_dialogue_corpus(&out.join("dialogues.jsonl"), &dialogues)?;
    println!("wrote {} pairs and {} dialogues to {}", pairs.len(), dialogues.len(), out.display());
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> anyhow::Result<()> {
    let out = &a.out.out;
    fs::create_dir_all(out).map_err(|e| VkdError::io(format!("creating {}", out.display()), e))?;
    let terms = if a.terms.is_empty() { LossTerm::ALL.to_vec() } else { a.terms.clone() };
    let mut lines = String::new();
    let mut worst: f64 = 0.0;
    for seed in a.seed..a.seed + a.configs {
        let cfg = toy_config(seed);
        println!("# resolved config (seed {})\n{}", seed, cfg.to_toml());
        let (model, batch) = toy_setup(&cfg)?;
        for &term in &terms {
            let r = check_term(&model, &batch, term, a.h)?;
            println!("config {} {:<6} max rel err {:.3e} over {} entries", seed, term, r.max_rel_err, r.entries);
            worst = worst.max(r.max_rel_err);
            lines.push_str(&json!({ "config_seed": seed, "check": r }).to_string());
            lines.push('\n');
        }
    }
    write_file(&out.join("grad_check.jsonl"), lines.as_bytes())?;
    if worst > a.tol {
        bail!(VkdError::Numeric(format!("largest relative error {:.3e} exceeds {:.1e}", worst, a.tol)));
    }
    println!("largest relative error {:.3e}", worst);
    Ok(())
}
