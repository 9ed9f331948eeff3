//! Jobs behind the `cct` subcommands.
//!
//! A run is described by one flat `key = value` file. Command-line
//! overrides are applied on top, and `CCT_SEED`, when set, replaces the
//! file's seed (explicit `--seed` still wins). Relative paths in the file
//! resolve against the file's directory; relative override paths resolve
//! against the working directory.
//!
//! Artifacts:
//!
//! ```text
//! dataset_dir/mutants.jsonl     cct mutate
//! dataset_dir/cct.jsonl         cct build-dataset
//! dataset_dir/vocab.json        cct build-dataset
//! checkpoint_dir/final.ckpt     cct train
//! checkpoint_dir/latest.ckpt    cct train (periodic, interrupted, or partial runs)
//! results_dir/loss.csv          cct train
//! results_dir/tasks.jsonl       cct evaluate (when built from held-out functions)
//! results_dir/results.jsonl     cct evaluate
//! results_dir/summary.json      cct evaluate
//! results_dir/sweep.csv         cct sweep
//! results_dir/sweep/<run>/      cct sweep, one directory per (fraction, seed)
//! results_dir/ablation.csv      cct ablate
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{CctError, Result};
use crate::eval::{
    build_eval_suite, evaluate, EvalResult, EvalTask, HeldOutFunction, ModelCompletions,
    SamplerRegistry, SamplingConfig, Sandbox, SandboxConfig,
};
use crate::jsonl;
use crate::mutation::{verify_pair, MutantPair, MutationEngine, MutatorRegistry};
use crate::sample_builder::{
    assemble_record, first_block, mutate_sample, record_seeds, CctRecord, InstructionSample,
    MutationStatus, Vocab, DEFAULT_VOCAB_CAP, TEMPLATES,
};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::{prepare_items, Ablation, EncodedRecord, Model, ModelConfig, Trainer, TrainingConfig};

pub const SEED_ENV: &str = "CCT_SEED";
pub const LOSS_LOG_HEADER: &str = "step,lm,token,seq,total";

/// Exit status for a failed job: 1 usage/config, 2 data, 3 training abort.
pub fn exit_code(err: &CctError) -> i32 {
    match err {
        CctError::Config(_) | CctError::Contract(_) => 1,
        CctError::NonFiniteLoss { .. } | CctError::Interrupted { .. } => 3,
        CctError::Structure(_)
        | CctError::InvalidPair(_)
        | CctError::InvalidSample(_)
        | CctError::Data(_)
        | CctError::Checkpoint(_)
        | CctError::Io(_)
        | CctError::Json(_) => 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train_data: PathBuf,
    pub held_out_data: PathBuf,
    /// Pre-built task file; when set it replaces the held-out functions.
    pub tasks_file: Option<PathBuf>,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub results_dir: PathBuf,
    pub vocab_cap: usize,
    pub mutators: Vec<String>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub training: TrainingConfig,
    pub sampling: SamplingConfig,
    pub ks: Vec<usize>,
    pub sandbox: SandboxConfig,
    /// Save `latest.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Stop this invocation after this many steps; 0 runs to the end.
    pub stop_after: u64,
    pub resume: bool,
    pub sweep_fractions: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_data: "data/train.jsonl".into(),
            held_out_data: "data/held_out.jsonl".into(),
            tasks_file: None,
            dataset_dir: "run/dataset".into(),
            checkpoint_dir: "run/checkpoints".into(),
            results_dir: "run/results".into(),
            vocab_cap: DEFAULT_VOCAB_CAP,
            mutators: MutatorRegistry::default()
                .names()
                .into_iter()
                .map(String::from)
                .collect(),
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            context_length: 128,
            training: TrainingConfig::default(),
            sampling: SamplingConfig::default(),
            ks: vec![1],
            sandbox: SandboxConfig::default(),
            checkpoint_every: 0,
            stop_after: 0,
            resume: false,
            sweep_fractions: vec![0.2, 0.6, 1.0],
            sweep_seeds: vec![0, 1, 2],
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "train_data",
    "held_out_data",
    "tasks_file",
    "dataset_dir",
    "checkpoint_dir",
    "results_dir",
    "vocab_cap",
    "mutators",
    "d_model",
    "n_layers",
    "n_heads",
    "context_length",
    "ablation",
    "lr_schedule",
    "alpha",
    "beta",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "epochs",
    "strategy",
    "temperature",
    "top_p",
    "n_samples",
    "max_new_tokens",
    "ks",
    "sandbox_command",
    "sandbox_workers",
    "checkpoint_every",
    "stop_after",
    "resume",
    "sweep_fractions",
    "sweep_seeds",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CctError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join_list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn resolve(base: Option<&Path>, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

impl RunConfig {
    /// Sets one key. `base` anchors relative paths.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "train_data" => self.train_data = resolve(base, value),
            "held_out_data" => self.held_out_data = resolve(base, value),
            "tasks_file" => {
                self.tasks_file = (!value.is_empty()).then(|| resolve(base, value));
            }
            "dataset_dir" => self.dataset_dir = resolve(base, value),
            "checkpoint_dir" => self.checkpoint_dir = resolve(base, value),
            "results_dir" => self.results_dir = resolve(base, value),
            "vocab_cap" => self.vocab_cap = parse_num(key, value)?,
            "mutators" => {
                self.mutators = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
            }
            "d_model" => self.d_model = parse_num(key, value)?,
            "n_layers" => self.n_layers = parse_num(key, value)?,
            "n_heads" => self.n_heads = parse_num(key, value)?,
            "context_length" => self.context_length = parse_num(key, value)?,
            "ablation" => self.training.ablation = value.parse()?,
            "lr_schedule" => self.training.lr_schedule = value.parse()?,
            "alpha" => self.training.alpha = parse_num(key, value)?,
            "beta" => self.training.beta = parse_num(key, value)?,
            "learning_rate" => self.training.learning_rate = parse_num(key, value)?,
            "weight_decay" => self.training.weight_decay = parse_num(key, value)?,
            "batch_size" => self.training.batch_size = parse_num(key, value)?,
            "epochs" => self.training.epochs = parse_num(key, value)?,
            "strategy" => self.sampling.strategy = value.to_string(),
            "temperature" => self.sampling.temperature = parse_num(key, value)?,
            "top_p" => self.sampling.top_p = parse_num(key, value)?,
            "n_samples" => self.sampling.n_samples = parse_num(key, value)?,
            "max_new_tokens" => self.sampling.max_new_tokens = parse_num(key, value)?,
            "ks" => self.ks = parse_list(key, value)?,
            "sandbox_command" => {
                self.sandbox.command = value.split_whitespace().map(String::from).collect();
            }
            "sandbox_workers" => self.sandbox.workers = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "stop_after" => self.stop_after = parse_num(key, value)?,
            "resume" => self.resume = parse_num(key, value)?,
            "sweep_fractions" => self.sweep_fractions = parse_list(key, value)?,
            "sweep_seeds" => self.sweep_seeds = parse_list(key, value)?,
            _ => return Err(CctError::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment line.
    /// Default path settings resolve against `base` as well.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(b) = base {
            for p in [
                &mut cfg.train_data,
                &mut cfg.held_out_data,
                &mut cfg.dataset_dir,
                &mut cfg.checkpoint_dir,
                &mut cfg.results_dir,
            ] {
                *p = b.join(&*p);
            }
        }
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CctError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value, base)
                .map_err(|e| CctError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Reads `path`, then applies `CCT_SEED` and `overrides` in that order.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CctError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        let mut cfg = Self::parse(&text, base)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", &seed, None)
                .map_err(|e| CctError::Config(format!("{SEED_ENV}: {e}")))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v, None)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training_config().validate()?;
        self.sampling_config().validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(CctError::Config("ks must list positive values".into()));
        }
        if let Some(k) = self.ks.iter().find(|&&k| k > self.sampling.n_samples) {
            return Err(CctError::Config(format!(
                "k = {k} exceeds n_samples = {}",
                self.sampling.n_samples
            )));
        }
        if let Some(f) = self.sweep_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(CctError::Config(format!("sweep fraction {f} outside (0, 1]")));
        }
        MutatorRegistry::select(&self.mutators)?;
        Ok(())
    }

    /// Serializes every key in a fixed order; `parse` reads it back.
    pub fn to_text(&self) -> String {
        let path = |p: &Path| p.display().to_string();
        let t = &self.training;
        let s = &self.sampling;
        let values: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("train_data", path(&self.train_data)),
            ("held_out_data", path(&self.held_out_data)),
            ("tasks_file", self.tasks_file.as_deref().map(path).unwrap_or_default()),
            ("dataset_dir", path(&self.dataset_dir)),
            ("checkpoint_dir", path(&self.checkpoint_dir)),
            ("results_dir", path(&self.results_dir)),
            ("vocab_cap", self.vocab_cap.to_string()),
            ("mutators", self.mutators.join(",")),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("context_length", self.context_length.to_string()),
            ("ablation", t.ablation.name().to_string()),
            ("lr_schedule", t.lr_schedule.name().to_string()),
            ("alpha", t.alpha.to_string()),
            ("beta", t.beta.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("strategy", s.strategy.clone()),
            ("temperature", s.temperature.to_string()),
            ("top_p", s.top_p.to_string()),
            ("n_samples", s.n_samples.to_string()),
            ("max_new_tokens", s.max_new_tokens.to_string()),
            ("ks", join_list(&self.ks)),
            ("sandbox_command", self.sandbox.command.join(" ")),
            ("sandbox_workers", self.sandbox.workers.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("stop_after", self.stop_after.to_string()),
            ("resume", self.resume.to_string()),
            ("sweep_fractions", join_list(&self.sweep_fractions)),
            ("sweep_seeds", join_list(&self.sweep_seeds)),
        ];
        debug_assert_eq!(values.len(), CONFIG_KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            seed: self.seed,
            ..self.sampling.clone()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context_length: self.context_length,
            seed: self.seed,
        }
    }

    fn engine(&self) -> Result<MutationEngine> {
        Ok(MutationEngine::new(MutatorRegistry::select(&self.mutators)?))
    }

    pub fn mutants_path(&self) -> PathBuf {
        self.dataset_dir.join("mutants.jsonl")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset_dir.join("cct.jsonl")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.dataset_dir.join("vocab.json")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join("final.ckpt")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join("latest.ckpt")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.results_dir.join("loss.csv")
    }
}

fn require_input(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CctError::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

fn read_samples(path: &Path) -> Result<Vec<InstructionSample>> {
    require_input(path, "training data")?;
    let samples: Vec<InstructionSample> = jsonl::read(path)?;
    for (i, s) in samples.iter().enumerate() {
        s.validate()
            .map_err(|e| CctError::Data(format!("{} record {}: {e}", path.display(), i + 1)))?;
    }
    Ok(samples)
}

/// An instruction sample with the outcome of mutating its first code block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    #[serde(flatten)]
    pub sample: InstructionSample,
    pub status: MutationStatus,
    pub mutant: Option<MutantPair>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MutateSummary {
    pub mutated: usize,
    pub skipped_no_code: usize,
    pub skipped_no_candidates: usize,
}

fn annotate(cfg: &RunConfig, samples: Vec<InstructionSample>) -> Result<Vec<AnnotatedSample>> {
    let engine = cfg.engine()?;
    Ok(samples
        .into_iter()
        .enumerate()
        .map(|(i, sample)| {
            let (mutation_seed, _) = record_seeds(cfg.seed, i);
            let (status, mutant) = mutate_sample(&engine, &sample, mutation_seed);
            AnnotatedSample {
                sample,
                status,
                mutant,
            }
        })
        .collect())
}

/// Mutates the first code block of every training sample and writes the
/// annotated records.
pub fn cmd_mutate(cfg: &RunConfig) -> Result<MutateSummary> {
    let samples = read_samples(&cfg.train_data)?;
    let annotated = annotate(cfg, samples)?;
    let mut summary = MutateSummary::default();
    for a in &annotated {
        match a.status {
            MutationStatus::Mutated => summary.mutated += 1,
            MutationStatus::NoCode => summary.skipped_no_code += 1,
            MutationStatus::NoCandidates => summary.skipped_no_candidates += 1,
        }
    }
    jsonl::write(&cfg.mutants_path(), &annotated)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub with_comparison: usize,
    pub vocab_size: usize,
}

/// Annotated samples from `mutate` when present, otherwise mutated here
/// from the raw training data.
fn load_annotated(cfg: &RunConfig) -> Result<Vec<AnnotatedSample>> {
    let path = cfg.mutants_path();
    if !path.is_file() {
        return annotate(cfg, read_samples(&cfg.train_data)?);
    }
    let annotated: Vec<AnnotatedSample> = jsonl::read(&path)?;
    for (i, a) in annotated.iter().enumerate() {
        let at = |msg: String| CctError::Data(format!("{} record {}: {msg}", path.display(), i + 1));
        a.sample.validate().map_err(|e| at(e.to_string()))?;
        if let Some(pair) = &a.mutant {
            verify_pair(pair).map_err(|e| at(e.to_string()))?;
            let block = first_block(&a.sample).map(|b| b.text);
            if block.as_deref() != Some(pair.correct.as_str()) {
                return Err(at("mutant does not match the sample's first code block".into()));
            }
        }
    }
    Ok(annotated)
}

/// Builds the vocabulary and the three-stream records.
pub fn cmd_build_dataset(cfg: &RunConfig) -> Result<DatasetSummary> {
    let annotated = load_annotated(cfg)?;
    let samples: Vec<InstructionSample> = annotated.iter().map(|a| a.sample.clone()).collect();
    let vocab = Vocab::for_samples(&samples, cfg.vocab_cap);
    let records: Vec<CctRecord> = annotated
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let (_, template) = record_seeds(cfg.seed, i);
            assemble_record(i.to_string(), &a.sample, a.mutant.as_ref(), &TEMPLATES[template], &vocab)
        })
        .collect();
    jsonl::write(&cfg.dataset_path(), &records)?;
    fs::write(cfg.vocab_path(), serde_json::to_string(&vocab)? + "\n")?;
    Ok(DatasetSummary {
        records: records.len(),
        with_comparison: records.iter().filter(|r| r.comparison.is_some()).count(),
        vocab_size: vocab.len(),
    })
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    require_input(path, "vocabulary")?;
    serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| CctError::Data(format!("{}: {e}", path.display())))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(Vec<CctRecord>, Vocab)> {
    require_input(&cfg.dataset_path(), "dataset")?;
    let records = jsonl::read(&cfg.dataset_path())?;
    Ok((records, load_vocab(&cfg.vocab_path())?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub total_steps: u64,
    pub completed: bool,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

fn loss_row(step: u64, l: &crate::trainer::LossBreakdown) -> String {
    format!("{step},{},{},{},{}\n", l.lm, l.token, l.seq, l.total)
}

/// Keeps the header and rows up to `step` of an earlier log.
fn truncated_log(path: &Path, step: u64) -> Result<String> {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    for line in text.lines().skip(1) {
        let row_step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CctError::Data(format!("{}: malformed row `{line}`", path.display())))?;
        if row_step <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn check_resume(ck: &Checkpoint, cfg: &RunConfig, vocab: &Vocab) -> Result<()> {
    if ck.meta.model != cfg.model_config(vocab.len()) || &ck.meta.vocab != vocab {
        return Err(CctError::Config(
            "checkpoint model or vocabulary does not match the configuration".into(),
        ));
    }
    if ck.meta.training != cfg.training_config() {
        return Err(CctError::Config(
            "checkpoint training settings do not match the configuration".into(),
        ));
    }
    Ok(())
}

/// Trains on `items`, logging every step, honouring resume, `stop_after`,
/// periodic checkpoints, and the `stop` flag.
pub fn train_items(
    cfg: &RunConfig,
    items: &[EncodedRecord],
    vocab: &Vocab,
    stop: &AtomicBool,
) -> Result<TrainSummary> {
    if items.is_empty() {
        return Err(CctError::Data("no training records".into()));
    }
    let latest = cfg.latest_checkpoint();
    let mut trainer = if cfg.resume && latest.is_file() {
        let ck = Checkpoint::load(&latest)?;
        check_resume(&ck, cfg, vocab)?;
        log::info!("resuming from {} at step {}", latest.display(), ck.meta.step);
        ck.to_trainer()?
    } else {
        Trainer::new(Model::new(cfg.model_config(vocab.len()))?, cfg.training_config())?
    };
    let start = trainer.optimizer.step;
    let log_path = cfg.loss_log();
    let prior = truncated_log(&log_path, if cfg.resume { start } else { 0 })?;
    fs::create_dir_all(&cfg.results_dir)?;
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    log.write_all(prior.as_bytes())?;

    let total = crate::trainer::Schedule::new(
        items.len(),
        trainer.config.batch_size,
        trainer.config.epochs,
        trainer.config.seed,
    )
    .total_steps();
    let mut last = None;
    let mut interrupted = false;
    let result = trainer.fit(items, |step, loss, t| {
        log.write_all(loss_row(step, loss).as_bytes())?;
        last = Some(loss.total);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total {
            log.flush()?;
            Checkpoint::from_trainer(t, vocab).save(&latest)?;
        }
        if stop.load(Ordering::SeqCst) {
            interrupted = true;
            return Ok(false);
        }
        Ok(cfg.stop_after == 0 || step - start < cfg.stop_after)
    });
    log.flush()?;
    result?;
    let steps = trainer.optimizer.step;
    let completed = steps >= total;
    let checkpoint = if completed { cfg.final_checkpoint() } else { latest };
    Checkpoint::from_trainer(&trainer, vocab).save(&checkpoint)?;
    if interrupted && !completed {
        log::warn!(
            "interrupted at step {steps}; resumable checkpoint at {}",
            checkpoint.display()
        );
        return Err(CctError::Interrupted { step: steps });
    }
    Ok(TrainSummary {
        steps,
        total_steps: total,
        completed,
        final_loss: last,
        checkpoint,
    })
}

pub fn cmd_train(cfg: &RunConfig, stop: &AtomicBool) -> Result<TrainSummary> {
    let (records, vocab) = load_dataset(cfg)?;
    let items = prepare_items(&records, &vocab, cfg.training.ablation);
    train_items(cfg, &items, &vocab, stop)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub tasks: usize,
    pub discarded: usize,
    /// Keyed `pass_at_{k}`.
    pub corpus: BTreeMap<String, f64>,
}

impl EvalSummary {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.corpus.get(&format!("pass_at_{k}")).copied()
    }
}

/// The benchmark tasks: the configured task file, or a suite built from
/// the held-out functions (and written to `results_dir/tasks.jsonl`).
pub fn load_tasks(cfg: &RunConfig, sandbox: &Sandbox) -> Result<(Vec<EvalTask>, usize)> {
    if let Some(path) = &cfg.tasks_file {
        require_input(path, "task file")?;
        return Ok((jsonl::read(path)?, 0));
    }
    require_input(&cfg.held_out_data, "held-out data")?;
    let held_out: Vec<HeldOutFunction> = jsonl::read(&cfg.held_out_data)?;
    let suite = build_eval_suite(&held_out, cfg.seed, sandbox)?;
    jsonl::write(&cfg.results_dir.join("tasks.jsonl"), &suite.tasks)?;
    Ok((suite.tasks, suite.discarded))
}

/// Samples, executes, and writes `results.jsonl` and `summary.json`.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &Model,
    vocab: &Vocab,
    tasks: &[EvalTask],
    discarded: usize,
    sandbox: &Sandbox,
) -> Result<EvalSummary> {
    let sampling = cfg.sampling_config();
    let registry = SamplerRegistry::default();
    let source = ModelCompletions {
        model,
        vocab,
        sampler: registry.get(&sampling.strategy)?,
    };
    let report = evaluate(&source, tasks, &sampling, sandbox, &cfg.ks)?;
    jsonl::write::<EvalResult>(&cfg.results_dir.join("results.jsonl"), &report.results)?;
    let summary = EvalSummary {
        tasks: tasks.len(),
        discarded,
        corpus: report
            .corpus
            .iter()
            .map(|(k, v)| (format!("pass_at_{k}"), *v))
            .collect(),
    };
    fs::write(
        cfg.results_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

/// Loads a checkpoint after checking it against the configured model
/// shape and, when built, the dataset vocabulary.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, Vocab)> {
    let ck = Checkpoint::load(path)?;
    let m = &ck.meta.model;
    let mut mismatches = Vec::new();
    for (name, have, want) in [
        ("d_model", m.d_model, cfg.d_model),
        ("n_layers", m.n_layers, cfg.n_layers),
        ("n_heads", m.n_heads, cfg.n_heads),
        ("context_length", m.context_length, cfg.context_length),
    ] {
        if have != want {
            mismatches.push(format!("{name}: checkpoint {have}, config {want}"));
        }
    }
    if cfg.vocab_path().is_file() && load_vocab(&cfg.vocab_path())? != ck.meta.vocab {
        mismatches.push(format!(
            "vocabulary differs from {}",
            cfg.vocab_path().display()
        ));
    }
    if !mismatches.is_empty() {
        return Err(CctError::Config(format!(
            "checkpoint {} does not match the configuration ({})",
            path.display(),
            mismatches.join("; ")
        )));
    }
    let trainer = ck.to_trainer()?;
    Ok((trainer.model, ck.meta.vocab))
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let path = checkpoint.map_or_else(|| cfg.final_checkpoint(), Path::to_path_buf);
    let (model, vocab) = load_model(cfg, &path)?;
    let sandbox = Sandbox::new(&cfg.sandbox)?;
    let (tasks, discarded) = load_tasks(cfg, &sandbox)?;
    if tasks.is_empty() {
        return Err(CctError::Data("no evaluation tasks".into()));
    }
    evaluate_model(cfg, &model, &vocab, &tasks, discarded, &sandbox)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub records: usize,
    pub pass_at_1: f64,
}

/// `ceil(fraction * n)`, tolerant of the rounding in `fraction * n`.
pub fn subset_size(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    ((exact - exact * 1e-12).ceil() as usize).clamp(1, n.max(1)).min(n)
}

/// Record indices used by `(fraction, seed)`: a seeded shuffle cut to the
/// subset size and restored to dataset order. Smaller fractions are
/// prefixes of the same shuffle, so subsets are nested per seed.
pub fn sweep_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(subset_size(fraction, n));
    order.sort_unstable();
    order
}

pub fn sweep_run_name(fraction: f64, seed: u64) -> String {
    format!("f{fraction}_s{seed}")
}

/// Trains and evaluates one model per (fraction, seed) on nested subsets
/// of the built dataset; writes `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, stop: &AtomicBool) -> Result<Vec<SweepRow>> {
    let (records, vocab) = load_dataset(cfg)?;
    if records.is_empty() {
        return Err(CctError::Data("no training records".into()));
    }
    let sandbox = Sandbox::new(&cfg.sandbox)?;
    let (tasks, discarded) = load_tasks(cfg, &sandbox)?;
    if tasks.is_empty() {
        return Err(CctError::Data("no evaluation tasks".into()));
    }
    let mut rows = Vec::new();
    let mut table = String::from("fraction,seed,records,pass_at_1\n");
    for &seed in &cfg.sweep_seeds {
        for &fraction in &cfg.sweep_fractions {
            let dir = cfg.results_dir.join("sweep").join(sweep_run_name(fraction, seed));
            let run = RunConfig {
                seed,
                checkpoint_dir: dir.join("checkpoints"),
                results_dir: dir.clone(),
                resume: false,
                stop_after: 0,
                ks: vec![1],
                ..cfg.clone()
            };
            let subset: Vec<CctRecord> = sweep_subset(records.len(), fraction, seed)
                .into_iter()
                .map(|i| records[i].clone())
                .collect();
            fs::create_dir_all(&dir)?;
            let ids: String = subset.iter().map(|r| format!("{}\n", r.id)).collect();
            fs::write(dir.join("ids.txt"), ids)?;
            log::info!("sweep: fraction {fraction}, seed {seed}, {} records", subset.len());
            let items = prepare_items(&subset, &vocab, run.training.ablation);
            train_items(&run, &items, &vocab, stop)?;
            let model = Checkpoint::load(&run.final_checkpoint())?.to_trainer()?.model;
            let summary = evaluate_model(&run, &model, &vocab, &tasks, discarded, &sandbox)?;
            let row = SweepRow {
                fraction,
                seed,
                records: subset.len(),
                pass_at_1: summary.pass_at(1).unwrap_or(0.0),
            };
            let _ = writeln!(table, "{},{},{},{}", row.fraction, row.seed, row.records, row.pass_at_1);
            rows.push(row);
        }
    }
    fs::create_dir_all(&cfg.results_dir)?;
    fs::write(cfg.results_dir.join("sweep.csv"), table)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub seed: u64,
    pub pass_at_1: f64,
    pub final_loss: Option<f64>,
    pub train_seconds: f64,
}

/// Mean pass@1 per ablation over the rows, in first-appearance order.
pub fn ablation_means(rows: &[AblationRow]) -> Vec<(Ablation, f64)> {
    let mut out: Vec<(Ablation, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(a, _, _)| *a == r.ablation) {
            Some(e) => {
                e.1 += r.pass_at_1;
                e.2 += 1;
            }
            None => out.push((r.ablation, r.pass_at_1, 1)),
        }
    }
    out.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
}

/// Trains and evaluates every (seed, ablation) on the full built dataset;
/// writes `ablation.csv`. Runs live under `results_dir/ablation/<run>/`.
pub fn cmd_ablate(cfg: &RunConfig, ablations: &[Ablation], stop: &AtomicBool) -> Result<Vec<AblationRow>> {
    let (records, vocab) = load_dataset(cfg)?;
    let sandbox = Sandbox::new(&cfg.sandbox)?;
    let (tasks, discarded) = load_tasks(cfg, &sandbox)?;
    if tasks.is_empty() {
        return Err(CctError::Data("no evaluation tasks".into()));
    }
    let mut rows = Vec::new();
    let mut table = String::from("ablation,seed,pass_at_1,final_loss\n");
    for &seed in &cfg.sweep_seeds {
        for &ablation in ablations {
            let dir = cfg
                .results_dir
                .join("ablation")
                .join(format!("{}_s{seed}", ablation.name()));
            let mut run = RunConfig {
                seed,
                checkpoint_dir: dir.join("checkpoints"),
                results_dir: dir,
                resume: false,
                stop_after: 0,
                ks: vec![1],
                ..cfg.clone()
            };
            run.training.ablation = ablation;
            let items = prepare_items(&records, &vocab, ablation);
            let started = std::time::Instant::now();
            let trained = train_items(&run, &items, &vocab, stop)?;
            let train_seconds = started.elapsed().as_secs_f64();
            let model = Checkpoint::load(&run.final_checkpoint())?.to_trainer()?.model;
            let summary = evaluate_model(&run, &model, &vocab, &tasks, discarded, &sandbox)?;
            let row = AblationRow {
                ablation,
                seed,
                pass_at_1: summary.pass_at(1).unwrap_or(0.0),
                final_loss: trained.final_loss,
                train_seconds,
            };
            log::info!(
                "ablation {} seed {seed}: pass@1 {:.4} ({train_seconds:.0}s training)",
                ablation.name(),
                row.pass_at_1
            );
            let _ = writeln!(
                table,
                "{},{},{},{}",
                ablation.name(),
                seed,
                row.pass_at_1,
                row.final_loss.unwrap_or(f64::NAN)
            );
            rows.push(row);
        }
    }
    fs::create_dir_all(&cfg.results_dir)?;
    fs::write(cfg.results_dir.join("ablation.csv"), table)?;
    Ok(rows)
}

/// Writes a synthetic training file and held-out function file.
pub fn write_synthetic_corpus(
    seed: u64,
    n_train: usize,
    n_held_out: usize,
    train_path: &Path,
    held_out_path: &Path,
) -> Result<()> {
    let corpus = crate::corpus::generate(seed, n_train, n_held_out);
    jsonl::write(train_path, &corpus.train_samples())?;
    jsonl::write(held_out_path, &corpus.held_out_functions())?;
    Ok(())
}
