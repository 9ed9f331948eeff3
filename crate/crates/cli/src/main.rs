use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use cct_core::pipeline::{self, RunConfig};
use cct_core::trainer::Ablation;
use cct_core::{CctError, Result};

/// Code comparison tuning: bug injection, comparison datasets, training,
/// and pass@k evaluation.
#[derive(Parser)]
#[command(name = "cct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inject one bug into the first code block of every training sample.
    Mutate(Job),
    /// Build the vocabulary and the comparison dataset.
    BuildDataset(Job),
    /// Train a model; writes the loss log and checkpoints.
    Train(Job),
    /// Sample fixes for the benchmark tasks and score pass@k.
    Evaluate {
        #[command(flatten)]
        job: Job,
        /// Checkpoint to evaluate (default: checkpoint_dir/final.ckpt).
        #[arg(long = "checkpoint")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate on nested fractions of the dataset.
    Sweep(Job),
    /// Train and evaluate each ablation for every sweep seed.
    Ablate {
        #[command(flatten)]
        job: Job,
        /// Comma-separated ablations (default: all).
        #[arg(long = "ablations")]
        ablations: Option<String>,
    },
    /// Write a synthetic training set and held-out functions.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        train: usize,
        #[arg(long, default_value_t = 60)]
        held_out: usize,
        #[arg(long, default_value = "data/train.jsonl")]
        train_out: PathBuf,
        #[arg(long, default_value = "data/held_out.jsonl")]
        held_out_out: PathBuf,
    },
    /// Print the effective configuration.
    ShowConfig(Job),
}

#[derive(Args)]
struct Job {
    /// Run configuration file (`key = value` lines).
    config: PathBuf,
    /// Configuration overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl Job {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &parse_overrides(&self.overrides)?)
    }
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| CctError::Config(format!("expected `--key value`, found `{arg}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.replace('-', "_"), v.to_string())),
            None => {
                let value = it
                    .next()
                    .ok_or_else(|| CctError::Config(format!("`--{key}` needs a value")))?;
                out.push((key.replace('-', "_"), value.clone()));
            }
        }
    }
    Ok(out)
}

fn run(cli: Cli, stop: &AtomicBool) -> Result<()> {
    match cli.command {
        Command::Mutate(job) => {
            let s = pipeline::cmd_mutate(&job.load()?)?;
            println!(
                "mutated={} skipped_no_code={} skipped_no_candidates={}",
                s.mutated, s.skipped_no_code, s.skipped_no_candidates
            );
        }
        Command::BuildDataset(job) => {
            let s = pipeline::cmd_build_dataset(&job.load()?)?;
            println!(
                "records={} with_comparison={} vocab_size={}",
                s.records, s.with_comparison, s.vocab_size
            );
        }
        Command::Train(job) => {
            let s = pipeline::cmd_train(&job.load()?, stop)?;
            println!(
                "steps={}/{} final_loss={} checkpoint={}",
                s.steps,
                s.total_steps,
                s.final_loss.map_or("n/a".into(), |l| l.to_string()),
                s.checkpoint.display()
            );
        }
        Command::Evaluate { job, checkpoint } => {
            let s = pipeline::cmd_evaluate(&job.load()?, checkpoint.as_deref())?;
            println!("tasks={} discarded={}", s.tasks, s.discarded);
            for (k, v) in &s.corpus {
                println!("{k}={v:.4}");
            }
        }
        Command::Sweep(job) => {
            let rows = pipeline::cmd_sweep(&job.load()?, stop)?;
            println!("fraction,seed,records,pass_at_1");
            for r in rows {
                println!("{},{},{},{:.4}", r.fraction, r.seed, r.records, r.pass_at_1);
            }
        }
        Command::Ablate { job, ablations } => {
            let list = match ablations {
                Some(s) => s
                    .split(',')
                    .map(|a| a.trim().parse())
                    .collect::<Result<Vec<Ablation>>>()?,
                None => Ablation::ALL.to_vec(),
            };
            let rows = pipeline::cmd_ablate(&job.load()?, &list, stop)?;
            for (a, mean) in pipeline::ablation_means(&rows) {
                println!("{}={mean:.4}", a.name());
            }
        }
        Command::GenCorpus {
            seed,
            train,
            held_out,
            train_out,
            held_out_out,
        } => {
            pipeline::write_synthetic_corpus(seed, train, held_out, &train_out, &held_out_out)?;
            println!("train={train} held_out={held_out}");
        }
        Command::ShowConfig(job) => print!("{}", job.load()?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    match run(cli, &stop) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
