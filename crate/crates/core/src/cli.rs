//! Command-line front end. Exit codes: 0 ok, 1 other failure, 2 usage,
//! 3 missing file, 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalbench::{run_matrix, ResultTable};
use crate::exec::Exec;
use crate::recipe::{finetune_stage, generate, matrix_spec, read_data, train_stage, training_files, write_data};
use crate::robusttrain::{verify_theorem1, Method, TrainConfig, TrainLog};
use crate::synthgen::Task;
use crate::vqamodel::{read_checkpoint, write_checkpoint, CheckpointMeta};

#[derive(Debug, Parser)]
#[command(name = "vqa-anomaly", version, about = "Attention-based anomaly detection for a toy VQA model")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate every dataset of a run into a directory.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the base model on the ID training split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune a checkpoint with OE, RA or RA-VAR (or plain continued training).
    Finetune {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        anomalies: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        /// Comma-separated TRAIN-family sources, e.g. T1,T2.
        #[arg(long, value_delimiter = ',', value_parser = parse_task)]
        sources: Option<Vec<Task>>,
    },
    /// Score checkpoints on every configured anomaly set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's data directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print a results file as a task × detector grid.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Check numerically that uniform attention maximizes the RA objective.
    #[command(name = "verify-theorem1")]
    VerifyTheorem1 {
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method {s:?} (expected base, oe, ra or ra-var)"))
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match Task::parse(s) {
        Some(t) if t != Task::Id => Ok(t),
        _ => Err(format!("unknown anomaly task {s:?}")),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Missing(_) => 3,
        Error::Numerical { .. } | Error::Convergence(_) => 4,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match run(cli.cmd, exec) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Loads a config and applies a seed override; the override is appended to the
/// archived text so the hash changes with it.
fn load_config(path: &Path, seed: Option<u64>) -> Result<(RunConfig, String, String)> {
    let mut loaded = RunConfig::load(path)?;
    if let Some(s) = seed {
        loaded.config.seed = s;
        loaded.text.push_str(&format!("\n# seed override: {s}\n"));
        loaded.hash = crate::config::config_hash(&loaded.text);
    }
    Ok((loaded.config, loaded.text, loaded.hash))
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.tsv");
    PathBuf::from(s)
}

fn save(out: &Path, model: &crate::vqamodel::Model, meta: &CheckpointMeta, log: &TrainLog) -> Result<()> {
    write_checkpoint(out, model, meta)?;
    log.write(&log_path(out))
}

fn run(cmd: Cmd, exec: Exec) -> Result<()> {
    match cmd {
        Cmd::Gen { config, out, seed } => {
            let (cfg, _, hash) = load_config(&config, seed)?;
            let data = generate(&cfg, exec)?;
            write_data(&out, &data, &hash)?;
            println!("wrote {} datasets to {} (config {hash})", data.len(), out.display());
        }
        Cmd::Train { config, data, out, seed } => {
            let (cfg, text, hash) = load_config(&config, seed)?;
            let files = read_data(&data, &training_files(&TrainConfig { method: Method::Base, ..cfg.train.clone() }))?;
            let (model, log) = train_stage(&cfg, &files, exec)?;
            save(&out, &model, &CheckpointMeta { seed: cfg.seed, config_hash: hash.clone(), config_text: text }, &log)?;
            let acc = log.rows.iter().filter_map(|r| r.val_accuracy).fold(0.0, f64::max);
            println!("trained {} (best val accuracy {acc:.4}, config {hash})", out.display());
        }
        Cmd::Finetune { method, model, anomalies, out, lambda, sources } => {
            let (base, meta) = read_checkpoint(&model)?;
            let mut cfg = RunConfig::parse(&meta.config_text)?.config;
            cfg.seed = meta.seed;
            let mut tc = TrainConfig { method, ..cfg.finetune.clone() };
            if let Some(l) = lambda {
                tc.lambda = l;
            }
            if let Some(s) = sources {
                tc.sources = s;
                tc.source_weights.clear();
            }
            tc.validate()?;
            let files = read_data(&anomalies, &training_files(&tc))?;
            let (tuned, log) = finetune_stage(&cfg, &tc, base, &files, exec)?;
            let sources: Vec<String> = tc.sources.iter().map(|t| t.to_string()).collect();
            let note = format!("# finetune: method={} lambda={} sources={}\n", method.name(), tc.lambda, sources.join(","));
            let sep = if meta.config_text.ends_with('\n') { "" } else { "\n" };
            let meta = CheckpointMeta { config_text: format!("{}{sep}{note}", meta.config_text), ..meta };
            save(&out, &tuned, &meta, &log)?;
            println!("fine-tuned {} with {} (config {})", out.display(), method.name(), meta.config_hash);
        }
        Cmd::Eval { config, models, out, data } => {
            let loaded = RunConfig::load(&config)?;
            let dir = data.unwrap_or_else(|| loaded.config.eval.data_dir.clone());
            let spec = matrix_spec(&loaded.config, &loaded.hash, &dir, &models, Some(out.clone()));
            let table = run_matrix(&spec, exec)?;
            println!("wrote {} AUROC rows to {} (config {})", table.auroc.len(), out.display(), loaded.hash);
        }
        Cmd::Report { input } => {
            let table = ResultTable::read(&input)?;
            println!("results for config {}", table.config_hash);
            print!("{}", table.render());
        }
        Cmd::VerifyTheorem1 { k, trials, tol, seed } => {
            let r = verify_theorem1(k, trials, tol, seed, exec)?;
            println!("K={} trials={} max_deviation={:.3e} optimum={:.6}", r.k, r.trials, r.max_deviation, r.optimum);
        }
    }
    Ok(())
}
