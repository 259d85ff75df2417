//! `cmivld` experiment runner.
//!
//! Every command takes the same settings: `--config FILE`, repeated
//! `--set key=value`, and a few shortcut flags for common keys. Results go
//! to `<out>/results.jsonl` next to a `run.json` manifest and a `config.txt`
//! snapshot; either can be passed back as `--config` to replay the run.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cmivld::Error;
use serde_json::{json, Value};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "cmivld", version, about = "Calibrated contrastive decoding experiments on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, purifier and held-out scene splits.
    SynthGen(Common),
    /// Train the model on the train split.
    TrainModel(Common),
    /// Train the purifier against a frozen model.
    TrainPurifier(Common),
    /// Caption the held-out split and record every step.
    Decode(Common),
    /// CHAIR scores of held-out captions.
    EvalChair(Common),
    /// Presence-question accuracy on the held-out split.
    EvalPope(Common),
    /// Check the sequence-level factorization on random models.
    OracleCheck(Common),
    /// Compare purifier gradients against finite differences.
    Gradcheck(Common),
    /// CHAIR scores across values of one key.
    Sweep(Common),
    /// List every config key with its default and description.
    Keys,
}

#[derive(Args)]
struct Common {
    /// Config file: `key = value` text or a previous run.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
    /// Run directory for results.jsonl and run.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    n_questions: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    purifier: Option<String>,
    /// Key varied by sweep.
    #[arg(long)]
    param: Option<String>,
    /// Values for sweep, e.g. `0,0.1,...,0.9`.
    #[arg(long)]
    values: Option<String>,
}

impl Common {
    fn shortcuts(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("variant", &self.variant),
            ("lambda", &self.lambda),
            ("gamma", &self.gamma),
            ("delta", &self.delta),
            ("tau", &self.tau),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("sampler", &self.sampler),
            ("order", &self.order),
            ("max_new_tokens", &self.max_new_tokens),
            ("trials", &self.trials),
            ("n_questions", &self.n_questions),
            ("data_dir", &self.data_dir),
            ("model_path", &self.model),
            ("purifier_path", &self.purifier),
            ("sweep_param", &self.param),
            ("sweep_values", &self.values),
        ]
    }

    /// Default, then file, then `--set`, then shortcut flags.
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.set)?;
        for (key, value) in self.shortcuts() {
            if let Some(value) = value {
                cfg.set(key, value)?;
            }
        }
        Ok(cfg)
    }
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| env!("CARGO_PKG_VERSION").to_string())
}

type Runner = fn(&RunConfig, &Path) -> cmivld::Result<Value>;

fn run(name: &str, common: &Common, runner: Runner) -> Result<(), Error> {
    let cfg = common.resolve()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let start = Instant::now();
    let summary = runner(&cfg, &out)?;
    let manifest = json!({
        "command": name,
        "seed": cfg.seed,
        "version": version(),
        "wall_time_seconds": start.elapsed().as_secs_f64(),
        "summary": summary,
        "config": cfg.to_json(),
    });
    let snapshot = out.join("config.txt");
    std::fs::write(&snapshot, cfg.to_text()).map_err(|e| Error::Io {
        path: snapshot,
        source: e,
    })?;
    let path = out.join("run.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::InvalidConfig(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::InvalidConfig(_) => "invalid_config",
        Error::SequenceTooLong { .. } => "sequence_too_long",
        Error::Index(_) => "index",
        Error::EnumerationTooLarge { .. } => "enumeration_too_large",
        Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
        Error::UnsupportedFormat(_) => "unsupported_format",
        Error::Numerical(_) => "numerical",
        Error::Io { .. } => "io",
    }
}

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(3, "invalid_config", e.to_string().trim()),
    };
    let (name, common, runner): (&str, &Common, Runner) = match &cli.command {
        Command::SynthGen(c) => ("synth-gen", c, commands::synth_gen),
        Command::TrainModel(c) => ("train-model", c, commands::train_model),
        Command::TrainPurifier(c) => ("train-purifier", c, commands::train_purifier_cmd),
        Command::Decode(c) => ("decode", c, commands::decode_cmd),
        Command::EvalChair(c) => ("eval-chair", c, commands::eval_chair),
        Command::EvalPope(c) => ("eval-pope", c, commands::eval_pope),
        Command::OracleCheck(c) => ("oracle-check", c, commands::oracle_check),
        Command::Gradcheck(c) => ("gradcheck", c, commands::gradcheck),
        Command::Sweep(c) => ("sweep", c, commands::sweep),
        Command::Keys => {
            let defaults = RunConfig::default().entries();
            for ((key, doc), (_, value)) in RunConfig::KEYS.iter().zip(defaults) {
                println!("{key} = {value}  # {}", doc.trim());
            }
            return ExitCode::SUCCESS;
        }
    };
    match run(name, common, runner) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(exit_code(&e), kind(&e), &e.to_string()),
    }
}
