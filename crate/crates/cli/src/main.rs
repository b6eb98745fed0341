//! `idac train | eval | diag`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 training
//! divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use idac::diag::{run_diag, DiagMode};
use idac::envs::make_env;
use idac::trainer::{evaluate, load_checkpoint, rng_stream, run, write_text, TrainerConfig};
use idac::IdacError;

#[derive(Parser)]
#[command(name = "idac", version, about = "Implicit distributional actor-critic on small analytic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `trainer.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<out_dir>/<run_id>` from the file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with the mean-action protocol.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 5)]
        rollouts: usize,
        /// Print one JSON object instead of text.
        #[arg(long)]
        json: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a diagnostic CSV for a checkpoint.
    Diag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, value_parser = parse_mode)]
        mode: DiagMode,
        /// Steps taken with the mean action before probing.
        #[arg(long, default_value_t = 0)]
        state_index: usize,
        /// Defaults to the run's `diag/` directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<DiagMode, String> {
    s.parse::<DiagMode>().map_err(|_| {
        let names: Vec<&str> = DiagMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Top level of a run file. Trainer keys live under `[trainer]`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfigFile {
    run_id: String,
    out_dir: PathBuf,
    trainer: TrainerConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            run_id: "run".into(),
            out_dir: PathBuf::from("runs"),
            trainer: TrainerConfig::default(),
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl From<IdacError> for Failure {
    fn from(e: IdacError) -> Self {
        let code = if e.is_divergence() { 2 } else { 1 };
        Failure { code, message: e.to_string() }
    }
}

fn config_error(message: String) -> Failure {
    Failure { code: 1, message }
}

fn load_run_file(path: &Path) -> Result<RunConfigFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let file: RunConfigFile = toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    file.trainer.validate()?;
    Ok(file)
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut file = load_run_file(config)?;
    if let Some(seed) = seed {
        file.trainer.seed = seed;
    }
    let dir = out.unwrap_or_else(|| file.out_dir.join(&file.run_id));
    std::fs::create_dir_all(&dir).map_err(IdacError::from)?;
    let snapshot = toml::to_string(&file).map_err(|e| config_error(format!("cannot write config snapshot: {e}")))?;
    write_text(&dir.join("config.toml"), &snapshot)?;
    eprintln!(
        "training {} on {} for {} steps, seed {} -> {}",
        file.run_id,
        file.trainer.env,
        file.trainer.total_steps,
        file.trainer.seed,
        dir.display()
    );
    let summary = run(file.trainer, Some(&dir))?;
    if let Some(last) = summary.metrics.last() {
        eprintln!(
            "step {}: eval return {:.4} ± {:.4}, alpha {:.4}",
            last.step, last.eval_return_mean, last.eval_return_std, last.alpha
        );
    }
    if let Some(path) = summary.final_checkpoint {
        eprintln!("final checkpoint {}", path.display());
    }
    Ok(())
}

fn eval(ckpt: &Path, env: &str, rollouts: usize, json: bool, seed: u64) -> Result<(), Failure> {
    if rollouts == 0 {
        return Err(config_error("--rollouts must be at least 1".into()));
    }
    let checkpoint = load_checkpoint(ckpt)?;
    let mut setup = rng_stream(seed, 0);
    let mut environment = make_env(env, &checkpoint.config.env_options, setup.next_u64())?;
    let spec = environment.spec();
    let actor = &checkpoint.agent.actor;
    if spec.state_dim != actor.state_dim() || spec.action_dim != actor.action_dim() {
        return Err(config_error(format!(
            "checkpoint was trained on {} and does not fit {env}",
            checkpoint.env_spec.name
        )));
    }
    let (mean, std) = evaluate(actor, environment.as_mut(), rollouts, &mut rng_stream(seed, 3))?;
    if json {
        let line = serde_json::json!({
            "env": env,
            "step": checkpoint.step,
            "rollouts": rollouts,
            "mean": mean,
            "std": std,
        });
        println!("{line}");
    } else {
        println!("{mean} ± {std}");
    }
    Ok(())
}

/// `<run>/checkpoints/x.json` maps to `<run>/diag`.
fn default_diag_dir(ckpt: &Path) -> PathBuf {
    let parent = ckpt.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(name) if name == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).join("diag"),
        _ => parent.join("diag"),
    }
}

fn diag(ckpt: &Path, env: &str, mode: DiagMode, state_index: usize, out: Option<PathBuf>, seed: u64) -> Result<(), Failure> {
    let checkpoint = load_checkpoint(ckpt)?;
    let dir = out.unwrap_or_else(|| default_diag_dir(ckpt));
    for path in run_diag(&checkpoint, env, mode, state_index, seed, &dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::Eval {
            ckpt,
            env,
            rollouts,
            json,
            seed,
        } => eval(&ckpt, &env, rollouts, json, seed),
        Command::Diag {
            ckpt,
            env,
            mode,
            state_index,
            out,
            seed,
        } => diag(&ckpt, &env, mode, state_index, out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
