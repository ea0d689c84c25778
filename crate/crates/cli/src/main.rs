use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nowcast::gradcheck::{run_suite, DEFAULT_INSTANCES};
use nowcast::nets::ModelKind;
use nowcast::pipeline::{
    compare_motion, config_keys, evaluate_run, gen_data, load_config, nowcast_file, read_corpus, train_run,
    GenDataConfig, Manifest, MotionKind, StageSelection,
};
use nowcast::synthetic::Preset;
use nowcast::training::{LossWeights, TrainConfig};
use nowcast::verify::EvalOptions;

/// Differentiable Lagrangian precipitation nowcasting.
#[derive(Parser)]
#[command(name = "nowcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known motion and source-sink oracles.
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Forecast from the last frames of a field stack.
    Nowcast(NowcastArgs),
    /// Score trained models on the test subset.
    Evaluate(EvaluateArgs),
    /// Compare motion sources by divergence and extrapolation error.
    CompareMotion(CompareArgs),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    preset: Preset,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid side length in cells.
    #[arg(long)]
    grid: Option<usize>,
    /// Archive length in frames.
    #[arg(long)]
    length: Option<usize>,
    /// JSON or TOML file with generation settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON or TOML training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stage to run: mf, af, joint or all.
    #[arg(long, default_value = "all")]
    stage: StageSelection,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Train every network jointly from scratch in one stage.
    #[arg(long)]
    single_stage: bool,
    /// Model kind: lupin, rainnet or lcnn.
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to continue from (for later stages).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct NowcastArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    leads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Average divergence over the whole interior instead of rainy cells.
    #[arg(long)]
    full_domain: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated list of lk, mf-reg, mf-noreg, zero.
    #[arg(long, value_delimiter = ',', default_value = "lk,mf-reg,mf-noreg")]
    sources: Vec<MotionKind>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training configuration for the motion networks.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-trained motion network, as SOURCE=CKPT.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    full_domain: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for a JSON result file and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

type Sources = Vec<(String, String)>;

fn file_sources(path: Option<&Path>) -> Result<Sources> {
    Ok(match path {
        Some(p) => config_keys(p)?.into_iter().map(|k| (k, "file".to_string())).collect(),
        None => Vec::new(),
    })
}

fn train_config(path: Option<&Path>) -> Result<(TrainConfig, Sources)> {
    let cfg = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    Ok((cfg, file_sources(path)?))
}

fn apply_weights(cfg: &mut TrainConfig, beta: Option<f64>, gamma: Option<f64>, sources: &mut Sources) -> Result<()> {
    if beta.is_some() || gamma.is_some() {
        cfg.weights = LossWeights::new(beta.unwrap_or(cfg.weights.beta), gamma.unwrap_or(cfg.weights.gamma))?;
    }
    if beta.is_some() {
        sources.push(("beta".into(), "cli".into()));
    }
    if gamma.is_some() {
        sources.push(("gamma".into(), "cli".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut cfg: GenDataConfig = match &a.config {
                Some(p) => load_config(p)?,
                None => GenDataConfig::default(),
            };
            cfg.preset = a.preset;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(g) = a.grid {
                cfg.grid = g;
            }
            if let Some(l) = a.length {
                cfg.length = l;
            }
            let s = gen_data(&cfg, &a.out)?;
            println!(
                "{} frames ({} rainy): {} train, {} validation, {} test targets",
                s.frames, s.rainy_frames, s.train, s.validation, s.test
            );
        }
        Command::Train(a) => {
            let (mut cfg, mut sources) = train_config(a.config.as_deref())?;
            apply_weights(&mut cfg, a.beta, a.gamma, &mut sources)?;
            if a.single_stage {
                cfg.single_stage = true;
                sources.push(("single_stage".into(), "cli".into()));
            }
            if let Some(k) = a.model {
                cfg.model.kind = k;
                sources.push(("model.kind".into(), "cli".into()));
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
                sources.push(("seed".into(), "cli".into()));
            }
            let outcome = train_run(&cfg, a.stage, &a.data, &a.out, a.init.as_deref(), sources)?;
            for s in &outcome.stages {
                println!(
                    "stage {}: {} epochs, best validation loss {:.6} at epoch {}",
                    s.stage.name(),
                    s.epochs_run,
                    s.best_validation,
                    s.best_epoch
                );
            }
        }
        Command::Nowcast(a) => {
            if a.leads == 0 {
                bail!("--leads must be at least 1");
            }
            nowcast_file(&a.model, &a.input, a.leads, &a.out)?;
            let manifest_path = a.out.with_extension("manifest.json");
            let cfg = (a.model.display().to_string(), a.input.display().to_string(), a.leads);
            Manifest::new("nowcast", 0, &cfg, Vec::new())?.write_to(&manifest_path)?;
            println!("wrote {} leads to {}", a.leads, a.out.display());
        }
        Command::Evaluate(a) => {
            let opts = EvalOptions {
                rainy_only: !a.full_domain,
                ..EvalOptions::default()
            };
            let reports = evaluate_run(&a.models, &a.data, &a.out, &opts)?;
            for r in &reports {
                let last = r.leads.last().context("empty report")?;
                println!(
                    "{}: lead {} min MSE {:.4}, ETS@5 {}",
                    r.model,
                    last.lead as u32 * r.step_minutes,
                    last.mse,
                    r.ets(last.lead, 5.0).map_or("null".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::CompareMotion(a) => {
            let (mut cfg, mut sources) = train_config(a.config.as_deref())?;
            apply_weights(&mut cfg, a.beta, None, &mut sources)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let mut ckpts = Vec::new();
            for spec in &a.checkpoints {
                let (k, p) = spec
                    .split_once('=')
                    .with_context(|| format!("--checkpoint expects SOURCE=CKPT, got {spec:?}"))?;
                ckpts.push((k.parse::<MotionKind>()?, PathBuf::from(p)));
            }
            let corpus = read_corpus(&a.data)?;
            let opts = EvalOptions {
                rainy_only: !a.full_domain,
                ..EvalOptions::default()
            };
            let cmp = compare_motion(&a.sources, &corpus, &cfg, &ckpts, &opts, Some(&a.out))?;
            for (name, scores) in &cmp.sources {
                let line: Vec<String> = scores
                    .iter()
                    .map(|s| {
                        format!(
                            "{:.4}/{}",
                            s.extrapolation_mse,
                            s.mean_abs_divergence.map_or("null".into(), |d| format!("{d:.4}"))
                        )
                    })
                    .collect();
                println!("{name:<9} mse/|div| by lead: {}", line.join("  "));
            }
        }
        Command::Gradcheck(a) => {
            let results = run_suite(a.instances, a.seed)?;
            for r in &results {
                println!(
                    "{} {:<24} max rel err {:.3e} over {} instances",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.instances
                );
            }
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("gradcheck.json"), serde_json_string(&results)?)?;
                Manifest::new("gradcheck", a.seed, &a.instances, Vec::new())?.write(dir)?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", results.len());
            }
        }
    }
    Ok(())
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
