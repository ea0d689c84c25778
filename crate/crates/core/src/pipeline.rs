//! File-level workflows behind the command-line tool: data generation,
//! training, evaluation and the motion-field comparison. Every workflow
//! writes a `manifest.json` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::field::{build_split, DatasetSplit, FieldSequence, FilterParams};
use crate::nets::{Model, ModelKind};
use crate::stack::{read_stack, write_stack};
use crate::synthetic::{generate, Preset};
use crate::training::{train, LossWeights, RunPaths, Stage, TrainConfig, TrainOutcome};
use crate::verify::{evaluate_model, motion_fitness, write_motion_csv, write_reports, EvalOptions, MotionLeadScores, MotionSource, ScoreReport};

pub const MANIFEST: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub formats: Vec<String>,
    /// Where each overridden setting came from (`cli` or `file`).
    pub sources: Vec<(String, String)>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C, sources: Vec<(String, String)>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Manifest {
            command: command.into(),
            config_hash: config_hash(&config)?,
            seed,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            formats: vec!["RFSTACK1".into(), "LNCKPT01".into()],
            sources,
            config,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.write_to(&dir.join(MANIFEST))
    }

    /// Writes the manifest to an explicit file path.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?)
    }
}

/// SHA-256 of the compact JSON serialization (object keys sorted).
pub fn config_hash(value: &serde_json::Value) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Parses a configuration file as TOML (`.toml`) or JSON (anything else).
pub fn load_config<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Top-level keys present in a configuration file.
pub fn config_keys(path: &Path) -> Result<Vec<String>> {
    let value: serde_json::Value = if path.extension().is_some_and(|e| e == "toml") {
        let t: toml::Value = load_config(path)?;
        serde_json::to_value(t)?
    } else {
        load_config(path)?
    };
    Ok(value.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub preset: Preset,
    pub grid: usize,
    pub length: usize,
    pub seed: u64,
    pub filter: FilterParams,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            preset: Preset::Mixed,
            grid: 64,
            length: 2400,
            seed: 0,
            filter: FilterParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub frames: usize,
    pub rainy_frames: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Generates a preset archive, splits it and writes the corpus to `out`.
pub fn gen_data(cfg: &GenDataConfig, out: &Path) -> Result<GenSummary> {
    let spec = cfg.preset.spec(cfg.grid, cfg.length, cfg.seed);
    let syn = generate(&spec, cfg.seed)?;
    let filter = FilterParams {
        seed: cfg.seed,
        ..cfg.filter.clone()
    };
    let split = build_split(&syn.sequence, &filter)?;
    let motion: Vec<Vec<f32>> = syn.motion.iter().map(|m| m.tensor().data().to_vec()).collect();
    let corpus = Corpus::from_split(&syn.sequence, Some(&motion), Some(&syn.source), &split)?;
    fs::create_dir_all(out)?;
    corpus.write(out)?;
    write_stack(&syn.sequence, out.join("archive.rfs"))?;
    let mut text = serde_json::to_string_pretty(&split)?;
    text.push('\n');
    fs::write(out.join(SPLIT_FILE), text)?;
    let rainy = syn
        .sequence
        .fields()
        .iter()
        .filter(|f| crate::field::is_rainy_enough(f, filter.pixel_threshold, filter.area_fraction))
        .count();
    let summary = GenSummary {
        frames: syn.sequence.len(),
        rainy_frames: rainy,
        train: split.train.len(),
        validation: split.validation.len(),
        test: split.test.len(),
    };
    Manifest::new("gen-data", cfg.seed, cfg, Vec::new())?.write(out)?;
    Ok(summary)
}

/// Reads a corpus written by [`gen_data`].
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let split: DatasetSplit = serde_json::from_slice(
        &fs::read(dir.join(SPLIT_FILE)).map_err(|e| Error::Config(format!("{}: {e}", dir.join(SPLIT_FILE).display())))?,
    )?;
    Corpus::read(dir, split.lead_count)
}

/// Which stages of the schedule to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageSelection {
    All,
    Only(Stage),
}

impl std::str::FromStr for StageSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StageSelection::All),
            other => Ok(StageSelection::Only(other.parse()?)),
        }
    }
}

/// Training settings after merging defaults, file and command line.
pub fn select_stages(cfg: &TrainConfig, selection: StageSelection) -> Result<TrainConfig> {
    let mut cfg = if cfg.model.kind == ModelKind::Lupin {
        cfg.clone()
    } else {
        cfg.for_baseline(cfg.model.kind)
    };
    if cfg.single_stage {
        let epochs = cfg.stages.iter().map(|p| p.epochs).sum::<usize>().max(1);
        let mut plan = crate::training::StagePlan::new(Stage::Joint, epochs);
        plan.lr = 1e-3;
        cfg.stages = vec![plan];
        return Ok(cfg);
    }
    if let StageSelection::Only(stage) = selection {
        cfg.stages.retain(|p| p.stage == stage);
        if cfg.stages.is_empty() {
            return Err(Error::Config(format!(
                "stage {} is not part of the {} schedule",
                stage.name(),
                cfg.model.kind
            )));
        }
    }
    Ok(cfg)
}

/// Trains on the corpus in `data` and writes checkpoints, the run file and a
/// manifest to `out`.
pub fn train_run(
    cfg: &TrainConfig,
    selection: StageSelection,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    sources: Vec<(String, String)>,
) -> Result<TrainOutcome> {
    let cfg = select_stages(cfg, selection)?;
    cfg.validate()?;
    let corpus = read_corpus(data)?;
    let init = init.map(Model::load).transpose()?;
    if init.is_none() && matches!(selection, StageSelection::Only(s) if s != Stage::Mf) && cfg.model.kind == ModelKind::Lupin {
        log::warn!("training a later stage without --init starts from an untrained motion network");
    }
    let paths = RunPaths {
        out_dir: Some(out.to_path_buf()),
        run_file: Some(out.join(format!("{}_run.jsonl", cfg.model.kind.name()))),
    };
    let outcome = train(&cfg, &corpus, init, &paths)?;
    Manifest::new("train", cfg.seed, &cfg, sources)?.write(out)?;
    Ok(outcome)
}

/// Report name of a checkpoint: its file stem.
pub fn model_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string()
}

/// Evaluates checkpoints on the test subset of `data` and writes reports to `out`.
pub fn evaluate_run(models: &[PathBuf], data: &Path, out: &Path, opts: &EvalOptions) -> Result<Vec<ScoreReport>> {
    if models.is_empty() {
        return Err(Error::Config("no checkpoints to evaluate".into()));
    }
    let corpus = read_corpus(data)?;
    let mut reports = Vec::with_capacity(models.len());
    for p in models {
        if !p.exists() {
            return Err(Error::Config(format!("missing checkpoint {}", p.display())));
        }
        let model = Model::load(p)?;
        let (h, w) = corpus.test.geometry();
        model.frames_shape_ok(&crate::autodiff::Tensor::zeros([1, model.config.window, h, w]))?;
        reports.push(evaluate_model(&model_name(p), &model, &corpus.test, opts)?);
    }
    write_reports(out, &reports)?;
    let names: Vec<String> = models.iter().map(|p| p.display().to_string()).collect();
    Manifest::new("evaluate", 0, &(names, opts), Vec::new())?.write(out)?;
    Ok(reports)
}

/// Motion sources of the comparison study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Lk,
    MfReg,
    MfNoreg,
    Zero,
}

impl MotionKind {
    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Lk => "lk",
            MotionKind::MfReg => "mf-reg",
            MotionKind::MfNoreg => "mf-noreg",
            MotionKind::Zero => "zero",
        }
    }
}

impl std::str::FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lk" => Ok(MotionKind::Lk),
            "mf-reg" => Ok(MotionKind::MfReg),
            "mf-noreg" => Ok(MotionKind::MfNoreg),
            "zero" => Ok(MotionKind::Zero),
            other => Err(Error::Config(format!(
                "unknown motion source {other:?} (expected lk, mf-reg, mf-noreg or zero)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionComparison {
    pub samples: usize,
    pub sources: Vec<(String, Vec<MotionLeadScores>)>,
}

impl MotionComparison {
    pub fn get(&self, name: &str) -> Option<&[MotionLeadScores]> {
        self.sources.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

/// Trains a motion network alone (stage MF) with the given regularization weight.
pub fn train_motion_net(cfg: &TrainConfig, corpus: &Corpus, beta: f64, out: Option<&Path>) -> Result<Model> {
    let mut c = cfg.clone();
    c.model.kind = ModelKind::Lupin;
    c.single_stage = false;
    c.weights = LossWeights::ablation(beta, cfg.weights.gamma)?;
    c.stages.retain(|p| p.stage == Stage::Mf);
    if c.stages.is_empty() {
        c.stages = vec![crate::training::StagePlan::new(Stage::Mf, 30)];
    }
    let paths = RunPaths {
        out_dir: None,
        run_file: out.map(|d| d.join(format!("mf_beta{beta}_run.jsonl"))),
    };
    let model = train(&c, corpus, None, &paths)?.model;
    if let Some(d) = out {
        model.save(d.join(format!("mf_beta{beta}.ckpt")))?;
    }
    Ok(model)
}

/// Mean divergence and extrapolation error by lead for each motion source on
/// the test subset. `checkpoints` supplies trained motion networks for the
/// `mf-*` sources; missing ones are trained from `cfg` (β = cfg.weights.beta
/// for `mf-reg`, β = 0 for `mf-noreg`).
pub fn compare_motion(
    sources: &[MotionKind],
    corpus: &Corpus,
    cfg: &TrainConfig,
    checkpoints: &[(MotionKind, PathBuf)],
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<MotionComparison> {
    let mut results = Vec::new();
    let dx = cfg.model.dx_km;
    let window = cfg.model.window;
    for &kind in sources {
        let scores = match kind {
            MotionKind::Zero => motion_fitness(&MotionSource::Zero, &corpus.test, window, dx, opts)?,
            MotionKind::Lk => motion_fitness(&MotionSource::OpticalFlow(&cfg.model.lk), &corpus.test, window, dx, opts)?,
            MotionKind::MfReg | MotionKind::MfNoreg => {
                let model = match checkpoints.iter().find(|(k, _)| *k == kind) {
                    Some((_, p)) => Model::load(p)?,
                    None => {
                        let beta = if kind == MotionKind::MfReg { cfg.weights.beta } else { 0.0 };
                        train_motion_net(cfg, corpus, beta, out)?
                    }
                };
                motion_fitness(&MotionSource::Learned(&model), &corpus.test, window, model.config.dx_km, opts)?
            }
        };
        results.push((kind.name().to_string(), scores));
    }
    let cmp = MotionComparison {
        samples: corpus.test.len(),
        sources: results,
    };
    if let Some(d) = out {
        fs::create_dir_all(d)?;
        write_motion_csv(&d.join("motion.csv"), opts.step_minutes, cmp.samples, &cmp.sources)?;
        let names: Vec<&str> = sources.iter().map(|k| k.name()).collect();
        Manifest::new("compare-motion", cfg.seed, &(names, cfg, opts), Vec::new())?.write(d)?;
    }
    Ok(cmp)
}

/// Nowcast of the last `window` frames of a stack, returned as a stack of
/// `leads` frames continuing its timestamps.
pub fn nowcast_stack(model: &Model, input: &FieldSequence, leads: usize) -> Result<FieldSequence> {
    if leads == 0 {
        return Err(Error::invalid("leads must be >= 1"));
    }
    let n = model.config.window;
    if input.len() < n {
        return Err(Error::ArchiveTooShort {
            frames: input.len(),
            needed: n,
        });
    }
    let (h, w) = input.geometry().expect("non-empty");
    let recent = input.slice(input.len() - n, input.len())?;
    let data: Vec<f32> = recent.fields().iter().flat_map(|f| f.values().iter().copied()).collect();
    let x = crate::autodiff::Tensor::from_vec([1, n, h, w], data)?;
    let preds = model.forecast(&x, leads)?;
    let last = input.get(input.len() - 1);
    let frames = preds.into_iter().map(|t| t.into_vec()).collect();
    FieldSequence::from_frames(h, w, frames, last.dx_km, last.timestamp + 1)
}

pub fn nowcast_file(model: &Path, input: &Path, leads: usize, out: &Path) -> Result<()> {
    let model = Model::load(model)?;
    let seq = read_stack(input)?;
    let pred = nowcast_stack(&model, &seq, leads)?;
    write_stack(&pred, out)
}
