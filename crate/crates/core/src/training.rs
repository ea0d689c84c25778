//! Staged training of the nowcasting models.
//!
//! Losses are mean squared errors in network space (`ln(1 + R) / scale`).
//! Stage MF fits the motion network alone, stage AF fits the source-sink
//! network under a frozen motion network, and stage JOINT fine-tunes both.
//! The baselines train their single network under an AF-style plan.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advection::{divergence_penalty, Warp};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, ParamSet, Tensor, Var};
use crate::dataset::{Corpus, Subset};
use crate::error::{Error, Result};
use crate::nets::{
    predict_motion_graph, rainnet_step_graph, residual_step_graph, Model, ModelConfig, ModelKind,
    Normalization, StepVars,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.1,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    /// Weights strictly inside (0, 1).
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("beta", beta), ("gamma", gamma)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(LossWeights { beta, gamma })
    }

    /// Weights on the closed interval [0, 1], for ablations at the limits.
    pub fn ablation(beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("beta", beta), ("gamma", gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(LossWeights { beta, gamma })
    }

    pub fn is_interior(&self) -> bool {
        self.beta > 0.0 && self.beta < 1.0 && self.gamma > 0.0 && self.gamma < 1.0
    }

    /// `(1 - β) L_MF + β L_PI`.
    pub fn stage1(&self, l_mf: f64, l_pi: f64) -> f64 {
        (1.0 - self.beta) * l_mf + self.beta * l_pi
    }

    /// `(1 - β)((1 - γ) L_AF + γ L_MF) + β L_PI`.
    pub fn stage3(&self, l_af: f64, l_mf: f64, l_pi: f64) -> f64 {
        (1.0 - self.beta) * ((1.0 - self.gamma) * l_af + self.gamma * l_mf) + self.beta * l_pi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mf,
    Af,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Mf => "mf",
            Stage::Af => "af",
            Stage::Joint => "joint",
        }
    }

    pub fn trains_motion(self) -> bool {
        matches!(self, Stage::Mf | Stage::Joint)
    }

    pub fn trains_residual(self) -> bool {
        matches!(self, Stage::Af | Stage::Joint)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(Stage::Mf),
            "af" => Ok(Stage::Af),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::Config(format!(
                "unknown stage {other:?} (expected mf, af or joint)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl StagePlan {
    pub fn new(stage: Stage, epochs: usize) -> Self {
        StagePlan {
            stage,
            epochs,
            lr: if stage == Stage::Joint { 1e-4 } else { 1e-3 },
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub stages: Vec<StagePlan>,
    pub batch_size: usize,
    pub seed: u64,
    /// Caps the batches per epoch; `None` uses the whole training subset.
    pub max_batches: Option<usize>,
    /// One joint stage from scratch instead of the staged schedule.
    pub single_stage: bool,
    /// Pool the motion loss over all `n` one-step pairs, including the pair
    /// ending at the target; otherwise over the `n - 1` pairs among inputs.
    pub mf_include_target: bool,
    /// Steps of recursive rollout in the source-sink losses.
    pub rollout_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            stages: vec![
                StagePlan::new(Stage::Mf, 30),
                StagePlan::new(Stage::Af, 30),
                StagePlan::new(Stage::Joint, 15),
            ],
            batch_size: 4,
            seed: 0,
            max_batches: None,
            single_stage: false,
            mf_include_target: true,
            rollout_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("no training stages".into()));
        }
        if !(1..=6).contains(&self.rollout_steps) {
            return Err(Error::Config("rollout steps must lie in 1..=6".into()));
        }
        for w in self.stages.windows(2) {
            if w[0].stage >= w[1].stage {
                return Err(Error::Config(format!(
                    "stage {} cannot follow {}; the order is mf, af, joint",
                    w[1].stage.name(),
                    w[0].stage.name()
                )));
            }
        }
        for p in &self.stages {
            if !(p.lr > 0.0) {
                return Err(Error::Config("learning rates must be positive".into()));
            }
            if self.model.kind != ModelKind::Lupin && p.stage != Stage::Af {
                return Err(Error::Config(format!(
                    "{} trains a single network; only stage af applies",
                    self.model.kind
                )));
            }
        }
        if self.single_stage && (self.stages.len() != 1 || self.stages[0].stage != Stage::Joint) {
            return Err(Error::Config("single-stage training runs exactly one joint stage".into()));
        }
        Ok(())
    }

    /// Schedule for the baselines: one AF-style stage as long as the
    /// learned-motion model's AF and JOINT stages together.
    pub fn for_baseline(&self, kind: ModelKind) -> TrainConfig {
        let epochs = self
            .stages
            .iter()
            .filter(|p| p.stage != Stage::Mf)
            .map(|p| p.epochs)
            .sum::<usize>()
            .max(1);
        let patience = self.stages.iter().map(|p| p.patience).max().unwrap_or(10);
        TrainConfig {
            model: ModelConfig {
                kind,
                ..self.model.clone()
            },
            stages: vec![StagePlan {
                patience,
                ..StagePlan::new(Stage::Af, epochs)
            }],
            single_stage: false,
            ..self.clone()
        }
    }
}

/// Loss terms of one batch; absent terms are not part of the stage objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub l_mf: Option<f64>,
    pub l_pi: Option<f64>,
    pub l_af: Option<f64>,
}

impl Metrics {
    fn scaled_add(&mut self, other: &Metrics, w: f64) {
        self.loss += w * other.loss;
        let add = |a: &mut Option<f64>, b: Option<f64>| {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + w * b);
            }
        };
        add(&mut self.l_mf, other.l_mf);
        add(&mut self.l_pi, other.l_pi);
        add(&mut self.l_af, other.l_af);
    }
}

/// Criterion `C(ξ¹(Ψ_n, u), Ψ_{n+1})`: the last input moved one step.
pub fn loss_naive(g: &mut Graph<f32>, motion: Var, inputs: Var, target: Var) -> Result<Var> {
    let n = g.shape(inputs)[1];
    let last = g.channels(inputs, n - 1, 1)?;
    let warp = Warp::new(g, motion)?;
    let moved = warp.step(g, last)?;
    g.mse(moved, target)
}

/// Sum over one-step pairs of `C(ξ¹(Ψ_t, u), Ψ_{t+1})` under a single motion.
/// With `include_target`, the pairs run over all `n` inputs with `target` as
/// the successor of the last; otherwise over the `n - 1` pairs among inputs.
pub fn loss_mf(g: &mut Graph<f32>, motion: Var, inputs: Var, target: Var, include_target: bool) -> Result<Var> {
    let n = g.shape(inputs)[1];
    let warp = Warp::new(g, motion)?;
    let (src, next, pairs) = if include_target {
        let later = g.channels(inputs, 1, n - 1)?;
        (inputs, g.concat(&[later, target])?, n)
    } else {
        (g.channels(inputs, 0, n - 1)?, g.channels(inputs, 1, n - 1)?, n - 1)
    };
    let moved = warp.step(g, src)?;
    let m = g.mse(moved, next)?;
    Ok(g.mul_scalar(m, pairs as f32))
}

/// Batch of windows split into inputs and one-step targets.
#[derive(Clone, Debug)]
pub struct Batch {
    /// (B, window + rollout_steps, H, W) in network space.
    pub frames: Tensor<f32>,
    /// Optical-flow motion for the optical-flow model, (B, 2, H, W).
    pub motion: Option<Tensor<f32>>,
}

struct Objective {
    loss: Var,
    metrics: Metrics,
}

/// Builds the stage objective for a batch on `g`.
fn objective(
    g: &mut Graph<f32>,
    cfg: &TrainConfig,
    stage: Stage,
    mv: &[Var],
    rv: &[Var],
    batch: &Batch,
) -> Result<Objective> {
    let model = &cfg.model;
    let n = model.window;
    let frames = g.constant(batch.frames.clone());
    let inputs = g.channels(frames, 0, n)?;
    let target = g.channels(frames, n, 1)?;
    let w = cfg.weights;
    let value = |g: &Graph<f32>, v: Var| g.scalar_value(v) as f64;

    if model.kind == ModelKind::Lupin && stage == Stage::Mf {
        let u = predict_motion_graph(g, model, mv, inputs)?;
        let l_mf = loss_mf(g, u, inputs, target, cfg.mf_include_target)?;
        let l_pi = divergence_penalty(g, u, model.dx_km)?;
        let a = g.mul_scalar(l_mf, (1.0 - w.beta) as f32);
        let b = g.mul_scalar(l_pi, w.beta as f32);
        let loss = g.add(a, b)?;
        let metrics = Metrics {
            loss: value(g, loss),
            l_mf: Some(value(g, l_mf)),
            l_pi: Some(value(g, l_pi)),
            l_af: None,
        };
        return Ok(Objective { loss, metrics });
    }

    // Source-sink objective, optionally over a recursive rollout.
    let steps = cfg.rollout_steps;
    let mut window = inputs;
    let mut first_motion = None;
    let fixed = batch.motion.as_ref().map(|m| g.constant(m.clone()));
    let mut l_af = None;
    for k in 0..steps {
        let out: StepVars = match model.kind {
            ModelKind::Rainnet => rainnet_step_graph(g, model, rv, window)?,
            ModelKind::Lcnn => {
                let m = fixed.ok_or_else(|| Error::invalid("optical-flow batch lacks motion"))?;
                residual_step_graph(g, model, rv, window, m)?
            }
            ModelKind::Lupin => {
                let u = predict_motion_graph(g, model, mv, window)?;
                residual_step_graph(g, model, rv, window, u)?
            }
        };
        if k == 0 {
            first_motion = out.motion;
        }
        let tk = g.channels(frames, n + k, 1)?;
        let e = g.mse(out.nowcast, tk)?;
        l_af = Some(match l_af {
            None => e,
            Some(acc) => g.add(acc, e)?,
        });
        if k + 1 < steps {
            let tail = g.channels(window, 1, n - 1)?;
            window = g.concat(&[tail, out.nowcast])?;
        }
    }
    let l_af = g.mul_scalar(l_af.expect("at least one step"), 1.0 / steps as f32);

    if model.kind == ModelKind::Lupin && stage == Stage::Joint {
        let u = first_motion.expect("learned motion");
        let l_mf = loss_mf(g, u, inputs, target, cfg.mf_include_target)?;
        let l_pi = divergence_penalty(g, u, model.dx_km)?;
        let a = g.mul_scalar(l_af, ((1.0 - w.beta) * (1.0 - w.gamma)) as f32);
        let b = g.mul_scalar(l_mf, ((1.0 - w.beta) * w.gamma) as f32);
        let c = g.mul_scalar(l_pi, w.beta as f32);
        let ab = g.add(a, b)?;
        let loss = g.add(ab, c)?;
        let metrics = Metrics {
            loss: value(g, loss),
            l_mf: Some(value(g, l_mf)),
            l_pi: Some(value(g, l_pi)),
            l_af: Some(value(g, l_af)),
        };
        return Ok(Objective { loss, metrics });
    }
    let metrics = Metrics {
        loss: value(g, l_af),
        l_af: Some(value(g, l_af)),
        ..Metrics::default()
    };
    Ok(Objective { loss: l_af, metrics })
}

/// Model parameters with their optimizer states.
pub struct TrainState {
    pub model: Model,
    pub adam_motion: AdamState<f32>,
    pub adam_residual: AdamState<f32>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        TrainState {
            adam_motion: AdamState::new(&model.motion_net),
            adam_residual: AdamState::new(&model.residual_net),
            model,
        }
    }
}

fn nonzero_grad(g: &Graph<f32>, vars: &[Var], params: &ParamSet<f32>) -> Option<(String, f64)> {
    vars.iter().zip(params.iter()).find_map(|(&v, p)| {
        g.grad(v)
            .map(|t| t.norm())
            .filter(|&n| n != 0.0)
            .map(|n| (p.name.clone(), n))
    })
}

/// Forward and backward pass of one batch; returns metrics and gradients
/// `(motion, residual)` for the networks the stage trains.
pub fn compute_gradients(
    cfg: &TrainConfig,
    stage: Stage,
    model: &Model,
    batch: &Batch,
) -> Result<(Metrics, Option<Vec<Tensor<f32>>>, Option<Vec<Tensor<f32>>>)> {
    let mut g = Graph::new();
    let mv = g.bind(&model.motion_net, stage.trains_motion());
    let rv = g.bind(&model.residual_net, stage.trains_residual());
    let obj = objective(&mut g, cfg, stage, &mv, &rv, batch)?;
    if !obj.metrics.loss.is_finite() {
        return Err(Error::NanLoss {
            stage: stage.name().into(),
            step: 0,
            detail: format!("{:?}", obj.metrics),
        });
    }
    g.backward(obj.loss)?;
    if !stage.trains_motion() {
        if let Some((name, norm)) = nonzero_grad(&g, &mv, &model.motion_net) {
            return Err(Error::FrozenGradient { name, norm });
        }
    }
    let grads = |vars: &[Var]| vars.iter().map(|&v| g.grad_or_zeros(v)).collect::<Vec<_>>();
    let gm = stage.trains_motion().then(|| grads(&mv));
    let gr = stage.trains_residual().then(|| grads(&rv));
    Ok((obj.metrics, gm, gr))
}

/// One optimizer step of `stage` on `batch`.
pub fn train_step(
    cfg: &TrainConfig,
    stage: Stage,
    lr: f64,
    state: &mut TrainState,
    batch: &Batch,
    step: usize,
) -> Result<Metrics> {
    let (metrics, gm, gr) = compute_gradients(cfg, stage, &state.model, batch).map_err(|e| match e {
        Error::NanLoss { stage, detail, .. } => Error::NanLoss { stage, step, detail },
        other => other,
    })?;
    let adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    if let Some(gm) = gm {
        adam_step(&mut state.model.motion_net, &gm, &mut state.adam_motion, &adam)?;
    }
    if let Some(gr) = gr {
        adam_step(&mut state.model.residual_net, &gr, &mut state.adam_residual, &adam)?;
    }
    Ok(metrics)
}

pub fn stage1_step(cfg: &TrainConfig, state: &mut TrainState, batch: &Batch, lr: f64) -> Result<Metrics> {
    train_step(cfg, Stage::Mf, lr, state, batch, 0)
}

pub fn stage2_step(cfg: &TrainConfig, state: &mut TrainState, batch: &Batch, lr: f64) -> Result<Metrics> {
    train_step(cfg, Stage::Af, lr, state, batch, 0)
}

pub fn stage3_step(cfg: &TrainConfig, state: &mut TrainState, batch: &Batch, lr: f64) -> Result<Metrics> {
    train_step(cfg, Stage::Joint, lr, state, batch, 0)
}

/// Stage objective without a parameter update.
pub fn evaluate_objective(cfg: &TrainConfig, stage: Stage, model: &Model, batch: &Batch) -> Result<Metrics> {
    let mut g = Graph::new();
    let mv = g.bind(&model.motion_net, false);
    let rv = g.bind(&model.residual_net, false);
    Ok(objective(&mut g, cfg, stage, &mv, &rv, batch)?.metrics)
}

/// Assembles network-space batches from a subset, caching optical flow.
pub struct BatchSource<'a> {
    subset: &'a Subset,
    norm: Normalization,
    frames: usize,
    flow_model: Option<&'a Model>,
    flow_cache: HashMap<usize, Tensor<f32>>,
}

impl<'a> BatchSource<'a> {
    pub fn new(subset: &'a Subset, cfg: &TrainConfig, flow_model: Option<&'a Model>) -> Self {
        BatchSource {
            subset,
            norm: cfg.model.norm,
            frames: cfg.model.window + cfg.rollout_steps,
            flow_model: flow_model.filter(|m| m.kind() == ModelKind::Lcnn),
            flow_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.subset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset.is_empty()
    }

    pub fn batch(&mut self, samples: &[usize]) -> Result<Batch> {
        let rain = self.subset.frames(samples, 0, self.frames)?;
        let motion = match self.flow_model {
            None => None,
            Some(m) => {
                let n = m.config.window;
                for &i in samples {
                    if !self.flow_cache.contains_key(&i) {
                        let inputs = self.subset.frames(&[i], 0, n)?;
                        self.flow_cache.insert(i, m.optical_flow_rain(&inputs)?);
                    }
                }
                let parts: Vec<&Tensor<f32>> = samples.iter().map(|i| &self.flow_cache[i]).collect();
                Some(Tensor::concat_batch(&parts)?)
            }
        };
        Ok(Batch {
            frames: self.norm.encode(&rain),
            motion,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub model: String,
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub train: Metrics,
    pub validation: Metrics,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub stages: Vec<StageSummary>,
    pub records: Vec<EpochRecord>,
}

fn mean_metrics(
    cfg: &TrainConfig,
    stage: Stage,
    model: &Model,
    source: &mut BatchSource<'_>,
    chunk: usize,
) -> Result<Metrics> {
    let n = source.len();
    let mut acc = Metrics::default();
    if n == 0 {
        return Ok(acc);
    }
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk) {
        let batch = source.batch(part)?;
        let m = evaluate_objective(cfg, stage, model, &batch)?;
        acc.scaled_add(&m, part.len() as f64 / n as f64);
    }
    Ok(acc)
}

/// Output locations of a training run.
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    /// Directory receiving one checkpoint per stage.
    pub out_dir: Option<PathBuf>,
    /// Line-delimited JSON epoch records.
    pub run_file: Option<PathBuf>,
}

/// Runs every stage of `cfg` starting from `init` (or a fresh model),
/// early-stopping each on its validation objective. The parameters a stage
/// starts from compete as epoch 0, so a stage that never improves the
/// validation objective leaves the model unchanged.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, init: Option<Model>, paths: &RunPaths) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Config("training subset is empty".into()));
    }
    let model = match init {
        Some(m) => {
            if m.config.kind != cfg.model.kind {
                return Err(Error::Config(format!(
                    "initial model is {}, configuration trains {}",
                    m.config.kind, cfg.model.kind
                )));
            }
            m
        }
        None => {
            let mut mc = cfg.model.clone();
            mc.norm = Normalization::fit(corpus.train.all_values());
            Model::new(mc, cfg.seed)?
        }
    };
    let mut cfg = cfg.clone();
    cfg.model = model.config.clone();
    let cfg = &cfg;

    if let Some(d) = &paths.out_dir {
        fs::create_dir_all(d)?;
    }
    let mut run_file = match &paths.run_file {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };

    let flow_model = model.clone();
    let mut train_src = BatchSource::new(&corpus.train, cfg, Some(&flow_model));
    let mut val_src = BatchSource::new(&corpus.validation, cfg, Some(&flow_model));
    let mut state = TrainState::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7a11));
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut step = 0usize;
    let started = Instant::now();
    let kind = cfg.model.kind;

    for plan in &cfg.stages {
        let stage = plan.stage;
        let start = if val_src.is_empty() {
            f64::INFINITY
        } else {
            mean_metrics(cfg, stage, &state.model, &mut val_src, 16)?.loss
        };
        let mut best = (start, 0usize, state.model.clone());
        let mut since_best = 0;
        let mut epochs_run = 0;
        for epoch in 1..=plan.epochs {
            let mut order: Vec<usize> = (0..train_src.len()).collect();
            order.shuffle(&mut rng);
            let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            if let Some(mb) = cfg.max_batches {
                batches.truncate(mb);
            }
            let mut train_m = Metrics::default();
            for b in &batches {
                let batch = train_src.batch(b)?;
                step += 1;
                let m = train_step(cfg, stage, plan.lr, &mut state, &batch, step)?;
                train_m.scaled_add(&m, 1.0 / batches.len() as f64);
            }
            let val_m = if val_src.is_empty() {
                train_m
            } else {
                mean_metrics(cfg, stage, &state.model, &mut val_src, 16)?
            };
            epochs_run = epoch;
            let rec = EpochRecord {
                model: kind.name().into(),
                stage: stage.name().into(),
                epoch,
                step,
                train: train_m,
                validation: val_m,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "{} {} epoch {epoch}: train {:.6} val {:.6}",
                kind,
                stage.name(),
                train_m.loss,
                val_m.loss
            );
            if let Some(f) = run_file.as_mut() {
                serde_json::to_writer(&mut *f, &rec)?;
                f.write_all(b"\n")?;
                f.flush()?;
            }
            records.push(rec);
            if val_m.loss < best.0 {
                best = (val_m.loss, epoch, state.model.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= plan.patience {
                    break;
                }
            }
        }
        state.model = best.2;
        let checkpoint = match &paths.out_dir {
            Some(d) => {
                let p = d.join(format!("{}_{}.ckpt", kind.name(), stage.name()));
                state
                    .model
                    .to_checkpoint(Some((&state.adam_motion, &state.adam_residual)))?
                    .save(&p)?;
                Some(p)
            }
            None => None,
        };
        summaries.push(StageSummary {
            stage,
            epochs_run,
            best_epoch: best.1,
            best_validation: best.0,
            checkpoint,
        });
    }
    if let Some(d) = &paths.out_dir {
        state.model.save(d.join(format!("{}.ckpt", kind.name())))?;
    }
    Ok(TrainOutcome {
        model: state.model,
        stages: summaries,
        records,
    })
}

/// Path of the final checkpoint written by [`train`].
pub fn final_checkpoint(out_dir: &Path, kind: ModelKind) -> PathBuf {
    out_dir.join(format!("{}.ckpt", kind.name()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_bounds() {
        assert!(LossWeights::new(0.0, 0.5).is_err());
        assert!(LossWeights::new(0.1, 1.0).is_err());
        assert!(LossWeights::new(0.1, 0.5).is_ok());
        assert!(LossWeights::ablation(0.0, 1.0).is_ok());
        assert!(LossWeights::ablation(-0.1, 0.5).is_err());
    }

    #[test]
    fn stage_order_enforced() {
        let mut cfg = TrainConfig::default();
        cfg.stages = vec![StagePlan::new(Stage::Af, 1), StagePlan::new(Stage::Mf, 1)];
        assert!(cfg.validate().is_err());
        cfg.stages = vec![StagePlan::new(Stage::Mf, 1), StagePlan::new(Stage::Mf, 1)];
        assert!(cfg.validate().is_err());
        cfg.stages = vec![StagePlan::new(Stage::Af, 1), StagePlan::new(Stage::Joint, 1)];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn baselines_only_train_af() {
        let cfg = TrainConfig::default();
        let b = cfg.for_baseline(ModelKind::Rainnet);
        assert_eq!(b.stages.len(), 1);
        assert_eq!(b.stages[0].stage, Stage::Af);
        assert_eq!(b.stages[0].epochs, 45);
        assert!(b.validate().is_ok());
        let mut bad = b.clone();
        bad.stages[0].stage = Stage::Mf;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn composite_weights_are_exact_sums() {
        let w = LossWeights::new(0.1, 0.5).unwrap();
        assert!((w.stage1(2.0, 4.0) - (0.9 * 2.0 + 0.1 * 4.0)).abs() < 1e-15);
        assert!((w.stage3(1.0, 2.0, 4.0) - (0.9 * (0.5 + 1.0) + 0.4)).abs() < 1e-15);
    }
}
