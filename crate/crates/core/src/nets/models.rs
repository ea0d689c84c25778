use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::unet::UNetConfig;
use crate::advection::{temporal_difference_stacked, to_lagrangian, DEFAULT_MOTION_CAP};
use crate::autodiff::{AdamState, Checkpoint, Graph, ParamSet, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{lucas_kanade_frames, PyramidConfig};

pub const WINDOW: usize = 6;
pub const LEADS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lupin,
    Rainnet,
    Lcnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Lupin, ModelKind::Rainnet, ModelKind::Lcnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lupin => "lupin",
            ModelKind::Rainnet => "rainnet",
            ModelKind::Lcnn => "lcnn",
        }
    }

    pub fn has_motion_net(self) -> bool {
        self == ModelKind::Lupin
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lupin" => Ok(ModelKind::Lupin),
            "rainnet" => Ok(ModelKind::Rainnet),
            "lcnn" => Ok(ModelKind::Lcnn),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected lupin, rainnet or lcnn)"
            ))),
        }
    }
}

/// Maps rain rate to network space: `x = ln(1 + R) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { scale: 1.0 }
    }
}

impl Normalization {
    /// Scale so the largest observed rate maps to 1.
    pub fn fit(rates: impl IntoIterator<Item = f32>) -> Self {
        let max = rates.into_iter().fold(0.0f32, |m, r| m.max(r.max(0.0).ln_1p()));
        Normalization {
            scale: max.max(1e-3),
        }
    }

    pub fn encode_value(&self, r: f32) -> f32 {
        r.max(0.0).ln_1p() / self.scale
    }

    pub fn decode_value(&self, x: f32) -> f32 {
        (x.max(0.0) * self.scale).exp_m1()
    }

    pub fn encode(&self, t: &Tensor<f32>) -> Tensor<f32> {
        t.map(|r| self.encode_value(r))
    }

    pub fn decode(&self, t: &Tensor<f32>) -> Tensor<f32> {
        t.map(|x| self.decode_value(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub window: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub slope: f64,
    /// Largest motion vector length in px/step.
    pub motion_cap: f32,
    pub dx_km: f64,
    pub norm: Normalization,
    pub lk: PyramidConfig,
    /// Zero-initialize the direct-prediction head of the Eulerian baseline.
    pub rainnet_zero_head: bool,
    /// Upper bound of a nowcast in network units, raised per sample to the
    /// largest input value; `None` leaves nowcasts unbounded above.
    pub nowcast_cap: Option<f32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Lupin,
            window: WINDOW,
            depth: 3,
            base_channels: 16,
            slope: 0.1,
            motion_cap: DEFAULT_MOTION_CAP,
            dx_km: 1.0,
            norm: Normalization::default(),
            lk: PyramidConfig::default(),
            rainnet_zero_head: false,
            nowcast_cap: Some(1.0),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("window must be >= 2, got {}", self.window)));
        }
        if !(self.motion_cap > 0.0) {
            return Err(Error::Config("motion cap must be positive".into()));
        }
        if self.nowcast_cap.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("nowcast cap must be positive".into()));
        }
        if !(self.norm.scale > 0.0) {
            return Err(Error::Config("normalization scale must be positive".into()));
        }
        self.motion_unet().validate()?;
        self.lk.validate()
    }

    /// Motion network: `window` frames to 2 displacement channels.
    pub fn motion_unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.window,
            out_channels: 2,
            depth: self.depth,
            base_channels: self.base_channels,
            slope: self.slope,
            zero_head: false,
        }
    }

    /// Residual network: Lagrangian differences to a source-sink field, or
    /// raw frames to the next frame for the Eulerian baseline.
    pub fn residual_unet(&self) -> UNetConfig {
        let (in_channels, zero_head) = match self.kind {
            ModelKind::Rainnet => (self.window, self.rainnet_zero_head),
            _ => (self.window - 1, true),
        };
        UNetConfig {
            in_channels,
            out_channels: 1,
            depth: self.depth,
            base_channels: self.base_channels,
            slope: self.slope,
            zero_head,
        }
    }

    /// Per-component bound `cap / sqrt(2)` keeps the vector length below `cap`.
    fn component_cap(&self) -> f64 {
        self.motion_cap as f64 / std::f64::consts::SQRT_2
    }
}

/// Graph handles of one differentiable step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub nowcast: Var,
    pub motion: Option<Var>,
    pub source: Option<Var>,
    /// Last input moved one step along the motion (Lagrangian persistence).
    pub persistence: Option<Var>,
}

/// Bounded displacement from the motion network.
pub fn predict_motion_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    motion_params: &[Var],
    frames: Var,
) -> Result<Var> {
    let raw = cfg.motion_unet().forward(g, motion_params, frames)?;
    let c = cfg.component_cap();
    let scaled = g.mul_scalar(raw, T::of(1.0 / c));
    let t = g.tanh(scaled);
    Ok(g.mul_scalar(t, T::of(c)))
}

/// Clamps `x` below at zero and above at `max(cap, max(frames))` per sample.
/// Values inside the bounds pass through unchanged.
fn bound_nowcast<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, x: Var, frames: Var) -> Result<Var> {
    let low = g.clamp_min(x, T::zero());
    let Some(cap) = cfg.nowcast_cap else {
        return Ok(low);
    };
    let [b, _, h, w] = g.shape(x);
    let input = g.value(frames);
    let per_sample: Vec<T> = (0..b)
        .map(|i| {
            let n = input.shape()[1] * h * w;
            input.data()[i * n..(i + 1) * n]
                .iter()
                .fold(T::of(cap as f64), |m, &v| if v > m { v } else { m })
        })
        .collect();
    let ceiling = g.constant(Tensor::from_fn([b, 1, h, w], |[i, ..]| per_sample[i]));
    let over = g.sub(low, ceiling)?;
    let excess = g.relu(over);
    g.sub(low, excess)
}

/// Lagrangian residual step shared by the learned-motion and optical-flow models.
pub fn residual_step_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    residual_params: &[Var],
    frames: Var,
    motion: Var,
) -> Result<StepVars> {
    let n = g.shape(frames)[1];
    if n != cfg.window {
        return Err(Error::shape(
            "step",
            format!("expected {} input frames, got {n}", cfg.window),
        ));
    }
    let stack = to_lagrangian(g, frames, motion, n + 1)?;
    let diffs = temporal_difference_stacked(g, &stack)?;
    let source = cfg.residual_unet().forward(g, residual_params, diffs)?;
    let persistence = g.channels(stack.fields, n - 1, 1)?;
    let sum = g.add(persistence, source)?;
    let nowcast = bound_nowcast(g, cfg, sum, frames)?;
    Ok(StepVars {
        nowcast,
        motion: Some(motion),
        source: Some(source),
        persistence: Some(persistence),
    })
}

pub fn lupin_step_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    motion_params: &[Var],
    residual_params: &[Var],
    frames: Var,
) -> Result<StepVars> {
    let motion = predict_motion_graph(g, cfg, motion_params, frames)?;
    residual_step_graph(g, cfg, residual_params, frames, motion)
}

pub fn rainnet_step_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &[Var],
    frames: Var,
) -> Result<StepVars> {
    let out = cfg.residual_unet().forward(g, params, frames)?;
    let nowcast = bound_nowcast(g, cfg, out, frames)?;
    Ok(StepVars {
        nowcast,
        motion: None,
        source: None,
        persistence: None,
    })
}

/// Concrete result of one inference step, in network space.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub nowcast: Tensor<f32>,
    pub motion: Option<Tensor<f32>>,
    pub source: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Empty for models without a learned motion field.
    pub motion_net: ParamSet<f32>,
    pub residual_net: ParamSet<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motion_net = if config.kind.has_motion_net() {
            config.motion_unet().init(&mut rng)?
        } else {
            ParamSet::new()
        };
        let residual_net = config.residual_unet().init(&mut rng)?;
        Ok(Model {
            config,
            motion_net,
            residual_net,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn frames_shape_ok(&self, frames: &Tensor<f32>) -> Result<()> {
        let s = frames.shape();
        if s[1] != self.config.window {
            return Err(Error::shape(
                "nowcast",
                format!("expected {} input frames, got {}", self.config.window, s[1]),
            ));
        }
        self.config.residual_unet().check_input([s[0], self.config.residual_unet().in_channels, s[2], s[3]])
    }

    /// Optical-flow motion (B, 2, H, W) of network-space frames (B, n, H, W).
    pub fn optical_flow(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.optical_flow_rain(&self.config.norm.decode(frames))
    }

    /// Optical-flow motion (B, 2, H, W) of rain-rate frames (B, n, H, W).
    pub fn optical_flow_rain(&self, rain: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [b, n, h, w] = rain.shape();
        let mut out = Vec::with_capacity(b * 2 * h * w);
        for i in 0..b {
            let planes: Vec<&[f32]> = (0..n).map(|c| rain.plane(i, c)).collect();
            let est = lucas_kanade_frames(&planes, h, w, &self.config.lk)?;
            if let Some(msg) = &est.warning {
                log::warn!("sample {i}: {msg}");
            }
            out.extend_from_slice(est.motion.tensor().data());
        }
        Tensor::from_vec([b, 2, h, w], out)
    }

    /// Learned motion (B, 2, H, W) of network-space frames (B, n, H, W).
    pub fn predict_motion(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.kind().has_motion_net() {
            return Err(Error::invalid(format!("{} has no motion network", self.kind())));
        }
        self.frames_shape_ok(frames)?;
        let mut g = Graph::new();
        let mv = g.bind(&self.motion_net, false);
        let x = g.constant(frames.clone());
        let u = predict_motion_graph(&mut g, &self.config, &mv, x)?;
        Ok(g.value(u).clone())
    }

    /// One step on network-space frames. `motion` overrides the motion
    /// source for the Lagrangian models.
    pub fn step(&self, frames: &Tensor<f32>, motion: Option<&Tensor<f32>>) -> Result<StepOutput> {
        self.frames_shape_ok(frames)?;
        let mut g = Graph::new();
        let mv = g.bind(&self.motion_net, false);
        let rv = g.bind(&self.residual_net, false);
        let x = g.constant(frames.clone());
        let cfg = &self.config;
        let out = match (cfg.kind, motion) {
            (ModelKind::Rainnet, _) => rainnet_step_graph(&mut g, cfg, &rv, x)?,
            (_, Some(m)) => {
                let m = g.constant(m.clone());
                residual_step_graph(&mut g, cfg, &rv, x, m)?
            }
            (ModelKind::Lupin, None) => lupin_step_graph(&mut g, cfg, &mv, &rv, x)?,
            (ModelKind::Lcnn, None) => {
                let m = g.constant(self.optical_flow(frames)?);
                residual_step_graph(&mut g, cfg, &rv, x, m)?
            }
        };
        Ok(StepOutput {
            nowcast: g.value(out.nowcast).clone(),
            motion: out.motion.map(|v| g.value(v).clone()),
            source: out.source.map(|v| g.value(v).clone()),
        })
    }

    /// Rolling-window forecast of `leads` steps. The learned-motion model
    /// re-estimates motion every step; the optical-flow model keeps the field
    /// estimated from the observed frames.
    pub fn rollout(&self, frames: &Tensor<f32>, leads: usize) -> Result<Vec<StepOutput>> {
        self.rollout_with(frames, leads, None)
    }

    /// Rollout with an explicit fixed motion field for the optical-flow model.
    pub fn rollout_with(
        &self,
        frames: &Tensor<f32>,
        leads: usize,
        fixed_motion: Option<Tensor<f32>>,
    ) -> Result<Vec<StepOutput>> {
        if leads == 0 {
            return Err(Error::invalid("leads must be >= 1"));
        }
        self.frames_shape_ok(frames)?;
        let fixed = match (self.kind(), fixed_motion) {
            (ModelKind::Lcnn, Some(m)) => Some(m),
            (ModelKind::Lcnn, None) => Some(self.optical_flow(frames)?),
            _ => None,
        };
        let n = self.config.window;
        let mut window = frames.clone();
        let mut out = Vec::with_capacity(leads);
        for _ in 0..leads {
            let step = self.step(&window, fixed.as_ref())?;
            let tail = window.channels(1, n - 1)?;
            window = Tensor::concat_channels(&[&tail, &step.nowcast])?;
            out.push(step);
        }
        Ok(out)
    }

    /// Rollout on rain rates (mm/h), returning rain-rate nowcasts.
    pub fn forecast(&self, rain: &Tensor<f32>, leads: usize) -> Result<Vec<Tensor<f32>>> {
        let x = self.config.norm.encode(rain);
        let fixed = match self.kind() {
            ModelKind::Lcnn => Some(self.optical_flow_rain(rain)?),
            _ => None,
        };
        Ok(self
            .rollout_with(&x, leads, fixed)?
            .into_iter()
            .map(|s| self.config.norm.decode(&s.nowcast))
            .collect())
    }

    pub fn to_checkpoint(&self, optimizer: Option<(&AdamState<f32>, &AdamState<f32>)>) -> Result<Checkpoint> {
        let mut params = ParamSet::new();
        for p in self.motion_net.iter() {
            params.push(format!("mf.{}", p.name), p.value.clone())?;
        }
        for p in self.residual_net.iter() {
            params.push(format!("af.{}", p.name), p.value.clone())?;
        }
        let optimizer = optimizer.map(|(a, b)| AdamState {
            step: a.step.max(b.step),
            m: a.m.iter().chain(&b.m).cloned().collect(),
            v: a.v.iter().chain(&b.v).cloned().collect(),
        });
        Ok(Checkpoint {
            kind: self.kind().name().into(),
            meta: serde_json::to_value(&self.config)?,
            params,
            optimizer,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ckpt.kind.parse()?;
        let config: ModelConfig = serde_json::from_value(ckpt.meta.clone())?;
        if config.kind != kind {
            return Err(Error::Config(format!(
                "checkpoint kind {kind} disagrees with its configuration ({})",
                config.kind
            )));
        }
        let template = Model::new(config.clone(), 0)?;
        let take = |prefix: &str, tpl: &ParamSet<f32>| -> Result<ParamSet<f32>> {
            let mut out = ParamSet::new();
            for p in tpl.iter() {
                let name = format!("{prefix}{}", p.name);
                let found = ckpt
                    .params
                    .by_name(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
                if found.value.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("{name}: {:?} vs {:?}", found.value.shape(), p.value.shape()),
                    ));
                }
                out.push(p.name.clone(), found.value.clone())?;
            }
            Ok(out)
        };
        let expected = template.motion_net.len() + template.residual_net.len();
        if ckpt.params.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {expected}",
                ckpt.params.len()
            )));
        }
        Ok(Model {
            motion_net: take("mf.", &template.motion_net)?,
            residual_net: take("af.", &template.residual_net)?,
            config,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint(None)?.save(path)
    }
}
