//! Forecast verification in rain-rate space (mm/h).
//!
//! Continuous scores (MSE, ME) and contingency tables are pooled over every
//! cell of every test sample at a given lead time. Categorical scores whose
//! denominator is zero are reported as `None` and written as `null`.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advection::{divergence_tensor, extrapolate_tensor};
use crate::autodiff::Tensor;
use crate::dataset::Subset;
use crate::error::{Error, Result};
use crate::flow::PyramidConfig;
use crate::nets::{Model, Normalization};

pub const THRESHOLDS: [f32; 3] = [1.0, 5.0, 10.0];
pub const DEFAULT_LEADS: usize = 6;
pub use crate::field::STEP_MINUTES;

fn same_len(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{op}: prediction has {} cells, target {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(pred: &[f32], target: &[f32]) -> Result<f64> {
    same_len("mse", pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(s / pred.len().max(1) as f64)
}

/// Mean error `mean(pred - target)`; positive means overforecasting.
pub fn me(pred: &[f32], target: &[f32]) -> Result<f64> {
    same_len("me", pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(&p, &t)| p as f64 - t as f64).sum();
    Ok(s / pred.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Counts,
    pub threshold: f32,
    pub lead: usize,
}

impl ContingencyTable {
    pub fn new(threshold: f32, lead: usize) -> Self {
        ContingencyTable {
            counts: Counts::default(),
            threshold,
            lead,
        }
    }

    /// Table of a single prediction/target pair.
    pub fn from_fields(pred: &[f32], target: &[f32], threshold: f32, lead: usize) -> Result<Self> {
        let mut t = Self::new(threshold, lead);
        t.accumulate(pred, target)?;
        Ok(t)
    }

    /// Adds the cells of another pair to the table.
    pub fn accumulate(&mut self, pred: &[f32], target: &[f32]) -> Result<()> {
        same_len("contingency", pred, target)?;
        let th = self.threshold;
        let c = &mut self.counts;
        for (&p, &t) in pred.iter().zip(target) {
            match (p >= th, t >= th) {
                (true, true) => c.hits += 1,
                (false, true) => c.misses += 1,
                (true, false) => c.false_alarms += 1,
                (false, false) => c.correct_negatives += 1,
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        let c = self.counts;
        c.hits + c.misses + c.false_alarms + c.correct_negatives
    }

    pub fn precision(&self) -> Option<f64> {
        let c = self.counts;
        ratio(c.hits as f64, (c.hits + c.false_alarms) as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let c = self.counts;
        ratio(c.hits as f64, (c.hits + c.misses) as f64)
    }

    /// Equitable threat score with random hits `(h + m)(h + f) / total`.
    pub fn ets(&self) -> Option<f64> {
        let c = self.counts;
        let total = self.total() as f64;
        if total == 0.0 {
            return None;
        }
        let (h, m, f) = (c.hits as f64, c.misses as f64, c.false_alarms as f64);
        let hr = (h + m) * (h + f) / total;
        ratio(h - hr, h + m + f - hr)
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub table: ContingencyTable,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ets: Option<f64>,
}

impl From<ContingencyTable> for CategoryScores {
    fn from(table: ContingencyTable) -> Self {
        CategoryScores {
            precision: table.precision(),
            recall: table.recall(),
            ets: table.ets(),
            table,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadScores {
    pub lead: usize,
    pub mse: f64,
    pub me: f64,
    pub categories: Vec<CategoryScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionLeadScores {
    pub lead: usize,
    /// Mean |div u| over rainy cells; `None` when no cell qualifies.
    pub mean_abs_divergence: Option<f64>,
    pub extrapolation_mse: f64,
    /// Eulerian persistence MSE at the same lead, for reference.
    pub persistence_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub units: String,
    pub step_minutes: u32,
    pub samples: usize,
    pub leads: Vec<LeadScores>,
    pub motion: Option<Vec<MotionLeadScores>>,
}

impl ScoreReport {
    pub fn lead(&self, lead: usize) -> Option<&LeadScores> {
        self.leads.iter().find(|l| l.lead == lead)
    }

    /// ETS at `threshold` and `lead`.
    pub fn ets(&self, lead: usize, threshold: f32) -> Option<f64> {
        self.lead(lead)?
            .categories
            .iter()
            .find(|c| c.table.threshold == threshold)?
            .ets
    }

    pub fn rows(&self) -> Vec<ScoreRow> {
        let mut out = Vec::new();
        for l in &self.leads {
            let minutes = l.lead as u32 * self.step_minutes;
            let row = |metric: &str, threshold: Option<f32>, value: Option<f64>| ScoreRow {
                model: self.model.clone(),
                lead_minutes: minutes,
                metric: metric.into(),
                threshold,
                value,
            };
            out.push(row("mse", None, Some(l.mse)));
            out.push(row("me", None, Some(l.me)));
            for c in &l.categories {
                let th = Some(c.table.threshold);
                out.push(row("precision", th, c.precision));
                out.push(row("recall", th, c.recall));
                out.push(row("ets", th, c.ets));
            }
        }
        out
    }
}

/// One line of the long-format score table.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub model: String,
    pub lead_minutes: u32,
    pub metric: String,
    pub threshold: Option<f32>,
    pub value: Option<f64>,
}

impl ScoreRow {
    fn record(&self) -> [String; 5] {
        [
            self.model.clone(),
            self.lead_minutes.to_string(),
            self.metric.clone(),
            self.threshold.map(|t| t.to_string()).unwrap_or_default(),
            self.value.map(|v| v.to_string()).unwrap_or_else(|| "null".into()),
        ]
    }
}

pub const CSV_HEADER: [&str; 5] = ["model", "lead_minutes", "metric", "threshold", "value"];

pub fn write_rows(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// Running sums of one lead time.
#[derive(Clone, Debug)]
struct LeadAccumulator {
    sq: f64,
    err: f64,
    cells: u64,
    tables: Vec<ContingencyTable>,
}

impl LeadAccumulator {
    fn new(lead: usize, thresholds: &[f32]) -> Self {
        LeadAccumulator {
            sq: 0.0,
            err: 0.0,
            cells: 0,
            tables: thresholds.iter().map(|&t| ContingencyTable::new(t, lead)).collect(),
        }
    }

    fn add(&mut self, pred: &[f32], target: &[f32]) -> Result<()> {
        same_len("evaluate", pred, target)?;
        for (&p, &t) in pred.iter().zip(target) {
            let d = p as f64 - t as f64;
            self.sq += d * d;
            self.err += d;
        }
        self.cells += pred.len() as u64;
        for t in &mut self.tables {
            t.accumulate(pred, target)?;
        }
        Ok(())
    }

    fn finish(self, lead: usize) -> LeadScores {
        let n = self.cells.max(1) as f64;
        LeadScores {
            lead,
            mse: self.sq / n,
            me: self.err / n,
            categories: self.tables.into_iter().map(CategoryScores::from).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub leads: usize,
    pub thresholds: Vec<f32>,
    pub batch_size: usize,
    pub step_minutes: u32,
    /// Motion metrics over rainy cells only; `false` averages the whole interior.
    pub rainy_only: bool,
    pub rain_threshold: f32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            leads: DEFAULT_LEADS,
            thresholds: THRESHOLDS.to_vec(),
            batch_size: 16,
            step_minutes: STEP_MINUTES,
            rainy_only: true,
            rain_threshold: 0.1,
        }
    }
}

fn check_subset(subset: &Subset, window: usize, leads: usize) -> Result<()> {
    if leads == 0 {
        return Err(Error::invalid("leads must be >= 1"));
    }
    if window + leads > subset.span {
        return Err(Error::invalid(format!(
            "{window} inputs and {leads} leads exceed the {}-frame sample window",
            subset.span
        )));
    }
    Ok(())
}

/// Scores of arbitrary forecasts: `forecast(inputs)` maps rain-rate inputs
/// (B, window, H, W) to one (B, 1, H, W) rain-rate tensor per lead.
pub fn evaluate_with<F>(
    name: &str,
    subset: &Subset,
    window: usize,
    opts: &EvalOptions,
    mut forecast: F,
) -> Result<ScoreReport>
where
    F: FnMut(&Tensor<f32>) -> Result<Vec<Tensor<f32>>>,
{
    check_subset(subset, window, opts.leads)?;
    let mut acc: Vec<LeadAccumulator> = (1..=opts.leads)
        .map(|l| LeadAccumulator::new(l, &opts.thresholds))
        .collect();
    let idx: Vec<usize> = (0..subset.len()).collect();
    for part in idx.chunks(opts.batch_size.max(1)) {
        let inputs = subset.frames(part, 0, window)?;
        let truth = subset.frames(part, window, opts.leads)?;
        let preds = forecast(&inputs)?;
        if preds.len() < opts.leads {
            return Err(Error::invalid(format!(
                "forecast returned {} leads, need {}",
                preds.len(),
                opts.leads
            )));
        }
        for (k, a) in acc.iter_mut().enumerate() {
            a.add(preds[k].data(), truth.channels(k, 1)?.data())?;
        }
    }
    Ok(ScoreReport {
        model: name.into(),
        units: "mm/h".into(),
        step_minutes: opts.step_minutes,
        samples: subset.len(),
        leads: acc.into_iter().enumerate().map(|(k, a)| a.finish(k + 1)).collect(),
        motion: None,
    })
}

/// Rollout scores of a trained model, plus motion metrics when it advects.
pub fn evaluate_model(name: &str, model: &Model, subset: &Subset, opts: &EvalOptions) -> Result<ScoreReport> {
    let mut report = evaluate_with(name, subset, model.config.window, opts, |x| model.forecast(x, opts.leads))?;
    let source = match model.kind() {
        crate::nets::ModelKind::Lupin => Some(MotionSource::Learned(model)),
        crate::nets::ModelKind::Lcnn => Some(MotionSource::OpticalFlow(&model.config.lk)),
        crate::nets::ModelKind::Rainnet => None,
    };
    if let Some(src) = source {
        report.motion = Some(motion_fitness(&src, subset, model.config.window, model.config.dx_km, opts)?);
    }
    Ok(report)
}

/// Where an extrapolation takes its motion from.
pub enum MotionSource<'a> {
    /// No motion: extrapolation reduces to Eulerian persistence.
    Zero,
    /// One optical-flow field per sample, reused at every lead.
    OpticalFlow(&'a PyramidConfig),
    /// A learned motion network, re-run on the shifted window every lead.
    Learned(&'a Model),
}

impl MotionSource<'_> {
    fn initial(&self, rain: &Tensor<f32>) -> Result<Option<Tensor<f32>>> {
        let [b, n, h, w] = rain.shape();
        match self {
            MotionSource::Zero => Ok(Some(Tensor::zeros([b, 2, h, w]))),
            MotionSource::OpticalFlow(cfg) => {
                let mut out = Vec::with_capacity(b * 2 * h * w);
                for i in 0..b {
                    let planes: Vec<&[f32]> = (0..n).map(|c| rain.plane(i, c)).collect();
                    let est = crate::flow::lucas_kanade_frames(&planes, h, w, cfg)?;
                    out.extend_from_slice(est.motion.tensor().data());
                }
                Ok(Some(Tensor::from_vec([b, 2, h, w], out)?))
            }
            MotionSource::Learned(_) => Ok(None),
        }
    }
}

/// Extrapolation skill and smoothness of a motion source: lead `k` compares
/// the last input moved `k` steps against observation `k`, in mm/h.
pub fn motion_fitness(
    source: &MotionSource<'_>,
    subset: &Subset,
    window: usize,
    dx_km: f64,
    opts: &EvalOptions,
) -> Result<Vec<MotionLeadScores>> {
    check_subset(subset, window, opts.leads)?;
    let leads = opts.leads;
    let mut div_sum = vec![0.0f64; leads];
    let mut div_cells = vec![0u64; leads];
    let mut sq = vec![0.0f64; leads];
    let mut sq_pers = vec![0.0f64; leads];
    let mut cells = 0u64;
    let norm: Option<Normalization> = match source {
        MotionSource::Learned(m) => Some(m.config.norm),
        _ => None,
    };
    let idx: Vec<usize> = (0..subset.len()).collect();
    for part in idx.chunks(opts.batch_size.max(1)) {
        let inputs = subset.frames(part, 0, window)?;
        let truth = subset.frames(part, window, leads)?;
        let [b, _, h, w] = inputs.shape();
        let last = inputs.channels(window - 1, 1)?;
        let mask: Vec<bool> = (0..b)
            .flat_map(|i| {
                let plane = last.plane(i, 0);
                (0..h * w).map(move |k| {
                    let (r, c) = (k / w, k % w);
                    let interior = r > 0 && c > 0 && r + 1 < h && c + 1 < w;
                    (!opts.rainy_only || plane[k] >= opts.rain_threshold) && interior
                })
            })
            .collect();
        let fixed = source.initial(&inputs)?;
        let mut moved = last.clone();
        let mut win = norm.map(|n| n.encode(&inputs));
        for k in 0..leads {
            let u = match (&fixed, source) {
                (Some(u), _) => u.clone(),
                (None, MotionSource::Learned(m)) => m.predict_motion(win.as_ref().expect("learned window"))?,
                (None, _) => unreachable!("only learned sources regenerate motion"),
            };
            moved = extrapolate_tensor(&moved, &u, 1)?;
            if let (Some(wn), Some(n)) = (win.as_mut(), norm) {
                let tail = wn.channels(1, window - 1)?;
                *wn = Tensor::concat_channels(&[&tail, &n.encode(&moved)])?;
            }
            let div = divergence_tensor(&u, dx_km)?;
            for (d, &m) in div.data().iter().zip(&mask) {
                if m {
                    div_sum[k] += d.abs() as f64;
                    div_cells[k] += 1;
                }
            }
            let obs = truth.channels(k, 1)?;
            for ((&p, &t), &l) in moved.data().iter().zip(obs.data()).zip(last.data()) {
                sq[k] += (p as f64 - t as f64).powi(2);
                sq_pers[k] += (l as f64 - t as f64).powi(2);
            }
        }
        cells += (b * h * w) as u64;
    }
    let n = cells.max(1) as f64;
    Ok((0..leads)
        .map(|k| MotionLeadScores {
            lead: k + 1,
            mean_abs_divergence: (div_cells[k] > 0).then(|| div_sum[k] / div_cells[k] as f64),
            extrapolation_mse: sq[k] / n,
            persistence_mse: sq_pers[k] / n,
        })
        .collect())
}

pub const MOTION_CSV_HEADER: [&str; 6] = [
    "source",
    "lead_minutes",
    "mean_abs_divergence",
    "extrapolation_mse",
    "persistence_mse",
    "samples",
];

/// Writes a long-format motion table, one row per source and lead.
pub fn write_motion_csv(path: &Path, step_minutes: u32, samples: usize, rows: &[(String, Vec<MotionLeadScores>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(MOTION_CSV_HEADER).map_err(csv_err)?;
    for (name, scores) in rows {
        for s in scores {
            w.write_record([
                name.clone(),
                (s.lead as u32 * step_minutes).to_string(),
                s.mean_abs_divergence.map(|v| v.to_string()).unwrap_or_else(|| "null".into()),
                s.extrapolation_mse.to_string(),
                s.persistence_mse.to_string(),
                samples.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `<name>.csv` per report, the combined `scores.csv`, a wide
/// `comparison.csv` (one column per model), `motion.csv` when any report
/// carries motion metrics, and `report.json` with everything.
pub fn write_reports(dir: &Path, reports: &[ScoreReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut all = Vec::new();
    for r in reports {
        let rows = r.rows();
        write_rows(&dir.join(format!("{}.csv", r.model)), &rows)?;
        all.extend(rows);
    }
    write_rows(&dir.join("scores.csv"), &all)?;

    let mut w = csv::Writer::from_path(dir.join("comparison.csv")).map_err(csv_err)?;
    let mut header = vec!["metric".to_string(), "threshold".into(), "lead_minutes".into()];
    header.extend(reports.iter().map(|r| r.model.clone()));
    w.write_record(&header).map_err(csv_err)?;
    if let Some(first) = reports.first() {
        let per_model: Vec<Vec<ScoreRow>> = reports.iter().map(|r| r.rows()).collect();
        for (i, row) in first.rows().iter().enumerate() {
            let mut rec = vec![
                row.metric.clone(),
                row.threshold.map(|t| t.to_string()).unwrap_or_default(),
                row.lead_minutes.to_string(),
            ];
            rec.extend(per_model.iter().map(|rows| {
                rows.get(i)
                    .and_then(|r| r.value)
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "null".into())
            }));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;

    let motion: Vec<(String, Vec<MotionLeadScores>)> = reports
        .iter()
        .filter_map(|r| r.motion.clone().map(|m| (r.model.clone(), m)))
        .collect();
    if let (false, Some(first)) = (motion.is_empty(), reports.first()) {
        write_motion_csv(&dir.join("motion.csv"), first.step_minutes, first.samples, &motion)?;
    }
    let mut f = File::create(dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut f, reports)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_two_by_two() {
        let t = ContingencyTable::from_fields(&[2.0, 0.0, 2.0, 0.0], &[2.0, 2.0, 0.0, 0.0], 1.0, 1).unwrap();
        assert_eq!(
            t.counts,
            Counts {
                hits: 1,
                misses: 1,
                false_alarms: 1,
                correct_negatives: 1
            }
        );
        assert_eq!(t.precision(), Some(0.5));
        assert_eq!(t.recall(), Some(0.5));
        assert_eq!(t.ets(), Some(0.0));
    }

    #[test]
    fn undefined_scores() {
        let t = ContingencyTable::from_fields(&[0.0; 4], &[0.0; 4], 1.0, 1).unwrap();
        assert_eq!((t.precision(), t.recall(), t.ets()), (None, None, None));
        let perfect = ContingencyTable::from_fields(&[2.0, 0.0], &[2.0, 0.0], 1.0, 1).unwrap();
        assert_eq!((perfect.precision(), perfect.recall(), perfect.ets()), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn constant_offset() {
        let t = [0.5f32, 3.0, 7.0];
        let p: Vec<f32> = t.iter().map(|v| v + 1.0).collect();
        assert_eq!(mse(&p, &t).unwrap(), 1.0);
        assert_eq!(me(&p, &t).unwrap(), 1.0);
        assert!(mse(&p, &t[..2]).is_err());
    }

    #[test]
    fn rows_follow_schema() {
        let acc: Vec<LeadScores> = (1..=6)
            .map(|l| LeadAccumulator::new(l, &THRESHOLDS).finish(l))
            .collect();
        let r = ScoreReport {
            model: "m".into(),
            units: "mm/h".into(),
            step_minutes: 5,
            samples: 0,
            leads: acc,
            motion: None,
        };
        let rows = r.rows();
        assert_eq!(rows.len(), 6 * (2 + 3 * 3));
        assert_eq!(rows[0].lead_minutes, 5);
        assert_eq!(rows.last().unwrap().lead_minutes, 30);
    }
}
