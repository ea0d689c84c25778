//! Radar field data model, reflectivity conversion and dataset filtering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reflectivity assigned to cells without measurable rain.
pub const DBZ_FLOOR: f32 = -32.0;
/// Rain rates below this (mm/h) count as no rain.
pub const ZERO_RAIN_CUTOFF: f32 = 0.01;
pub const MIN_GRID: usize = 8;
pub const STEP_MINUTES: u32 = 5;

const ZR_A: f64 = 200.0;
const ZR_B: f64 = 1.6;

/// Marshall–Palmer: Z = 200 R^1.6, returned in dBZ.
pub fn rain_rate_to_dbz(r: f64) -> f64 {
    10.0 * (ZR_A * r.powf(ZR_B)).log10()
}

pub fn dbz_to_rain_rate(dbz: f64) -> f64 {
    (10f64.powf(dbz / 10.0) / ZR_A).powf(1.0 / ZR_B)
}

fn check_grid(values: &[f32], height: usize, width: usize) -> Result<()> {
    if height < MIN_GRID || width < MIN_GRID {
        return Err(Error::invalid(format!(
            "grid {height}x{width} smaller than {MIN_GRID}x{MIN_GRID}"
        )));
    }
    if values.len() != height * width {
        return Err(Error::DimensionMismatch(format!(
            "{} values for a {height}x{width} grid",
            values.len()
        )));
    }
    if let Some((index, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: *v as f64,
        });
    }
    Ok(())
}

/// 2-D rain-rate grid in mm/h, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RainField {
    values: Vec<f32>,
    height: usize,
    width: usize,
    pub dx_km: f64,
    pub timestamp: i64,
}

impl RainField {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Self::with_meta(height, width, values, 1.0, 0)
    }

    pub fn with_meta(
        height: usize,
        width: usize,
        values: Vec<f32>,
        dx_km: f64,
        timestamp: i64,
    ) -> Result<Self> {
        check_grid(&values, height, width)?;
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "negative rain rate {} at index {i}",
                values[i]
            )));
        }
        if !(dx_km > 0.0 && dx_km.is_finite()) {
            return Err(Error::invalid(format!("grid spacing {dx_km} km")));
        }
        Ok(RainField {
            values,
            height,
            width,
            dx_km,
            timestamp,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn same_geometry(&self, other: &RainField) -> bool {
        self.height == other.height && self.width == other.width && self.dx_km == other.dx_km
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }
}

/// 2-D reflectivity grid in dBZ; no-rain cells hold [`DBZ_FLOOR`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectivityField {
    values: Vec<f32>,
    height: usize,
    width: usize,
    pub dx_km: f64,
    pub timestamp: i64,
}

impl ReflectivityField {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        check_grid(&values, height, width)?;
        Ok(ReflectivityField {
            values,
            height,
            width,
            dx_km: 1.0,
            timestamp: 0,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

pub fn rain_to_dbz(field: &RainField) -> ReflectivityField {
    let values = field
        .values
        .iter()
        .map(|&r| {
            if r < ZERO_RAIN_CUTOFF {
                DBZ_FLOOR
            } else {
                rain_rate_to_dbz(r as f64) as f32
            }
        })
        .collect();
    ReflectivityField {
        values,
        height: field.height,
        width: field.width,
        dx_km: field.dx_km,
        timestamp: field.timestamp,
    }
}

pub fn dbz_to_rain(field: &ReflectivityField) -> RainField {
    let values = field
        .values
        .iter()
        .map(|&z| {
            if z <= DBZ_FLOOR {
                0.0
            } else {
                dbz_to_rain_rate(z as f64) as f32
            }
        })
        .collect();
    RainField {
        values,
        height: field.height,
        width: field.width,
        dx_km: field.dx_km,
        timestamp: field.timestamp,
    }
}

/// Constants of the rainy-target filter and the train/validation/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Rain rate (mm/h) at which a cell counts as rainy.
    pub pixel_threshold: f32,
    /// Minimum fraction of rainy cells.
    pub area_fraction: f64,
    /// Observations that must precede a target (inputs plus earlier outputs).
    pub lead_count: usize,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    /// Validation targets are drawn as contiguous blocks of this many targets.
    pub validation_block: usize,
    pub seed: u64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            pixel_threshold: 0.6,
            area_fraction: 0.05,
            lead_count: 11,
            test_fraction: 0.2,
            validation_fraction: 0.15,
            validation_block: 48,
            seed: 0,
        }
    }
}

pub fn is_rainy_enough(field: &RainField, pixel_threshold: f32, area_fraction: f64) -> bool {
    let rainy = field
        .values
        .iter()
        .filter(|&&v| v >= pixel_threshold)
        .count();
    rainy as f64 / field.values.len() as f64 >= area_fraction
}

/// Time-ordered stack of rain fields with a fixed step.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSequence {
    fields: Vec<RainField>,
    pub step_minutes: u32,
}

impl FieldSequence {
    pub fn new(fields: Vec<RainField>) -> Result<Self> {
        if let Some(first) = fields.first() {
            for (k, f) in fields.iter().enumerate() {
                if !f.same_geometry(first) {
                    return Err(Error::DimensionMismatch(format!(
                        "frame {k} is {}x{}, frame 0 is {}x{}",
                        f.height, f.width, first.height, first.width
                    )));
                }
                if f.timestamp != first.timestamp + k as i64 {
                    return Err(Error::invalid(format!(
                        "frame {k} has timestamp {}, expected {}",
                        f.timestamp,
                        first.timestamp + k as i64
                    )));
                }
            }
        }
        Ok(FieldSequence {
            fields,
            step_minutes: STEP_MINUTES,
        })
    }

    /// Builds a sequence from raw frames, assigning consecutive timestamps from `t0`.
    pub fn from_frames(
        height: usize,
        width: usize,
        frames: Vec<Vec<f32>>,
        dx_km: f64,
        t0: i64,
    ) -> Result<Self> {
        let fields = frames
            .into_iter()
            .enumerate()
            .map(|(k, v)| RainField::with_meta(height, width, v, dx_km, t0 + k as i64))
            .collect::<Result<Vec<_>>>()?;
        Self::new(fields)
    }

    pub fn fields(&self) -> &[RainField] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn get(&self, i: usize) -> &RainField {
        &self.fields[i]
    }

    pub fn geometry(&self) -> Option<(usize, usize)> {
        self.fields.first().map(|f| (f.height, f.width))
    }

    pub fn t0(&self) -> i64 {
        self.fields.first().map_or(0, |f| f.timestamp)
    }

    /// Frames `start..end` with their timestamps.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::invalid(format!(
                "slice {start}..{end} of {} frames",
                self.len()
            )));
        }
        Self::new(self.fields[start..end].to_vec())
    }
}

/// Target indices of each subset. A target at archive index `i` uses the
/// observations `i - lead_count ..= i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub lead_count: usize,
}

impl DatasetSplit {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.validation.is_empty() && self.test.is_empty()
    }
}

fn conflicts(a: usize, b: usize, lead_count: usize) -> bool {
    a.abs_diff(b) <= lead_count
}

fn conflicts_any(t: usize, others: &[usize], lead_count: usize) -> bool {
    // `others` is sorted; only neighbours within lead_count can conflict.
    let lo = others.partition_point(|&o| o + lead_count < t);
    others[lo..]
        .iter()
        .take_while(|&&o| o <= t + lead_count)
        .any(|&o| conflicts(t, o, lead_count))
}

/// Eligible targets of an archive: rainy frames with `lead_count` predecessors.
pub fn eligible_targets(archive: &FieldSequence, params: &FilterParams) -> Vec<usize> {
    (params.lead_count..archive.len())
        .filter(|&i| is_rainy_enough(archive.get(i), params.pixel_threshold, params.area_fraction))
        .collect()
}

/// Chronological split of the rainy targets: the last `test_fraction` go to
/// test, a seeded random block selection of `validation_fraction` of the rest
/// to validation. Targets whose observation windows would straddle two
/// subsets are pruned: validation gives way to train, and test gives way to
/// both.
pub fn build_split(archive: &FieldSequence, params: &FilterParams) -> Result<DatasetSplit> {
    let needed = params.lead_count + 1;
    if archive.len() < needed {
        return Err(Error::ArchiveTooShort {
            frames: archive.len(),
            needed,
        });
    }
    let targets = eligible_targets(archive, params);
    let (mut train, mut validation, mut test) = split_counts(&targets, params);
    let lead = params.lead_count;

    validation.retain(|&v| !conflicts_any(v, &train, lead));
    let mut earlier: Vec<usize> = train.iter().chain(&validation).copied().collect();
    earlier.sort_unstable();
    test.retain(|&t| !conflicts_any(t, &earlier, lead));
    train.sort_unstable();
    validation.sort_unstable();
    Ok(DatasetSplit {
        train,
        validation,
        test,
        lead_count: lead,
    })
}

/// Subset assignment before overlap pruning.
pub fn split_counts(
    targets: &[usize],
    params: &FilterParams,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = targets.len();
    let n_test = (params.test_fraction * n as f64).round() as usize;
    let (rest, test) = targets.split_at(n - n_test.min(n));
    let n_val = (params.validation_fraction * rest.len() as f64).round() as usize;

    let block = params.validation_block.max(1);
    let mut blocks: Vec<(usize, usize)> = (0..rest.len())
        .step_by(block)
        .map(|s| (s, block.min(rest.len() - s)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    blocks.shuffle(&mut rng);
    let mut chosen = vec![false; rest.len()];
    let mut remaining = n_val;
    for (start, len) in blocks {
        if remaining == 0 {
            break;
        }
        let take = len.min(remaining);
        chosen[start..start + take].fill(true);
        remaining -= take;
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (k, &t) in rest.iter().enumerate() {
        if chosen[k] {
            validation.push(t);
        } else {
            train.push(t);
        }
    }
    (train, validation, test.to_vec())
}
