//! Pyramidal Lucas–Kanade motion estimation.
//!
//! Features are picked with a minimum-eigenvalue (Shi–Tomasi) criterion on
//! each earlier frame, tracked coarse-to-fine into the next frame, and the
//! sparse vectors are spread over the grid with Gaussian weights. Pairwise
//! dense fields are averaged into a single field for the whole sequence.
//! Tracking runs on `ln(1 + R)`, which is monotone in `R`, so a translated
//! rain field is still a translated tracking image.

use serde::{Deserialize, Serialize};

use crate::advection::{MotionField, DEFAULT_MOTION_CAP};
use crate::error::{Error, Result};
use crate::field::{FieldSequence, RainField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub levels: usize,
    pub window_radius: usize,
    pub iterations: usize,
    /// Minimum eigenvalue of the window-averaged structure tensor below
    /// which a point is considered untrackable.
    pub min_eigenvalue: f64,
    /// Gaussian width (cells) of the dense interpolation.
    pub sigma: f64,
    pub max_points: usize,
    /// Features weaker than `quality × strongest` are dropped.
    pub quality: f64,
    pub min_distance: usize,
    /// Vectors longer than this are discarded as outliers.
    pub max_displacement: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            levels: 3,
            window_radius: 7,
            iterations: 10,
            min_eigenvalue: 1e-6,
            sigma: 8.0,
            max_points: 300,
            quality: 0.01,
            min_distance: 2,
            max_displacement: DEFAULT_MOTION_CAP as f64,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("pyramid levels must be >= 1".into()));
        }
        if self.window_radius < 2 {
            return Err(Error::Config("window radius must be >= 2".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("interpolation sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Estimated motion plus diagnostics.
#[derive(Clone, Debug)]
pub struct FlowEstimate {
    pub motion: MotionField,
    /// Number of successfully tracked vectors over all frame pairs.
    pub tracked: usize,
    /// Set when nothing could be tracked and the motion is all zero.
    pub warning: Option<String>,
}

/// Single-channel image with replicate-edge bilinear sampling.
#[derive(Clone, Debug)]
struct Image {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Image {
    fn new(h: usize, w: usize, v: Vec<f64>) -> Self {
        Image { h, w, v }
    }

    fn px(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.h as isize - 1) as usize;
        let c = c.clamp(0, self.w as isize - 1) as usize;
        self.v[r * self.w + c]
    }

    fn sample(&self, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (r, c) = (y0 as isize, x0 as isize);
        let a = self.px(r, c);
        let b = self.px(r, c + 1);
        let d = self.px(r + 1, c);
        let e = self.px(r + 1, c + 1);
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * d + fx * e)
    }

    /// Separable [1 2 1]/4 blur followed by 2× decimation.
    fn downsample(&self) -> Image {
        let h2 = self.h.div_ceil(2);
        let w2 = self.w.div_ceil(2);
        let mut tmp = vec![0.0; self.h * w2];
        for r in 0..self.h {
            for c2 in 0..w2 {
                let c = (2 * c2) as isize;
                let r = r as isize;
                tmp[r as usize * w2 + c2] =
                    0.25 * self.px(r, c - 1) + 0.5 * self.px(r, c) + 0.25 * self.px(r, c + 1);
            }
        }
        let t = Image::new(self.h, w2, tmp);
        let mut out = vec![0.0; h2 * w2];
        for r2 in 0..h2 {
            let r = (2 * r2) as isize;
            for c in 0..w2 {
                let c = c as isize;
                out[r2 * w2 + c as usize] =
                    0.25 * t.px(r - 1, c) + 0.5 * t.px(r, c) + 0.25 * t.px(r + 1, c);
            }
        }
        Image::new(h2, w2, out)
    }

    fn grad(&self, y: f64, x: f64) -> (f64, f64) {
        let gx = 0.5 * (self.sample(y, x + 1.0) - self.sample(y, x - 1.0));
        let gy = 0.5 * (self.sample(y + 1.0, x) - self.sample(y - 1.0, x));
        (gx, gy)
    }
}

fn pyramid(base: Image, levels: usize) -> Vec<Image> {
    let mut out = vec![base];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        if last.h < 8 || last.w < 8 {
            break;
        }
        let next = last.downsample();
        out.push(next);
    }
    out
}

fn min_eig(gxx: f64, gxy: f64, gyy: f64) -> f64 {
    let tr = 0.5 * (gxx + gyy);
    let det = gxx * gyy - gxy * gxy;
    tr - (tr * tr - det).max(0.0).sqrt()
}

fn log_image(values: &[f32], h: usize, w: usize) -> Image {
    Image::new(h, w, values.iter().map(|&v| (v.max(0.0) as f64).ln_1p()).collect())
}

/// Minimum-eigenvalue map of the 3×3-summed structure tensor.
fn eigen_map(img: &Image) -> Vec<f64> {
    let (h, w) = (img.h, img.w);
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let k = r as usize * w + c as usize;
            ix[k] = 0.5 * (img.px(r, c + 1) - img.px(r, c - 1));
            iy[k] = 0.5 * (img.px(r + 1, c) - img.px(r - 1, c));
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let rr = (r + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c + dc).clamp(0, w as isize - 1) as usize;
                    let k = rr * w + cc;
                    a += ix[k] * ix[k];
                    b += ix[k] * iy[k];
                    d += iy[k] * iy[k];
                }
            }
            out[r as usize * w + c as usize] = min_eig(a, b, d);
        }
    }
    out
}

fn select_features(
    img: &Image,
    max_points: usize,
    quality: f64,
    min_distance: usize,
) -> Vec<(usize, usize)> {
    if max_points == 0 {
        return Vec::new();
    }
    let eig = eigen_map(img);
    let best = eig.iter().cloned().fold(0.0, f64::max);
    if best <= 1e-12 {
        return Vec::new();
    }
    let cut = quality * best;
    let mut cand: Vec<(f64, usize)> = eig
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > cut && e > 1e-12)
        .map(|(i, &e)| (e, i))
        .collect();
    // Strongest first; ties broken by row-major index.
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let md = min_distance as isize;
    let mut taken: Vec<(usize, usize)> = Vec::new();
    for (_, i) in cand {
        let (r, c) = (i / img.w, i % img.w);
        let clear = taken.iter().all(|&(tr, tc)| {
            (tr as isize - r as isize).abs().max((tc as isize - c as isize).abs()) >= md
        });
        if clear {
            taken.push((r, c));
            if taken.len() == max_points {
                break;
            }
        }
    }
    taken
}

/// Shi–Tomasi corners of `ln(1 + R)`, strongest first, as (row, col).
pub fn feature_points(field: &RainField, max_points: usize, quality: f64) -> Vec<(usize, usize)> {
    let img = log_image(field.values(), field.height(), field.width());
    select_features(&img, max_points, quality, PyramidConfig::default().min_distance)
}

/// Tracks point `(y, x)` from `a` to `b`; returns the displacement (dx, dy).
fn track(pa: &[Image], pb: &[Image], y: f64, x: f64, cfg: &PyramidConfig) -> Option<(f64, f64)> {
    let rad = cfg.window_radius as isize;
    let npx = ((2 * rad + 1) * (2 * rad + 1)) as f64;
    let mut g = (0.0f64, 0.0f64);
    for lvl in (0..pa.len()).rev() {
        let s = (1u32 << lvl) as f64;
        let (py, px) = (y / s, x / s);
        let ia = &pa[lvl];
        let ib = &pb[lvl];
        let mut grads = Vec::with_capacity(npx as usize);
        let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
        for dy in -rad..=rad {
            for dx in -rad..=rad {
                let (yy, xx) = (py + dy as f64, px + dx as f64);
                let (gx, gy) = ia.grad(yy, xx);
                gxx += gx * gx;
                gxy += gx * gy;
                gyy += gy * gy;
                grads.push((yy, xx, gx, gy, ia.sample(yy, xx)));
            }
        }
        if min_eig(gxx, gxy, gyy) / npx < cfg.min_eigenvalue {
            return None;
        }
        let det = gxx * gyy - gxy * gxy;
        let mut v = (0.0f64, 0.0f64);
        for _ in 0..cfg.iterations {
            let (mut bx, mut by) = (0.0, 0.0);
            for &(yy, xx, gx, gy, a) in &grads {
                let diff = a - ib.sample(yy + g.1 + v.1, xx + g.0 + v.0);
                bx += diff * gx;
                by += diff * gy;
            }
            let ex = (gyy * bx - gxy * by) / det;
            let ey = (gxx * by - gxy * bx) / det;
            v.0 += ex;
            v.1 += ey;
            if ex * ex + ey * ey < 1e-6 {
                break;
            }
        }
        let d = (g.0 + v.0, g.1 + v.1);
        if !d.0.is_finite() || !d.1.is_finite() {
            return None;
        }
        g = if lvl > 0 { (2.0 * d.0, 2.0 * d.1) } else { d };
    }
    Some(g)
}

/// Sparse vectors `(row, col, dx, dy)` from image `a` to image `b`.
fn pair_vectors(a: &Image, b: &Image, cfg: &PyramidConfig) -> Vec<(f64, f64, f64, f64)> {
    let pts = select_features(a, cfg.max_points, cfg.quality, cfg.min_distance);
    if pts.is_empty() {
        return Vec::new();
    }
    let pa = pyramid(a.clone(), cfg.levels);
    let pb = pyramid(b.clone(), cfg.levels);
    pts.into_iter()
        .filter_map(|(r, c)| {
            let (dx, dy) = track(&pa, &pb, r as f64, c as f64, cfg)?;
            (dx.hypot(dy) <= cfg.max_displacement).then_some((r as f64, c as f64, dx, dy))
        })
        .collect()
}

/// Gaussian-weighted spreading of sparse vectors, relaxing to their mean far
/// from every feature.
fn densify(vectors: &[(f64, f64, f64, f64)], h: usize, w: usize, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    const PRIOR: f64 = 1e-3;
    let n = vectors.len() as f64;
    let mx = vectors.iter().map(|v| v.2).sum::<f64>() / n;
    let my = vectors.iter().map(|v| v.3).sum::<f64>() / n;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut ux = vec![0.0; h * w];
    let mut uy = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut sw, mut sx, mut sy) = (PRIOR, PRIOR * mx, PRIOR * my);
            for &(pr, pc, dx, dy) in vectors {
                let d2 = (pr - r as f64).powi(2) + (pc - c as f64).powi(2);
                let wgt = (-d2 * inv).exp();
                sw += wgt;
                sx += wgt * dx;
                sy += wgt * dy;
            }
            ux[r * w + c] = sx / sw;
            uy[r * w + c] = sy / sw;
        }
    }
    (ux, uy)
}

/// Motion of raw frames (`h × w` row-major rain rates) as one dense field.
pub fn lucas_kanade_frames(frames: &[&[f32]], h: usize, w: usize, cfg: &PyramidConfig) -> Result<FlowEstimate> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "motion estimation needs at least 2 fields, got {}",
            frames.len()
        )));
    }
    if let Some(f) = frames.iter().find(|f| f.len() != h * w) {
        return Err(Error::shape("lucas_kanade_flow", format!("frame of {} values for {h}x{w}", f.len())));
    }
    let imgs: Vec<Image> = frames.iter().map(|f| log_image(f, h, w)).collect();
    let mut acc_x = vec![0.0; h * w];
    let mut acc_y = vec![0.0; h * w];
    let mut pairs = 0usize;
    let mut tracked = 0usize;
    for p in imgs.windows(2) {
        let vecs = pair_vectors(&p[0], &p[1], cfg);
        if vecs.is_empty() {
            continue;
        }
        tracked += vecs.len();
        pairs += 1;
        let (ux, uy) = densify(&vecs, h, w, cfg.sigma);
        for i in 0..h * w {
            acc_x[i] += ux[i];
            acc_y[i] += uy[i];
        }
    }
    if pairs == 0 {
        return Ok(FlowEstimate {
            motion: MotionField::zeros(h, w),
            tracked: 0,
            warning: Some("no trackable features; returning zero motion".into()),
        });
    }
    let ux: Vec<f32> = acc_x.iter().map(|v| (v / pairs as f64) as f32).collect();
    let uy: Vec<f32> = acc_y.iter().map(|v| (v / pairs as f64) as f32).collect();
    let motion = MotionField::from_components(h, w, &ux, &uy)?.clamp_magnitude(cfg.max_displacement as f32);
    Ok(FlowEstimate {
        motion,
        tracked,
        warning: None,
    })
}

/// One motion field for the whole sequence.
pub fn lucas_kanade_flow(seq: &FieldSequence, cfg: &PyramidConfig) -> Result<FlowEstimate> {
    let (h, w) = seq.geometry().unwrap_or((0, 0));
    let frames: Vec<&[f32]> = seq.fields().iter().map(RainField::values).collect();
    lucas_kanade_frames(&frames, h, w, cfg)
}
