//! Semi-Lagrangian extrapolation and motion-field diagnostics.
//!
//! One extrapolation step is a backward (pull) warp: the output at cell `x`
//! is the input sampled bilinearly at `x - u(x)`, reading zero outside the
//! domain. `t` steps compose `t` identical one-step warps with the same
//! motion field, so `extrapolate(extrapolate(f, u, a), u, b)` and
//! `extrapolate(f, u, a + b)` are the same computation.
//!
//! Motion fields are (B, 2, H, W) tensors in pixels per time step; channel 0
//! is the column (x) displacement, channel 1 the row (y) displacement.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_MOTION_CAP: f32 = 10.0;

/// Owned motion field for a single time step, shape (1, 2, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    u: Tensor<f32>,
}

impl MotionField {
    pub fn new(u: Tensor<f32>) -> Result<Self> {
        let s = u.shape();
        if s[0] != 1 || s[1] != 2 {
            return Err(Error::shape("motion_field", format!("{s:?}")));
        }
        if let Some(i) = u.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: u.data()[i] as f64,
            });
        }
        Ok(MotionField { u })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MotionField {
            u: Tensor::zeros([1, 2, height, width]),
        }
    }

    pub fn from_components(height: usize, width: usize, ux: &[f32], uy: &[f32]) -> Result<Self> {
        let mut data = Vec::with_capacity(2 * height * width);
        data.extend_from_slice(ux);
        data.extend_from_slice(uy);
        Self::new(Tensor::from_vec([1, 2, height, width], data)?)
    }

    /// Constant field `(ux, uy)` everywhere.
    pub fn uniform(height: usize, width: usize, ux: f32, uy: f32) -> Self {
        MotionField {
            u: Tensor::from_fn([1, 2, height, width], |[_, c, _, _]| if c == 0 { ux } else { uy }),
        }
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.u
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.u
    }

    pub fn height(&self) -> usize {
        self.u.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[3]
    }

    pub fn ux(&self) -> &[f32] {
        self.u.plane(0, 0)
    }

    pub fn uy(&self) -> &[f32] {
        self.u.plane(0, 1)
    }

    pub fn max_magnitude(&self) -> f32 {
        self.ux()
            .iter()
            .zip(self.uy())
            .map(|(x, y)| x.hypot(*y))
            .fold(0.0, f32::max)
    }

    /// Rescales vectors longer than `cap` to length `cap`.
    pub fn clamp_magnitude(mut self, cap: f32) -> Self {
        let n = self.height() * self.width();
        let (ux, uy) = self.u.data_mut().split_at_mut(n);
        for (x, y) in ux.iter_mut().zip(uy.iter_mut()) {
            let m = x.hypot(*y);
            if m > cap {
                *x *= cap / m;
                *y *= cap / m;
            }
        }
        self
    }
}

/// Pixel-coordinate grid (B, 2, H, W): channel 0 = column, channel 1 = row.
pub fn identity_grid<T: Real>(batch: usize, height: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn([batch, 2, height, width], |[_, c, h, w]| {
        T::of(if c == 0 { w as f64 } else { h as f64 })
    })
}

/// Upstream sample coordinates `x - u(x)` for a motion field.
#[derive(Clone, Copy, Debug)]
pub struct Warp {
    coords: Var,
}

impl Warp {
    pub fn new<T: Real>(g: &mut Graph<T>, motion: Var) -> Result<Self> {
        let [b, c, h, w] = g.shape(motion);
        if c != 2 {
            return Err(Error::shape("warp", format!("motion has {c} channels, need 2")));
        }
        let grid = g.constant(identity_grid(b, h, w));
        let coords = g.sub(grid, motion)?;
        Ok(Warp { coords })
    }

    /// One extrapolation step of every channel of `field`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, field: Var) -> Result<Var> {
        let fs = g.shape(field);
        let cs = g.shape(self.coords);
        if fs[0] != cs[0] || fs[2..] != cs[2..] {
            return Err(Error::shape(
                "extrapolate",
                format!("field {fs:?} vs motion {:?}", [cs[0], 2, cs[2], cs[3]]),
            ));
        }
        g.grid_sample_bilinear(field, self.coords)
    }

    pub fn steps<T: Real>(&self, g: &mut Graph<T>, field: Var, t: usize) -> Result<Var> {
        let mut cur = field;
        for _ in 0..t {
            cur = self.step(g, cur)?;
        }
        Ok(cur)
    }
}

/// `t` semi-Lagrangian steps of `field` (B, C, H, W) along `motion` (B, 2, H, W).
pub fn extrapolate<T: Real>(g: &mut Graph<T>, field: Var, motion: Var, t: i64) -> Result<Var> {
    if t < 0 {
        return Err(Error::invalid(format!("extrapolation steps must be >= 0, got {t}")));
    }
    let fs = g.shape(field);
    let ms = g.shape(motion);
    if fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(Error::shape(
            "extrapolate",
            format!("field {fs:?} vs motion {ms:?}"),
        ));
    }
    if t == 0 {
        return Ok(field);
    }
    let warp = Warp::new(g, motion)?;
    warp.steps(g, field, t as usize)
}

/// Graph-free extrapolation of a (B, C, H, W) tensor.
pub fn extrapolate_tensor<T: Real>(field: &Tensor<T>, motion: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = g.constant(field.clone());
    let m = g.constant(motion.clone());
    let out = extrapolate(&mut g, f, m, t as i64)?;
    Ok(g.value(out).clone())
}

/// Input frames moved to a common reference time.
#[derive(Clone, Copy, Debug)]
pub struct LagrangianStack {
    /// (B, n, H, W); channel `i` is observation `i + 1` after `reference - (i + 1)` steps.
    pub fields: Var,
    pub len: usize,
    /// 1-based reference time; `len` is the last observation.
    pub reference: usize,
}

/// Extrapolates frame `i` (1-based) of `frames` (B, n, H, W) by
/// `reference - i` steps along the single field `motion`.
pub fn to_lagrangian<T: Real>(
    g: &mut Graph<T>,
    frames: Var,
    motion: Var,
    reference: usize,
) -> Result<LagrangianStack> {
    let n = g.shape(frames)[1];
    if n == 0 || reference < n || reference > n + 1 {
        return Err(Error::invalid(format!(
            "reference {reference} must be {n} or {} for {n} frames",
            n + 1
        )));
    }
    let warp = Warp::new(g, motion)?;
    let mut finals: Vec<Option<Var>> = vec![None; n];
    if reference == n {
        finals[n - 1] = Some(g.channels(frames, n - 1, 1)?);
    }
    // Frames 1..=k need at least one more step; after step s the frames with
    // exactly s steps are complete.
    let mut k = n.min(reference - 1);
    let mut pending = if k == n {
        frames
    } else {
        g.channels(frames, 0, k)?
    };
    let mut s = 0;
    while k > 0 {
        s += 1;
        pending = warp.step(g, pending)?;
        let k_next = n.min(reference.saturating_sub(s + 1));
        for i in k_next..k {
            finals[i] = Some(g.channels(pending, i, 1)?);
        }
        if k_next > 0 && k_next < k {
            pending = g.channels(pending, 0, k_next)?;
        }
        k = k_next;
    }
    let parts: Vec<Var> = finals.into_iter().map(|v| v.expect("every frame placed")).collect();
    let fields = g.concat(&parts)?;
    Ok(LagrangianStack {
        fields,
        len: n,
        reference,
    })
}

/// Consecutive differences of a Lagrangian stack as one (B, n-1, H, W) tensor.
pub fn temporal_difference_stacked<T: Real>(g: &mut Graph<T>, stack: &LagrangianStack) -> Result<Var> {
    let n = stack.len;
    if n < 2 {
        return Err(Error::invalid(format!(
            "temporal difference needs at least 2 fields, got {n}"
        )));
    }
    let later = g.channels(stack.fields, 1, n - 1)?;
    let earlier = g.channels(stack.fields, 0, n - 1)?;
    g.sub(later, earlier)
}

/// `n - 1` signed differences `stack[t] - stack[t - 1]`.
pub fn temporal_difference<T: Real>(g: &mut Graph<T>, stack: &LagrangianStack) -> Result<Vec<Var>> {
    let d = temporal_difference_stacked(g, stack)?;
    (0..stack.len - 1).map(|k| g.channels(d, k, 1)).collect()
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// (1, 2, 3, 3) kernel summing the Sobel x-derivative of channel 0 and the
/// y-derivative of channel 1, normalized to a derivative per `dx_km`.
pub fn divergence_kernel<T: Real>(dx_km: f64) -> Tensor<T> {
    let scale = 1.0 / (8.0 * dx_km);
    Tensor::from_fn([1, 2, 3, 3], |[_, c, h, w]| {
        let k = if c == 0 { SOBEL_X } else { SOBEL_Y };
        T::of(k[h][w] * scale)
    })
}

/// `du_x/dx + du_y/dy` per cell, (B, 1, H, W), replicate-padded borders.
pub fn divergence<T: Real>(g: &mut Graph<T>, motion: Var, dx_km: f64) -> Result<Var> {
    let c = g.shape(motion)[1];
    if c != 2 {
        return Err(Error::shape("divergence", format!("motion has {c} channels, need 2")));
    }
    let padded = g.pad_replicate(motion, 1);
    let k = g.constant(divergence_kernel(dx_km));
    g.conv2d(padded, k, None, 1, 0)
}

/// Mean absolute divergence over interior cells (one-cell border excluded).
pub fn divergence_penalty<T: Real>(g: &mut Graph<T>, motion: Var, dx_km: f64) -> Result<Var> {
    let d = divergence(g, motion, dx_km)?;
    let interior = g.crop(d, 1)?;
    let a = g.abs(interior);
    Ok(g.mean(a))
}

/// Graph-free divergence of a (B, 2, H, W) tensor.
pub fn divergence_tensor<T: Real>(motion: &Tensor<T>, dx_km: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let m = g.constant(motion.clone());
    let d = divergence(&mut g, m, dx_km)?;
    Ok(g.value(d).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run<T: Real>(field: Tensor<T>, motion: Tensor<T>, t: i64) -> Tensor<T> {
        let mut g = Graph::new();
        let f = g.constant(field);
        let m = g.constant(motion);
        let out = extrapolate(&mut g, f, m, t).unwrap();
        g.value(out).clone()
    }

    fn uniform(h: usize, w: usize, ux: f64, uy: f64) -> Tensor<f64> {
        Tensor::from_fn([1, 2, h, w], |[_, c, _, _]| if c == 0 { ux } else { uy })
    }

    #[test]
    fn zero_motion_is_identity_for_any_steps() {
        let f = Tensor::from_fn([1, 1, 8, 8], |[_, _, h, w]| ((h * 8 + w) as f64).sin());
        for t in [0, 1, 5] {
            assert_eq!(run(f.clone(), uniform(8, 8, 0.0, 0.0), t), f);
        }
    }

    #[test]
    fn unit_shift_moves_bright_cell_right() {
        let mut f = Tensor::zeros([1, 1, 8, 8]);
        f.set(0, 0, 3, 4, 1.0);
        let out = run(f, uniform(8, 8, 1.0, 0.0), 1);
        assert_eq!(out.at(0, 0, 3, 5), 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn half_pixel_shift_splits_mass() {
        let mut f = Tensor::zeros([1, 1, 8, 8]);
        f.set(0, 0, 3, 4, 1.0);
        let out = run(f, uniform(8, 8, 0.5, 0.0), 1);
        assert_eq!(out.at(0, 0, 3, 4), 0.5);
        assert_eq!(out.at(0, 0, 3, 5), 0.5);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn negative_steps_rejected() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros([1, 1, 8, 8]));
        let m = g.constant(uniform(8, 8, 0.0, 0.0));
        assert!(extrapolate(&mut g, f, m, -1).is_err());
        let bad = g.constant(uniform(8, 9, 0.0, 0.0));
        assert!(extrapolate(&mut g, f, bad, 1).is_err());
    }

    #[test]
    fn divergence_of_linear_fields() {
        let (h, w) = (10, 12);
        let cases = [
            ((1.0, 0.0), (0.0, 1.0), 2.0),  // u = (x, y)
            ((1.0, 0.0), (0.0, -1.0), 0.0), // u = (x, -y)
        ];
        for ((ax, bx), (ay, by), expect) in cases {
            let m = Tensor::from_fn([1, 2, h, w], |[_, c, r, col]| {
                let (x, y) = (col as f64, r as f64);
                if c == 0 { ax * x + bx * y } else { ay * x + by * y }
            });
            let d = divergence_tensor(&m, 1.0).unwrap();
            for r in 1..h - 1 {
                for c in 1..w - 1 {
                    assert!((d.at(0, 0, r, c) - expect).abs() < 1e-12);
                }
            }
        }
        let c = divergence_tensor(&uniform(8, 8, 2.5, -1.0), 1.0).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_of_expanding_field_is_two() {
        let m = Tensor::from_fn([1, 2, 9, 9], |[_, c, r, col]| if c == 0 { col as f64 } else { r as f64 });
        let mut g = Graph::new();
        let v = g.constant(m);
        let p = divergence_penalty(&mut g, v, 1.0).unwrap();
        assert!((g.scalar_value(p) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lagrangian_reference_validated() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros([1, 3, 8, 8]));
        let m = g.constant(uniform(8, 8, 0.0, 0.0));
        assert!(to_lagrangian(&mut g, f, m, 2).is_err());
        assert!(to_lagrangian(&mut g, f, m, 5).is_err());
        assert!(to_lagrangian(&mut g, f, m, 3).is_ok());
        assert!(to_lagrangian(&mut g, f, m, 4).is_ok());
    }

    #[test]
    fn temporal_difference_needs_two_fields() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros([1, 1, 8, 8]));
        let m = g.constant(uniform(8, 8, 0.0, 0.0));
        let st = to_lagrangian(&mut g, f, m, 1).unwrap();
        assert!(temporal_difference(&mut g, &st).is_err());
    }

    #[test]
    fn motion_clamp_limits_magnitude() {
        let m = MotionField::uniform(8, 8, 30.0, 40.0).clamp_magnitude(10.0);
        assert!((m.max_magnitude() - 10.0).abs() < 1e-5);
    }
}
