//! Dense forward and backward kernels behind the graph primitives.

use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Stride-1 kernels on planes of at least 8×8 cells run as shifted
    /// vector updates on zero-bordered planes; smaller planes use GEMM.
    fn is_direct(&self) -> bool {
        self.stride == 1 && self.k > 1 && self.h_out * self.w_out >= 64
    }

    /// Row stride of the bordered layout.
    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }

    /// Bordered plane length, with one spare row for the shifted reads of
    /// the discarded columns.
    fn padded_len(&self) -> usize {
        (self.h + 2 * self.pad + 1) * self.wp()
    }

    /// Output plane length in the bordered layout.
    fn span(&self) -> usize {
        self.h_out * self.wp()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_len();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.col_len();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    acc.iter().fold(s, |s, &v| s + v)
}

/// Copies `c` planes into zero-bordered planes of `g.padded_len()`.
fn border_planes<T: Real>(x: &[T], c: usize, g: &ConvGeom, buf: &mut [T]) {
    let (wp, pl) = (g.wp(), g.padded_len());
    buf.fill(T::zero());
    for ci in 0..c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        let dst = &mut buf[ci * pl..(ci + 1) * pl];
        for r in 0..g.h {
            let o = (r + g.pad) * wp + g.pad;
            dst[o..o + g.w].copy_from_slice(&src[r * g.w..(r + 1) * g.w]);
        }
    }
}

fn direct_forward<T: Real>(xb: &[T], weight: &[T], c_out: usize, g: &ConvGeom, xp: &mut [T], op: &mut [T], ob: &mut [T]) {
    let (wp, pl, span, kk) = (g.wp(), g.padded_len(), g.span(), g.k * g.k);
    border_planes(xb, g.c_in, g, xp);
    for co in 0..c_out {
        let acc = &mut op[..span];
        acc.fill(T::zero());
        for ci in 0..g.c_in {
            let plane = &xp[ci * pl..(ci + 1) * pl];
            let wk = &weight[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let sh = ki * wp + kj;
                    axpy(acc, wk[ki * g.k + kj], &plane[sh..sh + span]);
                }
            }
        }
        let dst = &mut ob[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for r in 0..g.h_out {
            for (d, &a) in dst[r * g.w_out..(r + 1) * g.w_out].iter_mut().zip(&acc[r * wp..]) {
                *d += a;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_backward<T: Real>(
    xb: &[T],
    weight: &[T],
    gb: &[T],
    c_out: usize,
    g: &ConvGeom,
    bufs: &mut DirectBufs<T>,
    dxb: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (wp, pl, span, kk) = (g.wp(), g.padded_len(), g.span(), g.k * g.k);
    let n = g.h_out * g.w_out;
    let gp = &mut bufs.gp;
    gp.fill(T::zero());
    for co in 0..c_out {
        for r in 0..g.h_out {
            let o = co * span + r * wp;
            gp[o..o + g.w_out].copy_from_slice(&gb[co * n + r * g.w_out..co * n + (r + 1) * g.w_out]);
        }
    }
    if let Some(dw) = dw {
        border_planes(xb, g.c_in, g, &mut bufs.xp);
        for co in 0..c_out {
            let gco = &gp[co * span..(co + 1) * span];
            for ci in 0..g.c_in {
                let plane = &bufs.xp[ci * pl..(ci + 1) * pl];
                let base = (co * g.c_in + ci) * kk;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let sh = ki * wp + kj;
                        dw[base + ki * g.k + kj] += dot(gco, &plane[sh..sh + span]);
                    }
                }
            }
        }
    }
    if let Some(dxb) = dxb {
        let dxp = &mut bufs.dxp;
        dxp.fill(T::zero());
        for ci in 0..g.c_in {
            let plane = &mut dxp[ci * pl..(ci + 1) * pl];
            for co in 0..c_out {
                let gco = &gp[co * span..(co + 1) * span];
                let wk = &weight[(co * g.c_in + ci) * kk..(co * g.c_in + ci + 1) * kk];
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let sh = ki * wp + kj;
                        axpy(&mut plane[sh..sh + span], wk[ki * g.k + kj], gco);
                    }
                }
            }
            let dst = &mut dxb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for r in 0..g.h {
                let o = (r + g.pad) * wp + g.pad;
                for (d, &v) in dst[r * g.w..(r + 1) * g.w].iter_mut().zip(&plane[o..o + g.w]) {
                    *d += v;
                }
            }
        }
    }
}

struct DirectBufs<T> {
    xp: Vec<T>,
    gp: Vec<T>,
    dxp: Vec<T>,
}

/// Cross-correlation of `x` (B, Cin, H, W) with `weight` (Cout, Cin, K, K).
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let [batch, _, _, _] = x.shape();
    let c_out = weight.shape()[0];
    let mut out = Tensor::zeros([batch, c_out, g.h_out, g.w_out]);
    let n = g.col_len();
    let rows = g.col_rows();
    let mut cols = if g.is_pointwise() || g.is_direct() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n]
    };
    let (mut xp, mut op) = if g.is_direct() {
        (vec![T::zero(); g.c_in * g.padded_len()], vec![T::zero(); g.span()])
    } else {
        (Vec::new(), Vec::new())
    };
    let in_item = g.c_in * g.h * g.w;
    let out_item = c_out * n;
    for b in 0..batch {
        let xb = &x.data()[b * in_item..(b + 1) * in_item];
        let ob = &mut out.data_mut()[b * out_item..(b + 1) * out_item];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(n).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_direct() {
            direct_forward(xb, weight.data(), c_out, g, &mut xp, &mut op, ob);
        } else if g.is_pointwise() {
            T::gemm(c_out, rows, n, weight.data(), false, xb, false, beta, ob);
        } else {
            im2col(xb, g, &mut cols);
            T::gemm(c_out, rows, n, weight.data(), false, &cols, false, beta, ob);
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of a convolution.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    mut dx: Option<&mut Tensor<T>>,
    mut dw: Option<&mut Tensor<T>>,
    mut db: Option<&mut Tensor<T>>,
) {
    let batch = x.shape()[0];
    let c_out = weight.shape()[0];
    let n = g.col_len();
    let rows = g.col_rows();
    let in_item = g.c_in * g.h * g.w;
    let out_item = c_out * n;
    let direct = g.is_direct();
    let (mut cols, mut dcols) = if direct {
        (Vec::new(), Vec::new())
    } else {
        (vec![T::zero(); rows * n], vec![T::zero(); rows * n])
    };
    let mut bufs = DirectBufs {
        xp: vec![T::zero(); if direct { g.c_in * g.padded_len() } else { 0 }],
        gp: vec![T::zero(); if direct { c_out * g.span() } else { 0 }],
        dxp: vec![T::zero(); if direct { g.c_in * g.padded_len() } else { 0 }],
    };
    for b in 0..batch {
        let gb = &grad_out.data()[b * out_item..(b + 1) * out_item];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in gb.chunks(n).enumerate() {
                db.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
        let xb = &x.data()[b * in_item..(b + 1) * in_item];
        if direct {
            let dxb = dx
                .as_deref_mut()
                .map(|d| &mut d.data_mut()[b * in_item..(b + 1) * in_item]);
            let dwd = dw.as_deref_mut().map(|d| d.data_mut());
            direct_backward(xb, weight.data(), gb, c_out, g, &mut bufs, dxb, dwd);
            continue;
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            T::gemm(c_out, n, rows, gb, false, src, true, T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx.data_mut()[b * in_item..(b + 1) * in_item];
            if g.is_pointwise() {
                T::gemm(rows, c_out, n, weight.data(), true, gb, false, T::one(), dxb);
            } else {
                T::gemm(rows, c_out, n, weight.data(), true, gb, false, T::zero(), &mut dcols);
                col2im_add(&dcols, g, dxb);
            }
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and the flat
/// input index chosen for each output cell; ties go to the first maximum in
/// row-major window order.
pub fn max_pool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [b, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, ho, wo]);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let mut k = 0;
    for bi in 0..b {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_i = x.offset(bi, ci, 2 * oh, 2 * ow);
                    let mut best = x.data()[best_i];
                    for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.offset(bi, ci, 2 * oh + dh, 2 * ow + dw);
                        let v = x.data()[i];
                        #[allow(clippy::eq_op)]
                        if v > best || v != v {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                    out.data_mut()[k] = best;
                    arg.push(best_i as u32);
                    k += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    Tensor::from_fn([b, c, 2 * h, 2 * w], |[bi, ci, hi, wi]| {
        x.at(bi, ci, hi / 2, wi / 2)
    })
}

pub fn upsample2_backward<T: Real>(g: &Tensor<T>, dx: &mut Tensor<T>) {
    let [b, c, h, w] = g.shape();
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let i = dx.offset(bi, ci, hi / 2, wi / 2);
                    dx.data_mut()[i] += g.at(bi, ci, hi, wi);
                }
            }
        }
    }
}

/// Per-output-cell bilinear stencil: four flat plane offsets (or `None` when
/// the corner lies outside the input) and the fractional offsets.
#[derive(Clone, Copy)]
struct Stencil<T> {
    idx: [Option<usize>; 4],
    fx: T,
    fy: T,
}

impl<T: Real> Stencil<T> {
    #[inline]
    fn new(x: T, y: T, h: usize, w: usize) -> Self {
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let mut idx = [None; 4];
        // Coordinates far outside the grid would overflow isize; clamp first.
        let lim = T::of(1e9);
        if x0f.abs() < lim && y0f.abs() < lim {
            let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
            let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let (yy, xx) = (y0 + dy, x0 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    idx[k] = Some(yy as usize * w + xx as usize);
                }
            }
        }
        Stencil { idx, fx, fy }
    }

    #[inline]
    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    #[inline]
    fn corners(&self, plane: &[T]) -> [T; 4] {
        let mut v = [T::zero(); 4];
        for k in 0..4 {
            if let Some(i) = self.idx[k] {
                v[k] = plane[i];
            }
        }
        v
    }
}

/// Samples `input` (B, C, H, W) at pixel coordinates `coords` (B, 2, Ho, Wo);
/// channel 0 holds the column (x) and channel 1 the row (y). Samples outside
/// the grid read zero.
pub fn grid_sample_forward<T: Real>(input: &Tensor<T>, coords: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = input.shape();
    let [_, _, ho, wo] = coords.shape();
    let mut out = Tensor::zeros([b, c, ho, wo]);
    let n = ho * wo;
    let mut stencils = Vec::with_capacity(n);
    for bi in 0..b {
        stencils.clear();
        let xs = coords.plane(bi, 0);
        let ys = coords.plane(bi, 1);
        for p in 0..n {
            stencils.push(Stencil::new(xs[p], ys[p], h, w));
        }
        for ci in 0..c {
            let plane = input.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (p, s) in stencils.iter().enumerate() {
                let wt = s.weights();
                let v = s.corners(plane);
                dst[p] = wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3];
            }
        }
    }
    out
}

pub fn grid_sample_backward<T: Real>(
    input: &Tensor<T>,
    coords: &Tensor<T>,
    grad_out: &Tensor<T>,
    mut d_input: Option<&mut Tensor<T>>,
    mut d_coords: Option<&mut Tensor<T>>,
) {
    let [b, c, h, w] = input.shape();
    let [_, _, ho, wo] = coords.shape();
    let n = ho * wo;
    let one = T::one();
    let mut stencils = Vec::with_capacity(n);
    for bi in 0..b {
        stencils.clear();
        let xs = coords.plane(bi, 0);
        let ys = coords.plane(bi, 1);
        for p in 0..n {
            stencils.push(Stencil::new(xs[p], ys[p], h, w));
        }
        if let Some(di) = d_input.as_deref_mut() {
            for ci in 0..c {
                let g = grad_out.plane(bi, ci);
                let dst = di.plane_mut(bi, ci);
                for (p, s) in stencils.iter().enumerate() {
                    let wt = s.weights();
                    for k in 0..4 {
                        if let Some(i) = s.idx[k] {
                            dst[i] += wt[k] * g[p];
                        }
                    }
                }
            }
        }
        if let Some(dc) = d_coords.as_deref_mut() {
            let mut gx = vec![T::zero(); n];
            let mut gy = vec![T::zero(); n];
            for ci in 0..c {
                let g = grad_out.plane(bi, ci);
                let plane = input.plane(bi, ci);
                for (p, s) in stencils.iter().enumerate() {
                    let [v00, v01, v10, v11] = s.corners(plane);
                    gx[p] += g[p] * ((one - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                    gy[p] += g[p] * ((one - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
                }
            }
            for (d, v) in dc.plane_mut(bi, 0).iter_mut().zip(&gx) {
                *d += *v;
            }
            for (d, v) in dc.plane_mut(bi, 1).iter_mut().zip(&gy) {
                *d += *v;
            }
        }
    }
}

pub fn pad_replicate_forward<T: Real>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    Tensor::from_fn([b, c, h + 2 * p, w + 2 * p], |[bi, ci, hi, wi]| {
        let sh = hi.saturating_sub(p).min(h - 1);
        let sw = wi.saturating_sub(p).min(w - 1);
        x.at(bi, ci, sh, sw)
    })
}

pub fn pad_replicate_backward<T: Real>(g: &Tensor<T>, p: usize, dx: &mut Tensor<T>) {
    let [b, c, h, w] = dx.shape();
    let [_, _, hp, wp] = g.shape();
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..hp {
                let sh = hi.saturating_sub(p).min(h - 1);
                for wi in 0..wp {
                    let sw = wi.saturating_sub(p).min(w - 1);
                    let i = dx.offset(bi, ci, sh, sw);
                    dx.data_mut()[i] += g.at(bi, ci, hi, wi);
                }
            }
        }
    }
}
