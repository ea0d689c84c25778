//! Reverse-mode computation graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it in reverse. A graph is built
//! for one forward pass and dropped afterwards; parameters live outside it
//! and are bound as leaves (see [`Graph::bind`]).

use super::kernels::{self, ConvGeom};
use super::params::ParamSet;
use super::tensor::{Real, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    ClampMin(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Channels {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    GridSample {
        input: Var,
        coords: Var,
    },
    PadReplicate(Var, usize),
    Crop(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn grad_slot<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: Shape,
) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds every parameter of `params` as a leaf; frozen sets become constants.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: bool) -> Vec<Var> {
        params
            .iter()
            .map(|p| self.push(p.value.clone(), Op::Leaf, trainable))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf or zeros of the right shape.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Absolute value; the subgradient at exactly zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    /// `max(a, min)`; gradient passes where `a >= min`.
    pub fn clamp_min(&mut self, a: Var, min: T) -> Var {
        let v = self.value(a).map(|x| if x < min { min } else { x });
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, min), rg)
    }

    // ----- spatial -----

    /// 2-D cross-correlation. `w` is (Cout, Cin, K, K) with odd K; `b` is (1, Cout, 1, 1).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [_, c_in, h, wd] = self.shape(x);
        let [c_out, wc_in, kh, kw] = self.shape(w);
        if wc_in != c_in || kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, c_out, 1, 1] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} output channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom::new(c_in, h, wd, kh, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {kh} stride {stride} padding {padding} on {h}x{wd}"),
            )
        })?;
        let v = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape("max_pool2d", format!("odd spatial size {s:?}")));
        }
        let (v, argmax) = kernels::max_pool2_forward(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(v, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Var {
        let v = kernels::upsample2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::Upsample2(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    pub fn channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Channels { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Bilinear sampling of `input` (B, C, H, W) at pixel coordinates
    /// `coords` (B, 2, Ho, Wo), channel 0 = column, channel 1 = row.
    /// Differentiable with respect to both arguments.
    pub fn grid_sample_bilinear(&mut self, input: Var, coords: Var) -> Result<Var> {
        let si = self.shape(input);
        let sc = self.shape(coords);
        if si[0] != sc[0] || sc[1] != 2 {
            return Err(Error::shape(
                "grid_sample_bilinear",
                format!("input {si:?}, coords {sc:?}"),
            ));
        }
        let v = kernels::grid_sample_forward(self.value(input), self.value(coords));
        let rg = self.rg(input) || self.rg(coords);
        Ok(self.push(v, Op::GridSample { input, coords }, rg))
    }

    pub fn pad_replicate(&mut self, x: Var, p: usize) -> Var {
        let v = kernels::pad_replicate_forward(self.value(x), p);
        let rg = self.rg(x);
        self.push(v, Op::PadReplicate(x, p), rg)
    }

    /// Drops `p` cells from every spatial border.
    pub fn crop(&mut self, x: Var, p: usize) -> Result<Var> {
        let [b, c, h, w] = self.shape(x);
        if h <= 2 * p || w <= 2 * p {
            return Err(Error::shape("crop", format!("{p} from {h}x{w}")));
        }
        let src = self.value(x);
        let v = Tensor::from_fn([b, c, h - 2 * p, w - 2 * p], |[bi, ci, hi, wi]| {
            src.at(bi, ci, hi + p, wi + p)
        });
        let rg = self.rg(x);
        Ok(self.push(v, Op::Crop(x, p), rg))
    }

    // ----- composites -----

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("shapes equal")
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ----- backward -----

    /// Propagates d(root)/d(leaf) into every trainable leaf reachable from
    /// `root`. Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != [1, 1, 1, 1] {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        if matches!(self.nodes[i].op, Op::Leaf) {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
            return;
        }
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled above"),
            Op::Add(a, b) => {
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if rg(*b) {
                    accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::MulScalar(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gx, x| if x > T::zero() { gx } else { T::zero() });
                accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let d = g.zip_map(val(*a), |gx, x| if x > T::zero() { gx } else { gx * s });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &nodes[i].value;
                let d = g.zip_map(y, |gx, y| gx * y * (T::one() - y));
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = &nodes[i].value;
                let d = g.zip_map(y, |gx, y| gx * (T::one() - y * y));
                accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip_map(val(*a), |gx, x| {
                    if x > T::zero() {
                        gx
                    } else if x < T::zero() {
                        -gx
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::ClampMin(a, min) => {
                let m = *min;
                let d = g.zip_map(val(*a), |gx, x| if x >= m { gx } else { T::zero() });
                accumulate(grads, *a, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let xs = val(x).shape();
                let ws = val(w).shape();
                let mut dx = rg(x).then(|| Tensor::zeros(xs));
                let mut dw = rg(w).then(|| Tensor::zeros(ws));
                let mut db = b.filter(|&b| rg(b)).map(|_| Tensor::zeros([1, ws[0], 1, 1]));
                kernels::conv2d_backward(
                    val(x),
                    val(w),
                    &g,
                    &geom,
                    dx.as_mut(),
                    dw.as_mut(),
                    db.as_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if !rg(*x) {
                    return;
                }
                let dst = grad_slot(grads, *x, nodes[x.0].value.shape());
                for (k, &src) in argmax.iter().enumerate() {
                    dst.data_mut()[src as usize] += g.data()[k];
                }
            }
            Op::Upsample2(x) => {
                if !rg(*x) {
                    return;
                }
                let dst = grad_slot(grads, *x, nodes[x.0].value.shape());
                kernels::upsample2_backward(&g, dst);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[1];
                    if rg(p) {
                        let piece = g.channels(start, len).expect("concat grad slice");
                        accumulate(grads, p, piece);
                    }
                    start += len;
                }
            }
            Op::Channels { x, start } => {
                if !rg(*x) {
                    return;
                }
                let len = g.shape()[1];
                let dst = grad_slot(grads, *x, nodes[x.0].value.shape());
                for b in 0..g.shape()[0] {
                    for c in 0..len {
                        for (d, &s) in dst.plane_mut(b, start + c).iter_mut().zip(g.plane(b, c)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                let shape = nodes[x.0].value.shape();
                accumulate(grads, *x, Tensor::full(shape, s));
            }
            Op::Mean(x) => {
                let shape = nodes[x.0].value.shape();
                let n = T::of(shape.iter().product::<usize>() as f64);
                accumulate(grads, *x, Tensor::full(shape, g.data()[0] / n));
            }
            Op::GridSample { input, coords } => {
                let (input, coords) = (*input, *coords);
                let mut di = rg(input).then(|| Tensor::zeros(val(input).shape()));
                let mut dc = rg(coords).then(|| Tensor::zeros(val(coords).shape()));
                kernels::grid_sample_backward(val(input), val(coords), &g, di.as_mut(), dc.as_mut());
                if let Some(di) = di {
                    accumulate(grads, input, di);
                }
                if let Some(dc) = dc {
                    accumulate(grads, coords, dc);
                }
            }
            Op::PadReplicate(x, p) => {
                if !rg(*x) {
                    return;
                }
                let dst = grad_slot(grads, *x, nodes[x.0].value.shape());
                kernels::pad_replicate_backward(&g, *p, dst);
            }
            Op::Crop(x, p) => {
                if !rg(*x) {
                    return;
                }
                let p = *p;
                let dst = grad_slot(grads, *x, nodes[x.0].value.shape());
                let [b, c, h, w] = g.shape();
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let k = dst.offset(bi, ci, hi + p, wi + p);
                                dst.data_mut()[k] += g.at(bi, ci, hi, wi);
                            }
                        }
                    }
                }
            }
        }
    }
}
