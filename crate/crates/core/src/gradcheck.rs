//! Finite-difference verification of every differentiable operation in
//! 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advection::{divergence_penalty, extrapolate, temporal_difference_stacked, to_lagrangian};
use crate::autodiff::fd::check_gradients;
use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::error::Result;
use crate::nets::UNetConfig;

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

pub struct Case {
    pub name: String,
    inputs: Inputs,
    forward: Forward,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in [0.05, 1], away from the kinks at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(
    name: impl Into<String>,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    forward: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.into(),
        inputs: Box::new(inputs),
        forward: Box::new(forward),
    }
}

fn unary(name: &str, op: fn(&mut Graph<f64>, Var) -> Var, kinked: bool) -> Case {
    case(
        name,
        move |r| {
            vec![if kinked {
                off_zero(r, [2, 3, 3, 4])
            } else {
                uniform(r, [2, 3, 3, 4], -2.0, 2.0)
            }]
        },
        move |g, v| Ok(op(g, v[0])),
    )
}

fn conv_case(name: &str, x: Shape, w: Shape, stride: usize, pad: usize) -> Case {
    case(
        name,
        move |r| {
            vec![
                uniform(r, x, -1.0, 1.0),
                uniform(r, w, -1.0, 1.0),
                uniform(r, [1, w[0], 1, 1], -1.0, 1.0),
            ]
        },
        move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
    )
}

/// Every case of the suite.
pub fn cases() -> Vec<Case> {
    let s = [2, 3, 3, 4];
    let mut out = vec![
        case("add", move |r| vec![uniform(r, s, -1.0, 1.0), uniform(r, s, -1.0, 1.0)], |g, v| g.add(v[0], v[1])),
        case("sub", move |r| vec![uniform(r, s, -1.0, 1.0), uniform(r, s, -1.0, 1.0)], |g, v| g.sub(v[0], v[1])),
        case("mul", move |r| vec![uniform(r, s, -1.0, 1.0), uniform(r, s, -1.0, 1.0)], |g, v| g.mul(v[0], v[1])),
        case("add_scalar", move |r| vec![uniform(r, s, -1.0, 1.0)], |g, v| Ok(g.add_scalar(v[0], 0.7))),
        case("mul_scalar", move |r| vec![uniform(r, s, -1.0, 1.0)], |g, v| Ok(g.mul_scalar(v[0], -1.3))),
        unary("relu", |g, v| g.relu(v), true),
        unary("leaky_relu", |g, v| g.leaky_relu(v, 0.1), true),
        unary("sigmoid", |g, v| g.sigmoid(v), false),
        unary("tanh", |g, v| g.tanh(v), false),
        unary("abs", |g, v| g.abs(v), true),
        unary("clamp_min", |g, v| g.clamp_min(v, 0.0), true),
        unary("square", |g, v| g.square(v), false),
        unary("sum", |g, v| g.sum(v), false),
        unary("mean", |g, v| g.mean(v), false),
        conv_case("conv2d_3x3_gemm", [2, 3, 4, 4], [4, 3, 3, 3], 1, 1),
        conv_case("conv2d_3x3_direct", [1, 2, 8, 9], [3, 2, 3, 3], 1, 1),
        conv_case("conv2d_1x1", [2, 3, 5, 5], [2, 3, 1, 1], 1, 0),
        conv_case("conv2d_stride2", [1, 2, 6, 6], [2, 2, 3, 3], 2, 1),
        conv_case("conv2d_valid", [1, 2, 5, 6], [2, 2, 3, 3], 1, 0),
        case("max_pool2d", |r| vec![uniform(r, [2, 2, 4, 6], -1.0, 1.0)], |g, v| g.max_pool2d(v[0])),
        case("upsample_nearest", |r| vec![uniform(r, [1, 2, 3, 3], -1.0, 1.0)], |g, v| Ok(g.upsample_nearest(v[0]))),
        case(
            "concat",
            |r| vec![uniform(r, [2, 1, 3, 3], -1.0, 1.0), uniform(r, [2, 2, 3, 3], -1.0, 1.0)],
            |g, v| g.concat(&[v[0], v[1]]),
        ),
        case("channels", |r| vec![uniform(r, [2, 4, 3, 3], -1.0, 1.0)], |g, v| g.channels(v[0], 1, 2)),
        case(
            "grid_sample_bilinear",
            |r| vec![uniform(r, [2, 2, 5, 5], -1.0, 1.0), uniform(r, [2, 2, 5, 5], -1.5, 5.5)],
            |g, v| g.grid_sample_bilinear(v[0], v[1]),
        ),
        case("pad_replicate", |r| vec![uniform(r, [1, 2, 3, 4], -1.0, 1.0)], |g, v| Ok(g.pad_replicate(v[0], 2))),
        case("crop", |r| vec![uniform(r, [1, 2, 5, 6], -1.0, 1.0)], |g, v| g.crop(v[0], 1)),
        case(
            "mse",
            move |r| vec![uniform(r, s, -1.0, 1.0), uniform(r, s, -1.0, 1.0)],
            |g, v| g.mse(v[0], v[1]),
        ),
    ];
    for t in 1..=3i64 {
        out.push(case(
            format!("extrapolate_t{t}"),
            |r| vec![uniform(r, [1, 1, 6, 6], 0.0, 2.0), uniform(r, [1, 2, 6, 6], -1.5, 1.5)],
            move |g, v| extrapolate(g, v[0], v[1], t),
        ));
    }
    out.push(case(
        "divergence_penalty",
        |r| vec![uniform(r, [2, 2, 6, 6], -2.0, 2.0)],
        |g, v| divergence_penalty(g, v[0], 1.0),
    ));
    out.push(case(
        "lagrangian_differences",
        |r| vec![uniform(r, [1, 4, 5, 5], 0.0, 2.0), uniform(r, [1, 2, 5, 5], -1.0, 1.0)],
        |g, v| {
            let stack = to_lagrangian(g, v[0], v[1], 5)?;
            temporal_difference_stacked(g, &stack)
        },
    ));
    let net = UNetConfig {
        in_channels: 2,
        out_channels: 1,
        depth: 1,
        base_channels: 2,
        slope: 0.1,
        zero_head: false,
    };
    let layout = net.layout();
    out.push(case(
        "unet_depth1",
        move |r| {
            let mut v = vec![uniform(r, [1, 2, 4, 4], -1.0, 1.0)];
            v.extend(layout.iter().map(|(_, s)| uniform(r, *s, -0.6, 0.6)));
            v
        },
        move |g, v| net.forward(g, &v[1..], v[0]),
    ));
    out
}

/// Runs `case` on `instances` random inputs drawn from `seed`.
pub fn run_case(case: &Case, instances: usize, seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inputs = (case.inputs)(&mut rng);
        let err = check_gradients(&case.forward, &inputs, STEP, &mut rng)?;
        worst = worst.max(err);
    }
    Ok(CaseResult {
        name: case.name.clone(),
        instances,
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    })
}

pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    cases()
        .iter()
        .enumerate()
        .map(|(k, c)| run_case(c, instances, seed.wrapping_add(k as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_instances() {
        for r in run_suite(2, 11).unwrap() {
            assert!(r.passed, "{}: {:e}", r.name, r.max_rel_err);
        }
    }
}
