//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of every backward rule it is used to verify.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor of the relative error, so that gradients that are
/// numerically zero compare by absolute difference.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks the vector-Jacobian product of `f` at `inputs`.
///
/// The scalar probed is `sum(f(inputs) * w)` for a random weight tensor
/// `w`, so every output element contributes. Returns the largest relative
/// error between the backward-pass gradient and the central difference with
/// step `h`, over all elements of all inputs.
pub fn check_gradients<F, R>(f: F, inputs: &[Tensor<f64>], h: f64, rng: &mut R) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out);
    let weights = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let wv = g.constant(weights.clone());
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod);
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g
            .value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..probe[k].numel() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
