//! Small configurable U-Net.
//!
//! Each encoder level is conv3-conv3 followed by 2×2 max pooling; the
//! bottleneck is conv3-conv3; each decoder level upsamples, concatenates the
//! matching skip tensor and applies conv3-conv3; a 1×1 head maps to the
//! output channels with identity activation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{he_uniform, Graph, ParamSet, Real, Shape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub slope: f64,
    /// Start the head at zero so the untrained net outputs zero.
    pub zero_head: bool,
}

impl UNetConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        UNetConfig {
            in_channels,
            out_channels,
            depth: 3,
            base_channels: 16,
            slope: 0.1,
            zero_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("U-Net depth must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("U-Net channel counts must be positive".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Parameter names and shapes in binding order.
    pub fn layout(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.w"), [cout, cin, k, k]));
            out.push((format!("{name}.b"), [1, cout, 1, 1]));
        };
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let c = self.width(l);
            conv(format!("enc{l}.conv1"), cin, c, 3);
            conv(format!("enc{l}.conv2"), c, c, 3);
            cin = c;
        }
        let cb = self.width(self.depth);
        conv("mid.conv1".into(), cin, cb, 3);
        conv("mid.conv2".into(), cb, cb, 3);
        let mut below = cb;
        for l in (0..self.depth).rev() {
            let c = self.width(l);
            conv(format!("dec{l}.conv1"), below + c, c, 3);
            conv(format!("dec{l}.conv2"), c, c, 3);
            below = c;
        }
        conv("head".into(), below, self.out_channels, 1);
        out
    }

    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut ps = ParamSet::new();
        for (name, shape) in self.layout() {
            let value = if name.ends_with(".b") || (self.zero_head && name.starts_with("head")) {
                Tensor::zeros(shape)
            } else if name.starts_with("head") {
                he_uniform(rng, shape, 1.0)
            } else {
                he_uniform(rng, shape, self.slope)
            };
            ps.push(name, value)?;
        }
        Ok(ps)
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let m = 1usize << self.depth;
        if shape[1] != self.in_channels {
            return Err(Error::shape(
                "unet",
                format!("expected {} input channels, got {}", self.in_channels, shape[1]),
            ));
        }
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::shape(
                "unet",
                format!(
                    "spatial size {}x{} not divisible by {m}; pad the input to a multiple of {m}",
                    shape[2], shape[3]
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass; `params` are the bound parameters in `layout` order.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var> {
        self.check_input(g.shape(input))?;
        let expected = self.layout().len();
        if params.len() != expected {
            return Err(Error::shape(
                "unet",
                format!("{} parameters bound, layout has {expected}", params.len()),
            ));
        }
        let mut p = params.iter().copied();
        let slope = T::of(self.slope);
        let mut block = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let (w1, b1, w2, b2) = (p.next(), p.next(), p.next(), p.next());
            let (w1, b1, w2, b2) = (w1.unwrap(), b1.unwrap(), w2.unwrap(), b2.unwrap());
            let y = g.conv2d(x, w1, Some(b1), 1, 1)?;
            let y = g.leaky_relu(y, slope);
            let y = g.conv2d(y, w2, Some(b2), 1, 1)?;
            Ok(g.leaky_relu(y, slope))
        };
        let mut skips = Vec::with_capacity(self.depth);
        let mut x = input;
        for _ in 0..self.depth {
            let y = block(g, x)?;
            skips.push(y);
            x = g.max_pool2d(y)?;
        }
        x = block(g, x)?;
        for _ in 0..self.depth {
            let up = g.upsample_nearest(x);
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat(&[up, skip])?;
            x = block(g, cat)?;
        }
        let (hw, hb) = (params[expected - 2], params[expected - 1]);
        g.conv2d(x, hw, Some(hb), 1, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> UNetConfig {
        UNetConfig {
            depth: 1,
            base_channels: 2,
            ..UNetConfig::new(2, 1)
        }
    }

    #[test]
    fn output_shape_and_zero_head() {
        let mut cfg = tiny();
        cfg.zero_head = true;
        let ps = cfg.init::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let vars = g.bind(&ps, false);
        let x = g.constant(Tensor::full([3, 2, 8, 8], 0.7));
        let y = cfg.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.shape(y), [3, 1, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_names_padding() {
        let cfg = UNetConfig { depth: 2, ..tiny() };
        let ps = cfg.init::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let vars = g.bind(&ps, false);
        let x = g.constant(Tensor::zeros([1, 2, 10, 12]));
        let err = cfg.forward(&mut g, &vars, x).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn layout_names_unique() {
        let cfg = UNetConfig::new(6, 2);
        let ps = cfg.init::<f32, _>(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(ps.names_unique());
        assert_eq!(ps.len(), 30);
    }
}
