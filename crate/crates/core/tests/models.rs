use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nowcast::advection::extrapolate_tensor;
use nowcast::autodiff::Tensor;
use nowcast::nets::{Model, ModelConfig, ModelKind};

fn model(kind: ModelKind, seed: u64) -> Model {
    let mut m = Model::new(
        ModelConfig {
            kind,
            depth: 2,
            base_channels: 4,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap();
    for p in m.residual_net.iter_mut() {
        p.value = p.value.map(|v| v + 0.03);
    }
    m
}

fn inputs(seed: u64, window: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([2, window, 16, 16], |_| if rng.gen_bool(0.4) { rng.gen_range(0.0..1.0) } else { 0.0 })
}

#[test]
fn rollout_equals_nested_steps() {
    for kind in [ModelKind::Lupin, ModelKind::Rainnet] {
        let m = model(kind, 1);
        let n = m.config.window;
        let x = inputs(2, n);
        let rolled = m.rollout(&x, 3).unwrap();
        let mut window = x.clone();
        for out in &rolled {
            let step = m.step(&window, None).unwrap();
            assert_eq!(step.nowcast.data(), out.nowcast.data(), "{kind}");
            let tail = window.channels(1, n - 1).unwrap();
            window = Tensor::concat_channels(&[&tail, &step.nowcast]).unwrap();
        }
    }
}

#[test]
fn nowcasts_are_non_negative_and_residual_is_additive() {
    for kind in [ModelKind::Lupin, ModelKind::Lcnn, ModelKind::Rainnet] {
        let m = model(kind, 3);
        let x = inputs(4, m.config.window);
        let out = m.step(&x, None).unwrap();
        assert!(out.nowcast.data().iter().all(|&v| v >= 0.0), "{kind}");
        if let (Some(u), Some(s)) = (&out.motion, &out.source) {
            let last = x.channels(m.config.window - 1, 1).unwrap();
            let moved = extrapolate_tensor(&last, u, 1).unwrap();
            for ((&nc, &p), &sv) in out.nowcast.data().iter().zip(moved.data()).zip(s.data()) {
                if p + sv > 0.0 && p + sv <= 1.0 {
                    assert!((nc - (p + sv)).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn all_models_share_input_and_output_shapes() {
    let x = inputs(5, ModelConfig::default().window);
    for kind in [ModelKind::Lupin, ModelKind::Lcnn, ModelKind::Rainnet] {
        let out = model(kind, 6).step(&x, None).unwrap();
        assert_eq!(out.nowcast.shape(), [2, 1, 16, 16]);
    }
}
