use nowcast::dataset::Corpus;
use nowcast::field::{build_split, FilterParams};
use nowcast::nets::{Model, ModelConfig, ModelKind, Normalization};
use nowcast::synthetic::{generate, Preset};
use nowcast::autodiff::Tensor;
use nowcast::training::{
    compute_gradients, evaluate_objective, stage1_step, stage2_step, train, train_step, Batch, BatchSource,
    LossWeights, RunPaths, Stage, StagePlan, TrainConfig, TrainState,
};
use nowcast::Error;

fn corpus() -> Corpus {
    let syn = generate(&Preset::Translate.spec(16, 90, 3), 3).unwrap();
    let motion: Vec<Vec<f32>> = syn.motion.iter().map(|m| m.tensor().data().to_vec()).collect();
    let split = build_split(&syn.sequence, &FilterParams { validation_block: 8, ..FilterParams::default() }).unwrap();
    Corpus::from_split(&syn.sequence, Some(&motion), Some(&syn.source), &split).unwrap()
}

fn small(kind: ModelKind, corpus: &Corpus) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            kind,
            depth: 2,
            base_channels: 4,
            norm: Normalization::fit(corpus.train.all_values()),
            ..ModelConfig::default()
        },
        stages: vec![StagePlan::new(Stage::Mf, 2), StagePlan::new(Stage::Af, 2), StagePlan::new(Stage::Joint, 1)],
        batch_size: 4,
        max_batches: Some(3),
        ..TrainConfig::default()
    }
}

fn first_batch(cfg: &TrainConfig, corpus: &Corpus, model: &Model) -> Batch {
    let mut src = BatchSource::new(&corpus.train, cfg, Some(model));
    src.batch(&[0, 1, 2, 3]).unwrap()
}

#[test]
fn frozen_motion_net_is_bit_identical_after_af_steps() {
    let c = corpus();
    let cfg = small(ModelKind::Lupin, &c);
    let model = Model::new(cfg.model.clone(), 1).unwrap();
    let batch = first_batch(&cfg, &c, &model);
    let mut state = TrainState::new(model);
    // Give the residual head a nonzero start so gradients reach the motion path.
    train_step(&cfg, Stage::Af, 1e-2, &mut state, &batch, 1).unwrap();
    let before = state.model.motion_net.clone();
    for step in 0..3 {
        train_step(&cfg, Stage::Af, 1e-2, &mut state, &batch, step + 2).unwrap();
    }
    for (a, b) in before.iter().zip(state.model.motion_net.iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{} moved", a.name);
    }
}

#[test]
fn stage_gradients_cover_the_trained_networks_only() {
    let c = corpus();
    let cfg = small(ModelKind::Lupin, &c);
    let model = Model::new(cfg.model.clone(), 2).unwrap();
    let batch = first_batch(&cfg, &c, &model);
    let (_, gm, gr) = compute_gradients(&cfg, Stage::Mf, &model, &batch).unwrap();
    assert!(gm.is_some() && gr.is_none());
    let (_, gm, gr) = compute_gradients(&cfg, Stage::Af, &model, &batch).unwrap();
    assert!(gm.is_none() && gr.is_some());
    let (m, gm, gr) = compute_gradients(&cfg, Stage::Joint, &model, &batch).unwrap();
    assert!(gm.is_some() && gr.is_some());
    let w = cfg.weights;
    let expect = w.stage3(m.l_af.unwrap(), m.l_mf.unwrap(), m.l_pi.unwrap());
    assert!((m.loss - expect).abs() < 1e-5 * expect.max(1.0));
}

#[test]
fn repeated_steps_overfit_one_batch() {
    let c = corpus();
    let cfg = small(ModelKind::Lupin, &c);
    let model = Model::new(cfg.model.clone(), 4).unwrap();
    let batch = first_batch(&cfg, &c, &model);
    let mut state = TrainState::new(model);
    let first = train_step(&cfg, Stage::Mf, 3e-3, &mut state, &batch, 1).unwrap().loss;
    let mut last = first;
    for s in 0..40 {
        last = train_step(&cfg, Stage::Mf, 3e-3, &mut state, &batch, s + 2).unwrap().loss;
    }
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_aborts_with_stage_and_step() {
    let c = corpus();
    let cfg = small(ModelKind::Rainnet, &c);
    let model = Model::new(cfg.model.clone(), 5).unwrap();
    let mut batch = first_batch(&cfg, &c, &model);
    batch.frames.data_mut()[7] = f32::NAN;
    let mut state = TrainState::new(model);
    match train_step(&cfg, Stage::Af, 1e-3, &mut state, &batch, 17) {
        Err(Error::NanLoss { stage, step, .. }) => {
            assert_eq!(stage, "af");
            assert_eq!(step, 17);
        }
        other => panic!("expected NanLoss, got {other:?}"),
    }
}

#[test]
fn training_is_deterministic_and_writes_checkpoints() {
    let c = corpus();
    let cfg = small(ModelKind::Lupin, &c);
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths {
        out_dir: Some(dir.path().to_path_buf()),
        run_file: Some(dir.path().join("run.jsonl")),
    };
    let a = train(&cfg, &c, None, &paths).unwrap();
    let b = train(&cfg, &c, None, &RunPaths::default()).unwrap();
    for (x, y) in a.model.residual_net.iter().zip(b.model.residual_net.iter()) {
        assert_eq!(x.value.data(), y.value.data());
    }
    assert_eq!(a.stages.len(), 3);
    for s in &a.stages {
        assert!(s.checkpoint.as_ref().unwrap().exists());
    }
    let lines = std::fs::read_to_string(dir.path().join("run.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), a.records.len());
    let loaded = Model::load(nowcast::training::final_checkpoint(dir.path(), ModelKind::Lupin)).unwrap();
    assert_eq!(loaded.config, a.model.config);
}

#[test]
fn baselines_train_one_stage() {
    let c = corpus();
    for kind in [ModelKind::Rainnet, ModelKind::Lcnn] {
        let cfg = small(ModelKind::Lupin, &c).for_baseline(kind);
        let out = train(&cfg, &c, None, &RunPaths::default()).unwrap();
        assert_eq!(out.stages.len(), 1);
        assert!(out.records.iter().all(|r| r.train.loss.is_finite()));
    }
}

fn mean_abs_divergence(model: &Model, batch: &Batch) -> f64 {
    let n = model.config.window;
    let inputs = batch.frames.channels(0, n).unwrap();
    let u = model.predict_motion(&inputs).unwrap().cast::<f64>();
    let d = nowcast::advection::divergence_tensor(&u, model.config.dx_km).unwrap();
    d.data().iter().map(|v| v.abs()).sum::<f64>() / d.numel() as f64
}

#[test]
fn heavy_physics_weight_smooths_the_motion_field() {
    let c = corpus();
    let mut cfg = small(ModelKind::Lupin, &c);
    cfg.weights = LossWeights::new(0.95, 0.5).unwrap();
    let model = Model::new(cfg.model.clone(), 6).unwrap();
    let batch = first_batch(&cfg, &c, &model);
    let before = mean_abs_divergence(&model, &batch);
    let mut state = TrainState::new(model);
    for _ in 0..15 {
        stage1_step(&cfg, &mut state, &batch, 3e-3).unwrap();
    }
    let after = mean_abs_divergence(&state.model, &batch);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn residual_stage_beats_lagrangian_persistence_on_its_batch() {
    let c = corpus();
    let cfg = small(ModelKind::Lupin, &c);
    let model = Model::new(cfg.model.clone(), 7).unwrap();
    let batch = first_batch(&cfg, &c, &model);
    // A zero residual head starts the stage at Lagrangian persistence.
    let start = evaluate_objective(&cfg, Stage::Af, &model, &batch).unwrap().loss;
    let mut state = TrainState::new(model);
    for _ in 0..20 {
        stage2_step(&cfg, &mut state, &batch, 3e-3).unwrap();
    }
    let end = evaluate_objective(&cfg, Stage::Af, &state.model, &batch).unwrap().loss;
    assert!(end <= start, "{start} -> {end}");
}

#[test]
fn joint_stage_reaches_the_motion_net_through_the_forecast_alone() {
    let c = corpus();
    let mut cfg = small(ModelKind::Lupin, &c);
    cfg.weights = LossWeights::ablation(0.0, 0.0).unwrap();
    let mut model = Model::new(cfg.model.clone(), 8).unwrap();
    for p in model.residual_net.iter_mut() {
        p.value = p.value.map(|v| v + 0.02);
    }
    let batch = first_batch(&cfg, &c, &model);
    let (m, gm, _) = compute_gradients(&cfg, Stage::Joint, &model, &batch).unwrap();
    assert!((m.loss - m.l_af.unwrap()).abs() < 1e-9);
    let norm: f64 = gm.unwrap().iter().map(|t| t.norm()).sum();
    assert!(norm > 0.0);
}

#[test]
fn no_change_target_drives_the_source_term_to_zero() {
    let c = corpus();
    let cfg = small(ModelKind::Lupin, &c);
    let mut model = Model::new(cfg.model.clone(), 9).unwrap();
    for p in model.motion_net.iter_mut().filter(|p| p.name.starts_with("head.")) {
        p.value = p.value.map(|_| 0.0);
    }
    for p in model.residual_net.iter_mut() {
        p.value = p.value.map(|v| v + 0.02);
    }
    let mut batch = first_batch(&cfg, &c, &model);
    // Every frame equals the last input, so zero motion and zero source are exact.
    let [b, t, h, w] = batch.frames.shape();
    let n = cfg.model.window;
    batch.frames = Tensor::from_fn([b, t, h, w], |[i, _, r, col]| batch.frames.at(i, n - 1, r, col));
    let source = |m: &Model| {
        let out = m.step(&batch.frames.channels(0, n).unwrap(), None).unwrap();
        out.source.unwrap().max_abs()
    };
    let start = source(&model);
    let mut state = TrainState::new(model);
    for _ in 0..40 {
        stage2_step(&cfg, &mut state, &batch, 3e-3).unwrap();
    }
    let end = source(&state.model);
    assert!(end < 0.2 * start, "{start} -> {end}");
}

#[test]
fn full_motion_weight_in_joint_stage_is_the_first_stage_objective() {
    let c = corpus();
    let mut cfg = small(ModelKind::Lupin, &c);
    cfg.weights = LossWeights::ablation(0.0, 1.0).unwrap();
    let model = Model::new(cfg.model.clone(), 10).unwrap();
    let batch = first_batch(&cfg, &c, &model);
    let joint = evaluate_objective(&cfg, Stage::Joint, &model, &batch).unwrap();
    let first = evaluate_objective(&cfg, Stage::Mf, &model, &batch).unwrap();
    assert!((joint.loss - first.loss).abs() <= 1e-6 * first.loss.max(1.0));
    assert!((first.loss - first.l_mf.unwrap()).abs() <= 1e-6 * first.loss.max(1.0));
}

#[test]
fn motion_losses_vanish_for_the_true_rigid_motion() {
    use nowcast::autodiff::Graph;
    use nowcast::training::{loss_mf, loss_naive};
    let (n, h, w) = (6, 16, 16);
    let blob = |k: usize| -> Vec<f32> {
        (0..h * w)
            .map(|i| {
                let (r, col) = ((i / w) as f32, (i % w) as f32);
                let (cx, cy) = (4.0 + k as f32, 8.0);
                (-((col - cx).powi(2) + (r - cy).powi(2)) / 4.0).exp()
            })
            .collect()
    };
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec([1, n, h, w], (0..n).flat_map(blob).collect()).unwrap());
    let y = g.constant(Tensor::from_vec([1, 1, h, w], blob(n)).unwrap());
    let truth = g.constant(Tensor::from_fn([1, 2, h, w], |[_, c, _, _]| if c == 0 { 1.0 } else { 0.0 }));
    let still = g.constant(Tensor::zeros([1, 2, h, w]));

    let values = blob(n);
    let mean = values.iter().sum::<f32>() / values.len() as f32;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / values.len() as f32;

    let naive = loss_naive(&mut g, truth, x, y).unwrap();
    let mf = loss_mf(&mut g, truth, x, y, true).unwrap();
    assert!(g.value(naive).data()[0] < 1e-4 * variance);
    assert!(g.value(mf).data()[0] < 1e-4 * variance);

    let naive0 = loss_naive(&mut g, still, x, y).unwrap();
    let mf0 = loss_mf(&mut g, still, x, y, true).unwrap();
    let persistence = blob(n - 1).iter().zip(&values).map(|(a, b)| (a - b).powi(2)).sum::<f32>() / values.len() as f32;
    assert!((g.value(naive0).data()[0] - persistence).abs() < 1e-6);
    assert!(g.value(mf0).data()[0] >= g.value(naive0).data()[0]);
}
