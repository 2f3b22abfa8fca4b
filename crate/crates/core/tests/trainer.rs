use std::collections::BTreeMap;

use dvgt::model::{Model, ModelConfig, Params};
use dvgt::scene::{synthesize, SceneSample, SceneSpec};
use dvgt::trainer::*;
use dvgt::Error;
use dvgt_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model(seed: u64) -> Model<f32> {
    Model::new(ModelConfig { dim: 16, heads: 2, blocks: 1, patch: 4, ..ModelConfig::default() }, seed).unwrap()
}

fn clip(seed: u64, frames: usize, views: usize) -> SceneSample {
    synthesize(&SceneSpec::random_street(seed, frames, views, 8, 12)).unwrap()
}

fn datasets(names: &[&str], frames: usize, views: usize) -> Vec<Dataset> {
    names
        .iter()
        .enumerate()
        .map(|(k, n)| Dataset { name: n.to_string(), scenes: vec![clip(k as u64, frames, views)] })
        .collect()
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig { steps: 1000, peak_lr: 3e-4, ..TrainConfig::default() };
    assert_eq!(cfg.warmup_steps(), 50);
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert!((lr_at(25, &cfg) - 1.5e-4).abs() < 1e-18);
    assert_eq!(lr_at(50, &cfg), 3e-4);
    assert!(lr_at(1000, &cfg).abs() < 1e-12);
    // halfway through the decay the cosine sits at half the peak
    assert!((lr_at(525, &cfg) - 1.5e-4).abs() < 1e-12);
}

proptest! {
    #[test]
    fn schedule_rises_then_falls(steps in 20usize..5000, frac in 0.01f64..0.5) {
        let cfg = TrainConfig { steps, warmup_fraction: frac, peak_lr: 1e-3, ..TrainConfig::default() };
        let w = cfg.warmup_steps();
        for k in 1..=steps {
            let (a, b) = (lr_at(k - 1, &cfg), lr_at(k, &cfg));
            prop_assert!(b >= 0.0 && b <= 1e-3 + 1e-18);
            if k <= w { prop_assert!(b >= a); } else { prop_assert!(b <= a); }
        }
    }

    #[test]
    fn batches_respect_the_image_budget(budget in 1usize..20, lo in 1usize..5, extra in 0usize..5, seed in 0u64..1000) {
        let ds = datasets(&["x"], 7, 5);
        let cfg = TrainConfig { image_budget: budget.max(lo), view_range: [lo, lo + extra], ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = sample_batch(&ds, &cfg, &mut rng).unwrap();
        prop_assert!(b.sample.frames * b.sample.views <= cfg.image_budget);
        prop_assert_eq!(b.views.len(), b.sample.views);
        prop_assert!(b.views.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn clipped_norm_never_exceeds_threshold(scale in 1e-3f64..1e3, clip in 0.1f64..10.0, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let mut g: Params<f64> = BTreeMap::new();
        g.insert("a".into(), Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0) * scale));
        g.insert("b".into(), Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0) * scale));
        let before = clip_gradients(&mut g, clip);
        let after = global_norm(&g);
        prop_assert!(after <= clip + 1e-9);
        if before <= clip { prop_assert!((after - before).abs() < 1e-12); }
    }
}

#[test]
fn frame_cap_follows_budget_over_views() {
    let ds = datasets(&["x"], 10, 8);
    let cfg = TrainConfig { image_budget: 48, view_range: [8, 8], ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ts: Vec<usize> = (0..300).map(|_| sample_batch(&ds, &cfg, &mut rng).unwrap().sample.frames).collect();
    assert_eq!(*ts.iter().max().unwrap(), 6);
    assert_eq!(*ts.iter().min().unwrap(), 2);
}

#[test]
fn view_count_is_clipped_to_the_rig() {
    let ds = datasets(&["x"], 3, 3);
    let cfg = TrainConfig { view_range: [2, 8], ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ns: Vec<usize> = (0..200).map(|_| sample_batch(&ds, &cfg, &mut rng).unwrap().sample.views).collect();
    assert!(ns.iter().all(|&n| (2..=3).contains(&n)));
    assert!(ns.contains(&3));
}

#[test]
fn single_frame_budget_gives_single_frames() {
    let ds = datasets(&["x"], 4, 2);
    let cfg = TrainConfig { image_budget: 3, view_range: [2, 2], ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        assert_eq!(sample_batch(&ds, &cfg, &mut rng).unwrap().sample.frames, 1);
    }
}

#[test]
fn dataset_frequencies_follow_weights() {
    let names = ["a", "b", "c", "d", "e"];
    let ds = datasets(&names, 2, 2);
    let weights: BTreeMap<String, f64> = names.iter().map(|n| n.to_string()).zip([6.0, 5.0, 77.0, 6.0, 6.0]).collect();
    let cfg = TrainConfig { dataset_weights: weights, ..TrainConfig::default() };
    let probs = dataset_probabilities(&ds, &cfg).unwrap();
    for (p, e) in probs.iter().zip([0.06, 0.05, 0.77, 0.06, 0.06]) {
        assert!((p - e).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; 5];
    for _ in 0..20_000 {
        counts[sample_batch(&ds, &cfg, &mut rng).unwrap().dataset] += 1;
    }
    for (c, e) in counts.iter().zip([0.06, 0.05, 0.77, 0.06, 0.06]) {
        assert!((*c as f64 / 20_000.0 - e).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn sampling_errors() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_batch(&[], &cfg, &mut rng), Err(Error::Data(_))));
    let empty = vec![Dataset { name: "x".into(), scenes: vec![] }];
    assert!(matches!(sample_batch(&empty, &cfg, &mut rng), Err(Error::Data(_))));
    let ds = datasets(&["x"], 2, 2);
    let named = TrainConfig { dataset_weights: [("y".to_string(), 1.0)].into(), ..TrainConfig::default() };
    assert!(matches!(sample_batch(&ds, &named, &mut rng), Err(Error::Config(_))));
    let negative = TrainConfig { dataset_weights: [("x".to_string(), -1.0)].into(), ..TrainConfig::default() };
    assert!(negative.validate().is_err());
    assert!(TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { image_budget: 1, view_range: [2, 8], ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn gradient_of_norm_ten_is_clipped_to_one() {
    let mut g: Params<f64> = BTreeMap::new();
    g.insert("a".into(), Tensor::new(vec![2], vec![6.0, 0.0]).unwrap());
    g.insert("b".into(), Tensor::new(vec![1], vec![8.0]).unwrap());
    let before = clip_gradients(&mut g, 1.0);
    assert!((before - 10.0).abs() < 1e-12);
    assert!((global_norm(&g) - 1.0).abs() < 1e-9);
    assert!((g["a"].data()[0] - 0.6).abs() < 1e-12 && (g["b"].data()[0] - 0.8).abs() < 1e-12);
}

#[test]
fn adamw_matches_scalar_reference() {
    let mut model =
        Model::<f64>::new(ModelConfig { dim: 8, heads: 2, blocks: 1, patch: 4, ..ModelConfig::default() }, 0).unwrap();
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    use rand::Rng;
    let grads: Vec<Params<f64>> = (0..3)
        .map(|_| {
            model
                .params()
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::from_fn(t.shape(), |_| rng.gen_range(-1.0..1.0))))
                .collect()
        })
        .collect();
    let name = "blocks.0.local.fc1.w";
    let (mut p, mut m, mut v) = (model.params()[name].data()[5], 0.0f64, 0.0f64);
    let bias = "blocks.0.local.fc1.b";
    let mut pb = model.params()[bias].data()[0];
    let (mut mb, mut vb) = (0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        let lr = 1e-3 * (t + 1) as f64;
        adamw_update(&mut model, g, &mut state, &cfg, lr);
        let step = (t + 1) as i32;
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, gi: f64, wd: f64| {
            *m = 0.9 * *m + 0.1 * gi;
            *v = 0.999 * *v + 0.001 * gi * gi;
            let mh = *m / (1.0 - 0.9f64.powi(step));
            let vh = *v / (1.0 - 0.999f64.powi(step));
            *p -= lr * (mh / (vh.sqrt() + 1e-8) + wd * *p);
        };
        upd(&mut p, &mut m, &mut v, g[name].data()[5], 0.05);
        upd(&mut pb, &mut mb, &mut vb, g[bias].data()[0], 0.0);
    }
    assert!((model.params()[name].data()[5] - p).abs() < 1e-15);
    assert!((model.params()[bias].data()[0] - pb).abs() < 1e-15);
    assert_eq!(state.step, 3);
    assert!(decays("pose.fc1.w") && !decays("pose.fc1.b") && !decays("ego") && !decays("blocks.0.local.ls1"));
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise() {
    let mut model = tiny_model(0);
    let before = model.params().clone();
    let mut state = TrainState::new(&model);
    let batch = clip(5, 2, 2);
    let r = train_step(&mut model, &batch, &TrainConfig::default(), &mut state, 0.0).unwrap();
    assert!(r.loss.total.is_finite() && r.grad_norm > 0.0);
    for (k, t) in model.params() {
        let same = t.data().iter().zip(before[k].data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{k} moved");
    }
}

#[test]
fn identical_inputs_give_identical_weights() {
    let batch = clip(6, 2, 2);
    let cfg = TrainConfig::default();
    let run = || {
        let mut model = tiny_model(3);
        let mut state = TrainState::new(&model);
        for _ in 0..2 {
            train_step(&mut model, &batch, &cfg, &mut state, 1e-3).unwrap();
        }
        model.params().clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_values_are_named() {
    let mut model = tiny_model(0);
    let mut state = TrainState::new(&model);
    let mut batch = clip(5, 2, 2);
    batch.images.data_mut()[7] = f32::NAN;
    match train_step(&mut model, &batch, &TrainConfig::default(), &mut state, 1e-3) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("input images"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let batch = clip(5, 2, 2);
    model.params_mut().get_mut("embed.w").unwrap().data_mut()[0] = f32::INFINITY;
    match train_step(&mut model, &batch, &TrainConfig::default(), &mut state, 1e-3) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("forward pass"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn resume_matches_a_straight_run() {
    let ds = vec![Dataset { name: "x".into(), scenes: vec![clip(1, 3, 2), clip(2, 3, 2)] }];
    let cfg = TrainConfig { steps: 20, peak_lr: 1e-3, seed: 11, checkpoint_every: 7, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let straight = fit(tiny_model(0), TrainState::new(&tiny_model(0)), &ds, &cfg, None, &mut std::io::sink()).unwrap();

    let ck = dir.path().join("ckpt");
    let leg = fit_until(tiny_model(0), TrainState::new(&tiny_model(0)), &ds, &cfg, 9, Some(&ck), &mut std::io::sink())
        .unwrap();
    assert_eq!(leg.history.len(), 9);
    let (model, state, saved_cfg) = load_checkpoint::<f32>(&ck).unwrap();
    assert_eq!(state.step, 9);
    assert_eq!(saved_cfg, cfg);
    assert_eq!(model.params(), leg.model.params());
    let resumed = fit(model, state, &ds, &cfg, Some(&ck), &mut std::io::sink()).unwrap();

    assert_eq!(resumed.model.params(), straight.model.params());
    assert_eq!(resumed.state, straight.state);
    let tail: Vec<f64> = straight.history[9..].iter().map(|r| r.loss.total).collect();
    let again: Vec<f64> = resumed.history.iter().map(|r| r.loss.total).collect();
    assert_eq!(tail, again);
    let (reloaded, _, _) = load_checkpoint::<f32>(&ck).unwrap();
    assert_eq!(reloaded.params(), straight.model.params());
}

#[test]
fn fit_logs_every_step_and_reduces_loss() {
    let ds = vec![Dataset { name: "x".into(), scenes: vec![clip(3, 2, 2)] }];
    let cfg = TrainConfig { steps: 200, peak_lr: 3e-3, seed: 2, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let out = fit(tiny_model(1), TrainState::new(&tiny_model(1)), &ds, &cfg, Some(dir.path()), &mut log).unwrap();
    let lines: Vec<serde_json::Value> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 200);
    for key in ["step", "total", "pose_term", "pmap_terms", "lr", "grad_norm", "s_per_step"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    let first = out.history[0].loss.total;
    let last = out.history[199].loss.total;
    assert!(last < first, "{first} -> {last}");
    assert!(out.history.iter().all(|r| r.lr <= cfg.peak_lr));
    assert!(Model::<f32>::load(dir.path()).is_ok());
}

#[test]
fn fit_rejects_empty_input() {
    let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
    assert!(fit(tiny_model(0), TrainState::new(&tiny_model(0)), &[], &cfg, None, &mut std::io::sink()).is_err());
}

#[test]
fn augmentation_touches_images_only() {
    let ds = datasets(&["x"], 3, 2);
    let plain = TrainConfig { view_range: [2, 2], ..TrainConfig::default() };
    let aug =
        TrainConfig { augment: Augment { color_jitter: 0.3, grayscale_prob: 0.5, blur_prob: 0.5 }, ..plain.clone() };
    let a = sample_batch(&ds, &plain, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sample_batch(&ds, &aug, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!((a.start, &a.views, a.sample.frames), (b.start, &b.views, b.sample.frames));
    assert_eq!(a.sample.pointmaps, b.sample.pointmaps);
    assert_eq!(a.sample.valid_mask, b.sample.valid_mask);
    assert_ne!(a.sample.images, b.sample.images);
    assert!(b.sample.images.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
}
