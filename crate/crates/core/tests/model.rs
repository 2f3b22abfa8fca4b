use dvgt::model::{
    self, attention_cost, AttentionMode, AttentionStats, EgoTokenMode, ForwardOptions, Model, ModelConfig, Stage,
};
use dvgt_tensor::{kernels, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(mode: AttentionMode) -> ModelConfig {
    ModelConfig { dim: 16, heads: 2, blocks: 2, patch: 4, attention_mode: mode, ..ModelConfig::default() }
}

fn images(t: usize, n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[t, n, h, w, 3], |_| rng.gen_range(0.0..1.0))
}

/// Swaps views 0 and 1 of a `[T,N,...]` tensor.
fn swap_views<F: dvgt_tensor::Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let s = x.shape();
    let inner: usize = s[2..].iter().product();
    let n = s[1];
    let mut out = x.data().to_vec();
    for t in 0..s[0] {
        let a = (t * n) * inner;
        let b = (t * n + 1) * inner;
        out[a..a + inner].copy_from_slice(&x.data()[b..b + inner]);
        out[b..b + inner].copy_from_slice(&x.data()[a..a + inner]);
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig::full_scale().validate().is_ok());
    assert!(ModelConfig { dim: 30, heads: 4, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { dim: 18, heads: 3, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { uncertainty_clamp: [1.0, 0.5], ..ModelConfig::default() }.validate().is_err());
    let m = Model::<f64>::new(tiny(AttentionMode::Factorized), 0).unwrap();
    assert!(m.predict(&images(1, 1, 10, 8, 0), &ForwardOptions::default()).is_err());
    let json = serde_json::to_string(&ModelConfig::default()).unwrap();
    assert!(json.contains("\"factorized\"") && json.contains("\"shared\"") && json.contains("\"linear10\""));
    let partial: ModelConfig = serde_json::from_str(r#"{"dim": 32, "heads": 2}"#).unwrap();
    assert_eq!(partial.blocks, 2);
}

#[test]
fn token_grid_shape() {
    let cfg = ModelConfig { patch: 8, ..tiny(AttentionMode::Factorized) };
    let m = Model::<f64>::new(cfg, 0).unwrap();
    let mut tape = Tape::no_grad();
    let p = m.bind(&mut tape);
    let grid = m.encode(&mut tape, &p, &images(2, 2, 32, 32, 1)).unwrap();
    assert_eq!(grid.shape(), &[2, 2, 17, 16]);
}

#[test]
fn identical_frames_without_temporal_code_give_identical_tokens() {
    let cfg = ModelConfig { use_temporal_embedding: false, ..tiny(AttentionMode::Factorized) };
    let m = Model::<f64>::new(cfg.clone(), 0).unwrap();
    let one = images(1, 2, 8, 8, 2);
    let two = Tensor::new(vec![2, 2, 8, 8, 3], [one.data(), one.data()].concat()).unwrap();
    let mut tape = Tape::no_grad();
    let p = m.bind(&mut tape);
    let g = m.encode(&mut tape, &p, &two).unwrap();
    let half = g.value().numel() / 2;
    assert_eq!(&g.value().data()[..half], &g.value().data()[half..]);

    let m = Model::<f64>::new(ModelConfig { use_temporal_embedding: true, ..cfg }, 0).unwrap();
    let p = m.bind(&mut tape);
    let g = m.encode(&mut tape, &p, &two).unwrap();
    assert_ne!(&g.value().data()[..half], &g.value().data()[half..]);
}

#[test]
fn shared_ego_encoding_permutes_with_views() {
    let m = Model::<f64>::new(tiny(AttentionMode::Factorized), 3).unwrap();
    let x = images(2, 2, 8, 12, 3);
    let mut tape = Tape::no_grad();
    let p = m.bind(&mut tape);
    let a = m.encode(&mut tape, &p, &x).unwrap();
    let b = m.encode(&mut tape, &p, &swap_views(&x)).unwrap();
    assert_eq!(swap_views(a.value()), *b.value());
}

#[test]
fn per_view_slots_break_permutation_symmetry() {
    let cfg =
        ModelConfig { ego_token_mode: EgoTokenMode::PerViewSlot, max_view_slots: 3, ..tiny(AttentionMode::Factorized) };
    let m = Model::<f64>::new(cfg, 3).unwrap();
    let x = images(1, 2, 8, 8, 4);
    let mut tape = Tape::no_grad();
    let p = m.bind(&mut tape);
    let a = m.encode(&mut tape, &p, &x).unwrap();
    let b = m.encode(&mut tape, &p, &swap_views(&x)).unwrap();
    assert_ne!(swap_views(a.value()), *b.value());
    assert!(m.predict(&images(1, 4, 8, 8, 0), &ForwardOptions::default()).is_err());
}

fn unit(m: &Model<f64>, x: &Tensor<f64>, prefix: &str, stage: Stage) -> Tensor<f64> {
    let mut tape = Tape::no_grad();
    let p = m.bind(&mut tape);
    let x = tape.constant(x.clone());
    let mut stats = AttentionStats::default();
    m.attention_unit(&mut tape, &p, &x, prefix, stage, &ForwardOptions::default(), &mut stats).unwrap().value().clone()
}

fn random_grid(t: usize, n: usize, s: usize, d: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    Tensor::from_fn(&[t, n, s, d], |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn single_image_key_sets_coincide() {
    let m = Model::<f64>::new(ModelConfig { layer_scale_init: 0.5, ..tiny(AttentionMode::Factorized) }, 5).unwrap();
    let x = random_grid(1, 1, 5, 16);
    for name in ["spatial", "temporal"] {
        let prefix = format!("blocks.0.{name}");
        let stage = if name == "spatial" { Stage::Spatial } else { Stage::Temporal };
        assert_eq!(unit(&m, &x, &prefix, stage), unit(&m, &x, &prefix, Stage::Local));
    }
    // a whole factorized block is three local units with the three weight sets
    let mut y = x.clone();
    for name in ["local", "spatial", "temporal"] {
        y = unit(&m, &y, &format!("blocks.0.{name}"), Stage::Local);
    }
    let mut tape = Tape::no_grad();
    let p = m.bind(&mut tape);
    let mut z = tape.constant(x.clone());
    let mut stats = AttentionStats::default();
    for &stage in m.config().stages() {
        z = m
            .attention_unit(
                &mut tape,
                &p,
                &z,
                &format!("blocks.0.{}", stage.name()),
                stage,
                &ForwardOptions::default(),
                &mut stats,
            )
            .unwrap();
    }
    assert_eq!(*z.value(), y);

    let g = Model::<f64>::new(ModelConfig { layer_scale_init: 0.5, ..tiny(AttentionMode::Global) }, 5).unwrap();
    assert_eq!(unit(&g, &x, "blocks.1.global", Stage::Global), unit(&g, &x, "blocks.1.global", Stage::Local));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = Tensor::<f64>::from_fn(&[3, 7, 4], |_| rng.gen_range(-3.0..3.0));
    let k = Tensor::<f64>::from_fn(&[3, 9, 4], |_| rng.gen_range(-3.0..3.0));
    let mask: Vec<bool> = (0..27).map(|i| i % 4 != 1).collect();
    for m in [None, Some(mask.as_slice())] {
        let w = kernels::attention_weights(&q, &k, 0.5, m).unwrap();
        for row in w.data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn temporal_frame_mask_changes_values_not_shapes() {
    let m = Model::<f64>::new(ModelConfig { layer_scale_init: 0.5, ..tiny(AttentionMode::Factorized) }, 7).unwrap();
    let x = images(3, 2, 8, 8, 7);
    let plain = m.predict(&x, &ForwardOptions::default()).unwrap();
    let masked = m.predict(&x, &ForwardOptions { temporal_frame_mask: Some(vec![true, false, true]) }).unwrap();
    assert_eq!(plain.pointmaps.shape(), masked.pointmaps.shape());
    assert_eq!(plain.pose_raw.shape(), masked.pose_raw.shape());
    assert_ne!(plain.pointmaps, masked.pointmaps);
    assert!(m.predict(&x, &ForwardOptions { temporal_frame_mask: Some(vec![true]) }).is_err());
}

#[test]
fn output_shapes_and_ranges() {
    let cfg = ModelConfig { patch: 8, ..tiny(AttentionMode::Factorized) };
    let m = Model::<f64>::new(cfg, 8).unwrap();
    let out = m.predict(&images(2, 2, 32, 32, 8), &ForwardOptions::default()).unwrap();
    assert_eq!(out.pointmaps.shape(), &[2, 2, 32, 32, 3]);
    assert_eq!(out.sigma.shape(), &[2, 2, 32, 32, 1]);
    assert_eq!(out.pose_raw.shape(), &[2, 7]);
    assert_eq!(out.poses.len(), 2);
    assert!(out.sigma.data().iter().all(|&s| (1e-3..=1e3).contains(&s)));
    for row in out.pose_raw.data().chunks(7) {
        let n: f64 = row[3..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(row[3] >= 0.0);
    }
}

#[test]
fn zero_raw_uncertainty_gives_unit_sigma() {
    let mut m = Model::<f64>::new(tiny(AttentionMode::Factorized), 9).unwrap();
    let w = m.params_mut().get_mut("point.w").unwrap();
    let cols = w.shape()[1];
    for (k, v) in w.data_mut().iter_mut().enumerate() {
        if k % cols % 4 == 3 {
            *v = 0.0;
        }
    }
    let out = m.predict(&images(1, 2, 8, 8, 9), &ForwardOptions::default()).unwrap();
    assert!(out.sigma.data().iter().all(|&s| s == 1.0));
}

#[test]
fn sigma_respects_clamp() {
    let mut m = Model::<f64>::new(tiny(AttentionMode::Factorized), 10).unwrap();
    m.params_mut().get_mut("point.b").unwrap().data_mut().iter_mut().for_each(|b| *b = 50.0);
    let out = m.predict(&images(1, 1, 8, 8, 10), &ForwardOptions::default()).unwrap();
    assert!(out.sigma.data().iter().all(|&s| (s - 1e3).abs() < 1e-9));
}

#[test]
fn view_permutation_f32() {
    for mode in [AttentionMode::Factorized, AttentionMode::Global] {
        let m = Model::<f32>::new(ModelConfig { layer_scale_init: 0.3, ..tiny(mode) }, 12).unwrap();
        let x: Tensor<f32> = images(3, 2, 8, 12, 12).cast();
        let a = m.predict(&x, &ForwardOptions::default()).unwrap();
        let b = m.predict(&swap_views(&x), &ForwardOptions::default()).unwrap();
        assert!(a.pose_raw.max_abs_diff(&b.pose_raw) < 1e-5, "{mode:?}");
        assert!(swap_views(&a.pointmaps).max_abs_diff(&b.pointmaps) < 1e-5, "{mode:?}");
    }
}

#[test]
fn forward_is_deterministic_and_single_image_runs() {
    let m = Model::<f32>::new(tiny(AttentionMode::Factorized), 13).unwrap();
    let x: Tensor<f32> = images(2, 3, 8, 8, 13).cast();
    assert_eq!(m.predict(&x, &ForwardOptions::default()).unwrap(), m.predict(&x, &ForwardOptions::default()).unwrap());
    let one = m.predict(&images(1, 1, 8, 8, 1).cast(), &ForwardOptions::default()).unwrap();
    assert_eq!(one.poses.len(), 1);
}

#[test]
fn cost_examples() {
    let c = attention_cost(1, 1, 4);
    assert_eq!((c.global, c.factorized), (16, 48));
    let c = attention_cost(16, 8, 100);
    assert_eq!(c.global, 163_840_000);
    assert_eq!(c.factorized, 32_000_000);
    assert!((c.ratio - 128.0 / 25.0).abs() < 1e-12);
}

#[test]
fn instrumented_counts_match_formula() {
    for (t, n) in [(1, 1), (2, 3), (4, 2), (3, 1)] {
        let p_tok = 2 * 3 + 1;
        let c = attention_cost(t as u64, n as u64, p_tok as u64);
        for mode in [AttentionMode::Factorized, AttentionMode::Global] {
            let m = Model::<f32>::new(tiny(mode), 0).unwrap();
            let s = m.predict(&images(t, n, 8, 12, 0).cast(), &ForwardOptions::default()).unwrap().stats;
            let blocks = m.config().blocks as u128;
            match mode {
                AttentionMode::Factorized => {
                    assert_eq!((s.local + s.spatial + s.temporal) as u128, blocks * c.factorized);
                    assert_eq!(s.global, 0);
                }
                AttentionMode::Global => {
                    assert_eq!(s.global as u128, blocks * c.global);
                    assert_eq!(s.local as u128, blocks * (t * n * p_tok * p_tok) as u128);
                }
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        ModelConfig { ego_token_mode: EgoTokenMode::PerViewSlot, max_view_slots: 4, ..tiny(AttentionMode::Global) };
    let m = Model::<f32>::new(cfg, 14).unwrap();
    m.save(dir.path()).unwrap();
    let back = Model::<f32>::load(dir.path()).unwrap();
    assert_eq!(m, back);
    assert!(Model::<f64>::load(dir.path()).is_err(), "dtype mismatch");

    let man = dvgt::checkpoint::read_manifest(dir.path()).unwrap();
    let f = dir.path().join(&man.tensors[3].file);
    let mut bytes = std::fs::read(&f).unwrap();
    *bytes.last_mut().unwrap() ^= 0x40;
    std::fs::write(&f, &bytes).unwrap();
    assert!(Model::<f32>::load(dir.path()).is_err());

    let other = Model::<f32>::new(tiny(AttentionMode::Factorized), 0).unwrap();
    assert!(Model::from_params(tiny(AttentionMode::Global), other.params().clone()).is_err());
}

#[test]
fn sinusoid_layout() {
    let s = model::sinusoid(3, 8);
    assert_eq!(&s[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    assert!((s[8] - 1f64.sin()).abs() < 1e-15);
    let e = model::spatial_embedding(2, 3, 8);
    assert_eq!(e.len(), 48);
    // patch (1, 2): row code of 1 then column code of 2
    assert_eq!(&e[5 * 8..5 * 8 + 4], &model::sinusoid(2, 4)[4..8]);
    assert_eq!(&e[5 * 8 + 4..6 * 8], &model::sinusoid(3, 4)[8..12]);
}

#[test]
fn patchify_layout() {
    let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4, 3], |k| k as f64);
    let p = model::patchify(&x, 2).unwrap();
    assert_eq!(p.shape(), &[4, 12]);
    // second patch (row 0, col 1) starts at pixel (0, 2)
    assert_eq!(&p.data()[12..15], &[6.0, 7.0, 8.0]);
    assert_eq!(&p.data()[18..21], &[18.0, 19.0, 20.0]);
    assert!(model::patchify(&x, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ratio_exceeds_one_iff_product_wins(t in 1u64..64, n in 1u64..64, p in 1u64..300) {
        let c = attention_cost(t, n, p);
        prop_assert!((c.ratio - (t * n) as f64 / (1 + n + t) as f64).abs() < 1e-9 * c.ratio);
        prop_assert_eq!(c.ratio > 1.0, t * n > 1 + n + t);
    }
}
