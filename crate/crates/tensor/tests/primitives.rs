use dvgt_tensor::{io, kernels, Tape, Tensor, TensorError};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(&x, 0).unwrap();
    for &p in y.value().data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul_returns_operand() {
    let mut tape = Tape::<f64>::no_grad();
    let a = t(&[3, 3], &[0.3, -1.2, 2.0, 4.5, 0.0, -0.7, 1.1, 9.0, -3.3]);
    let i = tape.constant(Tensor::eye(3));
    let av = tape.constant(a.clone());
    let out = tape.matmul(&i, &av).unwrap();
    assert_eq!(out.value(), &a);
}

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::full(&[5], 3.25));
    let y = tape.layer_norm(&x, 0).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_matches_direct_formula() {
    let vals = [0.5, -1.5, 2.0, 4.0];
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.constant(t(&[1, 4], &vals));
    let y = tape.layer_norm(&x, 1).unwrap();
    let mean = vals.iter().sum::<f64>() / 4.0;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    for (i, &v) in vals.iter().enumerate() {
        let want = (v - mean) / (var + 1e-5).sqrt();
        assert!((y.value().data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(&x, &x).unwrap();
    let loss = tape.sum_all(&sq).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn single_class_cross_entropy_gradient_matches_closed_form() {
    // loss = -log softmax(z)[c]; d/dz = softmax(z) - onehot(c)
    let z = [0.2, -1.0, 0.7, 1.4];
    let c = 2;
    let loss_of = |zz: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], zz));
        let p = tape.softmax(&x, 0).unwrap();
        let pc = tape.slice(&p, 0, c, c + 1).unwrap();
        let lp = tape.log(&pc).unwrap();
        let l = tape.neg(&lp).unwrap();
        let l = tape.sum_all(&l).unwrap();
        let v = l.value().item();
        let g = tape.backward(&l).unwrap().get(&x).unwrap().clone();
        (v, g)
    };
    let (_, g) = loss_of(&z);
    let h = 1e-5;
    for i in 0..4 {
        let mut zp = z;
        let mut zm = z;
        zp[i] += h;
        zm[i] -= h;
        let fd = (loss_of(&zp).0 - loss_of(&zm).0) / (2.0 * h);
        assert!((g.data()[i] - fd).abs() < 1e-8, "component {i}: {} vs {fd}", g.data()[i]);
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let loss = tape.sum_all(&x).unwrap();
    tape.backward(&loss).unwrap();
    assert!(matches!(tape.backward(&loss), Err(TensorError::TapeConsumed)));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.mul_scalar(&x, 2.0).unwrap();
    assert!(matches!(tape.backward(&y), Err(TensorError::NotScalar(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::<f64>::no_grad();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    assert!(matches!(tape.add(&a, &b), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(tape.matmul(&a, &b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn log_and_sqrt_domain_errors() {
    let mut tape = Tape::<f64>::no_grad();
    let a = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(&a), Err(TensorError::Domain { op: "log" })));
    let b = tape.constant(t(&[1], &[-1.0]));
    assert!(matches!(tape.sqrt(&b), Err(TensorError::Domain { op: "sqrt" })));
}

#[test]
fn non_finite_output_is_surfaced() {
    let mut tape = Tape::<f32>::no_grad();
    let a = tape.constant(Tensor::full(&[2], 100.0f32));
    assert!(matches!(tape.exp(&a), Err(TensorError::NonFinite { op: "exp" })));
}

#[test]
fn l2_norm_of_zero_vector_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2, 3]));
    let n = tape.l2_norm(&x, 1).unwrap();
    let l = tape.sum_all(&n).unwrap();
    let g = tape.backward(&l).unwrap();
    assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn no_grad_tape_records_nothing() {
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.exp(&x).unwrap();
    assert!(!y.requires_grad());
    assert!(tape.is_empty());
}

#[test]
fn fused_attention_matches_composite_route() {
    // softmax(q kᵀ · s) v built from matmul/softmax primitives
    let (b, lq, lk, d) = (2, 5, 7, 4);
    let q = Tensor::<f64>::from_fn(&[b, lq, d], |i| ((i * 37 % 11) as f64 - 5.0) * 0.13);
    let k = Tensor::<f64>::from_fn(&[b, lk, d], |i| ((i * 17 % 13) as f64 - 6.0) * 0.11);
    let v = Tensor::<f64>::from_fn(&[b, lk, d], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3);
    let scale = 0.5;
    let mut tape = Tape::<f64>::no_grad();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let fused = tape.attention(&qv, &kv, &vv, scale, None).unwrap();
    let kt = tape.transpose(&kv, 1, 2).unwrap();
    let s = tape.matmul(&qv, &kt).unwrap();
    let s = tape.mul_scalar(&s, scale).unwrap();
    let p = tape.softmax(&s, 2).unwrap();
    let composite = tape.matmul(&p, &vv).unwrap();
    assert!(fused.value().max_abs_diff(composite.value()) < 1e-14);
    let w = kernels::attention_weights(&q, &k, scale, None).unwrap();
    assert!(w.max_abs_diff(p.value()) < 1e-15);
}

#[test]
fn masked_keys_receive_no_weight() {
    let q = Tensor::<f64>::from_fn(&[1, 3, 2], |i| i as f64 * 0.1);
    let k = Tensor::<f64>::from_fn(&[1, 4, 2], |i| 1.0 - i as f64 * 0.2);
    let mask = [true, false, true, false];
    let w = kernels::attention_weights(&q, &k, 1.0, Some(&mask)).unwrap();
    for r in 0..3 {
        let row = &w.data()[r * 4..(r + 1) * 4];
        assert_eq!(row[1], 0.0);
        assert_eq!(row[3], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn tensor_file_rejects_corruption() {
    let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
    let bytes = io::encode(&x);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(io::decode::<f32>(&bad), Err(TensorError::Format(_))));
    assert!(matches!(io::decode::<f32>(&bytes[..bytes.len() - 1]), Err(TensorError::Format(_))));
    assert!(matches!(io::decode::<f64>(&bytes), Err(TensorError::Format(_))));
    assert_eq!(io::decode::<f32>(&bytes).unwrap(), x);
}

#[test]
fn tensor_file_header_layout() {
    let x = Tensor::<f64>::from_fn(&[2, 1], |i| i as f64 + 0.5);
    let bytes = io::encode(&x);
    assert_eq!(&bytes[..8], b"DVGTTEN1");
    assert_eq!(bytes[8], 1);
    assert_eq!(bytes[9], 2);
    assert_eq!(u64::from_le_bytes(bytes[10..18].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(bytes[18..26].try_into().unwrap()), 1);
    assert_eq!(f64::from_le_bytes(bytes[26..34].try_into().unwrap()), 0.5);
    assert_eq!(bytes.len(), 26 + 16);
}
