use tsam_autodiff::{AdamConfig, AdamState, ParamStore, Tape, Tensor, TensorError};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_zero() {
    let mut t = Tape::<f64>::new();
    let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = t.constant(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = t.matmul(i2, b).unwrap();
    assert_eq!(t.value(c), &[3.0, 4.0, 5.0, 6.0]);

    let z = t.constant(2, 3, vec![0.0; 6]).unwrap();
    let b = t.constant(3, 2, vec![1.5, -2.0, 3.0, 0.25, 9.0, 7.0]).unwrap();
    let c = t.matmul(z, b).unwrap();
    assert_eq!(t.dims(c), (2, 2));
    assert!(t.value(c).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let a = vec![1.0, 2.0, 3.0, 4.0];
    let b = vec![5.0, 6.0, 7.0, 8.0];
    let expected = naive_matmul(&a, &b, 2, 2, 2);
    assert_eq!(expected, vec![19.0, 22.0, 43.0, 50.0]);
    let mut t = Tape::<f64>::new();
    let (va, vb) = (t.constant(2, 2, a).unwrap(), t.constant(2, 2, b).unwrap());
    let c = t.matmul(va, vb).unwrap();
    assert_eq!(t.value(c), expected.as_slice());
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
    let b = t.constant(2, 3, vec![0.0; 6]).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
    let y = t.softmax(x).unwrap();
    for &p in t.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }

    let x = t.constant(1, 2, vec![0.0, 2f64.ln()]).unwrap();
    let y = t.softmax(x).unwrap();
    assert!((t.value(y)[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((t.value(y)[1] - 2.0 / 3.0).abs() < 1e-12);

    let mut t32 = Tape::<f32>::new();
    let x = t32.constant(1, 2, vec![1000.0, 0.0]).unwrap();
    let y = t32.softmax(x).unwrap();
    let v = t32.value(y);
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1] < 1e-30);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut t = Tape::<f32>::new();
    for bad in [f32::NAN, f32::INFINITY] {
        let x = t.constant(1, 2, vec![0.0, bad]).unwrap();
        assert!(matches!(t.softmax(x), Err(TensorError::Numeric { .. })));
    }
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::<f64>::new();
    let ones = t.constant(1, 4, vec![1.0; 4]).unwrap();
    let zeros = t.constant(1, 4, vec![0.0; 4]).unwrap();
    let x = t.constant(1, 4, vec![2.5; 4]).unwrap();
    let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(t.value(y).iter().all(|&v| v == 0.0));

    // mean 0, var 1 -> (x - 0)/sqrt(1 + eps)
    let g = t.constant(1, 2, vec![1.0, 1.0]).unwrap();
    let b = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
    let x = t.constant(1, 2, vec![1.0, -1.0]).unwrap();
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    assert!((t.value(y)[0] - 1.0).abs() < 1e-9);
    assert!((t.value(y)[1] + 1.0).abs() < 1e-9);

    let g0 = t.constant(1, 3, vec![0.0; 3]).unwrap();
    let bias = t.constant(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
    let x = t.constant(1, 3, vec![3.0, 1.0, -4.0]).unwrap();
    let y = t.layer_norm(x, g0, bias, 1e-5).unwrap();
    assert_eq!(t.value(y), &[0.5, -1.0, 2.0]);
}

#[test]
fn layer_norm_needs_two_columns() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(1, 1, vec![1.0]).unwrap();
    assert!(t.layer_norm(x, x, x, 1e-5).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("x", Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.0]).unwrap());
    let mut t = Tape::new();
    let x = t.param(&s, id);
    let l = t.sum(x);
    t.backward(l, &mut s).unwrap();
    assert_eq!(s.get(id).grad().unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_square_norm_is_twice_x() {
    let xs = vec![0.7, -1.3, 2.2, 0.05];
    let mut s = ParamStore::<f64>::new();
    let id = s.add("x", Tensor::vector(xs.clone()).unwrap());
    let mut t = Tape::new();
    let x = t.param(&s, id);
    let l = t.dot(x, x).unwrap();
    t.backward(l, &mut s).unwrap();
    for (g, x) in s.get(id).grad().unwrap().iter().zip(&xs) {
        assert!((g - 2.0 * x).abs() < 1e-12);
    }
}

#[test]
fn backward_accumulates_and_skips_unreachable() {
    let mut s = ParamStore::<f64>::new();
    let used = s.add("used", Tensor::vector(vec![1.0, 2.0]).unwrap());
    let unused = s.add("unused", Tensor::vector(vec![3.0]).unwrap());
    let mut t = Tape::new();
    let x = t.param(&s, used);
    let _ = t.param(&s, unused);
    let l = t.sum(x);
    t.backward(l, &mut s).unwrap();
    t.backward(l, &mut s).unwrap();
    assert_eq!(s.get(used).grad().unwrap(), &[2.0, 2.0]);
    assert!(s.get(unused).grad().is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("x", Tensor::vector(vec![1.0, 2.0]).unwrap());
    let mut t = Tape::new();
    let x = t.param(&s, id);
    assert!(matches!(t.backward(x, &mut s), Err(TensorError::Contract(_))));
}

#[test]
fn l2_normalize_rejects_zero_row() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(matches!(t.l2_normalize_rows(x, 1e-8), Err(TensorError::Numeric { .. })));
}

#[test]
fn log_rejects_non_positive() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(1, 2, vec![1.0, 0.0]).unwrap();
    assert!(t.log(x).is_err());
}

#[test]
fn broadcasting_rules() {
    let mut t = Tape::<f64>::new();
    let m = t.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let row = t.constant(1, 3, vec![10.0, 20.0, 30.0]).unwrap();
    let col = t.constant(2, 1, vec![100.0, 200.0]).unwrap();
    let a = t.add(m, row).unwrap();
    assert_eq!(t.value(a), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let b = t.mul(m, col).unwrap();
    assert_eq!(t.value(b), &[100.0, 200.0, 300.0, 800.0, 1000.0, 1200.0]);
    let bad = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
    assert!(t.add(m, bad).is_err());
}

#[test]
fn segment_attention_single_token_returns_value() {
    // A length-one segment attends only to itself.
    let mut t = Tape::<f64>::new();
    let q = t.constant(1, 4, vec![0.3, -0.2, 0.9, 1.0]).unwrap();
    let v = t.constant(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = t
        .segment_attention(q, q, v, &[tsam_autodiff::Segment::new(0, 1)], 2)
        .unwrap();
    assert_eq!(t.value(out), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn adam_descends_on_quadratic() {
    let mut s = ParamStore::<f32>::new();
    let id = s.add("x", Tensor::vector(vec![3.0, -2.0]).unwrap());
    let mut adam = AdamState::new(&s, AdamConfig { lr: 0.05, ..AdamConfig::default() });
    for _ in 0..400 {
        s.zero_grad();
        let mut t = Tape::new();
        let x = t.param(&s, id);
        let l = t.dot(x, x).unwrap();
        t.backward(l, &mut s).unwrap();
        adam.step(&mut s).unwrap();
    }
    assert!(s.get(id).data().iter().all(|v| v.abs() < 0.05));
    assert_eq!(adam.step, 400);
}
