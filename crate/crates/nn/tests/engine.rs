use darwin_nn::{
    forward, grad_check, grad_check_softmax, io, load_model, predict, save_model,
    LayerSpec, Model, ModelMeta, Tensor,
};
use proptest::prelude::*;

fn wave(shape: Vec<usize>, phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731 + phase).sin()).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

#[test]
fn linear_model_grad_check_below_1e6() {
    let m = Model::new(&[5], vec![LayerSpec::dense(5, 3)], 3, ModelMeta::default()).unwrap();
    let r = grad_check_softmax(&m, &wave(vec![4, 5], 0.2), &[0, 2, 1, 2], 1e-4).unwrap();
    assert!(r.max_relative_error < 1e-6, "{r:?}");
    assert_eq!(r.checked, m.param_count());
}

#[test]
fn conv_relu_dense_grad_check_below_1e3() {
    let layers = vec![
        LayerSpec::conv(2, 3, 3),
        LayerSpec::Relu,
        LayerSpec::pool(2),
        LayerSpec::Conv2d { in_channels: 3, out_channels: 4, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::dense(4 * 2 * 2, 3),
    ];
    let m = Model::new(&[2, 8, 8], layers, 9, ModelMeta::default()).unwrap();
    let r = grad_check_softmax(&m, &wave(vec![3, 2, 8, 8], 1.0), &[1, 0, 2], 1e-4).unwrap();
    assert!(r.max_relative_error < 1e-3, "{r:?}");
    assert_eq!(r.checked + r.kinks, m.param_count());
    assert!(r.kinks * 4 < m.param_count(), "{r:?}");
}

#[test]
fn skip_upsample_softmax_grad_check() {
    let layers = vec![
        LayerSpec::conv(1, 3, 3),
        LayerSpec::Relu,
        LayerSpec::pool(2),
        LayerSpec::conv(3, 4, 3),
        LayerSpec::Relu,
        LayerSpec::Upsample2d { factor: 2 },
        LayerSpec::Concat { skip: 1 },
        LayerSpec::conv(7, 2, 1),
        LayerSpec::Softmax,
    ];
    let m = Model::new(&[1, 6, 6], layers, 4, ModelMeta::default()).unwrap();
    // Squared error on the softmax output exercises the softmax layer backward.
    let r = grad_check(
        &m,
        &wave(vec![2, 1, 6, 6], 0.4),
        |out| {
            let loss: f64 = out.data().iter().enumerate().map(|(i, v)| (v - (i % 3) as f64 * 0.3).powi(2)).sum();
            let grad: Vec<f64> = out.data().iter().enumerate().map(|(i, v)| 2.0 * (v - (i % 3) as f64 * 0.3)).collect();
            Ok((loss, Tensor::new(out.shape().to_vec(), grad)?))
        },
        1e-4,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-3, "{r:?}");
    assert_eq!(r.checked + r.kinks, m.param_count());
    assert!(r.kinks * 4 < m.param_count(), "{r:?}");
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let layers = vec![LayerSpec::conv(1, 4, 3), LayerSpec::Relu, LayerSpec::pool(2), LayerSpec::dense(4 * 3 * 3, 2)];
    let meta = ModelMeta { candidate_id: "c1".into(), stage: "classify".into(), seed: 0, classes: vec!["a".into(), "b".into()] };
    let m = Model::new(&[1, 6, 6], layers, 77, meta).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dnn");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    let x = wave(vec![2, 1, 6, 6], 0.0);
    let (a, b) = (predict(&m, &x).unwrap(), predict(&back, &x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(io::to_bytes(&back), std::fs::read(&path).unwrap());
}

#[test]
fn empty_file_load_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.dnn");
    std::fs::write(&path, b"").unwrap();
    assert!(load_model(&path).is_err());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(values in proptest::collection::vec(-30.0f32..30.0, 12)) {
        let m = Model::zeros(&[3, 2, 2], vec![LayerSpec::Softmax], ModelMeta::default()).unwrap();
        let y = predict(&m, &Tensor::new(vec![1, 3, 2, 2], values).unwrap()).unwrap();
        for p in 0..4 {
            let s: f64 = (0..3).map(|c| y.data()[c * 4 + p] as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_finite_and_deterministic(seed in 0u64..1000, phase in -3.0f64..3.0) {
        let layers = vec![LayerSpec::conv(1, 2, 3), LayerSpec::Relu, LayerSpec::pool(2), LayerSpec::dense(2 * 2 * 2, 2)];
        let m = Model::new(&[1, 4, 4], layers, seed, ModelMeta::default()).unwrap();
        let x = wave(vec![1, 1, 4, 4], phase);
        let a = forward(&m, &x).unwrap();
        let b = forward(&m, &x).unwrap();
        prop_assert!(a.outputs().iter().all(|t| t.all_finite()));
        prop_assert_eq!(a.output(), b.output());
    }
}
