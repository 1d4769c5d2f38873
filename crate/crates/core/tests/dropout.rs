use commentwatch::nn::{DenseLayer, MlpModel, Mode};
use commentwatch::seed;
use ndarray::{Array1, Array2};

// Positive weights and inputs keep every unit active, so the expected
// train-mode logit equals the inference logit exactly.
fn positive_model() -> MlpModel<f64> {
    let mut m = MlpModel::<f64>::new(3, &[6, 6], 0.2, 1).unwrap();
    let mut rng = seed::rng(2);
    for l in &mut m.layers {
        *l = DenseLayer {
            weights: Array2::from_shape_simple_fn(l.weights.dim(), || rand::Rng::random_range(&mut rng, 0.1..1.0)),
            biases: Array1::from_shape_simple_fn(l.biases.len(), || rand::Rng::random_range(&mut rng, 0.0..0.5)),
            trainable: true,
        };
    }
    m
}

#[test]
fn inverted_dropout_preserves_expected_activation() {
    let m = positive_model();
    let x = Array1::from(vec![0.3, 0.7, 1.1]);
    let infer = m.logit(x.view(), Mode::Infer).unwrap();
    let mut rng = seed::rng(3);
    let n = 20_000;
    let mean = (0..n).map(|_| m.logit(x.view(), Mode::Train(&mut rng)).unwrap()).sum::<f64>() / n as f64;
    assert!((mean - infer).abs() / infer < 0.01, "mean {mean} vs inference {infer}");
}

#[test]
fn inference_is_deterministic_and_train_mode_is_not() {
    let m = positive_model();
    let x = Array1::from(vec![0.3, 0.7, 1.1]);
    let a = m.logit(x.view(), Mode::Infer).unwrap();
    assert_eq!(a, m.logit(x.view(), Mode::Infer).unwrap());
    let mut rng = seed::rng(4);
    let draws: Vec<f64> = (0..20).map(|_| m.logit(x.view(), Mode::Train(&mut rng)).unwrap()).collect();
    assert!(draws.iter().any(|d| *d != a));
}
