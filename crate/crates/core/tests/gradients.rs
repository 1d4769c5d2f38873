use commentwatch::nn::{MlpModel, Mode};
use commentwatch::seed;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;

fn min_abs_preactivation(model: &MlpModel<f64>, x: &Array2<f64>) -> f64 {
    let mut a = x.clone();
    let mut min = f64::INFINITY;
    for l in &model.layers[..model.layers.len() - 1] {
        let z = a.dot(&l.weights.t()) + &l.biases;
        min = z.iter().fold(min, |m, v| m.min(v.abs()));
        a = z.mapv(|v| v.max(0.0));
    }
    min
}

fn loss(model: &MlpModel<f64>, x: &Array2<f64>, y: &[bool]) -> f64 {
    model.backward(x.view(), y, Mode::Infer).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_matches_central_differences(
        input in 1usize..=5,
        hidden in proptest::collection::vec(1usize..=6, 1..=2),
        batch in 1usize..=6,
        s in any::<u64>(),
    ) {
        let mut rng = seed::rng(s);
        let mut model = MlpModel::<f64>::new(input, &hidden, 0.0, s).unwrap();
        for l in &mut model.layers {
            l.biases.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let x = Array2::from_shape_simple_fn((batch, input), || rng.random_range(-2.0..2.0));
        let y: Vec<bool> = (0..batch).map(|_| rng.random_bool(0.5)).collect();
        prop_assume!(min_abs_preactivation(&model, &x) > 10.0 * H);

        let (_, grads) = model.backward(x.view(), &y, Mode::Infer).unwrap();
        for li in 0..model.layers.len() {
            for idx in 0..model.layers[li].weights.len() {
                let (r, c) = (idx / model.layers[li].weights.ncols(), idx % model.layers[li].weights.ncols());
                let mut p = model.clone();
                p.layers[li].weights[[r, c]] += H;
                let mut m = model.clone();
                m.layers[li].weights[[r, c]] -= H;
                let numeric = (loss(&p, &x, &y) - loss(&m, &x, &y)) / (2.0 * H);
                let analytic = grads.layers[li].0[[r, c]];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                prop_assert!(rel < 1e-4, "layer {li} w[{r},{c}]: {analytic} vs {numeric}");
            }
            for j in 0..model.layers[li].biases.len() {
                let mut p = model.clone();
                p.layers[li].biases[j] += H;
                let mut m = model.clone();
                m.layers[li].biases[j] -= H;
                let numeric = (loss(&p, &x, &y) - loss(&m, &x, &y)) / (2.0 * H);
                let analytic = grads.layers[li].1[j];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                prop_assert!(rel < 1e-4, "layer {li} b[{j}]: {analytic} vs {numeric}");
            }
        }
    }
}
