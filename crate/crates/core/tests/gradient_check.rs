use qnn_core::nn::Precision;
use qnn_core::train::{backward, mean_loss, param, param_ids, param_mut, Sequence, TensorKind};
use qnn_core::{FloatMatrix, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn batch(input_dim: usize, frames: usize, n_classes: usize, seed: u64) -> Vec<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| {
            let x = (0..frames * input_dim)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect();
            let labels = (0..frames)
                .map(|_| rng.random_range(0..n_classes))
                .collect();
            Sequence::new(FloatMatrix::new(frames, input_dim, x).unwrap(), labels).unwrap()
        })
        .collect()
}

/// Perturbs every parameter so biases and the output layer are not at
/// their symmetric initial values.
fn jitter(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in param_ids(model) {
        for v in param_mut(model, id).unwrap() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn analytic(model: &Model, data: &[Sequence]) -> qnn_core::train::Gradients {
    let traces: Vec<_> = data
        .iter()
        .map(|s| model.forward_trace(&s.inputs, Precision::Float).unwrap())
        .collect();
    backward(model, data, &traces, None).unwrap().1
}

fn check(model: &Model, data: &[Sequence]) -> usize {
    let grads = analytic(model, data);
    let mut checked = 0;
    for (id, g) in grads.iter() {
        assert_eq!(g.len(), param(model, id).unwrap().len());
        for (k, &a) in g.iter().enumerate() {
            let mut plus = model.clone();
            param_mut(&mut plus, id).unwrap()[k] += EPS;
            let mut minus = model.clone();
            param_mut(&mut minus, id).unwrap()[k] -= EPS;
            let numeric = (mean_loss(&plus, data, Precision::Float).unwrap()
                - mean_loss(&minus, data, Precision::Float).unwrap())
                / (2.0 * EPS);
            let denom = a.abs().max(numeric.abs()).max(1e-7);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel <= 1e-4,
                "{id:?}[{k}]: analytic {a} numeric {numeric} rel {rel}"
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn single_projected_layer_matches_finite_differences() {
    let mut model = Model::random(4, 3, &[(3, Some(2))], 1).unwrap();
    jitter(&mut model, 2);
    let data = batch(4, 5, 3, 3);
    let n = check(&model, &data);
    assert_eq!(n, model.param_count());
    let ids = param_ids(&model);
    assert!(ids.iter().any(|id| id.kind == TensorKind::Projection));
}

#[test]
fn stacked_layers_match_finite_differences() {
    let mut model = Model::random(3, 4, &[(3, Some(2)), (4, None)], 7).unwrap();
    jitter(&mut model, 8);
    let data = batch(3, 6, 4, 9);
    assert_eq!(check(&model, &data), model.param_count());
}

#[test]
fn doubling_frame_weights_doubles_gradients() {
    let mut model = Model::random(4, 3, &[(3, Some(2))], 4).unwrap();
    jitter(&mut model, 5);
    let data = batch(4, 5, 3, 6);
    let traces: Vec<_> = data
        .iter()
        .map(|s| model.forward_trace(&s.inputs, Precision::Float).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w: Vec<Vec<f64>> = data
        .iter()
        .map(|s| (0..s.len()).map(|_| rng.random_range(0.1..2.0)).collect())
        .collect();
    let w2: Vec<Vec<f64>> = w
        .iter()
        .map(|r| r.iter().map(|v| 2.0 * v).collect())
        .collect();
    let (l1, g1) = backward(&model, &data, &traces, Some(&w)).unwrap();
    let (l2, g2) = backward(&model, &data, &traces, Some(&w2)).unwrap();
    assert!((l2 - 2.0 * l1).abs() <= 1e-12 * l1.abs().max(1.0));
    for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
        for (a, b) in a.iter().zip(b) {
            assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0), "{a} {b}");
        }
    }
}

#[test]
fn unit_frame_weights_equal_default() {
    let model = Model::random(4, 3, &[(3, None)], 4).unwrap();
    let data = batch(4, 5, 3, 6);
    let traces: Vec<_> = data
        .iter()
        .map(|s| model.forward_trace(&s.inputs, Precision::Float).unwrap())
        .collect();
    let ones: Vec<Vec<f64>> = data.iter().map(|s| vec![1.0; s.len()]).collect();
    assert_eq!(
        backward(&model, &data, &traces, None).unwrap(),
        backward(&model, &data, &traces, Some(&ones)).unwrap()
    );
}

#[test]
fn posteriors_equal_to_label_distribution_give_zero_softmax_gradient() {
    // All-zero LSTM weights and biases keep c = 0, so the layer output is
    // 0 at every frame; the output bias alone sets the posteriors.
    let mut model = Model::random(2, 3, &[(4, None)], 1).unwrap();
    for id in param_ids(&model) {
        param_mut(&mut model, id).unwrap().fill(0.0);
    }
    let labels = vec![0, 1, 1, 2, 2, 2];
    let freq = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    let out_bias = param_ids(&model)
        .into_iter()
        .find(|id| id.kind == TensorKind::OutputBias)
        .unwrap();
    for (b, f) in param_mut(&mut model, out_bias)
        .unwrap()
        .iter_mut()
        .zip(freq)
    {
        *b = f64::ln(f);
    }
    let x = FloatMatrix::new(
        6,
        2,
        vec![
            0.5, -1.0, 0.2, 0.3, -0.7, 1.1, 0.0, 0.4, 0.9, -0.2, 0.1, 0.6,
        ],
    )
    .unwrap();
    let data = vec![Sequence::new(x, labels).unwrap()];
    let g = analytic(&model, &data);
    for (id, v) in g.iter() {
        if matches!(id.kind, TensorKind::OutputWeight | TensorKind::OutputBias) {
            assert!(v.iter().all(|g| g.abs() < 1e-15), "{id:?} {v:?}");
        }
    }
}

#[test]
fn backward_rejects_mismatched_traces() {
    let model = Model::random(4, 3, &[(3, None)], 4).unwrap();
    let data = batch(4, 5, 3, 6);
    let other = batch(4, 7, 3, 6);
    let traces: Vec<_> = other
        .iter()
        .map(|s| model.forward_trace(&s.inputs, Precision::Float).unwrap())
        .collect();
    assert!(backward(&model, &data, &traces, None).is_err());
    assert!(backward(&model, &data, &traces[..1], None).is_err());
}
