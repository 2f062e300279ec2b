use ftp_core::model::{backward, finite_diff_grad, forward, loss};
use ftp_core::rng::sample_normal;
use ftp_core::{Activation, Batch, DenseMatrix, LossKind, MlpSpec, NamedParams, SeededRng};

/// Plain nested-loop forward pass, written without the crate's matrix kernels.
fn naive_forward(spec: &MlpSpec, params: &NamedParams, x: &DenseMatrix) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    for l in 0..spec.num_layers() {
        let w = params.get(&format!("layer{l}.weight")).unwrap();
        let b = params.get(&format!("layer{l}.bias")).unwrap();
        acts = acts
            .iter()
            .map(|a| {
                (0..w.rows())
                    .map(|o| {
                        let mut z = b.get(0, o);
                        for (i, ai) in a.iter().enumerate() {
                            z += w.get(o, i) * ai;
                        }
                        match spec.activations().get(l) {
                            Some(Activation::Relu) => z.max(0.0),
                            Some(Activation::Tanh) => z.tanh(),
                            _ => z,
                        }
                    })
                    .collect()
            })
            .collect();
    }
    acts
}

fn random_batch(spec: &MlpSpec, rng: &mut SeededRng, n: usize) -> Batch {
    let x = sample_normal(rng, n, spec.input_width(), 0.0, 1.0).unwrap();
    match spec.loss() {
        LossKind::SoftmaxCrossEntropy => {
            let labels = (0..n).map(|_| rng.below(spec.output_width())).collect();
            Batch::classification(x, labels)
        }
        LossKind::MeanSquaredError => {
            let y = sample_normal(rng, n, spec.output_width(), 0.0, 1.0).unwrap();
            Batch::regression(x, y)
        }
    }
}

fn relative_error(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let num = a.sub(b).unwrap().frobenius_norm();
    let den = a.frobenius_norm() + b.frobenius_norm();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[test]
fn forward_matches_hand_rolled_loops() {
    let spec = MlpSpec::uniform(
        vec![4, 6, 3],
        Activation::Tanh,
        LossKind::SoftmaxCrossEntropy,
    )
    .unwrap();
    let mut rng = SeededRng::new(12);
    let mut params = spec.init_params(&mut rng);
    for (_, t) in params.iter_mut() {
        let noise = sample_normal(&mut rng, t.rows(), t.cols(), 0.0, 0.1).unwrap();
        t.axpy(1.0, &noise).unwrap();
    }
    let x = sample_normal(&mut rng, 5, 4, 0.0, 1.0).unwrap();
    let out = forward(&spec, &params, &x).unwrap();
    let oracle = naive_forward(&spec, &params, &x);
    for (r, row) in oracle.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((out.get(r, c) - v).abs() < 1e-12);
        }
    }
    // deterministic
    assert!(out.bitwise_eq(&forward(&spec, &params, &x).unwrap()));
}

#[test]
fn backward_agrees_with_central_differences() {
    let mut rng = SeededRng::new(2023);
    let combos = [
        (Activation::Relu, LossKind::SoftmaxCrossEntropy),
        (Activation::Relu, LossKind::MeanSquaredError),
        (Activation::Tanh, LossKind::SoftmaxCrossEntropy),
        (Activation::Tanh, LossKind::MeanSquaredError),
        (Activation::Identity, LossKind::SoftmaxCrossEntropy),
        (Activation::Identity, LossKind::MeanSquaredError),
    ];
    for (act, loss_kind) in combos {
        let mut worst: f64 = 0.0;
        for instance in 0..20 {
            let depth = 1 + instance % 3;
            let mut widths = vec![2 + rng.below(4)];
            for _ in 0..depth {
                widths.push(2 + rng.below(5));
            }
            let spec = MlpSpec::uniform(widths, act, loss_kind).unwrap();
            let mut params = spec.init_params(&mut rng);
            for (_, t) in params.iter_mut() {
                let noise = sample_normal(&mut rng, t.rows(), t.cols(), 0.0, 0.2).unwrap();
                t.axpy(1.0, &noise).unwrap();
            }
            let n = 3 + rng.below(5);
            let batch = random_batch(&spec, &mut rng, n);
            let (_, analytic) = backward(&spec, &params, &batch).unwrap();
            let numeric = finite_diff_grad(&spec, &params, &batch, 1e-6).unwrap();
            for (name, a) in analytic.iter() {
                worst = worst.max(relative_error(a, numeric.get(name).unwrap()));
            }
        }
        assert!(worst < 1e-5, "{act}/{loss_kind}: relative error {worst:e}");
    }
}

#[test]
fn quadratic_gradient_has_closed_form() {
    // L = mean_b ||W x_b - y_b||^2 so dL/dW = 2 (W X^T - Y^T) X / n
    let spec = MlpSpec::new(vec![3, 2], vec![], LossKind::MeanSquaredError).unwrap();
    let mut rng = SeededRng::new(5);
    let params = spec.init_params(&mut rng);
    let x = sample_normal(&mut rng, 4, 3, 0.0, 1.0).unwrap();
    let y = sample_normal(&mut rng, 4, 2, 0.0, 1.0).unwrap();
    let batch = Batch::regression(x.clone(), y.clone());
    let (_, grads) = backward(&spec, &params, &batch).unwrap();
    let w = params.get("layer0.weight").unwrap();
    let resid = x.matmul(&w.transpose()).unwrap().sub(&y).unwrap();
    let closed = resid.transpose().matmul(&x).unwrap().scale(2.0 / 4.0);
    let got = grads.get("layer0.weight").unwrap();
    for (a, b) in got.as_slice().iter().zip(closed.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
    // pure quadratic: central differences are exact up to rounding
    let numeric = finite_diff_grad(&spec, &params, &batch, 1e-3).unwrap();
    for (a, b) in numeric
        .get("layer0.weight")
        .unwrap()
        .as_slice()
        .iter()
        .zip(closed.as_slice())
    {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn gradient_vanishes_at_fitted_minimum() {
    // Least squares with an exact solution: fit by gradient descent, then the
    // gradient at the optimum must be numerically zero.
    let spec = MlpSpec::new(vec![2, 1], vec![], LossKind::MeanSquaredError).unwrap();
    let x = DenseMatrix::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 1.0],
        vec![2.0, -1.0],
    ])
    .unwrap();
    let truth = [0.7, -1.3];
    let bias = 0.25;
    let y: Vec<Vec<f64>> = (0..x.rows())
        .map(|r| vec![truth[0] * x.get(r, 0) + truth[1] * x.get(r, 1) + bias])
        .collect();
    let batch = Batch::regression(x, DenseMatrix::from_rows(&y).unwrap());
    let mut params = spec.init_params(&mut SeededRng::new(1));
    for _ in 0..5000 {
        let (_, g) = backward(&spec, &params, &batch).unwrap();
        for (name, t) in params.iter_mut() {
            t.axpy(-0.1, g.get(name).unwrap()).unwrap();
        }
    }
    let (l, g) = backward(&spec, &params, &batch).unwrap();
    assert!(l < 1e-20);
    let norm: f64 = g.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "gradient norm {norm:e}");
}

#[test]
fn batch_permutation_leaves_loss_and_gradients_unchanged() {
    let spec = MlpSpec::uniform(
        vec![3, 5, 4],
        Activation::Relu,
        LossKind::SoftmaxCrossEntropy,
    )
    .unwrap();
    let mut rng = SeededRng::new(8);
    let params = spec.init_params(&mut rng);
    for _ in 0..10 {
        let batch = random_batch(&spec, &mut rng, 7);
        let mut order: Vec<usize> = (0..7).collect();
        rng.shuffle(&mut order);
        let rows: Vec<Vec<f64>> = order
            .iter()
            .map(|&i| batch.inputs.row(i).to_vec())
            .collect();
        let labels = match &batch.targets {
            ftp_core::Targets::Classes(l) => order.iter().map(|&i| l[i]).collect(),
            _ => unreachable!(),
        };
        let permuted = Batch::classification(DenseMatrix::from_rows(&rows).unwrap(), labels);
        let (la, ga) = backward(&spec, &params, &batch).unwrap();
        let (lb, gb) = backward(&spec, &params, &permuted).unwrap();
        assert!((la - lb).abs() < 1e-12);
        assert!((la - loss(&spec, &params, &batch).unwrap()).abs() < 1e-15);
        for (name, a) in ga.iter() {
            let b = gb.get(name).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
