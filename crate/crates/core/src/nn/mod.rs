//! Feed-forward networks with a reverse-mode backward pass that accepts an
//! arbitrary seed on the output, so both loss gradients and individual
//! Jacobian rows `dy_k/dw` come out of the same machinery.

mod conv;
mod layer;
mod loss;
mod network;

pub use layer::{lenet300, lenet5, LayerSpec};
pub use loss::{labels_from_one_hot, one_hot};
pub use network::{BackwardSeed, ForwardPass, InitScheme, Network, ParamGroup};

#[cfg(test)]
use loss::logit_seed;
pub(crate) use network::Accumulate;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{mean_loss, numeric_gradient, numeric_jacobian, random_case, relative_error, STEP};
    use crate::tensor::Tensor;

    fn single_neuron(w: f64) -> Network {
        let mut net = Network::new(vec![1], vec![LayerSpec::Affine { inputs: 1, outputs: 1 }]).unwrap();
        net.params_mut()[0].data_mut()[0] = w;
        net
    }

    #[test]
    fn affine_forward() {
        let mut net = single_neuron(2.0);
        let y = net.forward(&Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn relu_forward() {
        let net = Network::new(
            vec![2],
            vec![LayerSpec::Affine { inputs: 2, outputs: 2 }, LayerSpec::Relu],
        )
        .unwrap();
        let mut net = net;
        net.params_mut()[0] = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = net.forward(&Tensor::matrix(1, 2, vec![-1.0, 5.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 5.0]);
    }

    #[test]
    fn lenet300_zero_image_gives_zero_logits() {
        let (input, specs) = lenet300();
        let net = Network::new(input, specs).unwrap().with_init(InitScheme::GlorotUniform, 1);
        assert_eq!(net.param_count(), 266_610);
        let pass = net.run(&Tensor::zeros(&[2, 784])).unwrap();
        assert!(pass.layer_input(5).data().iter().all(|&v| v == 0.0));
        assert!(pass.output().data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn lenet5_parameter_count() {
        let (input, specs) = lenet5();
        let net = Network::new(input, specs).unwrap();
        assert_eq!(net.param_count(), 431_080);
        let names: Vec<_> = net.groups().iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["conv1", "conv2", "fc1", "fc2"]);
    }

    #[test]
    fn construction_rejects_incompatible_layers() {
        assert!(Network::new(vec![3], vec![LayerSpec::Affine { inputs: 4, outputs: 2 }]).is_err());
        assert!(Network::new(
            vec![2],
            vec![LayerSpec::Softmax, LayerSpec::Affine { inputs: 2, outputs: 2 }]
        )
        .is_err());
        assert!(Network::new(vec![1], vec![LayerSpec::Softmax]).is_err());
        assert!(Network::new(vec![4], vec![LayerSpec::MaxPool2d { size: 2 }]).is_err());
    }

    #[test]
    fn linear_derivative() {
        let mut net = single_neuron(2.0);
        net.forward(&Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let g = net.backward(&BackwardSeed::basis(1, 1, 0)).unwrap();
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(g[1].data(), &[1.0]);
    }

    #[test]
    fn zero_seed_zero_gradients() {
        let case = random_case(4, 100, 3);
        let mut net = case.net;
        net.forward(&case.x).unwrap();
        let seed = BackwardSeed::new(Tensor::zeros(net.cached_pass().unwrap().output().shape()));
        for g in net.backward(&seed).unwrap() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let net = single_neuron(1.0);
        let err = net.backward(&BackwardSeed::basis(1, 1, 0)).unwrap_err();
        assert!(matches!(err, crate::Error::State(_)));
        let mut net = net;
        net.forward(&Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        net.params_mut();
        assert!(net.backward(&BackwardSeed::basis(1, 1, 0)).is_err());
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut net = single_neuron(1.0);
        net.forward(&Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(net.backward(&BackwardSeed::basis(1, 1, 0)).is_err());
    }

    #[test]
    fn jacobian_rows_match_finite_differences() {
        // 2-3-2 ReLU net with softmax output.
        let mut net = Network::new(
            vec![2],
            vec![
                LayerSpec::Affine { inputs: 2, outputs: 3 },
                LayerSpec::Relu,
                LayerSpec::Affine { inputs: 3, outputs: 2 },
                LayerSpec::Softmax,
            ],
        )
        .unwrap()
        .with_init(InitScheme::GlorotUniform, 11);
        for b in net.params_mut()[1].data_mut() {
            *b = 0.3;
        }
        let x = Tensor::from_rows(&[vec![0.4, -0.7]]).unwrap();
        let jac = numeric_jacobian(&net, &x, STEP, false);
        net.forward(&x).unwrap();
        for k in 0..2 {
            let g = net.backward(&BackwardSeed::basis(1, 2, k)).unwrap();
            for (t, gt) in g.iter().enumerate() {
                for (i, &v) in gt.data().iter().enumerate() {
                    let fd = jac[t][i][k];
                    assert!(relative_error(v, fd, 1e-3) < 1e-6, "t={t} i={i} k={k}: {v} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn loss_of_uniform_logits_is_ln_c() {
        let net = Network::new(
            vec![3],
            vec![LayerSpec::Affine { inputs: 3, outputs: 10 }, LayerSpec::Softmax],
        )
        .unwrap();
        let targets = one_hot(&[4, 7], 10);
        let (loss, _) = net.loss_and_grad(&Tensor::zeros(&[2, 3]), &targets).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_give_vanishing_loss() {
        let mut net = Network::new(
            vec![1],
            vec![LayerSpec::Affine { inputs: 1, outputs: 2 }, LayerSpec::Softmax],
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 40.0] {
            net.params_mut()[1] = Tensor::vector(vec![margin, 0.0]).unwrap();
            let (loss, _) = net
                .loss_and_grad(&Tensor::zeros(&[1, 1]), &one_hot(&[0], 2))
                .unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-15);
    }

    #[test]
    fn non_one_hot_targets_rejected() {
        let net = Network::new(
            vec![1],
            vec![LayerSpec::Affine { inputs: 1, outputs: 2 }, LayerSpec::Softmax],
        )
        .unwrap();
        let bad = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(net.loss_and_grad(&Tensor::zeros(&[1, 1]), &bad).is_err());
        let bad = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(net.loss_and_grad(&Tensor::zeros(&[1, 1]), &bad).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let case = random_case(seed, 200, 4);
            let targets = one_hot(&case.labels, case.net.outputs());
            let (_, grads) = case.net.loss_and_grad(&case.x, &targets).unwrap();
            let fd = numeric_gradient(&case.net, STEP, |n| mean_loss(n, &case.x, &case.labels));
            for (g, f) in grads.iter().zip(&fd) {
                for (&a, &b) in g.data().iter().zip(f.data()) {
                    assert!(relative_error(a, b, 1e-3) < 1e-6, "seed {seed}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn per_sample_logit_seed_is_bounded_by_one() {
        for seed in 0..200 {
            let mut case = random_case(seed, 200, 3);
            // blow the logits up so the softmax saturates on some draws
            let scale = 1.0 + (seed % 7) as f64 * 20.0;
            for w in case.net.params_mut().last_mut().unwrap().data_mut() {
                *w *= scale;
            }
            let pass = case.net.run(&case.x).unwrap();
            let b = pass.batch() as f64;
            for v in logit_seed(&pass, &case.labels) {
                assert!((v * b).abs() <= 1.0, "seed {seed}: {}", v * b);
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let (input, specs) = lenet300();
        let a = Network::new(input.clone(), specs.clone()).unwrap().with_init(InitScheme::GlorotUniform, 5);
        let b = Network::new(input, specs).unwrap().with_init(InitScheme::GlorotUniform, 5);
        assert_eq!(a.params(), b.params());
        for g in a.groups() {
            assert!(a.params()[g.bias].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn glorot_sample_stdev() {
        let (input, specs) = lenet300();
        let net = Network::new(input, specs).unwrap().with_init(InitScheme::GlorotUniform, 9);
        let w = net.params()[0].data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        // uniform on ±a has stdev a / sqrt(3) = sqrt(2 / (fan_in + fan_out))
        let expected = (2.0 / (784.0 + 300.0) as f64).sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.05);
        let limit = (6.0 / 1084.0f64).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn forward_is_pure() {
        let case = random_case(21, 200, 5);
        assert_eq!(
            case.net.predict(&case.x).unwrap(),
            case.net.predict(&case.x).unwrap()
        );
    }
}
