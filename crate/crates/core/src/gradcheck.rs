//! Finite-difference oracles and random small networks for checking the
//! analytic derivatives. Everything here uses the forward pass only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{InitScheme, LayerSpec, Network};
use crate::tensor::Tensor;

/// Step used by the central-difference oracles.
pub const STEP: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps round-off on
/// near-zero derivatives from dominating.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference `(f(w + h) - f(w - h)) / 2h` for every parameter
/// element, in parameter order.
pub fn numeric_gradient(net: &Network, h: f64, f: impl Fn(&Network) -> f64) -> Vec<Tensor> {
    let mut probe = net.clone();
    net.params()
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let data = (0..p.len())
                .map(|i| {
                    let w = p.data()[i];
                    probe.params_mut()[t].data_mut()[i] = w + h;
                    let plus = f(&probe);
                    probe.params_mut()[t].data_mut()[i] = w - h;
                    let minus = f(&probe);
                    probe.params_mut()[t].data_mut()[i] = w;
                    (plus - minus) / (2.0 * h)
                })
                .collect();
            Tensor::new(p.shape().to_vec(), data).expect("finite differences")
        })
        .collect()
}

/// Mean softmax cross-entropy of `net` on a labelled batch, forward only.
pub fn mean_loss(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let pass = net.run(x).expect("forward");
    let losses = net.cross_entropy(&pass, labels).expect("loss");
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Finite-difference Jacobian of every output with respect to every
/// parameter element: `jac[t][i][s * C + k] = d y_{s,k} / d w_{t,i}`.
/// When `logits` is set and the network ends in softmax, `y` is the softmax
/// input instead of the probabilities.
pub fn numeric_jacobian(net: &Network, x: &Tensor, h: f64, logits: bool) -> Vec<Vec<Vec<f64>>> {
    let outputs = |n: &Network| -> Vec<f64> {
        let pass = n.run(x).expect("forward");
        if logits && n.has_softmax_output() {
            let l = n.specs().len() - 1;
            pass.layer_input(l).data().to_vec()
        } else {
            pass.output().data().to_vec()
        }
    };
    let mut probe = net.clone();
    net.params()
        .iter()
        .enumerate()
        .map(|(t, p)| {
            (0..p.len())
                .map(|i| {
                    let w = p.data()[i];
                    probe.params_mut()[t].data_mut()[i] = w + h;
                    let plus = outputs(&probe);
                    probe.params_mut()[t].data_mut()[i] = w - h;
                    let minus = outputs(&probe);
                    probe.params_mut()[t].data_mut()[i] = w;
                    plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect()
                })
                .collect()
        })
        .collect()
}

/// A randomly drawn classifier together with a labelled batch.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub net: Network,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Draws a small softmax classifier with at most `max_params` parameters:
/// either an MLP or a conv stack (optionally pooled) feeding an affine head,
/// two to four parameterized or activation layers before the softmax. Bias
/// terms are randomized too so no parameter sits at a special value.
pub fn random_case(seed: u64, max_params: usize, batch: usize) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let classes = rng.random_range(2..=4);
        let (input, mut specs) = if rng.random_bool(0.5) {
            let d = rng.random_range(2..=6);
            let mut specs = Vec::new();
            let mut width = d;
            for _ in 0..rng.random_range(0..=2) {
                let h = rng.random_range(2..=6);
                specs.push(LayerSpec::Affine { inputs: width, outputs: h });
                specs.push(LayerSpec::Relu);
                width = h;
            }
            specs.push(LayerSpec::Affine { inputs: width, outputs: classes });
            (vec![d], specs)
        } else {
            let ch = rng.random_range(1..=2);
            let side = rng.random_range(4..=6);
            let kernel = rng.random_range(2..=3);
            let out_ch = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let mut specs = vec![LayerSpec::Conv2d {
                in_channels: ch,
                out_channels: out_ch,
                kernel,
                stride,
            }];
            let mut o = (side - kernel) / stride + 1;
            if o >= 2 && rng.random_bool(0.5) {
                specs.push(LayerSpec::MaxPool2d { size: 2 });
                o /= 2;
            }
            if rng.random_bool(0.7) {
                specs.push(LayerSpec::Relu);
            }
            specs.push(LayerSpec::Affine {
                inputs: out_ch * o * o,
                outputs: classes,
            });
            (vec![ch, side, side], specs)
        };
        specs.push(LayerSpec::Softmax);
        let Ok(mut net) = Network::new(input.clone(), specs) else {
            continue;
        };
        if net.param_count() > max_params {
            continue;
        }
        net.init_params(InitScheme::GlorotUniform, rng.random());
        for g in net.groups().to_vec() {
            for b in net.params_mut()[g.bias].data_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let per: usize = input.iter().product();
        let mut shape = vec![batch];
        shape.extend(&input);
        let x = Tensor::new(shape, (0..batch * per).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("finite");
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        return RandomCase { net, x, labels };
    }
}
