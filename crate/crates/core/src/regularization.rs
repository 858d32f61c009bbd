//! SGD update rules.
//!
//! Every rule is computed as `plain - pull`, where `plain = w - eta * g` is
//! the vanilla SGD value and `pull` is the regularizer's contribution:
//!
//! | kind          | pull              |
//! |---------------|-------------------|
//! | `None`        | `0`               |
//! | `L2`          | `lambda * w`      |
//! | `L1`          | `lambda * sign(w)`, `sign(0) = 0` |
//! | `Sensitivity` | `lambda * w * max(0, 1 - S)` |
//!
//! `lambda` is applied as-is, not multiplied by `eta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::pruning::PruneMask;
use crate::sensitivity::SensitivityState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    L1,
    L2,
    #[default]
    Sensitivity,
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegularizerKind::None => "none",
            RegularizerKind::L1 => "l1",
            RegularizerKind::L2 => "l2",
            RegularizerKind::Sensitivity => "sensitivity",
        })
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "sensitivity" => Ok(Self::Sensitivity),
            other => Err(Error::InvalidArgument(format!("unknown regularizer {other:?}"))),
        }
    }
}

/// Learning rate and regularization factor for one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStep {
    pub eta: f64,
    pub lambda: f64,
    /// Apply the regularization pull to bias tensors too.
    pub regularize_biases: bool,
}

impl UpdateStep {
    pub fn new(eta: f64, lambda: f64) -> Result<Self> {
        let step = Self {
            eta,
            lambda,
            regularize_biases: true,
        };
        step.validate()?;
        Ok(step)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_shapes(net: &Network, what: &'static str, tensors: &[Tensor]) -> Result<()> {
    if tensors.len() != net.params().len() {
        return Err(Error::InvalidArgument(format!(
            "{} {what} tensors for {} parameter tensors",
            tensors.len(),
            net.params().len()
        )));
    }
    for (p, t) in net.params().iter().zip(tensors) {
        if p.shape() != t.shape() {
            return Err(Error::shape(what, p.shape(), t.shape()));
        }
    }
    Ok(())
}

/// Shared update loop: `w <- (w - eta * g) - pull(w, i)` on alive entries.
fn apply(
    net: &mut Network,
    grads: &[Tensor],
    step: &UpdateStep,
    mask: Option<&PruneMask>,
    pull: impl Fn(usize, usize, f64) -> f64,
) -> Result<()> {
    step.validate()?;
    check_shapes(net, "gradient", grads)?;
    if let Some(mask) = mask {
        mask.check_matches(net)?;
    }
    let bias: Vec<bool> = (0..net.params().len())
        .map(|t| net.groups().iter().any(|g| g.bias == t))
        .collect();
    for (t, (p, g)) in net.params_mut().iter_mut().zip(grads).enumerate() {
        let regularize = step.regularize_biases || !bias[t];
        let alive = mask.map(|m| m.tensor(t));
        for (i, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            if alive.is_some_and(|a| !a[i]) {
                continue;
            }
            let plain = *w - step.eta * gv;
            *w = if regularize { plain - pull(t, i, *w) } else { plain };
        }
        crate::tensor::ensure_finite("sgd update", p.data())?;
    }
    Ok(())
}

/// One step of `w <- w - eta * dL/dw - lambda * w * sbar_b`.
pub fn sgd_step_sensitivity(
    net: &mut Network,
    grads: &[Tensor],
    sbar_b: &[Tensor],
    step: &UpdateStep,
    mask: Option<&PruneMask>,
) -> Result<()> {
    check_shapes(net, "insensitivity", sbar_b)?;
    let lambda = step.lambda;
    apply(net, grads, step, mask, |t, i, w| lambda * w * sbar_b[t].data()[i])
}

/// One step of plain SGD with a `None`, `L1` or `L2` regularizer.
pub fn sgd_step_baseline(
    net: &mut Network,
    grads: &[Tensor],
    kind: RegularizerKind,
    step: &UpdateStep,
    mask: Option<&PruneMask>,
) -> Result<()> {
    let lambda = step.lambda;
    match kind {
        RegularizerKind::None => apply(net, grads, step, mask, |_, _, _| 0.0),
        RegularizerKind::L2 => apply(net, grads, step, mask, |_, _, w| lambda * w),
        RegularizerKind::L1 => apply(net, grads, step, mask, |_, _, w| {
            if w == 0.0 {
                0.0
            } else {
                lambda * w.signum()
            }
        }),
        RegularizerKind::Sensitivity => Err(Error::InvalidArgument(
            "sensitivity regularization needs insensitivities; use sgd_step_sensitivity".into(),
        )),
    }
}

/// Diagnostic regularization value for piecewise-linear (ReLU) networks:
/// `sum over sub-sensitive parameters of (w^2 / 2) * (1 - S)`. Parameters
/// with `S >= 1` contribute nothing.
pub fn relu_reg_value(net: &Network, state: &SensitivityState) -> Result<f64> {
    let mean = state.mean()?;
    check_shapes(net, "sensitivity", &mean)?;
    Ok(net
        .params()
        .iter()
        .zip(&mean)
        .flat_map(|(p, s)| p.data().iter().zip(s.data()))
        .map(|(&w, &s)| if s < 1.0 { 0.5 * w * w * (1.0 - s) } else { 0.0 })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_case;
    use crate::nn::{one_hot, LayerSpec};
    use crate::sensitivity::{accumulate_sensitivity, bounded_insensitivity, SensitivityConfig};
    use proptest::prelude::*;

    fn scalar_net(w: f64) -> Network {
        let mut net = Network::new(vec![1], vec![LayerSpec::Affine { inputs: 1, outputs: 1 }]).unwrap();
        net.params_mut()[0].data_mut()[0] = w;
        net
    }

    fn zero_grads(net: &Network) -> Vec<Tensor> {
        net.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    fn full_like(net: &Network, v: f64) -> Vec<Tensor> {
        net.params().iter().map(|p| Tensor::full(p.shape(), v)).collect()
    }

    #[test]
    fn pull_on_insensitive_weight() {
        let mut net = scalar_net(0.5);
        let step = UpdateStep::new(0.37, 1e-5).unwrap();
        let (g, sb) = (zero_grads(&net), full_like(&net, 1.0));
        sgd_step_sensitivity(&mut net, &g, &sb, &step, None).unwrap();
        assert!((net.params()[0].data()[0] - 0.499995).abs() < 1e-15);
    }

    #[test]
    fn super_sensitive_weight_is_untouched() {
        let mut net = scalar_net(0.5);
        let step = UpdateStep::new(0.1, 1e-2).unwrap();
        let (g, sb) = (zero_grads(&net), full_like(&net, 0.0));
        sgd_step_sensitivity(&mut net, &g, &sb, &step, None).unwrap();
        assert_eq!(net.params()[0].data()[0], 0.5);
    }

    #[test]
    fn baseline_examples() {
        let mut net = scalar_net(1.0);
        let step = UpdateStep::new(0.1, 0.1).unwrap();
        let g = zero_grads(&net);
        sgd_step_baseline(&mut net, &g, RegularizerKind::L2, &step, None).unwrap();
        assert!((net.params()[0].data()[0] - 0.9).abs() < 1e-15);

        let mut net = scalar_net(0.0);
        let g = zero_grads(&net);
        sgd_step_baseline(&mut net, &g, RegularizerKind::L1, &step, None).unwrap();
        assert_eq!(net.params()[0].data()[0], 0.0);

        let mut net = scalar_net(-0.5);
        let g = zero_grads(&net);
        sgd_step_baseline(&mut net, &g, RegularizerKind::L1, &step, None).unwrap();
        assert!((net.params()[0].data()[0] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn invalid_steps_rejected() {
        assert!(UpdateStep::new(0.0, 0.1).is_err());
        assert!(UpdateStep::new(0.1, -1.0).is_err());
        let mut net = scalar_net(1.0);
        let step = UpdateStep::new(0.1, 0.1).unwrap();
        let bad = vec![Tensor::zeros(&[2])];
        assert!(sgd_step_baseline(&mut net, &bad, RegularizerKind::None, &step, None).is_err());
    }

    #[test]
    fn biases_can_be_excluded() {
        let mut net = scalar_net(1.0);
        net.params_mut()[1].data_mut()[0] = 1.0;
        let mut step = UpdateStep::new(0.1, 0.5).unwrap();
        step.regularize_biases = false;
        let (g, sb) = (zero_grads(&net), full_like(&net, 1.0));
        sgd_step_sensitivity(&mut net, &g, &sb, &step, None).unwrap();
        assert_eq!(net.params()[0].data()[0], 0.5);
        assert_eq!(net.params()[1].data()[0], 1.0);
    }

    #[test]
    fn relu_reg_examples() {
        let mut net = scalar_net(2.0);
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        // S = |x| = 1 for the weight and 1 for the bias
        let state = accumulate_sensitivity(&net, &x, None, &SensitivityConfig::default()).unwrap();
        assert_eq!(relu_reg_value(&net, &state).unwrap(), 0.0);
        // S = 0 for the weight with x = 0; the bias has S = 1
        let x = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let state = accumulate_sensitivity(&net, &x, None, &SensitivityConfig::default()).unwrap();
        assert_eq!(relu_reg_value(&net, &state).unwrap(), 2.0);
        net.params_mut()[0].data_mut()[0] = -2.0;
        assert_eq!(relu_reg_value(&net, &state).unwrap(), 2.0);
    }

    #[test]
    fn relu_reg_derivative_is_the_pull() {
        // Frozen S: d/dw of the diagnostic value equals w * sbar_b.
        let case = random_case(9, 120, 3);
        let targets = one_hot(&case.labels, case.net.outputs());
        let state = accumulate_sensitivity(&case.net, &case.x, Some(&targets), &SensitivityConfig::default()).unwrap();
        let sbar = bounded_insensitivity(&state).unwrap();
        // the value is quadratic in w, so a large step is exact up to round-off
        let h = 1e-3;
        let mut probe = case.net.clone();
        for (t, p) in case.net.params().iter().enumerate() {
            for i in 0..p.len() {
                let w = p.data()[i];
                probe.params_mut()[t].data_mut()[i] = w + h;
                let plus = relu_reg_value(&probe, &state).unwrap();
                probe.params_mut()[t].data_mut()[i] = w - h;
                let minus = relu_reg_value(&probe, &state).unwrap();
                probe.params_mut()[t].data_mut()[i] = w;
                let fd = (plus - minus) / (2.0 * h);
                let want = w * sbar[t].data()[i];
                let rel = (fd - want).abs() / want.abs().max(1e-3);
                assert!(rel < 1e-8, "{fd} vs {want}");
            }
        }
    }

    fn ulp(x: f64) -> f64 {
        let x = x.abs();
        if x == 0.0 {
            f64::from_bits(1)
        } else {
            f64::from_bits(x.to_bits() + 1) - x
        }
    }

    proptest! {
        #[test]
        fn decomposition_against_plain_sgd(seed in 0u64..100_000, lambda in 0.0f64..0.9, eta in 1e-3f64..1.0) {
            let case = random_case(seed, 150, 2);
            let targets = one_hot(&case.labels, case.net.outputs());
            let (_, grads) = case.net.loss_and_grad(&case.x, &targets).unwrap();
            let state = accumulate_sensitivity(&case.net, &case.x, None, &SensitivityConfig::default()).unwrap();
            let sbar = bounded_insensitivity(&state).unwrap();
            let step = UpdateStep::new(eta, lambda).unwrap();
            let mut sens = case.net.clone();
            sgd_step_sensitivity(&mut sens, &grads, &sbar, &step, None).unwrap();
            let mut plain = case.net.clone();
            sgd_step_baseline(&mut plain, &grads, RegularizerKind::None, &step, None).unwrap();
            for t in 0..grads.len() {
                for i in 0..grads[t].len() {
                    let w = case.net.params()[t].data()[i];
                    let pull = lambda * w * sbar[t].data()[i];
                    let p = plain.params()[t].data()[i];
                    let s = sens.params()[t].data()[i];
                    // bitwise: the sensitivity step is the plain step minus the pull
                    prop_assert_eq!(s.to_bits(), (p - pull).to_bits());
                    // real arithmetic: off by round-off only
                    let scale = p.abs().max(s.abs()).max(pull.abs());
                    prop_assert!(((s - p) + pull).abs() <= 4.0 * ulp(scale));
                    // the pull never exceeds lambda * |w|
                    prop_assert!(pull.abs() <= lambda * w.abs());
                }
            }
        }

        #[test]
        fn lambda_zero_is_plain_sgd_bitwise(seed in 0u64..100_000) {
            let case = random_case(seed, 150, 2);
            let targets = one_hot(&case.labels, case.net.outputs());
            let (_, grads) = case.net.loss_and_grad(&case.x, &targets).unwrap();
            let sbar = full_like(&case.net, 0.77);
            let step = UpdateStep::new(0.1, 0.0).unwrap();
            let mut a = case.net.clone();
            sgd_step_sensitivity(&mut a, &grads, &sbar, &step, None).unwrap();
            let mut b = case.net.clone();
            sgd_step_baseline(&mut b, &grads, RegularizerKind::None, &step, None).unwrap();
            prop_assert_eq!(a.params(), b.params());
        }

        #[test]
        fn frozen_insensitivity_shrinks_magnitude(w in -10.0f64..10.0, s in 0.0f64..1.0, lambda in 1e-6f64..0.999) {
            prop_assume!(w != 0.0 && s > 1e-3);
            let mut net = scalar_net(w);
            let step = UpdateStep::new(0.1, lambda).unwrap();
            let sbar = full_like(&net, s);
            let g = zero_grads(&net);
            sgd_step_sensitivity(&mut net, &g, &sbar, &step, None).unwrap();
            let after = net.params()[0].data()[0];
            prop_assert!(after.abs() < w.abs());
            prop_assert!(after.signum() == w.signum());
        }
    }
}
