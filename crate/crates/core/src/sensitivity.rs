//! Output sensitivity of each parameter.
//!
//! For one input, the sensitivity of parameter `w` is
//! `S = sum_k alpha_k |dy_k/dw|`. The unspecific form weights every output
//! equally (`alpha_k = 1/C`); the specific form keeps only the true class
//! (`alpha = one-hot(target)`). Over a minibatch `S` is the mean of the
//! per-sample values.
//!
//! Each `(sample, k)` pair is one backward pass seeded with the basis
//! vector `e_k`. The absolute value is taken per pair, after the
//! contributions of a shared conv weight over all its spatial sites have
//! been summed, and never across samples or classes.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{labels_from_one_hot, Accumulate, ForwardPass, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// `alpha_k = 1/C` for every output.
    #[default]
    Unspecific,
    /// `alpha = one-hot(target)`; needs labels.
    Specific,
}

/// Which vector plays the role of `y` for classifiers ending in softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// The softmax probabilities.
    #[default]
    Probabilities,
    /// The softmax input.
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub mode: SensitivityMode,
    #[serde(default)]
    pub output: OutputKind,
    /// Unspecific mode only: estimate the class average from this many
    /// classes drawn per sample instead of all `C`. Unbiased but noisy.
    #[serde(default)]
    pub class_subsample: Option<usize>,
}

impl SensitivityConfig {
    pub fn new(mode: SensitivityMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

/// Running sums of `sum_k alpha_k |dy_k/dw|` over samples, one tensor per
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    accum: Vec<Tensor>,
    samples_seen: usize,
    draws: u64,
}

impl SensitivityState {
    pub fn empty(net: &Network) -> Self {
        Self {
            accum: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            samples_seen: 0,
            draws: 0,
        }
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Un-normalized sums over the samples seen so far.
    pub fn sums(&self) -> &[Tensor] {
        &self.accum
    }

    /// Mean sensitivity per parameter.
    pub fn mean(&self) -> Result<Vec<Tensor>> {
        if self.samples_seen == 0 {
            return Err(Error::State("sensitivity state has seen no samples".into()));
        }
        let n = self.samples_seen as f64;
        self.accum.iter().map(|t| t.scale(1.0 / n)).collect()
    }

    /// Folds another state (e.g. from a different shard) into this one.
    pub fn merge(&mut self, other: &SensitivityState) -> Result<()> {
        if self.accum.len() != other.accum.len() {
            return Err(Error::InvalidArgument("sensitivity states of different networks".into()));
        }
        for (a, b) in self.accum.iter_mut().zip(&other.accum) {
            a.add_scaled(1.0, b)?;
        }
        self.samples_seen += other.samples_seen;
        Ok(())
    }

    /// Adds the per-sample sensitivities of one forward pass. `labels` are
    /// required in specific mode.
    pub fn accumulate(
        &mut self,
        net: &Network,
        pass: &ForwardPass,
        labels: Option<&[usize]>,
        cfg: &SensitivityConfig,
    ) -> Result<()> {
        if self.accum.len() != net.params().len() {
            return Err(Error::InvalidArgument("state does not match network".into()));
        }
        let batch = pass.batch();
        let c = net.outputs();
        let rows: Vec<(usize, usize, f64)> = match cfg.mode {
            SensitivityMode::Specific => {
                let labels = labels.ok_or_else(|| {
                    Error::InvalidArgument("specific sensitivity needs targets".into())
                })?;
                if labels.len() != batch {
                    return Err(Error::InvalidArgument(format!(
                        "{} labels for a batch of {batch}",
                        labels.len()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&k| k >= c) {
                    return Err(Error::InvalidArgument(format!("label {bad} out of range")));
                }
                labels.iter().enumerate().map(|(s, &k)| (s, k, 1.0)).collect()
            }
            SensitivityMode::Unspecific => match cfg.class_subsample {
                Some(q) if q == 0 || q > c => {
                    return Err(Error::InvalidArgument(format!(
                        "class subsample {q} outside 1..={c}"
                    )))
                }
                Some(q) if q < c => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.draws);
                    self.draws += 1;
                    (0..batch)
                        .flat_map(|s| {
                            let mut ks = index::sample(&mut rng, c, q).into_vec();
                            ks.sort_unstable();
                            ks.into_iter().map(move |k| (s, k, 1.0 / q as f64))
                        })
                        .collect()
                }
                _ => (0..batch)
                    .flat_map(|s| (0..c).map(move |k| (s, k, 1.0 / c as f64)))
                    .collect(),
            },
        };
        let per_sample = rows.len() / batch;
        let alpha: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let (top, delta) = basis_deltas(net, pass, &rows, cfg.output);
        let grads = net.backward_rows(pass, top, delta, per_sample, Accumulate::AbsWeighted(&alpha))?;
        if self.samples_seen == 0 {
            self.accum = grads;
        } else {
            for (a, g) in self.accum.iter_mut().zip(&grads) {
                a.add_scaled(1.0, g)?;
            }
        }
        self.samples_seen += batch;
        Ok(())
    }
}

/// Seeds `e_k` for each `(sample, k)` row, expressed at the layer where the
/// backward pass starts.
fn basis_deltas(
    net: &Network,
    pass: &ForwardPass,
    rows: &[(usize, usize, f64)],
    output: OutputKind,
) -> (usize, Vec<f64>) {
    let c = net.outputs();
    let last = net.specs().len() - 1;
    let mut delta = vec![0.0; rows.len() * c];
    for (d, &(s, k, _)) in delta.chunks_mut(c).zip(rows) {
        d[k] = 1.0;
        if net.has_softmax_output() && output == OutputKind::Probabilities {
            // e_k through the softmax Jacobian: y_k (e_k - y)
            let y = pass.output().row(s);
            for (dv, &yv) in d.iter_mut().zip(y) {
                *dv = y[k] * (*dv - yv);
            }
        }
    }
    let top = if net.has_softmax_output() { last - 1 } else { last };
    (top, delta)
}

/// Mean sensitivity of `net` on a batch. `targets` (one-hot) are needed in
/// specific mode only.
pub fn accumulate_sensitivity(
    net: &Network,
    x: &Tensor,
    targets: Option<&Tensor>,
    cfg: &SensitivityConfig,
) -> Result<SensitivityState> {
    let pass = net.run(x)?;
    let labels = targets.map(labels_from_one_hot).transpose()?;
    let mut state = SensitivityState::empty(net);
    state.accumulate(net, &pass, labels.as_deref(), cfg)?;
    Ok(state)
}

/// `max(0, 1 - S)` elementwise, in `[0, 1]`.
pub fn bounded_insensitivity(state: &SensitivityState) -> Result<Vec<Tensor>> {
    Ok(state.mean()?.iter().map(bounded_insensitivity_of).collect())
}

/// Same as [`bounded_insensitivity`], reusing the state's buffers.
pub fn into_bounded_insensitivity(state: SensitivityState) -> Result<Vec<Tensor>> {
    if state.samples_seen == 0 {
        return Err(Error::State("sensitivity state has seen no samples".into()));
    }
    let inv = 1.0 / state.samples_seen as f64;
    let mut out = state.accum;
    for t in &mut out {
        for v in t.data_mut() {
            *v = (1.0 - *v * inv).max(0.0);
        }
    }
    Ok(out)
}

pub fn bounded_insensitivity_of(s: &Tensor) -> Tensor {
    s.map("bounded insensitivity", |v| (1.0 - v).max(0.0))
        .expect("finite sensitivity gives finite insensitivity")
}

/// Outcome of comparing `|dL/dw|` against `sum_k |dy_k/dw|` per sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderReport {
    /// Number of (sample, parameter) comparisons made.
    pub checked: usize,
    pub violations: usize,
    /// Largest `|dL/dw| - sum_k |dy_k/dw|` seen; negative when the bound holds
    /// everywhere with room to spare.
    pub worst_margin: f64,
}

/// Tolerance used by [`check_holder_bound`].
pub const HOLDER_TOLERANCE: f64 = 1e-9;

/// Checks `|dL/dw| <= sum_k |dy_k/dw|` for softmax cross-entropy on every
/// sample and parameter, where `y` is the input of the softmax (the vector
/// whose loss derivative `softmax(y) - y*` is bounded by 1 in magnitude).
pub fn check_holder_bound(net: &Network, x: &Tensor, targets: &Tensor) -> Result<HolderReport> {
    let labels = labels_from_one_hot(targets)?;
    let c = net.outputs();
    let mut report = HolderReport {
        checked: 0,
        violations: 0,
        worst_margin: f64::NEG_INFINITY,
    };
    let cfg = SensitivityConfig {
        mode: SensitivityMode::Unspecific,
        output: OutputKind::Logits,
        class_subsample: None,
    };
    for (s, &label) in labels.iter().enumerate() {
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        let xs = Tensor::new(shape, x.row(s).to_vec())?;
        let pass = net.run(&xs)?;
        let (_, grad) = net.loss_and_grad_pass(&pass, &crate::nn::one_hot(&[label], c))?;
        let mut state = SensitivityState::empty(net);
        state.accumulate(net, &pass, None, &cfg)?;
        for (g, l1) in grad.iter().zip(state.sums()) {
            for (&gv, &sv) in g.data().iter().zip(l1.data()) {
                // sums hold (1/C) * sum_k |dy_k/dw|
                let norm = sv * c as f64;
                let margin = gv.abs() - norm;
                report.checked += 1;
                report.worst_margin = report.worst_margin.max(margin);
                if margin > HOLDER_TOLERANCE * (1.0 + norm) {
                    report.violations += 1;
                }
            }
        }
    }
    Ok(report)
}
