//! Softmax + cross-entropy loss.

use super::network::{Accumulate, ForwardPass, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One-hot encodes `labels` into a `[labels.len(), classes]` tensor.
///
/// # Panics
/// If a label is `>= classes` or `labels` is empty.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &k) in labels.iter().enumerate() {
        assert!(k < classes, "label {k} out of range for {classes} classes");
        t.data_mut()[r * classes + k] = 1.0;
    }
    t
}

/// Recovers class indices from a one-hot batch, rejecting rows that are not
/// exactly one 1 among 0s.
pub fn labels_from_one_hot(targets: &Tensor) -> Result<Vec<usize>> {
    if targets.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "targets must be [batch, classes], got {:?}",
            targets.shape()
        )));
    }
    (0..targets.rows())
        .map(|r| {
            let row = targets.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones == 1 && zeros + 1 == row.len() {
                Ok(row.iter().position(|&v| v == 1.0).expect("one entry is 1"))
            } else {
                Err(Error::InvalidArgument(format!("target row {r} is not one-hot: {row:?}")))
            }
        })
        .collect()
}

impl Network {
    fn require_softmax(&self) -> Result<()> {
        if self.has_softmax_output() {
            Ok(())
        } else {
            Err(Error::Network("cross-entropy needs a softmax output layer".into()))
        }
    }

    /// Per-sample cross-entropy `-log softmax(z)[label]`, computed from the
    /// logits for accuracy.
    pub fn cross_entropy(&self, pass: &ForwardPass, labels: &[usize]) -> Result<Vec<f64>> {
        self.require_softmax()?;
        let logits = pass.layer_input(self.layer_count() - 1);
        if labels.len() != pass.batch() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {}",
                labels.len(),
                pass.batch()
            )));
        }
        Ok(labels
            .iter()
            .enumerate()
            .map(|(r, &k)| {
                let z = logits.row(r);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - z[k]
            })
            .collect())
    }

    /// Mean cross-entropy over the batch and its parameter gradients. The
    /// seed on the logits is `(softmax(z) - y*) / batch`.
    pub fn loss_and_grad(&self, x: &Tensor, targets: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let pass = self.run(x)?;
        self.loss_and_grad_pass(&pass, targets)
    }

    pub fn loss_and_grad_pass(&self, pass: &ForwardPass, targets: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        self.require_softmax()?;
        if targets.shape() != pass.output().shape() {
            return Err(Error::shape("targets", targets.shape(), pass.output().shape()));
        }
        let labels = labels_from_one_hot(targets)?;
        let losses = self.cross_entropy(pass, &labels)?;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        if self.layer_count() < 2 {
            return Ok((loss, Vec::new()));
        }
        let grads = self.backward_rows(
            pass,
            self.layer_count() - 2,
            logit_seed(pass, &labels),
            1,
            Accumulate::Sum,
        )?;
        Ok((loss, grads))
    }
}

/// `dL/dz` for mean softmax cross-entropy.
pub(crate) fn logit_seed(pass: &ForwardPass, labels: &[usize]) -> Vec<f64> {
    let batch = pass.batch() as f64;
    let c = pass.output().row_len();
    let mut seed = pass.output().data().to_vec();
    for (r, &k) in labels.iter().enumerate() {
        seed[r * c + k] -= 1.0;
    }
    for v in &mut seed {
        *v /= batch;
    }
    seed
}
