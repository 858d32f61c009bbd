use serde::{Deserialize, Serialize};

use super::conv::ConvGeometry;
use crate::error::{Error, Result};

/// One stage of a feed-forward network.
///
/// Affine layers flatten whatever per-sample shape they receive, so a
/// convolutional stack can feed a fully connected head directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) convolution over `[channels, height, width]` inputs.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Non-overlapping max pooling with a `size x size` window.
    MaxPool2d { size: usize },
    Relu,
    /// Softmax over the class axis; only valid as the final layer.
    Softmax,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Affine { .. } | LayerSpec::Conv2d { .. })
    }

    /// Weight and bias shapes for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Affine { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used for Glorot initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Affine { inputs, outputs } => Some((inputs, outputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            _ => None,
        }
    }

    /// Per-sample output shape for a given per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |reason: String| Error::Network(format!("{self:?} on input {input:?}: {reason}"));
        match *self {
            LayerSpec::Affine { inputs, outputs } => {
                let flat: usize = input.iter().product();
                if inputs == 0 || outputs == 0 {
                    return Err(bad("dimensions must be positive".into()));
                }
                if flat != inputs {
                    return Err(bad(format!("expects {inputs} input features, got {flat}")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let g = conv_geometry(input, in_channels, kernel, stride).map_err(bad)?;
                if out_channels == 0 {
                    return Err(bad("out_channels must be positive".into()));
                }
                Ok(vec![out_channels, g.out_height(), g.out_width()])
            }
            LayerSpec::MaxPool2d { size } => {
                if input.len() != 3 {
                    return Err(bad("expects [channels, height, width]".into()));
                }
                if size == 0 || size > input[1] || size > input[2] {
                    return Err(bad(format!("pool size {size} does not fit")));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 || input[0] < 2 {
                    return Err(bad("softmax needs a flat class axis with at least 2 classes".into()));
                }
                Ok(input.to_vec())
            }
        }
    }
}

pub(crate) fn conv_geometry(
    input: &[usize],
    in_channels: usize,
    kernel: usize,
    stride: usize,
) -> std::result::Result<ConvGeometry, String> {
    if input.len() != 3 {
        return Err("expects [channels, height, width]".into());
    }
    if input[0] != in_channels {
        return Err(format!("expects {in_channels} channels, got {}", input[0]));
    }
    if kernel == 0 || stride == 0 || kernel > input[1] || kernel > input[2] {
        return Err(format!("kernel {kernel} / stride {stride} do not fit"));
    }
    Ok(ConvGeometry {
        channels: input[0],
        height: input[1],
        width: input[2],
        kernel,
        stride,
    })
}

/// The fully connected 784-300-100-10 network.
pub fn lenet300() -> (Vec<usize>, Vec<LayerSpec>) {
    (
        vec![784],
        vec![
            LayerSpec::Affine { inputs: 784, outputs: 300 },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: 300, outputs: 100 },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: 100, outputs: 10 },
            LayerSpec::Softmax,
        ],
    )
}

/// Caffe-style LeNet5: conv 20@5x5, pool 2, conv 50@5x5, pool 2, FC 800-500-10.
pub fn lenet5() -> (Vec<usize>, Vec<LayerSpec>) {
    (
        vec![1, 28, 28],
        vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 20, kernel: 5, stride: 1 },
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Conv2d { in_channels: 20, out_channels: 50, kernel: 5, stride: 1 },
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Affine { inputs: 800, outputs: 500 },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: 500, outputs: 10 },
            LayerSpec::Softmax,
        ],
    )
}
