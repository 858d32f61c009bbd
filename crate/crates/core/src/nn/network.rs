use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{maxpool, ConvGeometry};
use super::layer::{conv_geometry, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, gemm, Mat, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    #[default]
    GlorotUniform,
    Zeros,
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    input: Vec<usize>,
    output: Vec<usize>,
    /// Index of the weight tensor; the bias follows it.
    param: Option<usize>,
}

/// Weight and bias tensors owned by one parameterized layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub layer: usize,
    pub weight: usize,
    pub bias: usize,
}

/// A feed-forward network: an ordered layer list plus one weight and one
/// bias tensor per parameterized layer.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    groups: Vec<ParamGroup>,
    cache: Option<ForwardPass>,
}

/// Activations retained from one forward pass, enough to run any number of
/// backward passes against it.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    batch: usize,
    /// `inputs[l]` is the batched input of layer `l`.
    inputs: Vec<Tensor>,
    output: Tensor,
    /// Winning input index per pooled output, for pooling layers only.
    argmax: Vec<Vec<usize>>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Batched input of layer `l`.
    pub fn layer_input(&self, l: usize) -> &Tensor {
        &self.inputs[l]
    }
}

/// Seed for a backward pass: the vector `s` such that backward returns
/// `d(s . y)/dw`. Must have the network output's batched shape.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSeed(Tensor);

impl BackwardSeed {
    pub fn new(seed: Tensor) -> Self {
        Self(seed)
    }

    /// Seed selecting output `k` of every sample in a batch.
    pub fn basis(batch: usize, outputs: usize, k: usize) -> Self {
        let mut t = Tensor::zeros(&[batch, outputs]);
        for r in 0..batch {
            t.data_mut()[r * outputs + k] = 1.0;
        }
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// How per-row parameter gradients are folded into the result.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Accumulate<'a> {
    /// Plain sum over all rows: the ordinary gradient.
    Sum,
    /// `sum_r alpha[r] * |grad_r|`, the absolute value taken per row after
    /// summing over the spatial sites of shared (conv) weights.
    AbsWeighted(&'a [f64]),
}

impl Network {
    /// Builds a network with zero-valued parameters, validating that
    /// consecutive layers are shape-compatible.
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Network(format!("bad input shape {input_shape:?}")));
        }
        if specs.is_empty() {
            return Err(Error::Network("network has no layers".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        let mut groups = Vec::new();
        let mut shape = input_shape.clone();
        let (mut n_fc, mut n_conv) = (0, 0);
        for (l, spec) in specs.iter().enumerate() {
            if matches!(spec, LayerSpec::Softmax) && l + 1 != specs.len() {
                return Err(Error::Network("softmax must be the final layer".into()));
            }
            let output = spec.output_shape(&shape)?;
            let param = spec.param_shapes().map(|(w, b)| {
                let name = match spec {
                    LayerSpec::Conv2d { .. } => {
                        n_conv += 1;
                        format!("conv{n_conv}")
                    }
                    _ => {
                        n_fc += 1;
                        format!("fc{n_fc}")
                    }
                };
                let weight = params.len();
                params.push(Tensor::zeros(&w));
                params.push(Tensor::zeros(&b));
                groups.push(ParamGroup {
                    name,
                    layer: l,
                    weight,
                    bias: weight + 1,
                });
                weight
            });
            layers.push(Layer {
                spec: *spec,
                input: shape,
                output: output.clone(),
                param,
            });
            shape = output;
        }
        Ok(Self {
            input_shape,
            layers,
            params,
            groups,
            cache: None,
        })
    }

    pub fn with_init(mut self, scheme: InitScheme, seed: u64) -> Self {
        self.init_params(scheme, seed);
        self
    }

    /// Re-initializes every parameter; deterministic in `seed`.
    pub fn init_params(&mut self, scheme: InitScheme, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.cache = None;
        for g in &self.groups {
            let spec = self.layers[g.layer].spec;
            let w = &mut self.params[g.weight];
            match scheme {
                InitScheme::Zeros => w.data_mut().fill(0.0),
                InitScheme::GlorotUniform => {
                    let (fan_in, fan_out) = spec.fans().expect("parameterized layer");
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in w.data_mut() {
                        *v = rng.random_range(-limit..limit);
                    }
                }
            }
            self.params[g.bias].data_mut().fill(0.0);
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers.last().expect("non-empty").output
    }

    /// Number of outputs per sample (`C` for classifiers).
    pub fn outputs(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn has_softmax_output(&self) -> bool {
        matches!(self.layers.last().map(|l| l.spec), Some(LayerSpec::Softmax))
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter access. Drops the cached forward pass, which no
    /// longer matches the parameters.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.cache = None;
        &mut self.params
    }

    /// Replaces all parameters; shapes must match the architecture.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::shape("set_params", old.shape(), new.shape()));
            }
        }
        self.params = params;
        self.cache = None;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Runs the network on a batch without touching the cache.
    pub fn run(&self, x: &Tensor) -> Result<ForwardPass> {
        let per_sample: usize = self.input_shape.iter().product();
        if x.rank() < 2 || x.row_len() != per_sample {
            let mut want = vec![x.rows()];
            want.extend(&self.input_shape);
            return Err(Error::shape("forward", x.shape(), &want));
        }
        let batch = x.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let (next, arg) = self.layer_forward(layer, &current, batch);
            ensure_finite(&format!("forward activation of {:?}", layer.spec), next.data())?;
            inputs.push(current);
            argmax.push(arg);
            current = next;
        }
        Ok(ForwardPass {
            batch,
            inputs,
            output: current,
            argmax,
        })
    }

    /// Output `y` for a batch; pure with respect to the parameters.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.output)
    }

    /// Forward pass that also caches activations for [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let pass = self.run(x)?;
        let out = pass.output.clone();
        self.cache = Some(pass);
        Ok(out)
    }

    pub fn cached_pass(&self) -> Option<&ForwardPass> {
        self.cache.as_ref()
    }

    /// Gradient of `seed . y` with respect to every parameter tensor, against
    /// the activations cached by the last [`forward`](Self::forward).
    pub fn backward(&self, seed: &BackwardSeed) -> Result<Vec<Tensor>> {
        let pass = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        self.backward_pass(pass, seed)
    }

    pub fn backward_pass(&self, pass: &ForwardPass, seed: &BackwardSeed) -> Result<Vec<Tensor>> {
        if seed.0.shape() != pass.output.shape() {
            return Err(Error::shape("backward seed", seed.0.shape(), pass.output.shape()));
        }
        self.backward_rows(
            pass,
            self.layers.len() - 1,
            seed.0.data().to_vec(),
            1,
            Accumulate::Sum,
        )
    }

    fn layer_forward(&self, layer: &Layer, x: &Tensor, batch: usize) -> (Tensor, Vec<usize>) {
        let out_len: usize = layer.output.iter().product();
        let mut shape = vec![batch];
        shape.extend(&layer.output);
        let mut out = vec![0.0; batch * out_len];
        let mut arg = Vec::new();
        match layer.spec {
            LayerSpec::Affine { inputs, outputs } => {
                let p = layer.param.expect("affine has params");
                let (w, b) = (&self.params[p], &self.params[p + 1]);
                for row in out.chunks_mut(outputs) {
                    row.copy_from_slice(b.data());
                }
                gemm(
                    Mat::new(x.data(), batch, inputs),
                    Mat::new(w.data(), outputs, inputs).t(),
                    &mut out,
                    1.0,
                    1.0,
                );
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let g = self.geometry(layer, in_channels, kernel, stride);
                let p = layer.param.expect("conv has params");
                let (w, b) = (&self.params[p], &self.params[p + 1]);
                let (positions, patch) = (g.positions(), g.patch_len());
                let mut cols = vec![0.0; positions * patch];
                for (xs, ys) in x.data().chunks(x.row_len()).zip(out.chunks_mut(out_len)) {
                    g.im2col(xs, &mut cols);
                    for (o, plane) in ys.chunks_mut(positions).enumerate() {
                        plane.fill(b.data()[o]);
                    }
                    gemm(
                        Mat::new(w.data(), out_channels, patch),
                        Mat::new(&cols, positions, patch).t(),
                        ys,
                        1.0,
                        1.0,
                    );
                }
            }
            LayerSpec::MaxPool2d { size } => {
                arg = vec![0; batch * out_len];
                let (c, h, w) = (layer.input[0], layer.input[1], layer.input[2]);
                for ((xs, ys), am) in x
                    .data()
                    .chunks(x.row_len())
                    .zip(out.chunks_mut(out_len))
                    .zip(arg.chunks_mut(out_len))
                {
                    maxpool(xs, c, h, w, size, ys, am);
                }
            }
            LayerSpec::Relu => {
                for (o, &v) in out.iter_mut().zip(x.data()) {
                    *o = v.max(0.0);
                }
            }
            LayerSpec::Softmax => {
                for (xs, ys) in x.data().chunks(out_len).zip(out.chunks_mut(out_len)) {
                    softmax_into(xs, ys);
                }
            }
        }
        (Tensor::from_parts(shape, out), arg)
    }

    fn geometry(&self, layer: &Layer, in_channels: usize, kernel: usize, stride: usize) -> ConvGeometry {
        conv_geometry(&layer.input, in_channels, kernel, stride).expect("validated at construction")
    }

    pub(crate) fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Reverse pass over layers `top..=0` starting from `delta`, the
    /// gradient with respect to the output of layer `top`. `delta` holds
    /// `per_sample` consecutive rows for each sample of the pass.
    pub(crate) fn backward_rows(
        &self,
        pass: &ForwardPass,
        top: usize,
        mut delta: Vec<f64>,
        per_sample: usize,
        mode: Accumulate<'_>,
    ) -> Result<Vec<Tensor>> {
        let batch = pass.batch;
        let rows = batch * per_sample;
        if let Accumulate::AbsWeighted(alpha) = mode {
            assert_eq!(alpha.len(), rows, "one weight per row");
        }
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let lowest = self.groups.first().map_or(usize::MAX, |g| g.layer);

        for l in (0..=top).rev() {
            if l < lowest {
                break;
            }
            let layer = &self.layers[l];
            let out_len: usize = layer.output.iter().product();
            let in_len: usize = layer.input.iter().product();
            debug_assert_eq!(delta.len(), rows * out_len);
            let x = &pass.inputs[l];
            let propagate = l > lowest;
            match layer.spec {
                LayerSpec::Affine { inputs, outputs } => {
                    let p = layer.param.expect("affine has params");
                    let (gw, gb) = split_pair(&mut grads, p);
                    let (coef, xs): (Vec<f64>, Cow<'_, [f64]>) = match mode {
                        Accumulate::Sum => (fold_rows(&delta, per_sample, outputs), Cow::Borrowed(x.data())),
                        Accumulate::AbsWeighted(alpha) => {
                            let mut a = vec![0.0; batch * outputs];
                            for (r, d) in delta.chunks(outputs).enumerate() {
                                let s = r / per_sample;
                                for (ai, di) in a[s * outputs..(s + 1) * outputs].iter_mut().zip(d) {
                                    *ai += alpha[r] * di.abs();
                                }
                            }
                            (a, Cow::Owned(x.data().iter().map(|v| v.abs()).collect()))
                        }
                    };
                    gemm(
                        Mat::new(&coef, batch, outputs).t(),
                        Mat::new(&xs, batch, inputs),
                        gw,
                        1.0,
                        1.0,
                    );
                    for row in coef.chunks(outputs) {
                        for (g, c) in gb.iter_mut().zip(row) {
                            *g += c;
                        }
                    }
                    if propagate {
                        let mut below = vec![0.0; rows * inputs];
                        gemm(
                            Mat::new(&delta, rows, outputs),
                            Mat::new(self.params[p].data(), outputs, inputs),
                            &mut below,
                            1.0,
                            0.0,
                        );
                        delta = below;
                    }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let g = self.geometry(layer, in_channels, kernel, stride);
                    let p = layer.param.expect("conv has params");
                    let w = self.params[p].data();
                    let (positions, patch) = (g.positions(), g.patch_len());
                    let mut cols = vec![0.0; positions * patch];
                    let mut tmp = vec![0.0; out_channels * patch];
                    let mut dcols = vec![0.0; positions * patch];
                    let mut below = if propagate { vec![0.0; rows * in_len] } else { Vec::new() };
                    let (gw, gb) = split_pair(&mut grads, p);
                    for s in 0..batch {
                        g.im2col(x.row(s), &mut cols);
                        let block = &delta[s * per_sample * out_len..(s + 1) * per_sample * out_len];
                        match mode {
                            Accumulate::Sum => {
                                let d = fold_rows(block, per_sample, out_len);
                                gemm(
                                    Mat::new(&d, out_channels, positions),
                                    Mat::new(&cols, positions, patch),
                                    gw,
                                    1.0,
                                    1.0,
                                );
                                for (o, plane) in d.chunks(positions).enumerate() {
                                    gb[o] += plane.iter().sum::<f64>();
                                }
                            }
                            Accumulate::AbsWeighted(alpha) => {
                                for (j, d) in block.chunks(out_len).enumerate() {
                                    let a = alpha[s * per_sample + j];
                                    gemm(
                                        Mat::new(d, out_channels, positions),
                                        Mat::new(&cols, positions, patch),
                                        &mut tmp,
                                        1.0,
                                        0.0,
                                    );
                                    for (gv, t) in gw.iter_mut().zip(&tmp) {
                                        *gv += a * t.abs();
                                    }
                                    for (o, plane) in d.chunks(positions).enumerate() {
                                        gb[o] += a * plane.iter().sum::<f64>().abs();
                                    }
                                }
                            }
                        }
                        if propagate {
                            for j in 0..per_sample {
                                let r = s * per_sample + j;
                                let d = &delta[r * out_len..(r + 1) * out_len];
                                gemm(
                                    Mat::new(d, out_channels, positions).t(),
                                    Mat::new(w, out_channels, patch),
                                    &mut dcols,
                                    1.0,
                                    0.0,
                                );
                                g.col2im(&dcols, &mut below[r * in_len..(r + 1) * in_len]);
                            }
                        }
                    }
                    if propagate {
                        delta = below;
                    }
                }
                LayerSpec::MaxPool2d { .. } => {
                    let arg = &pass.argmax[l];
                    let mut below = vec![0.0; rows * in_len];
                    for (r, d) in delta.chunks(out_len).enumerate() {
                        let s = r / per_sample;
                        let am = &arg[s * out_len..(s + 1) * out_len];
                        let dst = &mut below[r * in_len..(r + 1) * in_len];
                        for (&idx, &v) in am.iter().zip(d) {
                            dst[idx] += v;
                        }
                    }
                    delta = below;
                }
                LayerSpec::Relu => {
                    let y = self.layer_output(pass, l);
                    for (r, d) in delta.chunks_mut(out_len).enumerate() {
                        let ys = y.row(r / per_sample);
                        for (dv, &yv) in d.iter_mut().zip(ys) {
                            if yv <= 0.0 {
                                *dv = 0.0;
                            }
                        }
                    }
                }
                LayerSpec::Softmax => {
                    let y = self.layer_output(pass, l);
                    for (r, d) in delta.chunks_mut(out_len).enumerate() {
                        softmax_vjp(y.row(r / per_sample), d);
                    }
                }
            }
        }

        grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| {
                ensure_finite("backward", &g)?;
                Ok(Tensor::from_parts(p.shape().to_vec(), g))
            })
            .collect()
    }

    fn layer_output<'a>(&self, pass: &'a ForwardPass, l: usize) -> &'a Tensor {
        pass.inputs.get(l + 1).unwrap_or(&pass.output)
    }
}

fn split_pair(grads: &mut [Vec<f64>], p: usize) -> (&mut [f64], &mut [f64]) {
    let (w, b) = grads[p..p + 2].split_at_mut(1);
    (&mut w[0], &mut b[0])
}

/// Sums each group of `per_sample` consecutive rows of width `width`.
fn fold_rows(delta: &[f64], per_sample: usize, width: usize) -> Vec<f64> {
    if per_sample == 1 {
        return delta.to_vec();
    }
    delta
        .chunks(per_sample * width)
        .flat_map(|block| {
            let mut acc = vec![0.0; width];
            for row in block.chunks(width) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc
        })
        .collect()
}

pub(crate) fn softmax_into(z: &[f64], y: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (yv, &zv) in y.iter_mut().zip(z) {
        *yv = (zv - max).exp();
        total += *yv;
    }
    for yv in y.iter_mut() {
        *yv /= total;
    }
}

/// In place `d <- J^T d` for the softmax Jacobian at probabilities `y`.
pub(crate) fn softmax_vjp(y: &[f64], d: &mut [f64]) {
    let dot: f64 = y.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
    for (dv, &yv) in d.iter_mut().zip(y) {
        *dv = yv * (*dv - dot);
    }
}
