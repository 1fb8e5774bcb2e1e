//! Feed-forward model graphs and deterministic ANN inference.
//!
//! Parameter layouts: dense weights are `[out, in]`, convolution weights are
//! `[out_ch, in_ch, k, k]`. Activations are batched with a leading batch
//! dimension, images use NCHW.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    /// `[out, in]`
    pub weight: Tensor<S>,
    /// `[out]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::InvalidModel(format!(
                "dense weight {:?} / bias {:?} do not match [out, in] / [out]",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Dense { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<S> {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor<S>,
    /// `[out_ch]`
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>, stride: usize, padding: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || bias.shape() != [ws[0]] {
            return Err(Error::InvalidModel(format!(
                "conv weight {ws:?} / bias {:?} do not match [out, in, k, k] / [out]",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidModel("conv stride must be >= 1".into()));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec<S> {
    Dense(Dense<S>),
    Conv2d(Conv2d<S>),
    AvgPool2d { kernel: usize, stride: usize },
    Flatten,
    Relu,
}

impl<S: Scalar> LayerSpec<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Relu => "relu",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense(_) | LayerSpec::Conv2d(_))
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            LayerSpec::Dense(d) => {
                if input != [d.in_features()] {
                    return Err(format!("expects [{}], got {input:?}", d.in_features()));
                }
                Ok(vec![d.out_features()])
            }
            LayerSpec::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return Err(format!(
                        "expects [{}, h, w], got {input:?}",
                        c.in_channels()
                    ));
                }
                let (oh, ow) = c
                    .out_hw(input[1], input[2])
                    .ok_or_else(|| format!("kernel larger than padded input {input:?}"))?;
                Ok(vec![c.out_channels(), oh, ow])
            }
            LayerSpec::AvgPool2d { kernel, stride } => {
                if input.len() != 3 {
                    return Err(format!("expects [c, h, w], got {input:?}"));
                }
                if *kernel == 0 || *stride == 0 || input[1] < *kernel || input[2] < *kernel {
                    return Err(format!("pool {kernel}/{stride} does not fit {input:?}"));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu => Ok(input.to_vec()),
        }
    }

    /// Multiply-accumulates per sample for a per-sample input shape.
    pub fn macs(&self, input: &[usize]) -> usize {
        match self {
            LayerSpec::Dense(d) => d.in_features() * d.out_features(),
            LayerSpec::Conv2d(c) => {
                let out = self.output_shape(input).unwrap_or_default();
                out.iter().product::<usize>() * c.in_channels() * c.kernel() * c.kernel()
            }
            _ => 0,
        }
    }

    /// Applies the layer to a batch. Bias is included for parameterized layers.
    pub fn apply(&self, x: &Tensor<S>) -> std::result::Result<Tensor<S>, String> {
        let out_shape = self.output_shape(&x.shape()[1..])?;
        let batch = x.batch();
        let mut shape = Vec::with_capacity(out_shape.len() + 1);
        shape.push(batch);
        shape.extend_from_slice(&out_shape);
        let out = match self {
            LayerSpec::Dense(d) => dense_forward(d, x),
            LayerSpec::Conv2d(c) => conv_forward(c, x, &out_shape),
            LayerSpec::AvgPool2d { kernel, stride } => {
                pool_forward(x, *kernel, *stride, &out_shape)
            }
            LayerSpec::Flatten => x.data().to_vec(),
            LayerSpec::Relu => x
                .data()
                .iter()
                .map(|&v| if v > S::zero() { v } else { S::zero() })
                .collect(),
        };
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            LayerSpec::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            LayerSpec::Conv2d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            _ => Vec::new(),
        }
    }

    pub(crate) fn bias_mut(&mut self) -> Option<&mut Tensor<S>> {
        match self {
            LayerSpec::Dense(d) => Some(&mut d.bias),
            LayerSpec::Conv2d(c) => Some(&mut c.bias),
            _ => None,
        }
    }

    pub(crate) fn cast<T: Scalar>(&self) -> LayerSpec<T> {
        match self {
            LayerSpec::Dense(d) => LayerSpec::Dense(Dense {
                weight: d.weight.cast(),
                bias: d.bias.cast(),
            }),
            LayerSpec::Conv2d(c) => LayerSpec::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                stride: c.stride,
                padding: c.padding,
            }),
            LayerSpec::AvgPool2d { kernel, stride } => LayerSpec::AvgPool2d {
                kernel: *kernel,
                stride: *stride,
            },
            LayerSpec::Flatten => LayerSpec::Flatten,
            LayerSpec::Relu => LayerSpec::Relu,
        }
    }
}

fn dense_forward<S: Scalar>(d: &Dense<S>, x: &Tensor<S>) -> Vec<S> {
    let (n_in, n_out) = (d.in_features(), d.out_features());
    let w = d.weight.data();
    let b = d.bias.data();
    let mut out = Vec::with_capacity(x.batch() * n_out);
    for row in x.rows() {
        for o in 0..n_out {
            out.push(b[o] + dot(&w[o * n_in..(o + 1) * n_in], row));
        }
    }
    out
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Four independent partial sums let the compiler keep several lanes busy.
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_forward<S: Scalar>(c: &Conv2d<S>, x: &Tensor<S>, out_shape: &[usize]) -> Vec<S> {
    let (ic, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = c.kernel();
    let (s, p) = (c.stride as isize, c.padding as isize);
    let wt = c.weight.data();
    let bias = c.bias.data();
    let mut out = Vec::with_capacity(x.batch() * oc * oh * ow);
    for img in x.rows() {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..ic {
                        for ky in 0..k {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * ic + i) * k + ky) * k + kx]
                                    * img[(i * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn pool_forward<S: Scalar>(x: &Tensor<S>, k: usize, s: usize, out_shape: &[usize]) -> Vec<S> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let _ = h;
    let norm = S::lit(1.0 / (k * k) as f64);
    let mut out = Vec::with_capacity(x.batch() * c * oh * ow);
    for img in x.rows() {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for ky in 0..k {
                        let row = (ch * h + oy * s + ky) * w;
                        for kx in 0..k {
                            acc += img[row + ox * s + kx];
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
    }
    out
}

/// An ordered feed-forward network: the source ANN of a conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<S> {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerSpec<S>>,
}

impl<S: Scalar> ModelGraph<S> {
    pub fn new(input_shape: Vec<usize>, class_count: usize, layers: Vec<LayerSpec<S>>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!("bad input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Relu)
                && !(i > 0 && layers[i - 1].is_parameterized())
            {
                return Err(Error::Layer {
                    layer: i,
                    kind: "relu",
                    message: "relu must directly follow a dense or conv2d layer".into(),
                });
            }
            shape = layer.output_shape(&shape).map_err(|message| Error::Layer {
                layer: i,
                kind: layer.kind(),
                message,
            })?;
        }
        match layers.last() {
            Some(LayerSpec::Dense(d)) if d.out_features() == class_count => {}
            _ => {
                return Err(Error::InvalidModel(format!(
                    "last layer must be dense with {class_count} outputs"
                )))
            }
        }
        if class_count < 2 {
            return Err(Error::InvalidModel("need at least two classes".into()));
        }
        Ok(ModelGraph {
            input_shape,
            class_count,
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerSpec<S>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec<S>] {
        &mut self.layers
    }

    /// Graph indices of the relu layers, which become spiking layers.
    pub fn spiking_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-sample input shape of every layer; entry `len()` is the output shape.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .expect("validated at construction");
            shapes.push(next);
        }
        shapes
    }

    /// Synaptic targets reached by one spike of each spiking layer: the MAC
    /// count of the next parameterized layer divided by its input size.
    pub fn fan_outs(&self) -> Vec<f64> {
        let shapes = self.shapes();
        self.spiking_layers()
            .into_iter()
            .map(|relu| {
                (relu + 1..self.layers.len())
                    .find(|&j| self.layers[j].is_parameterized())
                    .map(|j| {
                        let inputs: usize = shapes[j].iter().product();
                        self.layers[j].macs(&shapes[j]) as f64 / inputs as f64
                    })
                    .unwrap_or(0.0)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, t)| t.len())
            .sum()
    }

    pub(crate) fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch {:?} does not match model input [batch, {}]",
                batch.shape(),
                self.input_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(())
    }

    /// Applies layer `i` to `x`, tagging errors with the layer.
    pub(crate) fn apply_layer(&self, i: usize, x: &Tensor<S>) -> Result<Tensor<S>> {
        let layer = &self.layers[i];
        layer.apply(x).map_err(|message| Error::Layer {
            layer: i,
            kind: layer.kind(),
            message,
        })
    }

    /// Logits of shape `[batch, classes]`.
    pub fn forward(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for i in 0..self.layers.len() {
            x = self.apply_layer(i, &x)?;
        }
        Ok(x)
    }

    /// Logits plus the post-relu activation of every relu layer, keyed by
    /// graph index.
    pub fn forward_with_taps(&self, batch: &Tensor<S>) -> Result<(Tensor<S>, Vec<(usize, Tensor<S>)>)> {
        self.check_batch(batch)?;
        let mut taps = Vec::new();
        let mut x = batch.clone();
        for i in 0..self.layers.len() {
            x = self.apply_layer(i, &x)?;
            if matches!(self.layers[i], LayerSpec::Relu) {
                taps.push((i, x.clone()));
            }
        }
        Ok((x, taps))
    }

    pub fn predict(&self, batch: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.rows().map(argmax).collect())
    }

    pub fn cast<T: Scalar>(&self) -> ModelGraph<T> {
        ModelGraph {
            input_shape: self.input_shape.clone(),
            class_count: self.class_count,
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
enum PendingLayer {
    Dense { out: usize },
    Conv { out: usize, kernel: usize, stride: usize, padding: usize },
    Pool { kernel: usize, stride: usize },
    Flatten,
    Relu,
}

/// Declares an architecture and initializes it with He-normal weights.
#[derive(Clone, Debug)]
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    pending: Vec<PendingLayer>,
}

impl ModelBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        ModelBuilder {
            input_shape: input_shape.to_vec(),
            pending: Vec::new(),
        }
    }

    /// `input -> [dense -> relu] * hidden -> dense(classes)`, flattening first
    /// when the input is not a vector.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize) -> Self {
        let mut b = Self::new(input_shape);
        if input_shape.len() > 1 {
            b = b.flatten();
        }
        for &h in hidden {
            b = b.dense(h).relu();
        }
        b.dense(classes)
    }

    pub fn dense(mut self, out: usize) -> Self {
        self.pending.push(PendingLayer::Dense { out });
        self
    }

    pub fn conv2d(mut self, out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        self.pending.push(PendingLayer::Conv {
            out,
            kernel,
            stride,
            padding,
        });
        self
    }

    pub fn avg_pool(mut self, kernel: usize, stride: usize) -> Self {
        self.pending.push(PendingLayer::Pool { kernel, stride });
        self
    }

    pub fn flatten(mut self) -> Self {
        self.pending.push(PendingLayer::Flatten);
        self
    }

    pub fn relu(mut self) -> Self {
        self.pending.push(PendingLayer::Relu);
        self
    }

    pub fn build<S: Scalar>(&self, seed: u64) -> Result<ModelGraph<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.pending.len());
        for (i, p) in self.pending.iter().enumerate() {
            let layer = match *p {
                PendingLayer::Dense { out } => {
                    let fan_in: usize = shape.iter().product();
                    if shape.len() != 1 {
                        return Err(Error::Layer {
                            layer: i,
                            kind: "dense",
                            message: format!("input {shape:?} is not flat; add flatten()"),
                        });
                    }
                    let weight = he_normal(&mut rng, vec![out, fan_in], fan_in);
                    LayerSpec::Dense(Dense::new(weight, Tensor::zeros(&[out]))?)
                }
                PendingLayer::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let in_ch = shape.first().copied().unwrap_or(0);
                    let fan_in = in_ch * kernel * kernel;
                    let weight = he_normal(&mut rng, vec![out, in_ch, kernel, kernel], fan_in);
                    LayerSpec::Conv2d(Conv2d::new(weight, Tensor::zeros(&[out]), stride, padding)?)
                }
                PendingLayer::Pool { kernel, stride } => LayerSpec::AvgPool2d { kernel, stride },
                PendingLayer::Flatten => LayerSpec::Flatten,
                PendingLayer::Relu => LayerSpec::Relu,
            };
            shape = layer.output_shape(&shape).map_err(|message| Error::Layer {
                layer: i,
                kind: layer.kind(),
                message,
            })?;
            layers.push(layer);
        }
        let classes = match layers.last() {
            Some(LayerSpec::Dense(d)) => d.out_features(),
            _ => return Err(Error::InvalidModel("last layer must be dense".into())),
        };
        ModelGraph::new(self.input_shape.clone(), classes, layers)
    }
}

fn he_normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(normal.sample(rng))).collect();
    Tensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(n: usize) -> ModelGraph<f32> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let dense = Dense::new(
            Tensor::new(vec![n, n], w).unwrap(),
            Tensor::zeros(&[n]),
        )
        .unwrap();
        ModelGraph::new(vec![n], n, vec![LayerSpec::Dense(dense)]).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let m = identity_model(3);
        let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.25]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m: ModelGraph<f32> = ModelBuilder::mlp(&[4], &[5], 3).build(1).unwrap();
        let layers = m
            .layers()
            .iter()
            .map(|l| match l {
                LayerSpec::Dense(d) => LayerSpec::Dense(Dense {
                    weight: Tensor::zeros(d.weight.shape()),
                    bias: Tensor::zeros(d.bias.shape()),
                }),
                other => other.clone(),
            })
            .collect();
        let zero = ModelGraph::new(vec![4], 3, layers).unwrap();
        let x = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 9.0, 1.0]).unwrap();
        assert!(zero.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_tap_clamps_negative_preactivation() {
        let dense = Dense::new(
            Tensor::new(vec![2, 1], vec![-1.0, 2.0]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let head = Dense::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), Tensor::zeros(&[2])).unwrap();
        let m = ModelGraph::new(
            vec![1],
            2,
            vec![LayerSpec::Dense(dense), LayerSpec::Relu, LayerSpec::Dense(head)],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0f32]).unwrap();
        let (_, taps) = m.forward_with_taps(&x).unwrap();
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0].0, 1);
        assert_eq!(taps[0].1.data(), &[0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m: ModelGraph<f32> = ModelBuilder::mlp(&[4], &[5], 3).build(1).unwrap();
        let x = Tensor::zeros(&[2, 5]);
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn graph_validation() {
        // relu first
        let r = ModelGraph::<f32>::new(vec![2], 2, vec![LayerSpec::Relu]);
        assert!(matches!(r, Err(Error::Layer { layer: 0, .. })));
        // last layer is not the classifier
        let m: ModelGraph<f32> = ModelBuilder::mlp(&[4], &[5], 3).build(1).unwrap();
        let mut layers = m.layers().to_vec();
        layers.push(LayerSpec::Relu);
        assert!(ModelGraph::new(vec![4], 3, layers).is_err());
        // conv stride zero
        assert!(Conv2d::<f32>::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 0, 0).is_err());
    }

    #[test]
    fn conv_pool_shapes_compose() {
        let m: ModelGraph<f32> = ModelBuilder::new(&[1, 8, 8])
            .conv2d(4, 3, 1, 1)
            .relu()
            .avg_pool(2, 2)
            .conv2d(6, 3, 1, 0)
            .relu()
            .flatten()
            .dense(3)
            .build(3)
            .unwrap();
        let shapes = m.shapes();
        assert_eq!(shapes[1], vec![4, 8, 8]);
        assert_eq!(shapes[3], vec![4, 4, 4]);
        assert_eq!(shapes[4], vec![6, 2, 2]);
        assert_eq!(m.spiking_layers(), vec![1, 4]);
        let fo = m.fan_outs();
        // conv 4->6, k=3, no padding on a 4x4 map: 6*2*2*4*9 MACs over 64 inputs.
        assert!((fo[0] - 6.0 * 4.0 * 4.0 * 9.0 / 64.0).abs() < 1e-12);
        assert_eq!(fo[1], 3.0);
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        assert_eq!(m.forward(&x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a: ModelGraph<f32> = ModelBuilder::mlp(&[6], &[8], 2).build(11).unwrap();
        let b: ModelGraph<f32> = ModelBuilder::mlp(&[6], &[8], 2).build(11).unwrap();
        let c: ModelGraph<f32> = ModelBuilder::mlp(&[6], &[8], 2).build(12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
