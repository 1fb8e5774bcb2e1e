//! Minimal mini-batch SGD with softmax cross-entropy, enough to produce small
//! source networks for conversion.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conv2d, Dense, LayerSpec, ModelGraph};
use crate::scalar::Scalar;
use crate::store::DatasetHandle;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            lr: 0.05,
            seed: 0,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Trains a copy of `model`. A fixed seed gives bit-identical parameters.
pub fn train_reference<S: Scalar>(
    model: &ModelGraph<S>,
    dataset: &DatasetHandle<S>,
    opts: &TrainOptions,
) -> Result<(ModelGraph<S>, TrainReport)> {
    if dataset.sample_shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "dataset samples {:?} do not match model input {:?}",
            dataset.sample_shape(),
            model.input_shape()
        )));
    }
    if dataset.class_count() > model.class_count() {
        return Err(Error::ClassCount {
            model: model.class_count(),
            expected: dataset.class_count(),
        });
    }
    if opts.batch_size == 0 || !opts.lr.is_finite() || opts.lr < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "batch size {} / learning rate {} invalid",
            opts.batch_size, opts.lr
        )));
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let lr = S::lit(opts.lr);
    let mut report = TrainReport::default();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (batch_no, idx) in order.chunks(opts.batch_size).enumerate() {
            let x = dataset.images().select_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let (loss, correct) = sgd_step(&mut model, &x, &labels, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;
            hits += correct;
        }
        report.epoch_loss.push(loss_sum / dataset.len() as f64);
        report.epoch_accuracy.push(hits as f64 / dataset.len() as f64);
        log::debug!(
            "epoch {epoch}: loss {:.5} acc {:.4}",
            report.epoch_loss[epoch],
            report.epoch_accuracy[epoch]
        );
    }
    Ok((model, report))
}

/// Mean softmax cross-entropy and the gradient with respect to the logits.
fn softmax_xent<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> (f64, usize, Tensor<S>) {
    let batch = labels.len() as f64;
    let classes = logits.row_len();
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &label) in logits.rows().zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label].as_f64() - max);
        if crate::model::argmax(row) == label {
            correct += 1;
        }
        for (c, e) in exps.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            grad.push(S::lit((e / z - target) / batch));
        }
    }
    let _ = classes;
    (loss / batch, correct, Tensor::from_parts(logits.shape().to_vec(), grad))
}

fn sgd_step<S: Scalar>(model: &mut ModelGraph<S>, x: &Tensor<S>, labels: &[usize], lr: S) -> Result<(f64, usize)> {
    let mut acts = vec![x.clone()];
    for i in 0..model.layers().len() {
        let next = model.apply_layer(i, acts.last().unwrap())?;
        acts.push(next);
    }
    let (loss, correct, mut grad) = softmax_xent(acts.last().unwrap(), labels);
    if !loss.is_finite() {
        return Ok((loss, correct));
    }

    for i in (0..model.layers().len()).rev() {
        let input = &acts[i];
        grad = match &mut model.layers_mut()[i] {
            LayerSpec::Dense(d) => dense_backward(d, input, &grad, lr),
            LayerSpec::Conv2d(c) => conv_backward(c, input, &grad, lr),
            LayerSpec::AvgPool2d { kernel, stride } => pool_backward(input, &grad, *kernel, *stride),
            LayerSpec::Flatten => Tensor::from_parts(input.shape().to_vec(), grad.into_data()),
            LayerSpec::Relu => {
                let data = grad
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                Tensor::from_parts(input.shape().to_vec(), data)
            }
        };
    }
    Ok((loss, correct))
}

/// Returns the input gradient, then applies the parameter update.
fn dense_backward<S: Scalar>(d: &mut Dense<S>, input: &Tensor<S>, grad: &Tensor<S>, lr: S) -> Tensor<S> {
    let (n_in, n_out) = (d.in_features(), d.out_features());
    let mut dx = vec![S::zero(); input.len()];
    let mut dw = vec![S::zero(); n_in * n_out];
    let mut db = vec![S::zero(); n_out];
    let w = d.weight.data();
    for b in 0..input.batch() {
        let x = input.row(b);
        let g = grad.row(b);
        let dxr = &mut dx[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let go = g[o];
            if go == S::zero() {
                continue;
            }
            db[o] += go;
            let wr = &w[o * n_in..(o + 1) * n_in];
            let dwr = &mut dw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                dxr[i] += go * wr[i];
                dwr[i] += go * x[i];
            }
        }
    }
    for (w, g) in d.weight.data_mut().iter_mut().zip(&dw) {
        *w -= lr * *g;
    }
    for (b, g) in d.bias.data_mut().iter_mut().zip(&db) {
        *b -= lr * *g;
    }
    Tensor::from_parts(input.shape().to_vec(), dx)
}

fn conv_backward<S: Scalar>(c: &mut Conv2d<S>, input: &Tensor<S>, grad: &Tensor<S>, lr: S) -> Tensor<S> {
    let (ic, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (oc, oh, ow) = (grad.shape()[1], grad.shape()[2], grad.shape()[3]);
    let k = c.kernel();
    let (s, p) = (c.stride as isize, c.padding as isize);
    let mut dx = vec![S::zero(); input.len()];
    let mut dw = vec![S::zero(); c.weight.len()];
    let mut db = vec![S::zero(); oc];
    let wt = c.weight.data();
    for b in 0..input.batch() {
        let img = input.row(b);
        let g = grad.row(b);
        let dxi = &mut dx[b * ic * h * w..(b + 1) * ic * h * w];
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(o * oh + oy) * ow + ox];
                    if go == S::zero() {
                        continue;
                    }
                    db[o] += go;
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
                                let wi = ((o * ic + i) * k + ky) * k + kx;
                                let xi = (i * h + iy as usize) * w + ix as usize;
                                dw[wi] += go * img[xi];
                                dxi[xi] += go * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    for (w, g) in c.weight.data_mut().iter_mut().zip(&dw) {
        *w -= lr * *g;
    }
    for (b, g) in c.bias.data_mut().iter_mut().zip(&db) {
        *b -= lr * *g;
    }
    Tensor::from_parts(input.shape().to_vec(), dx)
}

fn pool_backward<S: Scalar>(input: &Tensor<S>, grad: &Tensor<S>, k: usize, s: usize) -> Tensor<S> {
    let (ch, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let norm = S::lit(1.0 / (k * k) as f64);
    let mut dx = vec![S::zero(); input.len()];
    for b in 0..input.batch() {
        let g = grad.row(b);
        let dxi = &mut dx[b * ch * h * w..(b + 1) * ch * h * w];
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(c * oh + oy) * ow + ox] * norm;
                    for ky in 0..k {
                        for kx in 0..k {
                            dxi[(c * h + oy * s + ky) * w + ox * s + kx] += go;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(input.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;
    use crate::store::make_synthetic;

    #[test]
    fn separable_blobs_are_learned() {
        let data: DatasetHandle<f32> = make_synthetic("blobs", 200, 1).unwrap();
        let model = ModelBuilder::mlp(&[2], &[8], 2).build(1).unwrap();
        let opts = TrainOptions {
            epochs: 50,
            lr: 0.05,
            seed: 3,
            batch_size: 16,
        };
        let (trained, report) = train_reference(&model, &data, &opts).unwrap();
        let acc = data.accuracy(&trained.predict(data.images()).unwrap());
        assert!(acc >= 0.99, "train accuracy {acc}");
        assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data: DatasetHandle<f32> = make_synthetic("rings", 64, 1).unwrap();
        let model = ModelBuilder::mlp(&[2], &[8], 2).build(2).unwrap();
        let opts = TrainOptions {
            epochs: 2,
            lr: 0.0,
            ..TrainOptions::default()
        };
        let (trained, _) = train_reference(&model, &data, &opts).unwrap();
        assert_eq!(trained, model);
    }

    #[test]
    fn same_seed_same_bytes() {
        let data: DatasetHandle<f32> = make_synthetic("rings", 64, 1).unwrap();
        let model = ModelBuilder::mlp(&[2], &[8], 2).build(2).unwrap();
        let opts = TrainOptions {
            epochs: 3,
            ..TrainOptions::default()
        };
        let a = train_reference(&model, &data, &opts).unwrap().0;
        let b = train_reference(&model, &data, &opts).unwrap().0;
        assert_eq!(crate::store::model_to_bytes(&a), crate::store::model_to_bytes(&b));
    }

    #[test]
    fn divergence_is_reported() {
        let data: DatasetHandle<f32> = make_synthetic("blobs", 64, 1).unwrap();
        let model = ModelBuilder::mlp(&[2], &[8], 2).build(2).unwrap();
        let opts = TrainOptions {
            epochs: 5,
            lr: 1e30,
            ..TrainOptions::default()
        };
        assert!(matches!(train_reference(&model, &data, &opts), Err(Error::Diverged { .. })));
    }

    fn finite_difference_check(builder: ModelBuilder, input_shape: &[usize]) {
        let model: ModelGraph<f64> = builder.build(7).unwrap();
        let n: usize = input_shape.iter().product();
        let mut shape = vec![2];
        shape.extend_from_slice(input_shape);
        let x = Tensor::new(shape, (0..2 * n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect()).unwrap();
        let labels = [0, 1];
        let loss_of = |m: &ModelGraph<f64>| softmax_xent(&m.forward(&x).unwrap(), &labels).0;

        // One SGD step with lr = 1 moves parameters by exactly minus the gradient.
        let mut stepped = model.clone();
        sgd_step(&mut stepped, &x, &labels, 1.0).unwrap();
        let eps = 1e-6;
        for (li, layer) in model.layers().iter().enumerate() {
            for (pi, (_, param)) in layer.params().iter().enumerate() {
                for e in (0..param.len()).step_by(5) {
                    let analytic = param.data()[e] - stepped.layers()[li].params()[pi].1.data()[e];
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    bump(&mut plus, li, pi, e, eps);
                    bump(&mut minus, li, pi, e, -eps);
                    let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                    assert!(
                        (analytic - numeric).abs() < 1e-5,
                        "layer {li} param {pi} elem {e}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    fn bump(m: &mut ModelGraph<f64>, li: usize, pi: usize, e: usize, by: f64) {
        let t = match (&mut m.layers_mut()[li], pi) {
            (LayerSpec::Dense(d), 0) => &mut d.weight,
            (LayerSpec::Dense(d), _) => &mut d.bias,
            (LayerSpec::Conv2d(c), 0) => &mut c.weight,
            (LayerSpec::Conv2d(c), _) => &mut c.bias,
            _ => unreachable!(),
        };
        t.data_mut()[e] += by;
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        finite_difference_check(ModelBuilder::mlp(&[5], &[7, 4], 3), &[5]);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let b = ModelBuilder::new(&[2, 6, 6])
            .conv2d(3, 3, 2, 1)
            .relu()
            .avg_pool(3, 3)
            .flatten()
            .dense(3);
        finite_difference_check(b, &[2, 6, 6]);
    }
}
