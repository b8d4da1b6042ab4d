//! Dense feed-forward reference classifier with hand-written backprop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{cross_entropy, Logits};
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Affine map `W x + b` followed by an activation. `W` is `rows x cols`,
/// row-major, mapping `cols` inputs to `rows` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::Shape {
                expected: format!("{rows}x{cols} weights and {rows} biases"),
                found: format!("{} weights and {} biases", weights.len(), bias.len()),
            });
        }
        Ok(DenseLayer { rows, cols, weights, bias, activation })
    }

    fn apply(&self, input: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        pre.clear();
        for (r, b) in self.bias.iter().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            pre.push(b + dot(row, input));
        }
        out.clear();
        out.extend(pre.iter().map(|v| match self.activation {
            Activation::Identity => *v,
            Activation::Relu => v.max(0.0),
        }));
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociation flags
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Stack of dense layers producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardModel {
    input_shape: Shape,
    layers: Vec<DenseLayer>,
}

impl FeedForwardModel {
    pub fn new(input_shape: Shape, layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Config("a model needs at least one layer".into()));
        };
        if last.activation != Activation::Identity {
            return Err(Error::Config("the final layer must be linear (logits out)".into()));
        }
        if last.rows < 2 {
            return Err(Error::Config("the model must output at least 2 classes".into()));
        }
        let mut width = input_shape.len();
        for (k, layer) in layers.iter().enumerate() {
            if layer.cols != width {
                return Err(Error::Shape {
                    expected: format!("layer {k} with {width} inputs"),
                    found: format!("{} inputs", layer.cols),
                });
            }
            width = layer.rows;
        }
        Ok(FeedForwardModel { input_shape, layers })
    }

    /// He-initialized network with relu hidden layers.
    pub fn random(input_shape: Shape, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut width = input_shape.len();
        let sizes: Vec<usize> = hidden.iter().copied().chain(std::iter::once(classes)).collect();
        for (k, &rows) in sizes.iter().enumerate() {
            let scale = (2.0 / width as f64).sqrt();
            let weights = (0..rows * width)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let activation = if k + 1 == sizes.len() { Activation::Identity } else { Activation::Relu };
            layers.push(DenseLayer::new(rows, width, weights, vec![0.0; rows], activation)?);
            width = rows;
        }
        FeedForwardModel::new(input_shape, layers)
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Logits for `x`. Pure; safe to call from many threads.
    pub fn forward(&self, x: &ImageTensor) -> Result<Logits> {
        if x.shape() != self.input_shape {
            return Err(Error::Shape {
                expected: self.input_shape.to_string(),
                found: x.shape().to_string(),
            });
        }
        Logits::new(self.forward_raw(x.data()))
    }

    pub(crate) fn forward_raw(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut pre = Vec::new();
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.apply(&cur, &mut pre, &mut out);
            std::mem::swap(&mut cur, &mut out);
        }
        cur
    }

    /// Cross-entropy of one example and its gradient with respect to every
    /// parameter, laid out layer by layer as (weights, biases).
    pub fn loss_and_gradient(&self, input: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_parameters()];
        let loss = self.accumulate_gradient(input, label, &mut grad, 1.0)?;
        Ok((loss, grad))
    }

    /// Adds `scale * dLoss/dtheta` into `grad` and returns the loss.
    fn accumulate_gradient(&self, input: &[f64], label: usize, grad: &mut [f64], scale: f64) -> Result<f64> {
        // forward pass keeping every layer's input and pre-activation
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::new();
            let mut out = Vec::new();
            layer.apply(&cur, &mut pre, &mut out);
            inputs.push(std::mem::replace(&mut cur, out));
            pres.push(pre);
        }
        let logits = Logits::new(cur)?;
        let loss = cross_entropy(&logits, label)?;

        // dL/dz = softmax(z) - onehot(label)
        let z = logits.values();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut delta: Vec<f64> = exps.iter().map(|e| e / total).collect();
        delta[label] -= 1.0;

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.weights.len() + layer.bias.len();
        }

        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if layer.activation == Activation::Relu {
                for (d, p) in delta.iter_mut().zip(&pres[k]) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &inputs[k];
            let base = offsets[k];
            for r in 0..layer.rows {
                let d = scale * delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + r * layer.cols..base + (r + 1) * layer.cols];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[base + layer.weights.len() + r] += d;
            }
            if k > 0 {
                let mut next = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    let d = delta[r];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                delta = next;
            }
        }
        Ok(loss)
    }

    /// Flat parameter vector in the same layout as the gradients.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.num_parameters()),
                found: format!("{}", params.len()),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn apply_step(&mut self, grad: &[f64], lr: f64) {
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w -= lr * grad[off];
                off += 1;
            }
        }
    }

    /// Fraction of labeled images classified correctly.
    pub fn accuracy(&self, images: &[ImageTensor]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for x in images {
            let Some(label) = x.label() else { continue };
            total += 1;
            if self.forward(x)?.argmax() == label {
                correct += 1;
            }
        }
        if total == 0 {
            return Err(Error::Evaluation("no labeled images".into()));
        }
        Ok(correct as f64 / total as f64)
    }
}

/// Mini-batch SGD settings for [`train_reference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden layer widths; empty means softmax regression.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: FeedForwardModel,
    pub train_accuracy: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Fits a dense classifier by minimizing mean cross-entropy.
pub fn train_reference(
    train: &[ImageTensor],
    holdout: &[ImageTensor],
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    if train.iter().any(|x| x.label().is_none()) {
        return Err(Error::Config("training requires labeled images".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut model = FeedForwardModel::random(first.shape(), &config.hidden, config.classes, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; model.num_parameters()];
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &train[i];
                if x.shape() != model.input_shape() {
                    return Err(Error::Shape {
                        expected: model.input_shape().to_string(),
                        found: x.shape().to_string(),
                    });
                }
                let label = x.label().expect("checked above");
                total += match model.accumulate_gradient(x.data(), label, &mut grad, scale) {
                    Ok(l) => l,
                    // logits overflowed to a non-finite value mid-epoch
                    Err(Error::Domain(_)) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
                    Err(e) => return Err(e),
                };
            }
            model.apply_step(&grad, config.learning_rate);
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() || model.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }

    let train_accuracy = model.accuracy(train).ok();
    let holdout_accuracy = if holdout.is_empty() { None } else { model.accuracy(holdout).ok() };
    Ok(TrainedModel { model, train_accuracy, holdout_accuracy, epoch_losses })
}
