//! Training: cross-entropy, backprop through the layer stack, momentum SGD,
//! and BN running-statistic maintenance.
//!
//! Everything is single-threaded with a fixed iteration order, so a (dataset,
//! seed, config) triple always produces a byte-identical checkpoint.

use rand::seq::SliceRandom;

use crate::bn::{bn_apply, bn_train_backward, bn_train_forward, batch_moments, BnCache, ChannelStats};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, global_avg_pool_backward, global_avg_pool_forward,
    linear_backward, linear_forward, maxpool2d_backward, maxpool2d_forward, relu_backward,
    relu_forward, LayerSpec,
};
use crate::model::{build_model, ArchConfig, LayerParams, ModelCheckpoint};
use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::tensor::{argmax_rows, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 24,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be >= 2 (BN needs batch statistics)".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight_decay must be finite and >= 0".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::InvalidArgument("bn_momentum must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy via log-sum-exp with max subtraction.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_loss_grad(logits, labels)?.0)
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_loss_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = match *logits.shape() {
        [n, c] => (n, c),
        _ => return Err(Error::Shape(format!("logits must be [N, C], got {:?}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("batch is empty".into()));
    }
    if let Some(bad) = labels.iter().position(|&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {} at sample {bad} out of range for {c} classes",
            labels[bad]
        )));
    }
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    for (i, row) in logits.data().chunks_exact(c).enumerate() {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - f64::from(row[labels[i]] - m);
        for (j, e) in exps.iter().enumerate() {
            let p = e / z;
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            gd[i * c + j] = ((p - target) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

enum Cache {
    Conv { x: Tensor },
    Linear { x: Tensor },
    Relu { x: Tensor },
    MaxPool { shape: Vec<usize>, argmax: Vec<usize> },
    Gap { shape: Vec<usize> },
    Bn(BnCache),
}

/// Training-mode forward pass: BN layers normalize with their own batch
/// statistics. Detects the first layer producing non-finite values.
fn forward_train(model: &ModelCheckpoint, x: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(model.layers().len());
    for (i, (spec, params)) in model.layers().iter().zip(model.params().iter()).enumerate() {
        cur = match (spec, params) {
            (LayerSpec::Conv2d { stride, padding, .. }, LayerParams::Conv { weight, bias }) => {
                caches.push(Cache::Conv { x: cur.clone() });
                conv2d_forward(&cur, weight, bias, *stride, *padding)?
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear { weight, bias }) => {
                caches.push(Cache::Linear { x: cur.clone() });
                linear_forward(&cur, weight, bias)?
            }
            (LayerSpec::Relu, _) => {
                caches.push(Cache::Relu { x: cur.clone() });
                relu_forward(&cur)
            }
            (LayerSpec::MaxPool2d { kernel, stride }, _) => {
                let (out, argmax) = maxpool2d_forward(&cur, *kernel, *stride)?;
                caches.push(Cache::MaxPool { shape: cur.shape().to_vec(), argmax });
                out
            }
            (LayerSpec::GlobalAvgPool, _) => {
                let shape = cur.shape().to_vec();
                let out = global_avg_pool_forward(&cur)?;
                caches.push(Cache::Gap { shape });
                out
            }
            (LayerSpec::BatchNorm2d { .. }, LayerParams::Bn(p)) => {
                let (out, cache) = bn_train_forward(&cur, &p.gamma, &p.beta, model.meta().epsilon)?;
                caches.push(Cache::Bn(cache));
                out
            }
            _ => return Err(Error::Malformed(format!("layer {i}: spec/parameter kind mismatch"))),
        };
        if !cur.is_finite() {
            let bad = cur.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::NonFinite {
                layer: i,
                detail: format!("{bad} of {} values after {}", cur.len(), spec.kind_name()),
            });
        }
    }
    Ok((cur, caches))
}

/// Per-layer parameter gradients; also used as the optimizer's velocity
/// buffers since they share the parameter layout.
enum ParamGrads {
    Dense { dw: Tensor, db: Vec<f32> },
    Bn { dgamma: Vec<f32>, dbeta: Vec<f32> },
    None,
}

fn backward(model: &ModelCheckpoint, caches: &[Cache], dlogits: Tensor) -> Result<Vec<ParamGrads>> {
    let mut grads: Vec<ParamGrads> = Vec::with_capacity(caches.len());
    let mut dy = dlogits;
    for ((spec, params), cache) in model
        .layers()
        .iter()
        .zip(model.params().iter())
        .rev()
        .zip(caches.iter().rev())
    {
        match (spec, params, cache) {
            (LayerSpec::Conv2d { stride, padding, .. }, LayerParams::Conv { weight, .. }, Cache::Conv { x }) => {
                let (dx, dw, db) = conv2d_backward(x, weight, &dy, *stride, *padding)?;
                grads.push(ParamGrads::Dense { dw, db });
                dy = dx;
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear { weight, .. }, Cache::Linear { x }) => {
                let (dx, dw, db) = linear_backward(x, weight, &dy)?;
                grads.push(ParamGrads::Dense { dw, db });
                dy = dx;
            }
            (LayerSpec::Relu, _, Cache::Relu { x }) => {
                grads.push(ParamGrads::None);
                dy = relu_backward(x, &dy)?;
            }
            (LayerSpec::MaxPool2d { .. }, _, Cache::MaxPool { shape, argmax }) => {
                grads.push(ParamGrads::None);
                dy = maxpool2d_backward(shape, argmax, &dy)?;
            }
            (LayerSpec::GlobalAvgPool, _, Cache::Gap { shape }) => {
                grads.push(ParamGrads::None);
                dy = global_avg_pool_backward(shape, &dy)?;
            }
            (LayerSpec::BatchNorm2d { .. }, LayerParams::Bn(p), Cache::Bn(cache)) => {
                let (dx, dgamma, dbeta) = bn_train_backward(cache, &p.gamma, &dy)?;
                grads.push(ParamGrads::Bn { dgamma, dbeta });
                dy = dx;
            }
            _ => return Err(Error::Malformed("cache does not match layer kind".into())),
        }
    }
    grads.reverse();
    Ok(grads)
}

pub struct OptimizerState {
    velocity: Vec<ParamGrads>,
}

impl OptimizerState {
    pub fn new(model: &ModelCheckpoint) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|p| match p {
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                    ParamGrads::Dense { dw: Tensor::zeros(weight.shape()), db: vec![0.0; bias.len()] }
                }
                LayerParams::Bn(p) => ParamGrads::Bn {
                    dgamma: vec![0.0; p.gamma.len()],
                    dbeta: vec![0.0; p.beta.len()],
                },
                LayerParams::None => ParamGrads::None,
            })
            .collect();
        OptimizerState { velocity }
    }
}

fn sgd_array(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32, wd: f32) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + wd * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// One optimization step: forward, cross-entropy backward, momentum SGD
/// update (weight decay on conv/linear weights only), then EMA update of the
/// BN running statistics with the batch moments seen in the forward pass.
pub fn backward_and_step(
    model: &mut ModelCheckpoint,
    batch: &Tensor,
    labels: &[usize],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<f64> {
    config.validate()?;
    let (logits, caches) = forward_train(model, batch)?;
    let (loss, dlogits) = cross_entropy_loss_grad(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: model.layers().len(),
            detail: format!("loss is {loss} at the cross-entropy head"),
        });
    }
    let grads = backward(model, &caches, dlogits)?;

    let lr = config.learning_rate as f32;
    let momentum = config.momentum as f32;
    let wd = config.weight_decay as f32;
    for ((params, grad), vel) in model
        .params_mut()
        .iter_mut()
        .zip(grads.iter())
        .zip(state.velocity.iter_mut())
    {
        match (params, grad, vel) {
            (
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias },
                ParamGrads::Dense { dw, db },
                ParamGrads::Dense { dw: vw, db: vb },
            ) => {
                sgd_array(weight.data_mut(), dw.data(), vw.data_mut(), lr, momentum, wd);
                sgd_array(bias, db, vb, lr, momentum, 0.0);
            }
            (
                LayerParams::Bn(p),
                ParamGrads::Bn { dgamma, dbeta },
                ParamGrads::Bn { dgamma: vg, dbeta: vb },
            ) => {
                sgd_array(&mut p.gamma, dgamma, vg, lr, momentum, 0.0);
                sgd_array(&mut p.beta, dbeta, vb, lr, momentum, 0.0);
            }
            (LayerParams::None, ParamGrads::None, ParamGrads::None) => {}
            _ => return Err(Error::Malformed("gradient layout does not match parameters".into())),
        }
    }

    // EMA running-stat update from the batch moments of this step.
    let m = config.bn_momentum;
    let mut cache_iter = caches.iter();
    for params in model.params_mut().iter_mut() {
        if let LayerParams::Bn(p) = params {
            let cache = loop {
                match cache_iter.next() {
                    Some(Cache::Bn(c)) => break c,
                    Some(_) => continue,
                    None => return Err(Error::Malformed("missing BN cache".into())),
                }
            };
            for (r, &b) in p.running_mean.iter_mut().zip(cache.batch_mean.iter()) {
                *r = ((1.0 - m) * f64::from(*r) + m * b) as f32;
            }
            for (r, &b) in p.running_var.iter_mut().zip(cache.batch_var.iter()) {
                *r = ((1.0 - m) * f64::from(*r) + m * b) as f32;
            }
        }
    }
    Ok(loss)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelCheckpoint,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains a fresh model on the dataset. Deterministic given (dataset,
/// init_seed, config): init_seed fixes the parameter init, config.seed fixes
/// the shuffle order.
pub fn train(
    dataset: &LabeledDataset,
    arch: &ArchConfig,
    init_seed: u64,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate_for_training()?;
    let (channels, h, w) = dataset.image_dims();
    if h != w {
        return Err(Error::InvalidArgument(format!("expected square images, got {h}x{w}")));
    }
    let mut model = build_model(arch, channels, h, dataset.class_count, init_seed)?;
    model.meta_mut().train_seed = config.seed;
    let mut state = OptimizerState::new(&model);

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = rng_from_seed(derive_seed_indexed(config.seed, "shuffle", epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (batch, labels) = dataset.select(chunk)?;
            let loss = backward_and_step(&mut model, &batch, &labels, &mut state, config)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        epoch_losses.push(if seen > 0 { loss_sum / seen as f64 } else { 0.0 });
    }

    let train_accuracy = source_accuracy_chunked(&model, dataset, 256)?;
    Ok(TrainOutcome { model, epoch_losses, train_accuracy })
}

/// Source-mode accuracy over a dataset, evaluated in chunks. Source
/// normalization has no batch coupling, so chunking does not change results.
pub fn source_accuracy_chunked(model: &ModelCheckpoint, dataset: &LabeledDataset, chunk: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0usize;
    for part in indices.chunks(chunk.max(1)) {
        let (batch, labels) = dataset.select(part)?;
        let (logits, _) = crate::model::forward(model, &batch, &crate::bn::BnMode::Source)?;
        let preds = argmax_rows(&logits)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of predictions matching labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Replaces every BN layer's running statistics with the exact batch moments
/// of the given data, propagating sequentially so each layer is calibrated on
/// activations normalized by the already-calibrated earlier layers.
///
/// After calibration, a Source-mode forward on the same data normalizes with
/// (up to f32 storage rounding) the data's own statistics.
pub fn calibrate_bn_stats(model: &mut ModelCheckpoint, images: &Tensor) -> Result<()> {
    let mut cur = images.clone();
    let eps = model.meta().epsilon;
    for i in 0..model.layers().len() {
        let spec = model.layers()[i].clone();
        cur = match (&spec, &mut model.params_mut()[i]) {
            (LayerSpec::Conv2d { stride, padding, .. }, LayerParams::Conv { weight, bias }) => {
                conv2d_forward(&cur, weight, bias, *stride, *padding)?
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear { weight, bias }) => {
                linear_forward(&cur, weight, bias)?
            }
            (LayerSpec::Relu, _) => relu_forward(&cur),
            (LayerSpec::MaxPool2d { kernel, stride }, _) => maxpool2d_forward(&cur, *kernel, *stride)?.0,
            (LayerSpec::GlobalAvgPool, _) => global_avg_pool_forward(&cur)?,
            (LayerSpec::BatchNorm2d { .. }, LayerParams::Bn(p)) => {
                let (mean, var, _) = batch_moments(&cur)?;
                for (r, &b) in p.running_mean.iter_mut().zip(mean.iter()) {
                    *r = b as f32;
                }
                for (r, &b) in p.running_var.iter_mut().zip(var.iter()) {
                    *r = b as f32;
                }
                let stats = ChannelStats::from_running(&p.running_mean, &p.running_var, eps)?;
                bn_apply(&cur, &stats, &p.gamma, &p.beta)?
            }
            _ => return Err(Error::Malformed(format!("layer {i}: spec/parameter kind mismatch"))),
        };
    }
    Ok(())
}
