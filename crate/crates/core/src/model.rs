//! Model checkpoint, architecture builder, and the inference forward pass.
//!
//! The forward engine takes one normalization directive per BN layer, which
//! is how every adaptation method is expressed: source stats, batch stats, a
//! mask mixing freshly computed batch stats against source (online hybrid),
//! or a mask mixing previously captured stats (plan replay). All directives
//! normalize through the same `bn_apply` kernel, so methods that should
//! coincide do so bit-exactly.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bn::{bn_apply, compute_batch_stats, hybrid_stats, BnMode, ChannelMask, ChannelStats};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_forward, global_avg_pool_forward, linear_forward, maxpool2d_forward, relu_forward,
    LayerSpec,
};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv { weight: Tensor, bias: Vec<f32> },
    Linear { weight: Tensor, bias: Vec<f32> },
    Bn(BnParams),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub class_count: usize,
    pub bn_layer_count: usize,
    pub epsilon: f64,
    pub train_seed: u64,
    pub input_channels: usize,
    pub input_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    meta: ModelMeta,
}

/// Network shape: a stack of conv+BN+ReLU blocks followed by global average
/// pooling and a linear head. Blocks at positions divisible by
/// `downsample_every` (1-based) use stride 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub downsample_every: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { conv_channels: vec![16, 16, 32, 32, 64, 64], kernel: 3, downsample_every: 2 }
    }
}

impl ModelCheckpoint {
    pub fn new(layers: Vec<LayerSpec>, params: Vec<LayerParams>, meta: ModelMeta) -> Result<Self> {
        if layers.len() != params.len() {
            return Err(Error::Malformed(format!(
                "{} layer specs but {} parameter sets",
                layers.len(),
                params.len()
            )));
        }
        let model = ModelCheckpoint { layers, params, meta };
        model.validate()?;
        Ok(model)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub(crate) fn meta_mut(&mut self) -> &mut ModelMeta {
        &mut self.meta
    }

    pub fn bn_layer_count(&self) -> usize {
        self.meta.bn_layer_count
    }

    /// Layer indices (into `layers`) of the BN layers, in network order.
    pub fn bn_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::BatchNorm2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bn_channel_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm2d { channels } => Some(*channels),
                _ => None,
            })
            .collect()
    }

    /// Source statistics of BN layer `k` (0-based), sigma derived as
    /// sqrt(running_var + eps).
    pub fn source_stats(&self, k: usize) -> Result<ChannelStats> {
        let idx = *self
            .bn_layer_indices()
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("no BN layer {k}")))?;
        match &self.params[idx] {
            LayerParams::Bn(p) => {
                ChannelStats::from_running(&p.running_mean, &p.running_var, self.meta.epsilon)
            }
            _ => Err(Error::Malformed(format!("layer {idx} is not a BN layer"))),
        }
    }

    /// Structural validation: parameter tensors match their specs, BN layers
    /// follow channel-producing layers, and metadata counts agree.
    pub fn validate(&self) -> Result<()> {
        let mut bn_seen = 0usize;
        let mut current_channels: Option<usize> = Some(self.meta.input_channels);
        for (i, (spec, params)) in self.layers.iter().zip(self.params.iter()).enumerate() {
            let fail = |msg: String| Error::Malformed(format!("layer {i} ({}): {msg}", spec.kind_name()));
            match (spec, params) {
                (LayerSpec::Conv2d { in_channels, out_channels, kernel, .. }, LayerParams::Conv { weight, bias }) => {
                    let want = [*out_channels, *in_channels, *kernel, *kernel];
                    if weight.shape() != want {
                        return Err(fail(format!("weight shape {:?}, expected {want:?}", weight.shape())));
                    }
                    if bias.len() != *out_channels {
                        return Err(fail(format!("bias length {}, expected {out_channels}", bias.len())));
                    }
                    current_channels = Some(*out_channels);
                }
                (LayerSpec::Linear { in_features, out_features }, LayerParams::Linear { weight, bias }) => {
                    let want = [*out_features, *in_features];
                    if weight.shape() != want {
                        return Err(fail(format!("weight shape {:?}, expected {want:?}", weight.shape())));
                    }
                    if bias.len() != *out_features {
                        return Err(fail(format!("bias length {}, expected {out_features}", bias.len())));
                    }
                    current_channels = Some(*out_features);
                }
                (LayerSpec::BatchNorm2d { channels }, LayerParams::Bn(p)) => {
                    bn_seen += 1;
                    if current_channels != Some(*channels) {
                        return Err(fail(format!(
                            "preceding layer produces {current_channels:?} channels, BN expects {channels}"
                        )));
                    }
                    for (name, arr) in [
                        ("gamma", &p.gamma),
                        ("beta", &p.beta),
                        ("running_mean", &p.running_mean),
                        ("running_var", &p.running_var),
                    ] {
                        if arr.len() != *channels {
                            return Err(fail(format!("{name} length {}, expected {channels}", arr.len())));
                        }
                    }
                    if p.running_var.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                        return Err(fail("running_var must be non-negative and finite".into()));
                    }
                }
                (LayerSpec::Relu, LayerParams::None)
                | (LayerSpec::MaxPool2d { .. }, LayerParams::None)
                | (LayerSpec::GlobalAvgPool, LayerParams::None) => {}
                (spec, _) => {
                    return Err(Error::Malformed(format!(
                        "layer {i}: parameters do not match spec kind {}",
                        spec.kind_name()
                    )))
                }
            }
        }
        if bn_seen != self.meta.bn_layer_count {
            return Err(Error::Malformed(format!(
                "metadata declares {} BN layers, model has {bn_seen}",
                self.meta.bn_layer_count
            )));
        }
        Ok(())
    }
}

/// Builds the default block architecture with seeded He-normal init, unit
/// gamma, zero beta, and fresh (mean 0, var 1) running statistics.
pub fn build_model(
    arch: &ArchConfig,
    input_channels: usize,
    input_size: usize,
    class_count: usize,
    init_seed: u64,
) -> Result<ModelCheckpoint> {
    if arch.conv_channels.is_empty() {
        return Err(Error::InvalidArgument("architecture needs at least one block".into()));
    }
    if class_count < 2 {
        return Err(Error::InvalidArgument("class_count must be >= 2".into()));
    }
    if arch.kernel == 0 || arch.downsample_every == 0 {
        return Err(Error::InvalidArgument("kernel and downsample_every must be >= 1".into()));
    }
    let mut rng = rng_from_seed(init_seed);
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut in_ch = input_channels;
    for (i, &out_ch) in arch.conv_channels.iter().enumerate() {
        let stride = if (i + 1) % arch.downsample_every == 0 { 2 } else { 1 };
        layers.push(LayerSpec::Conv2d {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: arch.kernel,
            stride,
            padding: arch.kernel / 2,
        });
        let fan_in = in_ch * arch.kernel * arch.kernel;
        params.push(LayerParams::Conv {
            weight: he_normal(&mut rng, &[out_ch, in_ch, arch.kernel, arch.kernel], fan_in),
            bias: vec![0.0; out_ch],
        });
        layers.push(LayerSpec::BatchNorm2d { channels: out_ch });
        params.push(LayerParams::Bn(BnParams {
            gamma: vec![1.0; out_ch],
            beta: vec![0.0; out_ch],
            running_mean: vec![0.0; out_ch],
            running_var: vec![1.0; out_ch],
        }));
        layers.push(LayerSpec::Relu);
        params.push(LayerParams::None);
        in_ch = out_ch;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    params.push(LayerParams::None);
    layers.push(LayerSpec::Linear { in_features: in_ch, out_features: class_count });
    params.push(LayerParams::Linear {
        weight: he_normal(&mut rng, &[class_count, in_ch], in_ch),
        bias: vec![0.0; class_count],
    });

    let meta = ModelMeta {
        class_count,
        bn_layer_count: arch.conv_channels.len(),
        epsilon: 1e-5,
        train_seed: init_seed,
        input_channels,
        input_size,
    };
    ModelCheckpoint::new(layers, params, meta)
}

fn he_normal(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0f64, std).expect("std is positive");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal.sample(rng) as f32;
    }
    t
}

/// Normalization directive for one BN layer.
#[derive(Debug, Clone)]
pub(crate) enum LayerNorm<'a> {
    Source,
    Batch,
    /// Compute target stats from the incoming activations, then mix against
    /// source stats under the mask.
    HybridOnline { mask: &'a ChannelMask },
    /// Mix previously captured target stats against source under the mask.
    HybridFixed { target: &'a ChannelStats, mask: &'a ChannelMask },
}

pub(crate) struct ForwardTrace {
    pub logits: Tensor,
    /// Input activations of each BN layer, before normalization.
    pub pre_bn: Vec<Tensor>,
    /// Statistics actually used to normalize each BN layer.
    pub used_stats: Vec<ChannelStats>,
}

/// Runs the network with one normalization directive per BN layer.
pub(crate) fn run_forward(model: &ModelCheckpoint, x: &Tensor, norms: &[LayerNorm]) -> Result<ForwardTrace> {
    if norms.len() != model.bn_layer_count() {
        return Err(Error::InvalidArgument(format!(
            "{} normalization directives for {} BN layers",
            norms.len(),
            model.bn_layer_count()
        )));
    }
    let mut cur = x.clone();
    let mut pre_bn = Vec::with_capacity(norms.len());
    let mut used_stats = Vec::with_capacity(norms.len());
    let mut bn_k = 0usize;
    for (i, (spec, params)) in model.layers.iter().zip(model.params.iter()).enumerate() {
        let ctx = |e: Error| match e {
            Error::Shape(m) => Error::Shape(format!("layer {i} ({}): {m}", spec.kind_name())),
            other => other,
        };
        cur = match (spec, params) {
            (LayerSpec::Conv2d { stride, padding, .. }, LayerParams::Conv { weight, bias }) => {
                conv2d_forward(&cur, weight, bias, *stride, *padding).map_err(ctx)?
            }
            (LayerSpec::Linear { .. }, LayerParams::Linear { weight, bias }) => {
                linear_forward(&cur, weight, bias).map_err(ctx)?
            }
            (LayerSpec::Relu, _) => relu_forward(&cur),
            (LayerSpec::MaxPool2d { kernel, stride }, _) => {
                maxpool2d_forward(&cur, *kernel, *stride).map_err(ctx)?.0
            }
            (LayerSpec::GlobalAvgPool, _) => global_avg_pool_forward(&cur).map_err(ctx)?,
            (LayerSpec::BatchNorm2d { .. }, LayerParams::Bn(p)) => {
                pre_bn.push(cur.clone());
                let stats = match &norms[bn_k] {
                    LayerNorm::Source => model.source_stats(bn_k)?,
                    LayerNorm::Batch => compute_batch_stats(&cur, model.meta.epsilon).map_err(ctx)?,
                    LayerNorm::HybridOnline { mask } => {
                        let target = compute_batch_stats(&cur, model.meta.epsilon).map_err(ctx)?;
                        hybrid_stats(mask, &model.source_stats(bn_k)?, &target).map_err(ctx)?
                    }
                    LayerNorm::HybridFixed { target, mask } => {
                        hybrid_stats(mask, &model.source_stats(bn_k)?, target).map_err(ctx)?
                    }
                };
                let out = bn_apply(&cur, &stats, &p.gamma, &p.beta).map_err(ctx)?;
                used_stats.push(stats);
                bn_k += 1;
                out
            }
            _ => return Err(Error::Malformed(format!("layer {i}: spec/parameter kind mismatch"))),
        };
    }
    Ok(ForwardTrace { logits: cur, pre_bn, used_stats })
}

/// Inference forward pass.
///
/// Returns the logits and the pre-normalization input of every BN layer. For
/// `BnMode::Hybrid` the supplied per-layer target stats are mixed against the
/// checkpoint's source stats under the given masks.
pub fn forward(model: &ModelCheckpoint, x: &Tensor, mode: &BnMode) -> Result<(Tensor, Vec<Tensor>)> {
    let k = model.bn_layer_count();
    let norms: Vec<LayerNorm> = match mode {
        BnMode::Source => vec![LayerNorm::Source; k],
        BnMode::Batch => vec![LayerNorm::Batch; k],
        BnMode::Hybrid(pairs) => {
            if pairs.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "hybrid mode supplies {} stat/mask pairs for {k} BN layers",
                    pairs.len()
                )));
            }
            pairs
                .iter()
                .map(|(stats, mask)| LayerNorm::HybridFixed { target: stats, mask })
                .collect()
        }
    };
    let trace = run_forward(model, x, &norms)?;
    Ok((trace.logits, trace.pre_bn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_meta(c: usize, k: usize) -> ModelMeta {
        ModelMeta {
            class_count: c,
            bn_layer_count: k,
            epsilon: 1e-5,
            train_seed: 0,
            input_channels: 1,
            input_size: 2,
        }
    }

    #[test]
    fn empty_model_is_identity() {
        let model = ModelCheckpoint::new(vec![], vec![], tiny_meta(2, 0)).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.25, -1.5]).unwrap();
        let (logits, acts) = forward(&model, &x, &BnMode::Source).unwrap();
        assert_eq!(logits, x);
        assert!(acts.is_empty());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = build_model(&ArchConfig::default(), 3, 16, 8, 7).unwrap();
        let x = Tensor::filled(&[2, 3, 16, 16], 0.3);
        let (a, _) = forward(&model, &x, &BnMode::Source).unwrap();
        let (b, _) = forward(&model, &x, &BnMode::Source).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.shape(), &[2, 8]);
    }

    #[test]
    fn hand_built_conv_bn_linear() {
        // Conv 1x1x1x1 weight 2, bias 1; BN with mu=1, var=3.99999 (sigma 2
        // after eps=1e-5), gamma 2, beta 0.5; GAP; Linear weight 1, bias 0.
        // Input [[1, 3]]: conv -> [3, 7]; bn -> [2*(3-1)/2+0.5, 2*(7-1)/2+0.5]
        // = [2.5, 6.5]; gap -> 4.5; linear -> 4.5.
        let layers = vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 1, stride: 1, padding: 0 },
            LayerSpec::BatchNorm2d { channels: 1 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { in_features: 1, out_features: 1 },
        ];
        let var = (4.0f64 - 1e-5) as f32;
        let params = vec![
            LayerParams::Conv { weight: Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(), bias: vec![1.0] },
            LayerParams::Bn(BnParams {
                gamma: vec![2.0],
                beta: vec![0.5],
                running_mean: vec![1.0],
                running_var: vec![var],
            }),
            LayerParams::None,
            LayerParams::Linear { weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(), bias: vec![0.0] },
        ];
        let mut meta = tiny_meta(1, 1);
        meta.class_count = 1;
        let model = ModelCheckpoint::new(layers, params, meta).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (logits, acts) = forward(&model, &x, &BnMode::Source).unwrap();
        assert!((logits.data()[0] - 4.5).abs() < 1e-5, "got {}", logits.data()[0]);
        assert_eq!(acts.len(), 1);
        assert_eq!(acts[0].data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let model = build_model(&ArchConfig::default(), 3, 16, 8, 7).unwrap();
        let x = Tensor::filled(&[2, 4, 16, 16], 0.0);
        let err = forward(&model, &x, &BnMode::Source).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0"), "message was: {msg}");
    }

    #[test]
    fn validate_rejects_mismatched_bn_count() {
        let model = build_model(&ArchConfig::default(), 3, 16, 8, 7).unwrap();
        let mut bad = model.clone();
        bad.meta_mut().bn_layer_count = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = build_model(&ArchConfig::default(), 3, 16, 8, 42).unwrap();
        let b = build_model(&ArchConfig::default(), 3, 16, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = build_model(&ArchConfig::default(), 3, 16, 8, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hybrid_mode_needs_one_pair_per_layer() {
        let model = build_model(&ArchConfig::default(), 3, 16, 8, 7).unwrap();
        let x = Tensor::filled(&[2, 3, 16, 16], 0.1);
        let err = forward(&model, &x, &BnMode::Hybrid(vec![])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
