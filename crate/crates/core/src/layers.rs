//! Layer specifications and the forward/backward compute kernels.
//!
//! `LayerSpec` is the serializable description of one layer; the kernels are
//! free functions over tensors so the gradient checker can exercise each one
//! in isolation. All kernels are single-threaded with a fixed accumulation
//! order, which makes every pass bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Linear { in_features: usize, out_features: usize },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    BatchNorm2d { channels: usize },
}

impl LayerSpec {
    /// Closed-form output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [n, c, h, w] = four_d(input, "conv2d")?;
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                let oh = conv_extent(h, kernel, stride, padding)?;
                let ow = conv_extent(w, kernel, stride, padding)?;
                Ok(vec![n, out_channels, oh, ow])
            }
            LayerSpec::Linear { in_features, out_features } => {
                let [n, f] = two_d(input, "linear")?;
                if f != in_features {
                    return Err(Error::Shape(format!(
                        "linear expects {in_features} input features, got {f}"
                    )));
                }
                Ok(vec![n, out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [n, c, h, w] = four_d(input, "maxpool2d")?;
                let oh = conv_extent(h, kernel, stride, 0)?;
                let ow = conv_extent(w, kernel, stride, 0)?;
                Ok(vec![n, c, oh, ow])
            }
            LayerSpec::GlobalAvgPool => {
                let [n, c, _, _] = four_d(input, "globalavgpool")?;
                Ok(vec![n, c])
            }
            LayerSpec::BatchNorm2d { channels } => {
                let c = channel_count(input)?;
                if c != channels {
                    return Err(Error::Shape(format!(
                        "batchnorm2d expects {channels} channels, got {c}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Human-readable kind tag, used in error messages and array names.
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::GlobalAvgPool => "globalavgpool",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
        }
    }
}

/// Channel axis size: dimension 1 for both [N, C] and [N, C, H, W].
pub(crate) fn channel_count(shape: &[usize]) -> Result<usize> {
    match shape {
        [_, c] | [_, c, _, _] => Ok(*c),
        _ => Err(Error::Shape(format!("expected a [N, C] or [N, C, H, W] tensor, got {shape:?}"))),
    }
}

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Shape("kernel and stride must be >= 1".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "window {kernel} exceeds padded extent {padded} (input {input}, padding {padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn four_d(shape: &[usize], op: &str) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape(format!("{op} expects a [N, C, H, W] tensor, got {shape:?}"))),
    }
}

fn two_d(shape: &[usize], op: &str) -> Result<[usize; 2]> {
    match *shape {
        [n, f] => Ok([n, f]),
        _ => Err(Error::Shape(format!("{op} expects a [N, F] tensor, got {shape:?}"))),
    }
}

/// Valid output range along one axis: positions `o` in `lo..hi` have
/// `o*stride + k - padding` inside `[0, extent)`.
fn valid_range(out_extent: usize, extent: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    if extent + padding <= k {
        return (0, 0);
    }
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = ((extent + padding - k - 1) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, padding: usize) -> Result<Tensor> {
    let [n, c_in, h, wi] = four_d(x.shape(), "conv2d")?;
    let [c_out, wc_in, k, k2] = four_d(w.shape(), "conv2d weight")?;
    if wc_in != c_in || k != k2 {
        return Err(Error::Shape(format!(
            "conv2d weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if b.len() != c_out {
        return Err(Error::Shape(format!("conv2d bias length {} != {c_out}", b.len())));
    }
    let oh = conv_extent(h, k, stride, padding)?;
    let ow = conv_extent(wi, k, stride, padding)?;

    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for o in 0..c_out {
            let ob = (ni * c_out + o) * oh * ow;
            od[ob..ob + oh * ow].fill(b[o]);
            for i in 0..c_in {
                let xb = (ni * c_in + i) * h * wi;
                let wb = (o * c_in + i) * k * k;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
                    for kx in 0..k {
                        let wv = wd[wb + ky * k + kx];
                        let (ox_lo, ox_hi) = valid_range(ow, wi, kx, stride, padding);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let xrow = xb + iy * wi + (ox_lo * stride + kx - padding);
                            let orow = ob + oy * ow;
                            let outs = &mut od[orow + ox_lo..orow + ox_hi];
                            let ins = xd[xrow..].iter().step_by(stride);
                            for (ov, xv) in outs.iter_mut().zip(ins) {
                                *ov += wv * *xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let [n, c_in, h, wi] = four_d(x.shape(), "conv2d")?;
    let [c_out, _, k, _] = four_d(w.shape(), "conv2d weight")?;
    let [dn, dc, oh, ow] = four_d(dy.shape(), "conv2d grad")?;
    if dn != n || dc != c_out {
        return Err(Error::Shape(format!(
            "conv2d grad {:?} incompatible with input {:?}",
            dy.shape(),
            x.shape()
        )));
    }

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![0.0f32; c_out];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for ni in 0..n {
        for o in 0..c_out {
            let gb = (ni * c_out + o) * oh * ow;
            db[o] += dyd[gb..gb + oh * ow].iter().sum::<f32>();
            for i in 0..c_in {
                let xb = (ni * c_in + i) * h * wi;
                let wb = (o * c_in + i) * k * k;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
                    for kx in 0..k {
                        let wv = wd[wb + ky * k + kx];
                        let (ox_lo, ox_hi) = valid_range(ow, wi, kx, stride, padding);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut wgrad = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let xrow = xb + iy * wi + (ox_lo * stride + kx - padding);
                            let grow = gb + oy * ow;
                            let gys = &dyd[grow + ox_lo..grow + ox_hi];
                            for (j, gy) in gys.iter().enumerate() {
                                let xi = xrow + j * stride;
                                wgrad += *gy * xd[xi];
                                dxd[xi] += *gy * wv;
                            }
                        }
                        dwd[wb + ky * k + kx] += wgrad;
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &[f32]) -> Result<Tensor> {
    let [n, fin] = two_d(x.shape(), "linear")?;
    let [fout, wfin] = two_d(w.shape(), "linear weight")?;
    if wfin != fin || b.len() != fout {
        return Err(Error::Shape(format!(
            "linear weight {:?} / bias {} incompatible with input {:?}",
            w.shape(),
            b.len(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, fout]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        let xrow = &xd[ni * fin..(ni + 1) * fin];
        for o in 0..fout {
            let wrow = &wd[o * fin..(o + 1) * fin];
            let mut acc = b[o];
            for (xv, wv) in xrow.iter().zip(wrow.iter()) {
                acc += xv * wv;
            }
            od[ni * fout + o] = acc;
        }
    }
    Ok(out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let [n, fin] = two_d(x.shape(), "linear")?;
    let [fout, _] = two_d(w.shape(), "linear weight")?;
    let [dn, dfout] = two_d(dy.shape(), "linear grad")?;
    if dn != n || dfout != fout {
        return Err(Error::Shape(format!(
            "linear grad {:?} incompatible with input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![0.0f32; fout];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for ni in 0..n {
        let xrow = &xd[ni * fin..(ni + 1) * fin];
        let dxrow = &mut dxd[ni * fin..(ni + 1) * fin];
        for o in 0..fout {
            let g = dyd[ni * fout + o];
            db[o] += g;
            let wrow = &wd[o * fin..(o + 1) * fin];
            let dwrow = &mut dwd[o * fin..(o + 1) * fin];
            for j in 0..fin {
                dxrow[j] += g * wrow[j];
                dwrow[j] += g * xrow[j];
            }
        }
    }
    Ok((dx, dw, db))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// ReLU gradient; the subgradient at exactly zero is taken as zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::Shape(format!(
            "relu grad shape {:?} != input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let mut dx = dy.clone();
    for (g, xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(dx)
}

/// Max pooling; returns the pooled tensor and the flat input index of each
/// selected maximum (ties resolve to the earliest position) for the backward
/// pass.
pub fn maxpool2d_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = four_d(x.shape(), "maxpool2d")?;
    let oh = conv_extent(h, kernel, stride, 0)?;
    let ow = conv_extent(w, kernel, stride, 0)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; out.len()];
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let xb = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = xb + (oy * stride) * w + ox * stride;
                    let mut best = xd[best_idx];
                    for ky in 0..kernel {
                        let row = xb + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..kernel {
                            let v = xd[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    od[oi] = best;
                    arg[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    if argmax.len() != dy.len() {
        return Err(Error::Shape(format!(
            "maxpool2d argmax length {} != grad length {}",
            argmax.len(),
            dy.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (g, &idx) in dy.data().iter().zip(argmax.iter()) {
        dxd[idx] += *g;
    }
    Ok(dx)
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = four_d(x.shape(), "globalavgpool")?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c]);
    let xd = x.data();
    let od = out.data_mut();
    for (i, ov) in od.iter_mut().enumerate() {
        let base = i * plane;
        let sum: f64 = xd[base..base + plane].iter().map(|&v| f64::from(v)).sum();
        *ov = (sum / plane as f64) as f32;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = four_d(input_shape, "globalavgpool")?;
    let [dn, dc] = two_d(dy.shape(), "globalavgpool grad")?;
    if dn != n || dc != c {
        return Err(Error::Shape(format!(
            "globalavgpool grad {:?} incompatible with input {input_shape:?}",
            dy.shape()
        )));
    }
    let plane = (h * w) as f32;
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (i, g) in dy.data().iter().enumerate() {
        let share = *g / plane;
        for v in &mut dxd[i * (h * w)..(i + 1) * (h * w)] {
            *v = share;
        }
    }
    Ok(dx)
}
