//! Finite-difference gradient verification.
//!
//! Two precisions are supported. `F32` differentiates the production
//! forward kernels directly. `F64` differentiates naive 64-bit reference
//! forwards written independently of the production code (plain nested
//! loops, no shared helpers), which removes most finite-difference noise and
//! pins the analytic gradients much tighter. Both modes compare against the
//! production backward pass.
//!
//! All checks reduce the layer output to a scalar through a fixed random
//! projection `L = sum(w_i * y_i)`, so the analytic gradient is the backward
//! pass seeded with `dy = w`.

use rand::Rng;

use crate::bn::{bn_train_backward, bn_train_forward};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, global_avg_pool_backward, global_avg_pool_forward,
    linear_backward, linear_forward, maxpool2d_backward, maxpool2d_forward, relu_backward,
    relu_forward,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use crate::train::{cross_entropy_loss, cross_entropy_loss_grad};

const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckPrecision {
    F32,
    F64,
}

impl CheckPrecision {
    pub fn tolerance(&self) -> f64 {
        match self {
            CheckPrecision::F32 => 1e-2,
            CheckPrecision::F64 => 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layer: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

// 64-bit reference forwards. Deliberately naive: direct definition-following
// loops over output coordinates, no validity-range precomputation or data
// reuse from the production kernels.

fn conv2d_ref64(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [n, c_in, h, wi] = xs;
    let [c_out, _, k, _] = ws;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wi + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f64; n * c_out * oh * ow];
    for ni in 0..n {
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for i in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                let xi = ((ni * c_in + i) * h + iy as usize) * wi + ix as usize;
                                let widx = ((o * c_in + i) * k + ky) * k + kx;
                                acc += x[xi] * w[widx];
                            }
                        }
                    }
                    out[((ni * c_out + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn linear_ref64(x: &[f64], n: usize, fin: usize, w: &[f64], fout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; n * fout];
    for ni in 0..n {
        for o in 0..fout {
            let mut acc = b[o];
            for j in 0..fin {
                acc += x[ni * fin + j] * w[o * fin + j];
            }
            out[ni * fout + o] = acc;
        }
    }
    out
}

fn relu_ref64(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

fn maxpool2d_ref64(x: &[f64], xs: [usize; 4], kernel: usize, stride: usize) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let xi = ((ni * c + ci) * h + oy * stride + ky) * w + ox * stride + kx;
                            if x[xi] > best {
                                best = x[xi];
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    out
}

fn gap_ref64(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let plane = h * w;
    (0..n * c)
        .map(|i| x[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

fn bn_ref64(x: &[f64], xs: [usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut out = vec![0.0f64; x.len()];
    for f in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            let base = (ni * c + f) * plane;
            for j in 0..plane {
                sum += x[base + j];
            }
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for ni in 0..n {
            let base = (ni * c + f) * plane;
            for j in 0..plane {
                sq += (x[base + j] - mu) * (x[base + j] - mu);
            }
        }
        let sigma = (sq / m + eps).sqrt();
        for ni in 0..n {
            let base = (ni * c + f) * plane;
            for j in 0..plane {
                out[base + j] = gamma[f] * (x[base + j] - mu) / sigma + beta[f];
            }
        }
    }
    out
}

fn ce_ref64(logits: &[f64], n: usize, c: usize, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        loss += z.ln() - (row[labels[i]] - m);
    }
    loss / n as f64
}

/// Relative error with a floor tied to the gradient scale of the whole
/// array, so finite-difference noise on near-zero elements does not swamp
/// the comparison.
fn max_relative_error(analytic: &[f32], fd: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .map(|&v| f64::from(v).abs())
        .chain(fd.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-8);
    let floor = 0.02 * scale;
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(&a, &f)| {
            let a = f64::from(a);
            (a - f).abs() / a.abs().max(f.abs()).max(floor)
        })
        .fold(0.0f64, f64::max)
}

/// Central finite differences of a scalar function over a parameter slice.
/// The f32 path perturbs the stored 32-bit value and divides by the actually
/// realized step.
fn fd_grad_f32(values: &mut [f32], loss: &mut dyn FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        let xp = orig + FD_STEP as f32;
        let xm = orig - FD_STEP as f32;
        values[i] = xp;
        let lp = loss(values);
        values[i] = xm;
        let lm = loss(values);
        values[i] = orig;
        grad.push((lp - lm) / (f64::from(xp) - f64::from(xm)));
    }
    grad
}

fn fd_grad_f64(values: &mut [f64], loss: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + FD_STEP;
        let lp = loss(values);
        values[i] = orig - FD_STEP;
        let lm = loss(values);
        values[i] = orig;
        grad.push((lp - lm) / (2.0 * FD_STEP));
    }
    grad
}

fn projection(rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let mag: f32 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn dot64(w: &[f32], y32: Option<&[f32]>, y64: Option<&[f64]>) -> f64 {
    match (y32, y64) {
        (Some(y), None) => w.iter().zip(y).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum(),
        (None, Some(y)) => w.iter().zip(y).map(|(&a, &b)| f64::from(a) * b).sum(),
        _ => unreachable!(),
    }
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Random tensor with entries kept away from zero, so ReLU kinks are never
/// within the finite-difference step.
fn sample_away_from_zero(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], min_abs: f32) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let mag: f32 = rng.random_range(min_abs..1.0);
        *v = if rng.random_bool(0.5) { mag } else { -mag };
    }
    t
}

struct ArrayCheck {
    name: &'static str,
    rel_err: f64,
    count: usize,
}

fn check_result(layer: &str, parts: Vec<ArrayCheck>, precision: CheckPrecision) -> Result<GradCheckReport> {
    let tol = precision.tolerance();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for p in &parts {
        if p.rel_err > tol {
            return Err(Error::InvalidArgument(format!(
                "{layer} gradient check failed on {}: relative error {:.3e} exceeds {tol:.0e}",
                p.name, p.rel_err
            )));
        }
        max_rel = max_rel.max(p.rel_err);
        checked += p.count;
    }
    Ok(GradCheckReport { layer: layer.to_string(), max_rel_err: max_rel, checked })
}

pub fn check_conv2d(seed: u64, precision: CheckPrecision) -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(derive_seed(seed, "conv2d"));
    let n = rng.random_range(1..3usize);
    let c_in = rng.random_range(1..4usize);
    let c_out = rng.random_range(1..4usize);
    let k = rng.random_range(1..4usize);
    let stride = rng.random_range(1..3usize);
    let padding = rng.random_range(0..2usize);
    let h = rng.random_range(k.max(3)..7usize);
    let w = rng.random_range(k.max(3)..7usize);

    let x = sample_away_from_zero(&mut rng, &[n, c_in, h, w], 0.05);
    let wt = sample_away_from_zero(&mut rng, &[c_out, c_in, k, k], 0.05);
    let b: Vec<f32> = (0..c_out).map(|_| rng.random_range(-0.5..0.5)).collect();

    let y = conv2d_forward(&x, &wt, &b, stride, padding)?;
    let proj = projection(&mut rng, y.len());
    let dy = Tensor::new(y.shape().to_vec(), proj.clone())?;
    let (dx, dw, db) = conv2d_backward(&x, &wt, &dy, stride, padding)?;

    let xs = [n, c_in, h, w];
    let ws = [c_out, c_in, k, k];
    let (ex, ew, eb) = match precision {
        CheckPrecision::F32 => {
            let mut lx = |vals: &[f32]| {
                let t = Tensor::new(xs.to_vec(), vals.to_vec()).unwrap();
                dot64(&proj, Some(conv2d_forward(&t, &wt, &b, stride, padding).unwrap().data()), None)
            };
            let fx = fd_grad_f32(&mut x.data().to_vec(), &mut lx);
            let mut lw = |vals: &[f32]| {
                let t = Tensor::new(ws.to_vec(), vals.to_vec()).unwrap();
                dot64(&proj, Some(conv2d_forward(&x, &t, &b, stride, padding).unwrap().data()), None)
            };
            let fw = fd_grad_f32(&mut wt.data().to_vec(), &mut lw);
            let mut lb = |vals: &[f32]| {
                dot64(&proj, Some(conv2d_forward(&x, &wt, vals, stride, padding).unwrap().data()), None)
            };
            let fb = fd_grad_f32(&mut b.clone(), &mut lb);
            (fx, fw, fb)
        }
        CheckPrecision::F64 => {
            let (x64, w64, b64) = (to64(x.data()), to64(wt.data()), to64(&b));
            let mut lx = |vals: &[f64]| {
                dot64(&proj, None, Some(&conv2d_ref64(vals, xs, &w64, ws, &b64, stride, padding)))
            };
            let fx = fd_grad_f64(&mut x64.clone(), &mut lx);
            let mut lw = |vals: &[f64]| {
                dot64(&proj, None, Some(&conv2d_ref64(&x64, xs, vals, ws, &b64, stride, padding)))
            };
            let fw = fd_grad_f64(&mut w64.clone(), &mut lw);
            let mut lb = |vals: &[f64]| {
                dot64(&proj, None, Some(&conv2d_ref64(&x64, xs, &w64, ws, vals, stride, padding)))
            };
            let fb = fd_grad_f64(&mut b64.clone(), &mut lb);
            (fx, fw, fb)
        }
    };
    check_result(
        "conv2d",
        vec![
            ArrayCheck { name: "dx", rel_err: max_relative_error(dx.data(), &ex), count: ex.len() },
            ArrayCheck { name: "dw", rel_err: max_relative_error(dw.data(), &ew), count: ew.len() },
            ArrayCheck { name: "db", rel_err: max_relative_error(&db, &eb), count: eb.len() },
        ],
        precision,
    )
}

pub fn check_linear(seed: u64, precision: CheckPrecision) -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(derive_seed(seed, "linear"));
    let n = rng.random_range(1..4usize);
    let fin = rng.random_range(1..6usize);
    let fout = rng.random_range(1..6usize);
    let x = sample_away_from_zero(&mut rng, &[n, fin], 0.05);
    let wt = sample_away_from_zero(&mut rng, &[fout, fin], 0.05);
    let b: Vec<f32> = (0..fout).map(|_| rng.random_range(-0.5..0.5)).collect();

    let y = linear_forward(&x, &wt, &b)?;
    let proj = projection(&mut rng, y.len());
    let dy = Tensor::new(y.shape().to_vec(), proj.clone())?;
    let (dx, dw, db) = linear_backward(&x, &wt, &dy)?;

    let (ex, ew, eb) = match precision {
        CheckPrecision::F32 => {
            let mut lx = |vals: &[f32]| {
                let t = Tensor::new(vec![n, fin], vals.to_vec()).unwrap();
                dot64(&proj, Some(linear_forward(&t, &wt, &b).unwrap().data()), None)
            };
            let fx = fd_grad_f32(&mut x.data().to_vec(), &mut lx);
            let mut lw = |vals: &[f32]| {
                let t = Tensor::new(vec![fout, fin], vals.to_vec()).unwrap();
                dot64(&proj, Some(linear_forward(&x, &t, &b).unwrap().data()), None)
            };
            let fw = fd_grad_f32(&mut wt.data().to_vec(), &mut lw);
            let mut lb = |vals: &[f32]| dot64(&proj, Some(linear_forward(&x, &wt, vals).unwrap().data()), None);
            let fb = fd_grad_f32(&mut b.clone(), &mut lb);
            (fx, fw, fb)
        }
        CheckPrecision::F64 => {
            let (x64, w64, b64) = (to64(x.data()), to64(wt.data()), to64(&b));
            let mut lx = |vals: &[f64]| dot64(&proj, None, Some(&linear_ref64(vals, n, fin, &w64, fout, &b64)));
            let fx = fd_grad_f64(&mut x64.clone(), &mut lx);
            let mut lw = |vals: &[f64]| dot64(&proj, None, Some(&linear_ref64(&x64, n, fin, vals, fout, &b64)));
            let fw = fd_grad_f64(&mut w64.clone(), &mut lw);
            let mut lb = |vals: &[f64]| dot64(&proj, None, Some(&linear_ref64(&x64, n, fin, &w64, fout, vals)));
            let fb = fd_grad_f64(&mut b64.clone(), &mut lb);
            (fx, fw, fb)
        }
    };
    check_result(
        "linear",
        vec![
            ArrayCheck { name: "dx", rel_err: max_relative_error(dx.data(), &ex), count: ex.len() },
            ArrayCheck { name: "dw", rel_err: max_relative_error(dw.data(), &ew), count: ew.len() },
            ArrayCheck { name: "db", rel_err: max_relative_error(&db, &eb), count: eb.len() },
        ],
        precision,
    )
}

pub fn check_relu(seed: u64, precision: CheckPrecision) -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(derive_seed(seed, "relu"));
    let n = rng.random_range(1..4usize);
    let f = rng.random_range(2..8usize);
    // Entries at least 0.05 from the kink; the FD step is 1e-3.
    let x = sample_away_from_zero(&mut rng, &[n, f], 0.05);
    let proj = projection(&mut rng, x.len());
    let dy = Tensor::new(x.shape().to_vec(), proj.clone())?;
    let dx = relu_backward(&x, &dy)?;

    let ex = match precision {
        CheckPrecision::F32 => {
            let mut lx = |vals: &[f32]| {
                let t = Tensor::new(x.shape().to_vec(), vals.to_vec()).unwrap();
                dot64(&proj, Some(relu_forward(&t).data()), None)
            };
            fd_grad_f32(&mut x.data().to_vec(), &mut lx)
        }
        CheckPrecision::F64 => {
            let x64 = to64(x.data());
            let mut lx = |vals: &[f64]| dot64(&proj, None, Some(&relu_ref64(vals)));
            fd_grad_f64(&mut x64.clone(), &mut lx)
        }
    };
    check_result(
        "relu",
        vec![ArrayCheck { name: "dx", rel_err: max_relative_error(dx.data(), &ex), count: ex.len() }],
        precision,
    )
}

pub fn check_maxpool2d(seed: u64, precision: CheckPrecision) -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(derive_seed(seed, "maxpool2d"));
    let n = rng.random_range(1..3usize);
    let c = rng.random_range(1..3usize);
    let kernel = rng.random_range(2..4usize);
    let stride = rng.random_range(1..3usize);
    let h = rng.random_range(kernel..kernel + 4);
    let w = rng.random_range(kernel..kernel + 4);

    // Values are a seeded shuffle of an equally spaced grid (gap 0.07 far
    // above the FD step), so no pooling window has near-ties.
    let len = n * c * h * w;
    let mut values: Vec<f32> = (0..len).map(|i| -1.0 + 0.07 * i as f32).collect();
    use rand::seq::SliceRandom;
    values.shuffle(&mut rng);
    let x = Tensor::new(vec![n, c, h, w], values)?;

    let (y, argmax) = maxpool2d_forward(&x, kernel, stride)?;
    let proj = projection(&mut rng, y.len());
    let dy = Tensor::new(y.shape().to_vec(), proj.clone())?;
    let dx = maxpool2d_backward(x.shape(), &argmax, &dy)?;

    let ex = match precision {
        CheckPrecision::F32 => {
            let mut lx = |vals: &[f32]| {
                let t = Tensor::new(x.shape().to_vec(), vals.to_vec()).unwrap();
                dot64(&proj, Some(maxpool2d_forward(&t, kernel, stride).unwrap().0.data()), None)
            };
            fd_grad_f32(&mut x.data().to_vec(), &mut lx)
        }
        CheckPrecision::F64 => {
            let x64 = to64(x.data());
            let xs = [n, c, h, w];
            let mut lx = |vals: &[f64]| dot64(&proj, None, Some(&maxpool2d_ref64(vals, xs, kernel, stride)));
            fd_grad_f64(&mut x64.clone(), &mut lx)
        }
    };
    check_result(
        "maxpool2d",
        vec![ArrayCheck { name: "dx", rel_err: max_relative_error(dx.data(), &ex), count: ex.len() }],
        precision,
    )
}

pub fn check_global_avg_pool(seed: u64, precision: CheckPrecision) -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(derive_seed(seed, "globalavgpool"));
    let n = rng.random_range(1..3usize);
    let c = rng.random_range(1..4usize);
    let h = rng.random_range(2..5usize);
    let w = rng.random_range(2..5usize);
    let x = sample_away_from_zero(&mut rng, &[n, c, h, w], 0.01);
    let y = global_avg_pool_forward(&x)?;
    let proj = projection(&mut rng, y.len());
    let dy = Tensor::new(y.shape().to_vec(), proj.clone())?;
    let dx = global_avg_pool_backward(x.shape(), &dy)?;

    let ex = match precision {
        CheckPrecision::F32 => {
            let mut lx = |vals: &[f32]| {
                let t = Tensor::new(x.shape().to_vec(), vals.to_vec()).unwrap();
                dot64(&proj, Some(global_avg_pool_forward(&t).unwrap().data()), None)
            };
            fd_grad_f32(&mut x.data().to_vec(), &mut lx)
        }
        CheckPrecision::F64 => {
            let x64 = to64(x.data());
            let xs = [n, c, h, w];
            let mut lx = |vals: &[f64]| dot64(&proj, None, Some(&gap_ref64(vals, xs)));
            fd_grad_f64(&mut x64.clone(), &mut lx)
        }
    };
    check_result(
        "globalavgpool",
        vec![ArrayCheck { name: "dx", rel_err: max_relative_error(dx.data(), &ex), count: ex.len() }],
        precision,
    )
}

pub fn check_batchnorm2d(seed: u64, precision: CheckPrecision) -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(derive_seed(seed, "batchnorm2d"));
    let n = rng.random_range(2..4usize);
    let c = rng.random_range(1..4usize);
    let h = rng.random_range(2..4usize);
    let w = rng.random_range(2..4usize);
    let eps = 1e-5;
    let x = sample_away_from_zero(&mut rng, &[n, c, h, w], 0.01);
    let gamma: Vec<f32> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta: Vec<f32> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();

    let (y, cache) = bn_train_forward(&x, &gamma, &beta, eps)?;
    let proj = projection(&mut rng, y.len());
    let dy = Tensor::new(y.shape().to_vec(), proj.clone())?;
    let (dx, dgamma, dbeta) = bn_train_backward(&cache, &gamma, &dy)?;

    let (ex, eg, eb) = match precision {
        CheckPrecision::F32 => {
            let mut lx = |vals: &[f32]| {
                let t = Tensor::new(x.shape().to_vec(), vals.to_vec()).unwrap();
                dot64(&proj, Some(bn_train_forward(&t, &gamma, &beta, eps).unwrap().0.data()), None)
            };
            let fx = fd_grad_f32(&mut x.data().to_vec(), &mut lx);
            let mut lg = |vals: &[f32]| {
                dot64(&proj, Some(bn_train_forward(&x, vals, &beta, eps).unwrap().0.data()), None)
            };
            let fg = fd_grad_f32(&mut gamma.clone(), &mut lg);
            let mut lb = |vals: &[f32]| {
                dot64(&proj, Some(bn_train_forward(&x, &gamma, vals, eps).unwrap().0.data()), None)
            };
            let fb = fd_grad_f32(&mut beta.clone(), &mut lb);
            (fx, fg, fb)
        }
        CheckPrecision::F64 => {
            let (x64, g64, b64) = (to64(x.data()), to64(&gamma), to64(&beta));
            let xs = [n, c, h, w];
            let mut lx = |vals: &[f64]| dot64(&proj, None, Some(&bn_ref64(vals, xs, &g64, &b64, eps)));
            let fx = fd_grad_f64(&mut x64.clone(), &mut lx);
            let mut lg = |vals: &[f64]| dot64(&proj, None, Some(&bn_ref64(&x64, xs, vals, &b64, eps)));
            let fg = fd_grad_f64(&mut g64.clone(), &mut lg);
            let mut lb = |vals: &[f64]| dot64(&proj, None, Some(&bn_ref64(&x64, xs, &g64, vals, eps)));
            let fb = fd_grad_f64(&mut b64.clone(), &mut lb);
            (fx, fg, fb)
        }
    };
    check_result(
        "batchnorm2d",
        vec![
            ArrayCheck { name: "dx", rel_err: max_relative_error(dx.data(), &ex), count: ex.len() },
            ArrayCheck { name: "dgamma", rel_err: max_relative_error(&dgamma, &eg), count: eg.len() },
            ArrayCheck { name: "dbeta", rel_err: max_relative_error(&dbeta, &eb), count: eb.len() },
        ],
        precision,
    )
}

pub fn check_cross_entropy(seed: u64, precision: CheckPrecision) -> Result<GradCheckReport> {
    let mut rng = rng_from_seed(derive_seed(seed, "cross_entropy"));
    let n = rng.random_range(1..4usize);
    let c = rng.random_range(2..6usize);
    let logits = sample_away_from_zero(&mut rng, &[n, c], 0.01);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let (_, grad) = cross_entropy_loss_grad(&logits, &labels)?;

    let ex = match precision {
        CheckPrecision::F32 => {
            let mut lx = |vals: &[f32]| {
                let t = Tensor::new(vec![n, c], vals.to_vec()).unwrap();
                cross_entropy_loss(&t, &labels).unwrap()
            };
            fd_grad_f32(&mut logits.data().to_vec(), &mut lx)
        }
        CheckPrecision::F64 => {
            let x64 = to64(logits.data());
            let mut lx = |vals: &[f64]| ce_ref64(vals, n, c, &labels);
            fd_grad_f64(&mut x64.clone(), &mut lx)
        }
    };
    check_result(
        "cross_entropy",
        vec![ArrayCheck { name: "dlogits", rel_err: max_relative_error(grad.data(), &ex), count: ex.len() }],
        precision,
    )
}

/// Runs every layer kind at both precisions over `instances` seeded shapes.
pub fn run_full_suite(instances: usize) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for precision in [CheckPrecision::F32, CheckPrecision::F64] {
        for seed in 0..instances as u64 {
            reports.push(check_conv2d(seed, precision)?);
            reports.push(check_linear(seed, precision)?);
            reports.push(check_relu(seed, precision)?);
            reports.push(check_maxpool2d(seed, precision)?);
            reports.push(check_global_avg_pool(seed, precision)?);
            reports.push(check_batchnorm2d(seed, precision)?);
            reports.push(check_cross_entropy(seed, precision)?);
        }
    }
    Ok(reports)
}
