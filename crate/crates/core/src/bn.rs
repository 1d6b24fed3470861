//! BatchNorm statistics and normalization modes.
//!
//! A BN layer can normalize with three kinds of statistics: the checkpoint's
//! frozen running stats (source), stats computed from the current batch, or a
//! per-channel mix of the two selected by a mask. Every mode funnels through
//! [`bn_apply`], so mode equivalences (all-ones mask == batch mode, all-zeros
//! mask == source mode) hold bit-exactly.

use crate::error::{Error, Result};
use crate::layers::channel_count;
use crate::tensor::Tensor;

/// Per-channel normalization statistics: mean and standard deviation.
///
/// Sigma is always derived as `sqrt(var + eps)` with `eps > 0`, so it is
/// strictly positive; constructors reject anything else.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    mu: Vec<f32>,
    sigma: Vec<f32>,
}

impl ChannelStats {
    pub fn new(mu: Vec<f32>, sigma: Vec<f32>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Shape(format!(
                "stats length mismatch: {} means vs {} sigmas",
                mu.len(),
                sigma.len()
            )));
        }
        if let Some(bad) = sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive and finite, channel {bad} is {}",
                sigma[bad]
            )));
        }
        Ok(ChannelStats { mu, sigma })
    }

    /// Stats from running mean/variance, deriving sigma exactly as
    /// [`compute_batch_stats`] does so the two are comparable.
    pub fn from_running(mean: &[f32], var: &[f32], eps: f64) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape(format!(
                "running stats length mismatch: {} means vs {} variances",
                mean.len(),
                var.len()
            )));
        }
        if let Some(bad) = var.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "running variance must be non-negative and finite, channel {bad} is {}",
                var[bad]
            )));
        }
        let sigma = var.iter().map(|&v| ((f64::from(v) + eps).sqrt()) as f32).collect();
        ChannelStats::new(mean.to_vec(), sigma)
    }

    pub fn mu(&self) -> &[f32] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f32] {
        &self.sigma
    }

    pub fn channel_count(&self) -> usize {
        self.mu.len()
    }
}

/// Per-channel adaptation mask: `true` adapts the channel to target stats,
/// `false` keeps the source stats.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    bits: Vec<bool>,
}

impl ChannelMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        ChannelMask { bits }
    }

    /// Mask adapting every channel (all ones).
    pub fn adapt_all(channels: usize) -> Self {
        ChannelMask { bits: vec![true; channels] }
    }

    /// Mask keeping every channel at source stats (all zeros).
    pub fn adapt_none(channels: usize) -> Self {
        ChannelMask { bits: vec![false; channels] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of channels kept at source stats (mask bit 0).
    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }
}

/// Normalization mode for a forward pass.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Checkpoint running statistics at every BN layer.
    Source,
    /// Statistics of the incoming batch at every BN layer.
    Batch,
    /// Explicit per-BN-layer target stats and masks, mixed against the
    /// checkpoint's source stats. One entry per BN layer, in network order.
    Hybrid(Vec<(ChannelStats, ChannelMask)>),
}

/// Mean and biased variance per channel, accumulated in 64-bit.
pub(crate) fn batch_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let channels = channel_count(x.shape())?;
    let n = x.shape()[0];
    let plane: usize = x.shape()[2..].iter().product();
    let m = n * plane;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "degenerate batch: need at least 2 values per channel, got {m}"
        )));
    }
    let xd = x.data();
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for f in 0..channels {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let base = (ni * channels + f) * plane;
            for &v in &xd[base..base + plane] {
                sum += f64::from(v);
            }
        }
        let mu = sum / m as f64;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * channels + f) * plane;
            for &v in &xd[base..base + plane] {
                let d = f64::from(v) - mu;
                sq += d * d;
            }
        }
        mean[f] = mu;
        var[f] = sq / m as f64;
    }
    Ok((mean, var, m))
}

/// Per-channel batch statistics over the (N, H, W) axes.
///
/// Variance is biased (divide by N*H*W) and sigma includes eps under the
/// square root, matching the derivation of source sigma from running
/// variance.
pub fn compute_batch_stats(x: &Tensor, eps: f64) -> Result<ChannelStats> {
    let (mean, var, _) = batch_moments(x)?;
    let mu = mean.iter().map(|&v| v as f32).collect();
    let sigma = var.iter().map(|&v| (v + eps).sqrt() as f32).collect();
    ChannelStats::new(mu, sigma)
}

/// Normalizes each channel with the given stats and affine parameters:
/// `out = gamma * (x - mu) / sigma + beta`.
pub fn bn_apply(x: &Tensor, stats: &ChannelStats, gamma: &[f32], beta: &[f32]) -> Result<Tensor> {
    let channels = channel_count(x.shape())?;
    if stats.channel_count() != channels || gamma.len() != channels || beta.len() != channels {
        return Err(Error::Shape(format!(
            "bn_apply channel mismatch: input {channels}, stats {}, gamma {}, beta {}",
            stats.channel_count(),
            gamma.len(),
            beta.len()
        )));
    }
    let n = x.shape()[0];
    let plane: usize = x.shape()[2..].iter().product();
    // Per-channel affine fold: out = x*scale + shift.
    let scale: Vec<f32> = (0..channels).map(|f| gamma[f] / stats.sigma[f]).collect();
    let shift: Vec<f32> = (0..channels).map(|f| beta[f] - stats.mu[f] * scale[f]).collect();
    let mut out = x.clone();
    let od = out.data_mut();
    for ni in 0..n {
        for f in 0..channels {
            let base = (ni * channels + f) * plane;
            let (a, b) = (scale[f], shift[f]);
            for v in &mut od[base..base + plane] {
                *v = *v * a + b;
            }
        }
    }
    Ok(out)
}

/// Elementwise select between source and target stats: mask bit 1 takes the
/// target value, bit 0 keeps the source value, for both mu and sigma.
pub fn hybrid_stats(mask: &ChannelMask, source: &ChannelStats, target: &ChannelStats) -> Result<ChannelStats> {
    let f = mask.len();
    if source.channel_count() != f || target.channel_count() != f {
        return Err(Error::Shape(format!(
            "hybrid_stats length mismatch: mask {f}, source {}, target {}",
            source.channel_count(),
            target.channel_count()
        )));
    }
    let pick = |a: &[f32], b: &[f32]| -> Vec<f32> {
        mask.bits.iter().enumerate().map(|(i, &adapt)| if adapt { b[i] } else { a[i] }).collect()
    };
    ChannelStats::new(pick(source.mu(), target.mu()), pick(source.sigma(), target.sigma()))
}

/// Cached intermediates from a training-mode BN forward.
pub(crate) struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub m: usize,
}

/// Training-mode BN: normalizes with the batch's own statistics and returns
/// the cache needed for the backward pass and the running-stat update.
pub(crate) fn bn_train_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    let channels = channel_count(x.shape())?;
    let (mean, var, m) = batch_moments(x)?;
    let n = x.shape()[0];
    let plane: usize = x.shape()[2..].iter().product();
    let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps).sqrt()) as f32).collect();
    let mu32: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
    let mut xhat = x.clone();
    let xh = xhat.data_mut();
    for ni in 0..n {
        for f in 0..channels {
            let base = (ni * channels + f) * plane;
            let (mu, is) = (mu32[f], inv_std[f]);
            for v in &mut xh[base..base + plane] {
                *v = (*v - mu) * is;
            }
        }
    }
    let mut out = xhat.clone();
    let od = out.data_mut();
    for ni in 0..n {
        for f in 0..channels {
            let base = (ni * channels + f) * plane;
            let (g, b) = (gamma[f], beta[f]);
            for v in &mut od[base..base + plane] {
                *v = *v * g + b;
            }
        }
    }
    Ok((out, BnCache { xhat, inv_std, batch_mean: mean, batch_var: var, m }))
}

/// Gradients through training-mode BN (stats are functions of the input).
pub(crate) fn bn_train_backward(
    cache: &BnCache,
    gamma: &[f32],
    dy: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let channels = channel_count(dy.shape())?;
    let n = dy.shape()[0];
    let plane: usize = dy.shape()[2..].iter().product();
    let m = cache.m as f64;
    let xh = cache.xhat.data();
    let dyd = dy.data();

    let mut sum_dy = vec![0.0f64; channels];
    let mut sum_dy_xhat = vec![0.0f64; channels];
    for ni in 0..n {
        for f in 0..channels {
            let base = (ni * channels + f) * plane;
            let mut s = 0.0f64;
            let mut sx = 0.0f64;
            for j in base..base + plane {
                s += f64::from(dyd[j]);
                sx += f64::from(dyd[j]) * f64::from(xh[j]);
            }
            sum_dy[f] += s;
            sum_dy_xhat[f] += sx;
        }
    }

    let mut dx = Tensor::zeros(dy.shape());
    let dxd = dx.data_mut();
    for ni in 0..n {
        for f in 0..channels {
            let base = (ni * channels + f) * plane;
            let coef = f64::from(gamma[f]) * f64::from(cache.inv_std[f]) / m;
            let (sd, sdx) = (sum_dy[f], sum_dy_xhat[f]);
            for j in base..base + plane {
                let term = m * f64::from(dyd[j]) - sd - f64::from(xh[j]) * sdx;
                dxd[j] = (coef * term) as f32;
            }
        }
    }
    let dgamma: Vec<f32> = sum_dy_xhat.iter().map(|&v| v as f32).collect();
    let dbeta: Vec<f32> = sum_dy.iter().map(|&v| v as f32).collect();
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-5;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn constant_input_has_sqrt_eps_sigma() {
        let x = Tensor::filled(&[2, 3, 2, 2], 4.25);
        let s = compute_batch_stats(&x, EPS).unwrap();
        for f in 0..3 {
            assert_eq!(s.mu()[f], 4.25);
            assert!((f64::from(s.sigma()[f]) - EPS.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_computed_biased_variance() {
        // One channel, values {1, 3}: mean 2, biased variance 1.
        let x = t(&[1, 1, 1, 2], vec![1.0, 3.0]);
        let s = compute_batch_stats(&x, EPS).unwrap();
        assert_eq!(s.mu()[0], 2.0);
        assert!((f64::from(s.sigma()[0]) - (1.0 + EPS).sqrt()).abs() < 1e-7);
    }

    #[test]
    fn stats_invariant_under_batch_permutation() {
        let x = t(&[3, 1, 1, 1], vec![0.5, -1.0, 2.0]);
        let p = t(&[3, 1, 1, 1], vec![2.0, 0.5, -1.0]);
        let a = compute_batch_stats(&x, EPS).unwrap();
        let b = compute_batch_stats(&p, EPS).unwrap();
        assert_eq!(a.mu(), b.mu());
        assert_eq!(a.sigma(), b.sigma());
    }

    #[test]
    fn degenerate_batch_rejected() {
        let x = t(&[1, 2, 1, 1], vec![1.0, 2.0]);
        assert!(matches!(compute_batch_stats(&x, EPS), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn bn_apply_identity_and_hand_case() {
        let x = t(&[1, 1, 1, 2], vec![-3.0, 7.0]);
        let id = ChannelStats::new(vec![0.0], vec![1.0]).unwrap();
        let y = bn_apply(&x, &id, &[1.0], &[0.0]).unwrap();
        assert_eq!(y.data(), x.data());

        // gamma*(x - mu)/sigma + beta = 3*(2-1)/2 + 0.5 = 2.0
        let x2 = t(&[1, 1, 1, 2], vec![2.0, 2.0]);
        let st = ChannelStats::new(vec![1.0], vec![2.0]).unwrap();
        let y2 = bn_apply(&x2, &st, &[3.0], &[0.5]).unwrap();
        assert_eq!(y2.data(), &[2.0, 2.0]);
    }

    #[test]
    fn bn_apply_normalizes_by_construction() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(11);
        let data: Vec<f32> = (0..4 * 3 * 5 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = t(&[4, 3, 5, 5], data);
        let stats = compute_batch_stats(&x, EPS).unwrap();
        let y = bn_apply(&x, &stats, &[1.0; 3], &[0.0; 3]).unwrap();
        let after = compute_batch_stats(&y, 0.0).unwrap();
        for f in 0..3 {
            assert!(after.mu()[f].abs() < 1e-4, "mean {}", after.mu()[f]);
            assert!((after.sigma()[f] - 1.0).abs() < 1e-3, "sigma {}", after.sigma()[f]);
        }
    }

    #[test]
    fn hybrid_stats_selects_per_channel() {
        let s = ChannelStats::new(vec![5.0, 5.0], vec![1.0, 1.0]).unwrap();
        let tgt = ChannelStats::new(vec![9.0, 9.0], vec![2.0, 2.0]).unwrap();
        let m = ChannelMask::from_bits(vec![true, false]);
        let h = hybrid_stats(&m, &s, &tgt).unwrap();
        assert_eq!(h.mu(), &[9.0, 5.0]);
        assert_eq!(h.sigma(), &[2.0, 1.0]);

        let all = hybrid_stats(&ChannelMask::adapt_all(2), &s, &tgt).unwrap();
        assert_eq!(all, tgt);
        let none = hybrid_stats(&ChannelMask::adapt_none(2), &s, &tgt).unwrap();
        assert_eq!(none, s);
    }

    #[test]
    fn hybrid_stats_idempotent() {
        let s = ChannelStats::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap();
        let tgt = ChannelStats::new(vec![4.0, 5.0, 6.0], vec![4.0, 5.0, 6.0]).unwrap();
        let m = ChannelMask::from_bits(vec![true, false, true]);
        let once = hybrid_stats(&m, &s, &tgt).unwrap();
        let twice = hybrid_stats(&m, &s, &once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn bn_apply_is_affine_in_input() {
        // bn_apply(a*x) + bn_apply-style shift: check linearity of the map
        // x -> bn_apply(x) - bn_apply(0) for fixed stats.
        let st = ChannelStats::new(vec![0.7], vec![1.3]).unwrap();
        let gamma = [2.0f32];
        let beta = [-0.25f32];
        let x = t(&[1, 1, 1, 3], vec![0.1, -0.4, 0.9]);
        let zero = t(&[1, 1, 1, 3], vec![0.0; 3]);
        let y = bn_apply(&x, &st, &gamma, &beta).unwrap();
        let y0 = bn_apply(&zero, &st, &gamma, &beta).unwrap();
        let two_x = t(&[1, 1, 1, 3], x.data().iter().map(|v| 2.0 * v).collect());
        let y2 = bn_apply(&two_x, &st, &gamma, &beta).unwrap();
        for j in 0..3 {
            let lin = y.data()[j] - y0.data()[j];
            let lin2 = y2.data()[j] - y0.data()[j];
            assert!((lin2 - 2.0 * lin).abs() < 1e-5);
        }
    }

    #[test]
    fn from_running_rejects_negative_variance() {
        assert!(ChannelStats::from_running(&[0.0], &[-0.1], EPS).is_err());
        assert!(ChannelStats::from_running(&[0.0], &[0.0], EPS).is_ok());
    }

    #[test]
    fn mask_counts() {
        let m = ChannelMask::from_bits(vec![true, false, false, true]);
        assert_eq!(m.kept_count(), 2);
        assert_eq!(ChannelMask::adapt_all(3).kept_count(), 0);
        assert_eq!(ChannelMask::adapt_none(3).kept_count(), 3);
    }
}
