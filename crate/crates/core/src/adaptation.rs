//! Test-time adaptation methods.
//!
//! The hybrid method walks the network once per batch: at each BN layer it
//! computes target statistics from the incoming (already partially adapted)
//! activations, aggregates the score table under a class prior, masks the
//! top-scoring fraction of channels back to source statistics, and
//! normalizes with the mix. The fraction ramps from 0 at the first BN layer
//! to 1 at the last, so early layers adapt freely while the class-coupled
//! deep layers stay frozen.
//!
//! Baselines (source, full TTN, layer-limited TTN) and the ablations
//! (random scores, fixed priors) share the same forward machinery, so the
//! mask-extreme equivalences hold bit for bit.

use rand::Rng;

use crate::bn::{BnMode, ChannelMask, ChannelStats};
use crate::error::{Error, Result};
use crate::model::{forward, run_forward, LayerNorm, ModelCheckpoint};
use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::scoring::{wasserstein2, ScoreTable};
use crate::tensor::{argmax_rows, softmax_rows, Tensor};

/// Class probability vector: non-negative, sums to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    p: Vec<f64>,
}

impl ClassPrior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidArgument("prior over zero classes".into()));
        }
        if let Some(c) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prior[{c}] = {} is not a finite non-negative probability",
                p[c]
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("prior sums to {sum}, expected 1")));
        }
        Ok(ClassPrior { p })
    }

    /// Normalizes arbitrary non-negative weights into a prior.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("prior weights must be finite and non-negative".into()));
        }
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidArgument("prior weights sum to zero".into()));
        }
        ClassPrior::new(w.iter().map(|v| v / sum).collect())
    }

    pub fn uniform(class_count: usize) -> Result<Self> {
        ClassPrior::new(vec![1.0 / class_count as f64; class_count.max(1)])
    }

    pub fn one_hot(class_count: usize, class: usize) -> Result<Self> {
        if class >= class_count {
            return Err(Error::InvalidArgument(format!(
                "one-hot class {class} out of range for {class_count} classes"
            )));
        }
        let mut p = vec![0.0; class_count];
        p[class] = 1.0;
        ClassPrior::new(p)
    }

    /// Empirical histogram of labels (or hard predictions).
    pub fn from_labels(labels: &[usize], class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty label set for prior".into()));
        }
        let mut counts = vec![0.0f64; class_count];
        for &l in labels {
            if l >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for {class_count} classes"
                )));
            }
            counts[l] += 1.0;
        }
        ClassPrior::from_weights(&counts)
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn class_count(&self) -> usize {
        self.p.len()
    }
}

/// How the depth fraction R is derived from the BN layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthRule {
    /// `(k-1)/(K-1)`: 0 at the first BN layer, 1 at the last.
    #[default]
    Linear,
    /// `k/K`: nonzero already at the first layer, as the adaptation loop is
    /// sometimes written.
    Algorithmic,
}

/// Fraction of channels excluded from adaptation at 1-based BN layer `k` of
/// `K`, under the default linear ramp. A single-layer network gets 1.0.
pub fn depth_fraction(k: usize, bn_layer_count: usize) -> f64 {
    depth_fraction_with(DepthRule::Linear, k, bn_layer_count)
}

pub fn depth_fraction_with(rule: DepthRule, k: usize, bn_layer_count: usize) -> f64 {
    debug_assert!(k >= 1 && k <= bn_layer_count);
    match rule {
        DepthRule::Linear => {
            if bn_layer_count <= 1 {
                1.0
            } else {
                (k - 1) as f64 / (bn_layer_count - 1) as f64
            }
        }
        DepthRule::Algorithmic => k as f64 / bn_layer_count as f64,
    }
}

/// Prior-weighted per-channel scores at one BN layer:
/// `scores[f] = sum_c p_c * table[c][k][f]`.
pub fn weighted_channel_scores(table: &ScoreTable, prior: &ClassPrior, k: usize) -> Result<Vec<f64>> {
    if prior.class_count() != table.class_count() {
        return Err(Error::InvalidArgument(format!(
            "prior covers {} classes, table covers {}",
            prior.class_count(),
            table.class_count()
        )));
    }
    if k >= table.bn_layer_count() {
        return Err(Error::InvalidArgument(format!(
            "layer index {k} out of range for {} BN layers",
            table.bn_layer_count()
        )));
    }
    let f_k = table.channels()[k];
    let mut scores = vec![0.0f64; f_k];
    for (c, &p_c) in prior.probs().iter().enumerate() {
        let row = table.row(c, k);
        for (s, &v) in scores.iter_mut().zip(row) {
            *s += p_c * f64::from(v);
        }
    }
    Ok(scores)
}

/// Masks the `floor(fraction * F)` highest-scoring channels to bit 0 (kept
/// at source statistics); everything else adapts. Ties break toward the
/// lower channel index being "sensitive".
pub fn select_mask(scores: &[f64], fraction: f64) -> ChannelMask {
    debug_assert!((0.0..=1.0).contains(&fraction));
    let f = scores.len();
    let excluded = ((fraction * f as f64).floor() as usize).min(f);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut bits = vec![true; f];
    for &i in &order[..excluded] {
        bits[i] = false;
    }
    ChannelMask::from_bits(bits)
}

/// The realized configuration of one hybrid forward pass.
#[derive(Debug, Clone)]
pub struct AdaptationPlan {
    /// Per-BN-layer adaptation masks (bit 0 = kept at source).
    pub masks: Vec<ChannelMask>,
    /// Statistics that actually normalized each BN layer.
    pub stats: Vec<ChannelStats>,
    /// Prior the masks were derived from.
    pub prior: ClassPrior,
    /// Per-layer excluded fraction, nondecreasing under the linear rule.
    pub fractions: Vec<f64>,
}

/// Knobs for the hybrid pass that the ablations and analyses toggle.
#[derive(Debug, Clone, Default)]
pub struct HybridConfig {
    pub depth_rule: DepthRule,
    /// Forces every layer's excluded fraction; 0.0 reproduces TTN, 1.0
    /// reproduces Source.
    pub fraction_override: Option<f64>,
    /// Build the pass-2 prior from soft probabilities instead of hard
    /// prediction counts.
    pub soft_prior: bool,
}

fn batch_size_at_least(batch: &Tensor, need: usize) -> Result<()> {
    let n = batch.shape()[0];
    if n < need {
        return Err(Error::InvalidArgument(format!(
            "batch of {n} samples, adaptation needs at least {need}"
        )));
    }
    Ok(())
}

fn per_layer_fractions(config: &HybridConfig, bn_layer_count: usize) -> Vec<f64> {
    (1..=bn_layer_count)
        .map(|k| match config.fraction_override {
            Some(r) => r,
            None => depth_fraction_with(config.depth_rule, k, bn_layer_count),
        })
        .collect()
}

/// Runs the network with per-layer hybrid statistics under precomputed
/// masks, returning logits and the realized plan.
fn hybrid_pass(
    model: &ModelCheckpoint,
    batch: &Tensor,
    masks: Vec<ChannelMask>,
    prior: ClassPrior,
    fractions: Vec<f64>,
) -> Result<(Tensor, AdaptationPlan)> {
    let norms: Vec<LayerNorm> = masks.iter().map(|mask| LayerNorm::HybridOnline { mask }).collect();
    let trace = run_forward(model, batch, &norms)?;
    let plan = AdaptationPlan { masks, stats: trace.used_stats, prior, fractions };
    Ok((trace.logits, plan))
}

/// Logits-level entry of the hybrid pass, for exactness checks and analyses
/// that need more than the argmax.
pub fn hybrid_logits_with(
    model: &ModelCheckpoint,
    batch: &Tensor,
    table: &ScoreTable,
    prior: &ClassPrior,
    config: &HybridConfig,
) -> Result<(Tensor, AdaptationPlan)> {
    batch_size_at_least(batch, 2)?;
    table.verify_checkpoint(model)?;
    let k_count = model.bn_layer_count();
    if table.bn_layer_count() != k_count {
        return Err(Error::InvalidArgument(format!(
            "score table covers {} BN layers, model has {k_count}",
            table.bn_layer_count()
        )));
    }
    let fractions = per_layer_fractions(config, k_count);
    let mut masks = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let scores = weighted_channel_scores(table, prior, k)?;
        masks.push(select_mask(&scores, fractions[k]));
    }
    hybrid_pass(model, batch, masks, prior.clone(), fractions)
}

/// Single hybrid adaptation pass under an explicit prior.
pub fn hybrid_forward(
    model: &ModelCheckpoint,
    batch: &Tensor,
    table: &ScoreTable,
    prior: &ClassPrior,
) -> Result<(Vec<usize>, AdaptationPlan)> {
    hybrid_forward_with(model, batch, table, prior, &HybridConfig::default())
}

pub fn hybrid_forward_with(
    model: &ModelCheckpoint,
    batch: &Tensor,
    table: &ScoreTable,
    prior: &ClassPrior,
    config: &HybridConfig,
) -> Result<(Vec<usize>, AdaptationPlan)> {
    let (logits, plan) = hybrid_logits_with(model, batch, table, prior, config)?;
    Ok((argmax_rows(&logits)?, plan))
}

/// Two-pass hybrid adaptation: pass 1 under a uniform prior, then a second
/// full pass under the empirical prior of pass-1 predictions. Exactly two
/// passes, no convergence check. Returns the final predictions, the pass-1
/// predictions, and the re-estimated prior.
pub fn hybrid_ttn_predict(
    model: &ModelCheckpoint,
    batch: &Tensor,
    table: &ScoreTable,
) -> Result<(Vec<usize>, Vec<usize>, ClassPrior)> {
    hybrid_ttn_predict_with(model, batch, table, &HybridConfig::default())
}

pub fn hybrid_ttn_predict_with(
    model: &ModelCheckpoint,
    batch: &Tensor,
    table: &ScoreTable,
    config: &HybridConfig,
) -> Result<(Vec<usize>, Vec<usize>, ClassPrior)> {
    let class_count = table.class_count();
    let uniform = ClassPrior::uniform(class_count)?;
    let (logits1, _) = hybrid_logits_with(model, batch, table, &uniform, config)?;
    let first = argmax_rows(&logits1)?;
    let estimated = if config.soft_prior {
        let probs = softmax_rows(&logits1)?;
        let n = probs.shape()[0];
        let mut mean = vec![0.0f64; class_count];
        for i in 0..n {
            for c in 0..class_count {
                mean[c] += f64::from(probs.data()[i * class_count + c]);
            }
        }
        ClassPrior::from_weights(&mean)?
    } else {
        ClassPrior::from_labels(&first, class_count)?
    };
    let (final_preds, _) = hybrid_forward_with(model, batch, table, &estimated, config)?;
    Ok((final_preds, first, estimated))
}

/// Full test-time normalization: batch statistics at every BN layer.
pub fn ttn_predict(model: &ModelCheckpoint, batch: &Tensor) -> Result<Vec<usize>> {
    batch_size_at_least(batch, 2)?;
    let (logits, _) = forward(model, batch, &BnMode::Batch)?;
    argmax_rows(&logits)
}

/// Frozen source statistics everywhere; single samples allowed since no
/// batch coupling exists.
pub fn source_predict(model: &ModelCheckpoint, batch: &Tensor) -> Result<Vec<usize>> {
    batch_size_at_least(batch, 1)?;
    let (logits, _) = forward(model, batch, &BnMode::Source)?;
    argmax_rows(&logits)
}

/// Batch statistics at BN layers 1..=up_to, source statistics beyond.
/// `up_to = 0` is exactly Source; `up_to = K` is exactly TTN.
pub fn layer_limited_ttn(model: &ModelCheckpoint, batch: &Tensor, up_to: usize) -> Result<Vec<usize>> {
    argmax_rows(&layer_limited_logits(model, batch, up_to)?)
}

/// Logits-level entry of the depth-limited pass.
pub fn layer_limited_logits(model: &ModelCheckpoint, batch: &Tensor, up_to: usize) -> Result<Tensor> {
    let k_count = model.bn_layer_count();
    if up_to > k_count {
        return Err(Error::InvalidArgument(format!(
            "layer limit {up_to} out of range for {k_count} BN layers"
        )));
    }
    batch_size_at_least(batch, if up_to > 0 { 2 } else { 1 })?;
    let norms: Vec<LayerNorm> =
        (0..k_count).map(|k| if k < up_to { LayerNorm::Batch } else { LayerNorm::Source }).collect();
    let trace = run_forward(model, batch, &norms)?;
    Ok(trace.logits)
}

/// Hybrid pipeline with the table scores replaced by seeded uniform random
/// values, isolating the effect of the depth ramp. The prior never enters
/// (random scores do not depend on it), so a second pseudolabel pass would
/// reproduce the first and is skipped.
pub fn hybrid_random_scores(
    model: &ModelCheckpoint,
    batch: &Tensor,
    seed: u64,
) -> Result<(Vec<usize>, AdaptationPlan)> {
    hybrid_random_scores_with(model, batch, seed, &HybridConfig::default())
}

pub fn hybrid_random_scores_with(
    model: &ModelCheckpoint,
    batch: &Tensor,
    seed: u64,
    config: &HybridConfig,
) -> Result<(Vec<usize>, AdaptationPlan)> {
    batch_size_at_least(batch, 2)?;
    let k_count = model.bn_layer_count();
    let fractions = per_layer_fractions(config, k_count);
    let channels = model.bn_channel_counts();
    let mut masks = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut rng = rng_from_seed(derive_seed_indexed(seed, "random_scores", k));
        let scores: Vec<f64> = (0..channels[k]).map(|_| rng.random::<f64>()).collect();
        masks.push(select_mask(&scores, fractions[k]));
    }
    let prior = ClassPrior::uniform(model.meta().class_count)?;
    let (logits, plan) = hybrid_pass(model, batch, masks, prior, fractions)?;
    Ok((argmax_rows(&logits)?, plan))
}

/// Single-pass hybrid under a caller-supplied prior (uniform and oracle
/// ablations).
pub fn hybrid_with_prior(
    model: &ModelCheckpoint,
    batch: &Tensor,
    table: &ScoreTable,
    prior: &ClassPrior,
) -> Result<Vec<usize>> {
    Ok(hybrid_forward(model, batch, table, prior)?.0)
}

/// Per-BN-layer squared Wasserstein distances between source statistics and
/// this batch's statistics, propagating with source stats throughout.
pub fn channel_sensitivity_ranking(model: &ModelCheckpoint, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
    batch_size_at_least(batch, 2)?;
    let k_count = model.bn_layer_count();
    let norms = vec![LayerNorm::Source; k_count];
    let trace = run_forward(model, batch, &norms)?;
    let mut ranking = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let source = model.source_stats(k)?;
        let target = crate::bn::compute_batch_stats(&trace.pre_bn[k], model.meta().epsilon)?;
        let dists: Vec<f64> = (0..source.channel_count())
            .map(|f| {
                wasserstein2(
                    f64::from(source.mu()[f]),
                    f64::from(source.sigma()[f]),
                    f64::from(target.mu()[f]),
                    f64::from(target.sigma()[f]),
                )
            })
            .collect();
        ranking.push(dists);
    }
    Ok(ranking)
}

/// Per-layer overlap between the top-`fraction` channel sets of two
/// rankings: `|top(a) ∩ top(b)| / ceil(fraction * F)`.
pub fn top_fraction_overlap(
    rank_a: &[Vec<f64>],
    rank_b: &[Vec<f64>],
    fraction: f64,
) -> Result<Vec<f64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("overlap fraction {fraction} outside (0, 1]")));
    }
    if rank_a.len() != rank_b.len() {
        return Err(Error::Shape(format!(
            "rankings cover {} vs {} layers",
            rank_a.len(),
            rank_b.len()
        )));
    }
    let top_set = |scores: &[f64], m: usize| -> Vec<usize> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        order.truncate(m);
        order
    };
    let mut overlaps = Vec::with_capacity(rank_a.len());
    for (k, (a, b)) in rank_a.iter().zip(rank_b).enumerate() {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "layer {k}: rankings cover {} vs {} channels",
                a.len(),
                b.len()
            )));
        }
        let m = ((fraction * a.len() as f64).ceil() as usize).clamp(1, a.len());
        let ta = top_set(a, m);
        let tb = top_set(b, m);
        let hits = ta.iter().filter(|i| tb.contains(i)).count();
        overlaps.push(hits as f64 / m as f64);
    }
    Ok(overlaps)
}

/// One evaluable method of the comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodId {
    Source,
    Ttn,
    HybridTtn,
    HybridUniform,
    HybridOracle,
    HybridRandomScores,
    LayerLimitedTtn(usize),
}

impl MethodId {
    /// Methods of the standard comparison, in reporting order.
    pub fn standard_set() -> Vec<MethodId> {
        vec![
            MethodId::Source,
            MethodId::Ttn,
            MethodId::HybridTtn,
            MethodId::HybridUniform,
            MethodId::HybridOracle,
            MethodId::HybridRandomScores,
        ]
    }

    pub fn parse(s: &str) -> Result<MethodId> {
        match s {
            "source" => Ok(MethodId::Source),
            "ttn" => Ok(MethodId::Ttn),
            "hybrid_ttn" => Ok(MethodId::HybridTtn),
            "hybrid_uniform" => Ok(MethodId::HybridUniform),
            "hybrid_oracle" => Ok(MethodId::HybridOracle),
            "hybrid_random_scores" => Ok(MethodId::HybridRandomScores),
            other => match other.strip_prefix("layer_limited_ttn_") {
                Some(num) => num
                    .parse::<usize>()
                    .map(MethodId::LayerLimitedTtn)
                    .map_err(|_| Error::InvalidArgument(format!("bad layer limit in method '{other}'"))),
                None => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
            },
        }
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MethodId::Source => write!(f, "source"),
            MethodId::Ttn => write!(f, "ttn"),
            MethodId::HybridTtn => write!(f, "hybrid_ttn"),
            MethodId::HybridUniform => write!(f, "hybrid_uniform"),
            MethodId::HybridOracle => write!(f, "hybrid_oracle"),
            MethodId::HybridRandomScores => write!(f, "hybrid_random_scores"),
            MethodId::LayerLimitedTtn(k) => write!(f, "layer_limited_ttn_{k}"),
        }
    }
}

/// Runs one method on one batch. The oracle ablation needs the true batch
/// labels; the random-scores ablation needs a seed; everything else ignores
/// both.
pub fn predict_with_method(
    model: &ModelCheckpoint,
    batch: &Tensor,
    table: Option<&ScoreTable>,
    method: MethodId,
    true_labels: Option<&[usize]>,
    seed: u64,
) -> Result<Vec<usize>> {
    let need_table = || {
        table.ok_or_else(|| {
            Error::InvalidArgument(format!("method {method} needs a score table"))
        })
    };
    match method {
        MethodId::Source => source_predict(model, batch),
        MethodId::Ttn => ttn_predict(model, batch),
        MethodId::HybridTtn => Ok(hybrid_ttn_predict(model, batch, need_table()?)?.0),
        MethodId::HybridUniform => {
            let t = need_table()?;
            let uniform = ClassPrior::uniform(t.class_count())?;
            hybrid_with_prior(model, batch, t, &uniform)
        }
        MethodId::HybridOracle => {
            let t = need_table()?;
            let labels = true_labels.ok_or_else(|| {
                Error::InvalidArgument("oracle prior needs the true batch labels".into())
            })?;
            let prior = ClassPrior::from_labels(labels, t.class_count())?;
            hybrid_with_prior(model, batch, t, &prior)
        }
        MethodId::HybridRandomScores => Ok(hybrid_random_scores(model, batch, seed)?.0),
        MethodId::LayerLimitedTtn(up_to) => layer_limited_ttn(model, batch, up_to),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::{build_model, ArchConfig};
    use crate::scoring::compute_score_table;
    use crate::train::calibrate_bn_stats;

    fn fixture() -> (ModelCheckpoint, crate::data::LabeledDataset, ScoreTable, Tensor) {
        let data = synth_dataset(3, 10, 8, 21).unwrap();
        let arch = ArchConfig { conv_channels: vec![4, 4, 4], kernel: 3, downsample_every: 2 };
        let mut model = build_model(&arch, 3, 8, 3, 7).unwrap();
        calibrate_bn_stats(&mut model, &data.images).unwrap();
        let table = compute_score_table(&model, &data, 16, 0).unwrap();
        let batch = data.select(&[0, 1, 10, 11, 20, 21]).unwrap().0;
        (model, data, table, batch)
    }

    #[test]
    fn prior_constructors_and_validation() {
        assert!(ClassPrior::new(vec![0.5, 0.6]).is_err());
        assert!(ClassPrior::new(vec![0.5, -0.5, 1.0]).is_err());
        let u = ClassPrior::uniform(4).unwrap();
        assert_eq!(u.probs(), &[0.25; 4]);
        let h = ClassPrior::one_hot(3, 2).unwrap();
        assert_eq!(h.probs(), &[0.0, 0.0, 1.0]);
        let l = ClassPrior::from_labels(&[0, 0, 1, 0], 2).unwrap();
        assert_eq!(l.probs(), &[0.75, 0.25]);
        assert!(ClassPrior::from_labels(&[5], 2).is_err());
    }

    #[test]
    fn depth_fraction_endpoints_and_midpoint() {
        assert_eq!(depth_fraction(1, 6), 0.0);
        assert_eq!(depth_fraction(6, 6), 1.0);
        assert_eq!(depth_fraction(4, 7), 0.5);
        assert_eq!(depth_fraction(1, 1), 1.0);
        assert_eq!(depth_fraction_with(DepthRule::Algorithmic, 1, 4), 0.25);
        assert_eq!(depth_fraction_with(DepthRule::Algorithmic, 4, 4), 1.0);
    }

    #[test]
    fn weighted_scores_hand_cases() {
        let scores = vec![
            vec![vec![1.0f32, 0.0]],
            vec![vec![0.0f32, 1.0]],
        ];
        let table = ScoreTable::new(scores, vec![2, 2], "d".into()).unwrap();
        let p = ClassPrior::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(weighted_channel_scores(&table, &p, 0).unwrap(), vec![0.25, 0.75]);

        let hot = ClassPrior::one_hot(2, 0).unwrap();
        assert_eq!(weighted_channel_scores(&table, &hot, 0).unwrap(), vec![1.0, 0.0]);

        let uni = ClassPrior::uniform(2).unwrap();
        assert_eq!(weighted_channel_scores(&table, &uni, 0).unwrap(), vec![0.5, 0.5]);

        let bad = ClassPrior::uniform(3).unwrap();
        assert!(weighted_channel_scores(&table, &bad, 0).is_err());
    }

    #[test]
    fn select_mask_extremes_and_hand_case() {
        let scores = [3.0, 1.0, 4.0, 1.0];
        assert_eq!(select_mask(&scores, 0.0).bits(), &[true; 4]);
        assert_eq!(select_mask(&scores, 1.0).bits(), &[false; 4]);
        // Top half: channels 2 (4.0) and 0 (3.0) are excluded.
        assert_eq!(select_mask(&scores, 0.5).bits(), &[false, true, false, true]);
        // Tie at 1.0 between channels 1 and 3: lower index is "sensitive".
        assert_eq!(select_mask(&scores, 0.75).bits(), &[false, false, false, true]);
    }

    #[test]
    fn mask_popcount_follows_fraction() {
        let mut rng = crate::rng::rng_from_seed(3);
        let scores: Vec<f64> = (0..17).map(|_| rng.random::<f64>()).collect();
        for i in 0..=10 {
            let r = i as f64 / 10.0;
            let m = select_mask(&scores, r);
            assert_eq!(m.kept_count(), (r * 17.0).floor() as usize);
        }
    }

    #[test]
    fn prior_scale_invariance_of_masks() {
        let (_, _, table, _) = fixture();
        let w = [3.0, 1.0, 2.0];
        let scaled: Vec<f64> = w.iter().map(|v| v * 7.5).collect();
        let a = ClassPrior::from_weights(&w).unwrap();
        let b = ClassPrior::from_weights(&scaled).unwrap();
        for k in 0..table.bn_layer_count() {
            let sa = weighted_channel_scores(&table, &a, k).unwrap();
            let sb = weighted_channel_scores(&table, &b, k).unwrap();
            for r in [0.25, 0.5, 0.75] {
                assert_eq!(select_mask(&sa, r), select_mask(&sb, r));
            }
        }
    }

    #[test]
    fn equivalence_lattice_is_bit_exact() {
        let (model, _, table, batch) = fixture();
        let source = source_predict(&model, &batch).unwrap();
        let ttn = ttn_predict(&model, &batch).unwrap();
        let k = model.bn_layer_count();
        let uniform = ClassPrior::uniform(table.class_count()).unwrap();

        let all_ones = HybridConfig { fraction_override: Some(0.0), ..Default::default() };
        let (as_ttn, _) = hybrid_forward_with(&model, &batch, &table, &uniform, &all_ones).unwrap();
        assert_eq!(as_ttn, ttn);

        let all_zeros = HybridConfig { fraction_override: Some(1.0), ..Default::default() };
        let (as_source, _) = hybrid_forward_with(&model, &batch, &table, &uniform, &all_zeros).unwrap();
        assert_eq!(as_source, source);

        assert_eq!(layer_limited_ttn(&model, &batch, 0).unwrap(), source);
        assert_eq!(layer_limited_ttn(&model, &batch, k).unwrap(), ttn);
        assert!(layer_limited_ttn(&model, &batch, k + 1).is_err());
    }

    #[test]
    fn lattice_equivalence_holds_on_logits_not_just_argmax() {
        // Stronger than prediction equality: the normalization statistics
        // chosen by the extreme configs must be the exact source/batch ones.
        let (model, _, table, batch) = fixture();
        let uniform = ClassPrior::uniform(table.class_count()).unwrap();
        let all_ones = HybridConfig { fraction_override: Some(0.0), ..Default::default() };
        let (_, plan) = hybrid_forward_with(&model, &batch, &table, &uniform, &all_ones).unwrap();
        let norms = vec![LayerNorm::Batch; model.bn_layer_count()];
        let trace = run_forward(&model, &batch, &norms).unwrap();
        for (k, stats) in plan.stats.iter().enumerate() {
            assert_eq!(stats, &trace.used_stats[k], "layer {k}");
        }
    }

    #[test]
    fn source_predictions_independent_of_batch_composition() {
        let (model, data, _, _) = fixture();
        let alone = data.select(&[5]).unwrap().0;
        let grouped = data.select(&[5, 6, 7, 8]).unwrap().0;
        let solo = source_predict(&model, &alone).unwrap();
        let batched = source_predict(&model, &grouped).unwrap();
        assert_eq!(solo[0], batched[0]);
    }

    #[test]
    fn two_pass_prior_concentrates_on_single_class_batch() {
        let (model, data, table, _) = fixture();
        let idx: Vec<usize> = (0..8).collect();
        let single = data.select(&idx).unwrap().0;
        let (_, _, prior) = hybrid_ttn_predict(&model, &single, &table).unwrap();
        let max = prior.probs().iter().cloned().fold(0.0f64, f64::max);
        assert!(max > 1.0 / 3.0, "pass-2 prior stayed uniform: {:?}", prior.probs());
    }

    #[test]
    fn uniform_first_pass_is_a_fixed_point() {
        // If pass-1 predictions are perfectly balanced, the re-estimated
        // prior is uniform and pass 2 must reproduce pass 1.
        let (model, _, table, batch) = fixture();
        let (final_preds, first, prior) = hybrid_ttn_predict(&model, &batch, &table).unwrap();
        let uniform = ClassPrior::uniform(3).unwrap();
        if prior == uniform {
            assert_eq!(final_preds, first);
        }
        // Regardless of balance, exactly two passes happen; the final
        // prediction must equal a fresh single pass under the returned prior.
        let (replay, _) = hybrid_forward(&model, &batch, &table, &prior).unwrap();
        assert_eq!(final_preds, replay);
    }

    #[test]
    fn random_scores_masks_keep_popcounts_and_vary_by_seed() {
        let (model, _, _, batch) = fixture();
        let (_, plan_a) = hybrid_random_scores(&model, &batch, 1).unwrap();
        let k = model.bn_layer_count();
        let channels = model.bn_channel_counts();
        for i in 0..k {
            let expect = (depth_fraction(i + 1, k) * channels[i] as f64).floor() as usize;
            assert_eq!(plan_a.masks[i].kept_count(), expect, "layer {i}");
        }
        // Some seed pair must disagree at a mid-depth layer; with 4 channels
        // and fraction 0.5 there are 6 possible masks.
        let mut differs = false;
        for seed in 2..12 {
            let (_, plan_b) = hybrid_random_scores(&model, &batch, seed).unwrap();
            if plan_b.masks[1] != plan_a.masks[1] {
                differs = true;
                break;
            }
        }
        assert!(differs);
    }

    #[test]
    fn sensitivity_ranking_matches_closed_form_and_order_invariance() {
        let (model, data, _, _) = fixture();
        let batch = data.select(&[0, 3, 17, 25]).unwrap().0;
        let rank = channel_sensitivity_ranking(&model, &batch).unwrap();
        assert_eq!(rank.len(), model.bn_layer_count());

        let perm = data.select(&[25, 3, 0, 17]).unwrap().0;
        let rank_p = channel_sensitivity_ranking(&model, &perm).unwrap();
        for (a, b) in rank.iter().zip(&rank_p) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }

        // First layer distances recomputed directly from input stats.
        let norms = vec![LayerNorm::Source; model.bn_layer_count()];
        let trace = run_forward(&model, &batch, &norms).unwrap();
        let src = model.source_stats(0).unwrap();
        let tgt = crate::bn::compute_batch_stats(&trace.pre_bn[0], model.meta().epsilon).unwrap();
        for f in 0..src.channel_count() {
            let expect = wasserstein2(
                f64::from(src.mu()[f]),
                f64::from(src.sigma()[f]),
                f64::from(tgt.mu()[f]),
                f64::from(tgt.sigma()[f]),
            );
            assert_eq!(rank[0][f], expect);
        }
    }

    #[test]
    fn ranking_vanishes_on_calibration_data() {
        let (model, data, _, _) = fixture();
        let rank = channel_sensitivity_ranking(&model, &data.images).unwrap();
        for (k, layer) in rank.iter().enumerate() {
            for &d in layer {
                assert!(d < 1e-4, "layer {k} distance {d}");
            }
        }
    }

    #[test]
    fn overlap_identity_disjoint_and_hand_case() {
        let a = vec![vec![9.0, 1.0, 8.0, 2.0, 7.0, 3.0, 6.0, 4.0, 5.0, 0.0]];
        assert_eq!(top_fraction_overlap(&a, &a, 0.3).unwrap(), vec![1.0]);

        let lo = vec![vec![1.0, 1.0, 0.0, 0.0]];
        let hi = vec![vec![0.0, 0.0, 1.0, 1.0]];
        assert_eq!(top_fraction_overlap(&lo, &hi, 0.5).unwrap(), vec![0.0]);

        // F=10, fraction 0.2: tops {3,7} vs {7,9} overlap 1 of 2.
        let mut x = vec![0.0; 10];
        x[3] = 5.0;
        x[7] = 4.0;
        let mut y = vec![0.0; 10];
        y[7] = 5.0;
        y[9] = 4.0;
        let overlap = top_fraction_overlap(&[x], &[y], 0.2).unwrap();
        assert_eq!(overlap, vec![0.5]);

        assert!(top_fraction_overlap(&a, &a, 0.0).is_err());
        assert!(top_fraction_overlap(&a, &[], 0.5).is_err());
    }

    #[test]
    fn method_ids_round_trip_through_strings() {
        let all = [
            MethodId::Source,
            MethodId::Ttn,
            MethodId::HybridTtn,
            MethodId::HybridUniform,
            MethodId::HybridOracle,
            MethodId::HybridRandomScores,
            MethodId::LayerLimitedTtn(4),
        ];
        for m in all {
            assert_eq!(MethodId::parse(&m.to_string()).unwrap(), m);
        }
        assert!(MethodId::parse("tent").is_err());
        assert!(MethodId::parse("layer_limited_ttn_x").is_err());
    }

    #[test]
    fn methods_are_deterministic_and_guarded() {
        let (model, data, table, batch) = fixture();
        let labels = vec![0, 0, 1, 1, 2, 2];
        for m in MethodId::standard_set() {
            let a = predict_with_method(&model, &batch, Some(&table), m, Some(&labels), 5).unwrap();
            let b = predict_with_method(&model, &batch, Some(&table), m, Some(&labels), 5).unwrap();
            assert_eq!(a, b, "{m}");
        }
        // Missing table or labels where required.
        assert!(predict_with_method(&model, &batch, None, MethodId::HybridTtn, None, 0).is_err());
        assert!(
            predict_with_method(&model, &batch, Some(&table), MethodId::HybridOracle, None, 0)
                .is_err()
        );
        // Wrong model for the table.
        let arch = ArchConfig { conv_channels: vec![4, 4, 4], kernel: 3, downsample_every: 2 };
        let other = build_model(&arch, 3, 8, 3, 1234).unwrap();
        assert!(hybrid_forward(&other, &batch, &table, &ClassPrior::uniform(3).unwrap()).is_err());
        // Batch of one rejected by adapting methods, allowed by source.
        let one = data.select(&[0]).unwrap().0;
        assert!(ttn_predict(&model, &one).is_err());
        assert!(hybrid_ttn_predict(&model, &one, &table).is_err());
        assert!(source_predict(&model, &one).is_ok());
    }
}
