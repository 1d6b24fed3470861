//! Per-class channel sensitivity scores.
//!
//! After training, each (class, BN layer, channel) triple gets a squared
//! 2-Wasserstein distance between the channel's frozen source statistics and
//! the batch statistics of that class's activations. The table is computed
//! once against a checkpoint, persisted next to it, and consumed by the
//! adaptation methods; a stored checkpoint digest ties the two together.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bn::compute_batch_stats;
use crate::container::{self, SCORES_MAGIC};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{run_forward, LayerNorm, ModelCheckpoint};
use crate::rng::{derive_seed_indexed, rng_from_seed};

/// Squared 2-Wasserstein distance between two 1-D Gaussians:
/// `(mu_s - mu_t)^2 + (sigma_s - sigma_t)^2`.
///
/// Symmetric, non-negative, zero exactly when both pairs coincide. Callers
/// must pass positive sigmas; the value is still well defined otherwise, but
/// it no longer describes Gaussians.
pub fn wasserstein2(mu_s: f64, sigma_s: f64, mu_t: f64, sigma_t: f64) -> f64 {
    let dm = mu_s - mu_t;
    let ds = sigma_s - sigma_t;
    dm * dm + ds * ds
}

/// Which statistics normalize BN layers while class activations are being
/// recorded. `Source` (the default) scores each class against the network as
/// deployed; `Batch` lets per-class stats propagate, compounding shifts
/// layer over layer, and exists for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatPropagation {
    Source,
    Batch,
}

pub const DEFAULT_PER_CLASS_CAP: usize = 256;

/// Sensitivity scores indexed `[class][bn_layer][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    scores: Vec<Vec<Vec<f32>>>,
    channels: Vec<usize>,
    per_class_counts: Vec<usize>,
    checkpoint_digest: String,
}

impl ScoreTable {
    pub fn new(
        scores: Vec<Vec<Vec<f32>>>,
        per_class_counts: Vec<usize>,
        checkpoint_digest: String,
    ) -> Result<Self> {
        if scores.len() != per_class_counts.len() {
            return Err(Error::Shape(format!(
                "{} score rows vs {} per-class counts",
                scores.len(),
                per_class_counts.len()
            )));
        }
        let channels: Vec<usize> = match scores.first() {
            Some(row) => row.iter().map(|l| l.len()).collect(),
            None => Vec::new(),
        };
        for (c, row) in scores.iter().enumerate() {
            if row.len() != channels.len() {
                return Err(Error::Shape(format!(
                    "class {c} covers {} BN layers, class 0 covers {}",
                    row.len(),
                    channels.len()
                )));
            }
            for (k, layer) in row.iter().enumerate() {
                if layer.len() != channels[k] {
                    return Err(Error::Shape(format!(
                        "class {c} layer {k} has {} channels, expected {}",
                        layer.len(),
                        channels[k]
                    )));
                }
                if let Some(f) = layer.iter().position(|s| !s.is_finite() || *s < 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "score[{c}][{k}][{f}] = {} is not a finite non-negative value",
                        layer[f]
                    )));
                }
            }
        }
        Ok(ScoreTable { scores, channels, per_class_counts, checkpoint_digest })
    }

    pub fn class_count(&self) -> usize {
        self.scores.len()
    }

    pub fn bn_layer_count(&self) -> usize {
        self.channels.len()
    }

    /// Channel count of each BN layer.
    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn per_class_counts(&self) -> &[usize] {
        &self.per_class_counts
    }

    pub fn checkpoint_digest(&self) -> &str {
        &self.checkpoint_digest
    }

    /// Scores of one (class, BN layer) pair.
    pub fn row(&self, class: usize, layer: usize) -> &[f32] {
        &self.scores[class][layer]
    }

    /// Fails unless the table was computed from exactly this checkpoint.
    pub fn verify_checkpoint(&self, model: &ModelCheckpoint) -> Result<()> {
        let found = model.digest()?;
        if found != self.checkpoint_digest {
            return Err(Error::DigestMismatch {
                expected: self.checkpoint_digest.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// Builds the score table from labeled source data, normalizing with source
/// statistics during propagation.
pub fn compute_score_table(
    model: &ModelCheckpoint,
    data: &LabeledDataset,
    per_class_cap: usize,
    seed: u64,
) -> Result<ScoreTable> {
    compute_score_table_with(model, data, per_class_cap, seed, StatPropagation::Source)
}

/// As [`compute_score_table`], with explicit propagation statistics.
///
/// Per class: take up to `per_class_cap` samples (seeded uniform subsample
/// when the class is larger), run them forward, and score each BN channel's
/// batch statistics against the frozen source statistics.
pub fn compute_score_table_with(
    model: &ModelCheckpoint,
    data: &LabeledDataset,
    per_class_cap: usize,
    seed: u64,
    propagation: StatPropagation,
) -> Result<ScoreTable> {
    if per_class_cap < 2 {
        return Err(Error::InvalidArgument(format!(
            "per_class_cap must be at least 2, got {per_class_cap}"
        )));
    }
    let k_count = model.bn_layer_count();
    let norm = match propagation {
        StatPropagation::Source => LayerNorm::Source,
        StatPropagation::Batch => LayerNorm::Batch,
    };
    let norms = vec![norm; k_count];

    let groups = data.class_indices();
    let mut scores = Vec::with_capacity(groups.len());
    let mut per_class_counts = Vec::with_capacity(groups.len());
    for (c, group) in groups.iter().enumerate() {
        if group.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, scoring needs at least 2",
                group.len()
            )));
        }
        let mut chosen = group.clone();
        if chosen.len() > per_class_cap {
            let mut rng = rng_from_seed(derive_seed_indexed(seed, "score_class", c));
            chosen.shuffle(&mut rng);
            chosen.truncate(per_class_cap);
            chosen.sort_unstable();
        }
        let (batch, _) = data.select(&chosen)?;
        let trace = run_forward(model, &batch, &norms)?;
        let mut class_row = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let source = model.source_stats(k)?;
            let target = compute_batch_stats(&trace.pre_bn[k], model.meta().epsilon)?;
            let layer: Vec<f32> = (0..source.channel_count())
                .map(|f| {
                    wasserstein2(
                        f64::from(source.mu()[f]),
                        f64::from(source.sigma()[f]),
                        f64::from(target.mu()[f]),
                        f64::from(target.sigma()[f]),
                    ) as f32
                })
                .collect();
            class_row.push(layer);
        }
        scores.push(class_row);
        per_class_counts.push(chosen.len());
    }
    ScoreTable::new(scores, per_class_counts, model.digest()?)
}

#[derive(Serialize, Deserialize)]
struct ScoreHeader {
    version: u32,
    class_count: usize,
    bn_layer_count: usize,
    channels: Vec<usize>,
    per_class_counts: Vec<usize>,
    checkpoint_digest: String,
}

pub fn save_score_table(table: &ScoreTable, path: &Path) -> Result<()> {
    if table.class_count() == 0 {
        return Err(Error::InvalidArgument("refusing to save an empty score table".into()));
    }
    let header = ScoreHeader {
        version: container::CONTAINER_VERSION,
        class_count: table.class_count(),
        bn_layer_count: table.bn_layer_count(),
        channels: table.channels.clone(),
        per_class_counts: table.per_class_counts.clone(),
        checkpoint_digest: table.checkpoint_digest.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Malformed(format!("score header serialization: {e}")))?;
    let payload: Vec<f32> = table
        .scores
        .iter()
        .flat_map(|row| row.iter().flat_map(|layer| layer.iter().copied()))
        .collect();
    container::write_file(path, &container::encode(SCORES_MAGIC, &header_json, &payload))
}

/// Loads a score table. When a checkpoint is supplied, the stored digest must
/// match it.
pub fn load_score_table(path: &Path, checkpoint: Option<&ModelCheckpoint>) -> Result<ScoreTable> {
    let bytes = container::read_file(path)?;
    let (header_json, payload) = container::decode(&bytes, SCORES_MAGIC)?;
    let header: ScoreHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Malformed(format!("score header: {e}")))?;
    container::check_version(header.version)?;
    if header.channels.len() != header.bn_layer_count {
        return Err(Error::Malformed(format!(
            "score header lists {} channel counts for {} BN layers",
            header.channels.len(),
            header.bn_layer_count
        )));
    }
    let per_class: usize = header.channels.iter().sum();
    let expected = header.class_count * per_class;
    if payload.len() != expected {
        return Err(Error::Truncated(format!(
            "score payload holds {} values, header implies {expected}",
            payload.len()
        )));
    }
    let mut scores = Vec::with_capacity(header.class_count);
    let mut offset = 0;
    for _ in 0..header.class_count {
        let mut row = Vec::with_capacity(header.bn_layer_count);
        for &f in &header.channels {
            row.push(payload[offset..offset + f].to_vec());
            offset += f;
        }
        scores.push(row);
    }
    let table = ScoreTable::new(scores, header.per_class_counts, header.checkpoint_digest)?;
    if let Some(model) = checkpoint {
        table.verify_checkpoint(model)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, LabeledDataset};
    use crate::model::{build_model, ArchConfig};
    use crate::tensor::Tensor;
    use crate::train::calibrate_bn_stats;
    use rand::Rng;

    #[test]
    fn wasserstein2_identity_and_hand_value() {
        assert_eq!(wasserstein2(0.3, 1.7, 0.3, 1.7), 0.0);
        assert_eq!(wasserstein2(0.5, 2.0, -0.5, 1.0), 2.0);
    }

    #[test]
    fn wasserstein2_metric_properties() {
        let mut rng = crate::rng::rng_from_seed(7);
        for _ in 0..200 {
            let p: [(f64, f64); 3] = std::array::from_fn(|_| {
                (rng.random_range(-3.0..3.0), rng.random_range(0.1..4.0))
            });
            let d = |a: (f64, f64), b: (f64, f64)| wasserstein2(a.0, a.1, b.0, b.1);
            assert!(d(p[0], p[1]) >= 0.0);
            assert_eq!(d(p[0], p[1]), d(p[1], p[0]));
            // W2 (the square root) is a metric on (mu, sigma) pairs.
            let ab = d(p[0], p[1]).sqrt();
            let bc = d(p[1], p[2]).sqrt();
            let ac = d(p[0], p[2]).sqrt();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    fn tiny_trained_pair() -> (crate::model::ModelCheckpoint, LabeledDataset) {
        let data = synth_dataset(2, 12, 8, 3).unwrap();
        let arch = ArchConfig { conv_channels: vec![4, 4], kernel: 3, downsample_every: 2 };
        let mut model = build_model(&arch, 3, 8, 2, 5).unwrap();
        calibrate_bn_stats(&mut model, &data.images).unwrap();
        (model, data)
    }

    #[test]
    fn scores_vanish_when_source_stats_match_the_data() {
        let (model, data) = tiny_trained_pair();
        // One "class": relabel everything as class 0 so the class batch is
        // exactly the calibration distribution.
        let merged =
            LabeledDataset::new(data.images.clone(), vec![0; data.len()], 1).unwrap();
        let table = compute_score_table(&model, &merged, 64, 0).unwrap();
        for k in 0..table.bn_layer_count() {
            for &s in table.row(0, k) {
                assert!(s < 1e-6, "layer {k} score {s}");
            }
        }
    }

    #[test]
    fn shifted_class_scores_higher_than_matching_class() {
        // Channel activated strongly by class 0 and weakly by class 1, with
        // source stats frozen on class-1-like data: class 0 must score
        // higher on that channel.
        let n = 8;
        let mut images = Vec::new();
        for i in 0..n {
            let v = if i < n / 2 { 0.9 } else { 0.1 };
            images.extend(std::iter::repeat(v).take(16));
        }
        let images = Tensor::new(vec![n, 1, 4, 4], images).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        let data = LabeledDataset::new(images, labels, 2).unwrap();

        let arch = ArchConfig { conv_channels: vec![1], kernel: 1, downsample_every: 9 };
        let mut model = build_model(&arch, 1, 4, 2, 1).unwrap();
        let low = data.select(&[4, 5, 6, 7]).unwrap().0;
        calibrate_bn_stats(&mut model, &low).unwrap();

        let table = compute_score_table(&model, &data, 16, 0).unwrap();
        assert!(table.row(0, 0)[0] > table.row(1, 0)[0]);
        assert!(table.row(1, 0)[0] < 1e-6);
    }

    #[test]
    fn table_invariant_to_sample_order() {
        let (model, data) = tiny_trained_pair();
        let perm: Vec<usize> = (0..data.len()).rev().collect();
        let (images, labels) = data.select(&perm).unwrap();
        let shuffled = LabeledDataset::new(images, labels, 2).unwrap();
        let a = compute_score_table(&model, &data, 64, 0).unwrap();
        let b = compute_score_table(&model, &shuffled, 64, 0).unwrap();
        for c in 0..2 {
            for k in 0..a.bn_layer_count() {
                for (x, y) in a.row(c, k).iter().zip(b.row(c, k)) {
                    assert!((x - y).abs() <= 1e-7, "class {c} layer {k}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_subsampled_counts_recorded() {
        let (model, data) = tiny_trained_pair();
        let a = compute_score_table(&model, &data, 4, 9).unwrap();
        let b = compute_score_table(&model, &data, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_class_counts(), &[4, 4]);
        let full = compute_score_table(&model, &data, 64, 9).unwrap();
        assert_eq!(full.per_class_counts(), &[12, 12]);
    }

    #[test]
    fn propagation_flag_changes_deep_scores() {
        let (model, data) = tiny_trained_pair();
        let src = compute_score_table_with(&model, &data, 64, 0, StatPropagation::Source).unwrap();
        let bat = compute_score_table_with(&model, &data, 64, 0, StatPropagation::Batch).unwrap();
        // First BN layer sees raw inputs either way.
        assert_eq!(src.row(0, 0), bat.row(0, 0));
        let last = src.bn_layer_count() - 1;
        assert_ne!(src.row(0, last), bat.row(0, last));
    }

    #[test]
    fn save_load_round_trip_and_digest_guard() {
        let (model, data) = tiny_trained_pair();
        let table = compute_score_table(&model, &data, 64, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.ttns");
        save_score_table(&table, &path).unwrap();
        let loaded = load_score_table(&path, Some(&model)).unwrap();
        assert_eq!(table, loaded);

        let other = build_model(
            &ArchConfig { conv_channels: vec![4, 4], kernel: 3, downsample_every: 2 },
            3,
            8,
            2,
            99,
        )
        .unwrap();
        match load_score_table(&path, Some(&other)) {
            Err(Error::DigestMismatch { .. }) => {}
            other => panic!("expected digest mismatch, got {other:?}"),
        }
    }

    #[test]
    fn empty_table_rejected_at_save() {
        let table = ScoreTable::new(Vec::new(), Vec::new(), "d".into()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_score_table(&table, &dir.path().join("empty.ttns")).is_err());
    }
}
