//! Datasets, corruption operators, and label-shift batch samplers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::tensor::Tensor;

/// Labeled image set with pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = match *images.shape() {
            [n, _, _, _] => n,
            _ => {
                return Err(Error::Shape(format!(
                    "dataset images must be [N, C, H, W], got {:?}",
                    images.shape()
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
        }
        if class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be >= 1".into()));
        }
        if let Some(bad) = labels.iter().position(|&l| l >= class_count) {
            return Err(Error::Malformed(format!(
                "label {} at sample {bad} out of range for {class_count} classes",
                labels[bad]
            )));
        }
        if let Some(bad) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Malformed(format!(
                "pixel {bad} is {} (outside [0, 1])",
                images.data()[bad]
            )));
        }
        Ok(LabeledDataset { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width) of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// Training sets need every class populated.
    pub fn validate_for_training(&self) -> Result<()> {
        for (c, group) in self.class_indices().iter().enumerate() {
            if group.is_empty() {
                return Err(Error::InvalidArgument(format!("class {c} has no samples")));
            }
        }
        Ok(())
    }

    /// Gathers the given samples into a batch tensor plus labels.
    pub fn select(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.image_dims();
        let sample = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }
}

/// Parameters of the synthetic texture dataset.
///
/// Each class gets a seeded sinusoidal grating template (orientation drawn
/// from an evenly spaced set, frequency and per-channel phases random); each
/// sample perturbs the template with a global phase jitter and i.i.d. pixel
/// noise. Jitter and noise are what keep a linear probe on raw pixels from
/// solving the task while a small CNN still can.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub phase_jitter: f64,
    /// Fixes the class templates (what the classes look like).
    pub seed: u64,
    /// Selects the sample-noise stream. Different draws under one seed are
    /// disjoint samples of the same classes, so draw 0 can train and draw 1
    /// can evaluate.
    pub draw: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            class_count: 8,
            per_class: 200,
            image_size: 16,
            channels: 3,
            noise_sigma: 0.22,
            phase_jitter: 2.2,
            seed: 0,
            draw: 0,
        }
    }
}

/// Synthetic dataset with default texture parameters.
pub fn synth_dataset(class_count: usize, per_class: usize, image_size: usize, seed: u64) -> Result<LabeledDataset> {
    synth_dataset_with(&SynthSpec { class_count, per_class, image_size, seed, ..SynthSpec::default() })
}

pub fn synth_dataset_with(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.class_count < 2 {
        return Err(Error::InvalidArgument("synthetic dataset needs >= 2 classes".into()));
    }
    if spec.per_class < 2 {
        return Err(Error::InvalidArgument("synthetic dataset needs >= 2 samples per class".into()));
    }
    if spec.image_size < 4 || spec.channels == 0 {
        return Err(Error::InvalidArgument("image_size must be >= 4 and channels >= 1".into()));
    }
    let (c, s, ch) = (spec.class_count, spec.image_size, spec.channels);

    // Class templates: evenly spaced orientations handed out in seeded order
    // so classes are distinguishable for any seed, plus seeded frequency and
    // phases.
    let mut template_rng = rng_from_seed(derive_seed(spec.seed, "templates"));
    let mut orientation_order: Vec<usize> = (0..c).collect();
    orientation_order.shuffle(&mut template_rng);
    struct Template {
        theta: f64,
        freq: f64,
        phase: Vec<f64>,
    }
    let templates: Vec<Template> = (0..c)
        .map(|cls| Template {
            theta: std::f64::consts::PI * (orientation_order[cls] as f64 + template_rng.random_range(-0.2..0.2)) / c as f64,
            freq: template_rng.random_range(1.5..3.0),
            phase: (0..ch).map(|_| template_rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        })
        .collect();

    let mut sample_rng = rng_from_seed(derive_seed_indexed(spec.seed, "samples", spec.draw as usize));
    let n = c * spec.per_class;
    let mut data = Vec::with_capacity(n * ch * s * s);
    let mut labels = Vec::with_capacity(n);
    for cls in 0..c {
        let t = &templates[cls];
        let (dir_x, dir_y) = (t.theta.cos(), t.theta.sin());
        for _ in 0..spec.per_class {
            let jitter: f64 = sample_rng.random_range(-spec.phase_jitter..spec.phase_jitter);
            for channel in 0..ch {
                let phase = t.phase[channel] + jitter;
                for y in 0..s {
                    let v = (y as f64 + 0.5) / s as f64;
                    for x in 0..s {
                        let u = (x as f64 + 0.5) / s as f64;
                        let wave = (std::f64::consts::TAU * t.freq * (dir_x * u + dir_y * v) + phase).sin();
                        let noise: f64 = StandardNormal.sample(&mut sample_rng);
                        let val = 0.5 + 0.35 * wave + spec.noise_sigma * noise;
                        data.push(val.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(cls);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, ch, s, s], data)?, labels, c)
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CLASSES: usize = 10;

/// Parses one CIFAR-10 binary batch file (3073-byte records: label byte then
/// 3072 channel-major pixels).
pub fn load_cifar10_file(path: &Path) -> Result<LabeledDataset> {
    let bytes = container::read_file(path)?;
    parse_cifar10_records(&bytes)
        .map_err(|e| match e {
            Error::Truncated(m) => Error::Truncated(format!("{}: {m}", path.display())),
            Error::Malformed(m) => Error::Malformed(format!("{}: {m}", path.display())),
            other => other,
        })
}

pub(crate) fn parse_cifar10_records(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Truncated(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Malformed(format!("record {i} has label byte {label}, expected < {CIFAR_CLASSES}")));
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    LabeledDataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, CIFAR_CLASSES)
}

/// Loads and concatenates the five standard training batch files from a
/// CIFAR-10 binary-version directory.
pub fn load_cifar10_train_dir(dir: &Path) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let part = load_cifar10_file(&dir.join(format!("data_batch_{i}.bin")))?;
        images.extend_from_slice(part.images.data());
        labels.extend_from_slice(&part.labels);
    }
    let n = labels.len();
    LabeledDataset::new(Tensor::new(vec![n, 3, 32, 32], images)?, labels, CIFAR_CLASSES)
}

pub fn load_cifar10_test_dir(dir: &Path) -> Result<LabeledDataset> {
    load_cifar10_file(&dir.join("test_batch.bin"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    SpeckleNoise,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind {s:?}")))
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

/// Severity parameter tables, one value per severity 1..=5 for each kind.
///
/// The tables ship in the default config file rather than in code; an
/// all-zeros table makes every corruption the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionTable {
    pub gaussian_noise: [f64; 5],
    pub speckle_noise: [f64; 5],
    pub brightness: [f64; 5],
    pub contrast: [f64; 5],
}

impl CorruptionTable {
    pub fn param(&self, kind: CorruptionKind, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        let row = match kind {
            CorruptionKind::GaussianNoise => &self.gaussian_noise,
            CorruptionKind::SpeckleNoise => &self.speckle_noise,
            CorruptionKind::Brightness => &self.brightness,
            CorruptionKind::Contrast => &self.contrast,
        };
        Ok(row[usize::from(severity) - 1])
    }
}

/// Applies a corruption to a batch of [0, 1] images, clipping back to [0, 1].
///
/// With severity parameter p: gaussian adds `p * eps` noise, speckle scales by
/// `1 + p * eps`, brightness shifts by `p`, and contrast blends each image
/// toward its own mean by factor `p` (`x + p * (mean - x)`), so `p = 0` is the
/// exact identity for every kind.
pub fn corrupt(images: &Tensor, spec: &CorruptionSpec, table: &CorruptionTable, seed: u64) -> Result<Tensor> {
    if images.shape().len() != 4 {
        return Err(Error::Shape(format!("corrupt expects [N, C, H, W] images, got {:?}", images.shape())));
    }
    if let Some(bad) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "pixel {bad} is {} (corruptions require [0, 1] input)",
            images.data()[bad]
        )));
    }
    let p = table.param(spec.kind, spec.severity)?;
    let mut rng = rng_from_seed(seed);
    let mut out = images.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in out.data_mut() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *v = (f64::from(*v) + p * eps).clamp(0.0, 1.0) as f32;
            }
        }
        CorruptionKind::SpeckleNoise => {
            for v in out.data_mut() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *v = (f64::from(*v) * (1.0 + p * eps)).clamp(0.0, 1.0) as f32;
            }
        }
        CorruptionKind::Brightness => {
            for v in out.data_mut() {
                *v = (f64::from(*v) + p).clamp(0.0, 1.0) as f32;
            }
        }
        CorruptionKind::Contrast => {
            let n = images.shape()[0];
            let per_image = images.len() / n;
            let od = out.data_mut();
            for i in 0..n {
                let img = &mut od[i * per_image..(i + 1) * per_image];
                let mean = img.iter().map(|&v| f64::from(v)).sum::<f64>() / per_image as f64;
                for v in img.iter_mut() {
                    *v = (f64::from(*v) + p * (mean - f64::from(*v))).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Symmetric Dirichlet(alpha) sample via normalized Gamma(alpha, 1) draws.
fn sample_dirichlet(alpha: f64, dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet alpha {alpha}: {e}")))?;
    let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum > 0.0) {
        // All draws underflowed to zero (possible at very small alpha):
        // the limit distribution puts all mass on one category.
        let hot = rng.random_range(0..dim);
        let mut p = vec![0.0; dim];
        p[hot] = 1.0;
        return Ok(p);
    }
    Ok(draws.into_iter().map(|g| g / sum).collect())
}

/// How to skew the label distribution of a sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelShiftSpec {
    /// `n` classes chosen uniformly without replacement, batch balanced
    /// across them (remainder goes to the lowest-index chosen classes).
    NClass { n: usize, seed: u64 },
    /// Class proportions drawn from Dirichlet(alpha * 1_C), then per-sample
    /// classes drawn i.i.d. from those proportions.
    Dirichlet { alpha: f64, seed: u64 },
    /// Exact per-class counts.
    Explicit { counts: Vec<usize> },
}

impl LabelShiftSpec {
    /// Same shift kind with the seed replaced, for per-repeat reseeding.
    pub fn with_seed(&self, seed: u64) -> LabelShiftSpec {
        match self {
            LabelShiftSpec::NClass { n, .. } => LabelShiftSpec::NClass { n: *n, seed },
            LabelShiftSpec::Dirichlet { alpha, .. } => LabelShiftSpec::Dirichlet { alpha: *alpha, seed },
            LabelShiftSpec::Explicit { counts } => LabelShiftSpec::Explicit { counts: counts.clone() },
        }
    }
}

/// Draws a label-shifted batch from the dataset.
///
/// Per-class draws are without replacement while the class pool lasts, then
/// with replacement once exhausted. The assembled batch order is shuffled.
pub fn sample_label_shift(
    dataset: &LabeledDataset,
    spec: &LabelShiftSpec,
    batch_size: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument("batch_size must be >= 2".into()));
    }
    let c = dataset.class_count;
    let (counts, mut rng) = match spec {
        LabelShiftSpec::NClass { n, seed } => {
            if *n < 1 || *n > c {
                return Err(Error::InvalidArgument(format!("n = {n} outside 1..={c}")));
            }
            let mut rng = rng_from_seed(*seed);
            let mut classes: Vec<usize> = (0..c).collect();
            classes.shuffle(&mut rng);
            let mut chosen: Vec<usize> = classes[..*n].to_vec();
            chosen.sort_unstable();
            let base = batch_size / n;
            let rem = batch_size % n;
            let mut counts = vec![0usize; c];
            for (i, &cls) in chosen.iter().enumerate() {
                counts[cls] = base + usize::from(i < rem);
            }
            (counts, rng)
        }
        LabelShiftSpec::Dirichlet { alpha, seed } => {
            if !(*alpha > 0.0) {
                return Err(Error::InvalidArgument(format!("alpha = {alpha} must be > 0")));
            }
            let mut rng = rng_from_seed(*seed);
            let p = sample_dirichlet(*alpha, c, &mut rng)?;
            let mut counts = vec![0usize; c];
            for _ in 0..batch_size {
                let u: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                let mut cls = c - 1;
                for (j, &pj) in p.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        cls = j;
                        break;
                    }
                }
                counts[cls] += 1;
            }
            (counts, rng)
        }
        LabelShiftSpec::Explicit { counts } => {
            if counts.len() != c {
                return Err(Error::InvalidArgument(format!(
                    "explicit counts cover {} classes, dataset has {c}",
                    counts.len()
                )));
            }
            let total: usize = counts.iter().sum();
            if total != batch_size {
                return Err(Error::InvalidArgument(format!(
                    "explicit counts sum to {total}, batch_size is {batch_size}"
                )));
            }
            (counts.clone(), rng_from_seed(derive_seed(0, "explicit")))
        }
    };

    let pools = dataset.class_indices();
    let mut picked = Vec::with_capacity(batch_size);
    for (cls, &m) in counts.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let pool = &pools[cls];
        if pool.is_empty() {
            return Err(Error::InvalidArgument(format!("class {cls} has no samples to draw from")));
        }
        let mut order: Vec<usize> = pool.clone();
        order.shuffle(&mut rng);
        for j in 0..m {
            if j < order.len() {
                picked.push(order[j]);
            } else {
                picked.push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    picked.shuffle(&mut rng);
    dataset.select(&picked)
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    class_count: usize,
    samples: usize,
    channels: usize,
    height: usize,
    width: usize,
}

/// Writes a dataset in the shared container format (`TTNDS001`): images, then
/// labels, both as 32-bit floats.
pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let (c, h, w) = dataset.image_dims();
    let header = DatasetHeader {
        version: container::CONTAINER_VERSION,
        class_count: dataset.class_count,
        samples: dataset.len(),
        channels: c,
        height: h,
        width: w,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Malformed(format!("header serialization: {e}")))?;
    let mut payload = dataset.images.data().to_vec();
    payload.extend(dataset.labels.iter().map(|&l| l as f32));
    container::write_file(path, &container::encode(DATASET_MAGIC, &header_bytes, &payload))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = container::read_file(path)?;
    let (header_bytes, payload) = container::decode(&bytes, DATASET_MAGIC)?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Malformed(format!("header JSON: {e}")))?;
    container::check_version(header.version)?;
    let pixels = header.samples * header.channels * header.height * header.width;
    if payload.len() != pixels + header.samples {
        return Err(Error::Truncated(format!(
            "header declares {} floats, payload has {}",
            pixels + header.samples,
            payload.len()
        )));
    }
    let images = Tensor::new(
        vec![header.samples, header.channels, header.height, header.width],
        payload[..pixels].to_vec(),
    )?;
    let labels: Vec<usize> = payload[pixels..]
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v < 0.0 {
                Err(Error::Malformed(format!("label value {v} is not a class id")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<_>>()?;
    LabeledDataset::new(images, labels, header.class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synth() -> LabeledDataset {
        synth_dataset_with(&SynthSpec {
            class_count: 4,
            per_class: 12,
            image_size: 8,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let a = synth_dataset(3, 5, 8, 7).unwrap();
        let b = synth_dataset(3, 5, 8, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(3, 5, 8, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_class_means_differ() {
        let ds = small_synth();
        let groups = ds.class_indices();
        let (c, h, w) = ds.image_dims();
        let dim = c * h * w;
        let mean_image = |idx: &Vec<usize>| -> Vec<f64> {
            let mut m = vec![0.0f64; dim];
            for &i in idx {
                for (j, v) in ds.images.data()[i * dim..(i + 1) * dim].iter().enumerate() {
                    m[j] += f64::from(*v);
                }
            }
            m.iter_mut().for_each(|v| *v /= idx.len() as f64);
            m
        };
        let means: Vec<Vec<f64>> = groups.iter().map(mean_image).collect();
        for a in 0..means.len() {
            for b in (a + 1)..means.len() {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.0, "classes {a} and {b} have identical means");
            }
        }
    }

    #[test]
    fn synth_rejects_degenerate_sizes() {
        assert!(synth_dataset(1, 5, 8, 0).is_err());
        assert!(synth_dataset(2, 1, 8, 0).is_err());
    }

    #[test]
    fn synth_draws_share_templates_but_not_samples() {
        let spec = SynthSpec { class_count: 4, per_class: 40, image_size: 8, ..SynthSpec::default() };
        let a = synth_dataset_with(&spec).unwrap();
        let b = synth_dataset_with(&SynthSpec { draw: 1, ..spec.clone() }).unwrap();
        assert_ne!(a.images, b.images);

        // Same classes: per-class mean images agree far more closely across
        // draws than across different classes within one draw.
        let dim = 3 * 8 * 8;
        let mean_of = |ds: &LabeledDataset, cls: usize| -> Vec<f64> {
            let idx = &ds.class_indices()[cls];
            let mut m = vec![0.0f64; dim];
            for &i in idx {
                for (j, v) in ds.images.data()[i * dim..(i + 1) * dim].iter().enumerate() {
                    m[j] += f64::from(*v);
                }
            }
            m.iter_mut().for_each(|v| *v /= idx.len() as f64);
            m
        };
        let l2 = |x: &[f64], y: &[f64]| -> f64 {
            x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        for cls in 0..4 {
            let across_draws = l2(&mean_of(&a, cls), &mean_of(&b, cls));
            let nearest_other = (0..4)
                .filter(|&o| o != cls)
                .map(|o| l2(&mean_of(&a, cls), &mean_of(&a, o)))
                .fold(f64::INFINITY, f64::min);
            assert!(
                across_draws < nearest_other,
                "class {cls}: draw distance {across_draws} vs nearest class {nearest_other}"
            );
        }
    }

    fn zero_table() -> CorruptionTable {
        CorruptionTable {
            gaussian_noise: [0.0; 5],
            speckle_noise: [0.0; 5],
            brightness: [0.0; 5],
            contrast: [0.0; 5],
        }
    }

    #[test]
    fn zero_severity_parameter_is_identity() {
        let ds = small_synth();
        let table = zero_table();
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 3).unwrap();
            let out = corrupt(&ds.images, &spec, &table, 5).unwrap();
            assert!(out.bitwise_eq(&ds.images), "{kind} with parameter 0 changed pixels");
        }
    }

    #[test]
    fn corruption_stays_in_range_and_changes_pixels() {
        let ds = small_synth();
        let mut table = zero_table();
        table.gaussian_noise = [0.02, 0.04, 0.08, 0.12, 0.2];
        table.speckle_noise = [0.1, 0.2, 0.3, 0.4, 0.5];
        table.brightness = [0.1, 0.2, 0.3, 0.4, 0.5];
        table.contrast = [0.2, 0.3, 0.5, 0.7, 0.9];
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 5).unwrap();
            let out = corrupt(&ds.images, &spec, &table, 5).unwrap();
            assert_eq!(out.shape(), ds.images.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(!out.bitwise_eq(&ds.images), "{kind} at severity 5 was a no-op");
        }
    }

    #[test]
    fn corruption_is_seed_deterministic() {
        let ds = small_synth();
        let mut table = zero_table();
        table.gaussian_noise = [0.05; 5];
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 1).unwrap();
        let a = corrupt(&ds.images, &spec, &table, 9).unwrap();
        let b = corrupt(&ds.images, &spec, &table, 9).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = corrupt(&ds.images, &spec, &table, 10).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn severity_out_of_range_rejected() {
        assert!(CorruptionSpec::new(CorruptionKind::Brightness, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Brightness, 6).is_err());
    }

    #[test]
    fn nclass_full_is_balanced() {
        let ds = small_synth();
        let (batch, labels) =
            sample_label_shift(&ds, &LabelShiftSpec::NClass { n: 4, seed: 3 }, 30).unwrap();
        assert_eq!(batch.shape()[0], 30);
        let mut counts = vec![0usize; 4];
        for &l in &labels {
            counts[l] += 1;
        }
        // 30 over 4 classes: within +-1 of 7.5.
        assert!(counts.iter().all(|&k| k == 7 || k == 8), "counts {counts:?}");
    }

    #[test]
    fn nclass_one_is_single_class() {
        let ds = small_synth();
        let (_, labels) =
            sample_label_shift(&ds, &LabelShiftSpec::NClass { n: 1, seed: 11 }, 20).unwrap();
        assert!(labels.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn nclass_seeds_vary_selection() {
        let ds = small_synth();
        let first_class = |seed: u64| {
            let (_, labels) =
                sample_label_shift(&ds, &LabelShiftSpec::NClass { n: 1, seed }, 8).unwrap();
            labels[0]
        };
        let picks: std::collections::HashSet<usize> = (0..16).map(first_class).collect();
        assert!(picks.len() > 1, "all 16 seeds picked class {picks:?}");
    }

    #[test]
    fn explicit_counts_are_exact() {
        let ds = small_synth();
        let spec = LabelShiftSpec::Explicit { counts: vec![5, 0, 2, 3] };
        let (_, labels) = sample_label_shift(&ds, &spec, 10).unwrap();
        let mut counts = vec![0usize; 4];
        for &l in &labels {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![5, 0, 2, 3]);

        let bad = LabelShiftSpec::Explicit { counts: vec![5, 0, 2, 2] };
        assert!(sample_label_shift(&ds, &bad, 10).is_err());
    }

    #[test]
    fn oversampling_falls_back_to_replacement() {
        let ds = small_synth();
        // 12 samples per class; ask for 30 of one class.
        let spec = LabelShiftSpec::Explicit { counts: vec![30, 0, 0, 0] };
        let (batch, labels) = sample_label_shift(&ds, &spec, 30).unwrap();
        assert_eq!(batch.shape()[0], 30);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn dirichlet_concentration_ordering() {
        let ds = small_synth();
        let mean_max = |alpha: f64| -> f64 {
            let mut total = 0.0;
            for seed in 0..50u64 {
                let spec = LabelShiftSpec::Dirichlet { alpha, seed };
                let (_, labels) = sample_label_shift(&ds, &spec, 40).unwrap();
                let mut counts = vec![0usize; 4];
                for &l in &labels {
                    counts[l] += 1;
                }
                total += *counts.iter().max().unwrap() as f64 / 40.0;
            }
            total / 50.0
        };
        let sharp = mean_max(0.01);
        let mid = mean_max(0.5);
        let flat = mean_max(100.0);
        assert!(sharp > mid && mid > flat, "got {sharp:.3} vs {mid:.3} vs {flat:.3}");
    }

    #[test]
    fn cifar_round_trip_and_negative_cases() {
        // Two records with known pixel patterns.
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 0;
        bytes[CIFAR_RECORD + CIFAR_PIXELS] = 128;
        let ds = parse_cifar10_records(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![7, 0]);
        assert_eq!(ds.images.data()[0], 1.0);
        assert!((ds.images.data()[2 * CIFAR_PIXELS - 1] - 128.0 / 255.0).abs() < 1e-7);

        assert!(matches!(parse_cifar10_records(&bytes[..100]), Err(Error::Truncated(_))));
        bytes[0] = 10;
        assert!(matches!(parse_cifar10_records(&bytes), Err(Error::Malformed(_))));
    }

    #[test]
    fn dataset_container_round_trip() {
        let ds = small_synth();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tds");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_rejects_bad_labels_and_pixels() {
        let img = Tensor::filled(&[2, 1, 2, 2], 0.5);
        assert!(LabeledDataset::new(img.clone(), vec![0, 3], 3).is_err());
        let hot = Tensor::filled(&[2, 1, 2, 2], 1.5);
        assert!(LabeledDataset::new(hot, vec![0, 1], 3).is_err());
        assert!(LabeledDataset::new(img, vec![0, 1], 3).is_ok());
    }
}
