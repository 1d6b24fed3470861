//! Line-oriented configuration for the experiment driver.
//!
//! The format is plain `[section]` headers with `key = value` lines; `#`
//! starts a comment (whole-line or trailing) and blank lines are skipped.
//! Unknown sections or keys are rejected so a typo fails loudly instead of
//! silently leaving a default in place. Omitted keys keep the built-in
//! defaults, which are identical to the shipped `configs/default.conf`.

use std::collections::BTreeMap;
use std::path::Path;

use ttn_lab::adaptation::{DepthRule, MethodId};
use ttn_lab::data::{CorruptionKind, CorruptionSpec, CorruptionTable, LabelShiftSpec, SynthSpec};
use ttn_lab::model::ArchConfig;
use ttn_lab::train::TrainConfig;
use ttn_lab::{Error, Result};

/// The annotated default configuration that ships with the repository.
pub const DEFAULT_CONFIG_TEXT: &str = include_str!("../../../configs/default.conf");

/// Everything the CLI needs to run: dataset recipe, architecture, training
/// hyperparameters, scoring and adaptation knobs, corruption severity tables,
/// and the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub corruptions: CorruptionTable,
    pub grid: GridConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub phase_jitter: f64,
    /// Fixes the class templates; training and evaluation share it.
    pub seed: u64,
    pub eval_per_class: usize,
    /// Sample-noise stream of the held-out pool. Training always uses draw 0,
    /// so any other value here keeps evaluation data disjoint from training.
    pub eval_draw: u64,
}

impl DatasetConfig {
    pub fn train_spec(&self) -> SynthSpec {
        SynthSpec {
            class_count: self.classes,
            per_class: self.per_class,
            image_size: self.image_size,
            channels: self.channels,
            noise_sigma: self.noise_sigma,
            phase_jitter: self.phase_jitter,
            seed: self.seed,
            draw: 0,
        }
    }

    pub fn eval_spec(&self) -> SynthSpec {
        SynthSpec { per_class: self.eval_per_class, draw: self.eval_draw, ..self.train_spec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    /// Per-class sample cap when building the score table.
    pub per_class_cap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub depth_rule: DepthRule,
    /// Use mean softmax probabilities instead of a hard pseudo-label
    /// histogram for the second-pass prior.
    pub soft_prior: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Independent batch draws per grid cell.
    pub repeats: usize,
}

/// The fixed corruption x label-shift x method grid that `eval-grid` runs.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    /// `None` is the clean (uncorrupted) column.
    pub corruptions: Vec<Option<CorruptionSpec>>,
    pub shifts: Vec<GridShift>,
    pub methods: Vec<MethodId>,
}

/// A label-shift family entry of the grid, without a seed; seeds are derived
/// per cell at run time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridShift {
    /// All classes, balanced batch. Shorthand for `nclass:<class count>`.
    Balanced,
    NClass(usize),
    Dirichlet(f64),
}

impl GridShift {
    pub fn parse(s: &str) -> Result<GridShift> {
        let s = s.trim();
        if s == "balanced" {
            return Ok(GridShift::Balanced);
        }
        if let Some(num) = s.strip_prefix("nclass:") {
            let n: usize = num
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad class count in shift '{s}'")))?;
            return Ok(GridShift::NClass(n));
        }
        if let Some(num) = s.strip_prefix("dirichlet:") {
            let alpha: f64 = num
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad alpha in shift '{s}'")))?;
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::InvalidArgument(format!("alpha must be positive in shift '{s}'")));
            }
            return Ok(GridShift::Dirichlet(alpha));
        }
        Err(Error::InvalidArgument(format!(
            "unknown shift '{s}' (expected balanced, nclass:<n>, or dirichlet:<alpha>)"
        )))
    }

    pub fn to_spec(&self, class_count: usize, seed: u64) -> LabelShiftSpec {
        match *self {
            GridShift::Balanced => LabelShiftSpec::NClass { n: class_count, seed },
            GridShift::NClass(n) => LabelShiftSpec::NClass { n, seed },
            GridShift::Dirichlet(alpha) => LabelShiftSpec::Dirichlet { alpha, seed },
        }
    }

    /// Report encoding: (kind, numeric parameter). Balanced reports as
    /// `nclass` with the full class count.
    pub fn label(&self, class_count: usize) -> (&'static str, f64) {
        match *self {
            GridShift::Balanced => ("nclass", class_count as f64),
            GridShift::NClass(n) => ("nclass", n as f64),
            GridShift::Dirichlet(alpha) => ("dirichlet", alpha),
        }
    }
}

impl std::fmt::Display for GridShift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            GridShift::Balanced => write!(f, "balanced"),
            GridShift::NClass(n) => write!(f, "nclass:{n}"),
            GridShift::Dirichlet(alpha) => write!(f, "dirichlet:{alpha}"),
        }
    }
}

/// Parses a grid corruption entry: `none` or `<kind>:<severity>`.
pub fn parse_grid_corruption(s: &str) -> Result<Option<CorruptionSpec>> {
    let s = s.trim();
    if s == "none" {
        return Ok(None);
    }
    let (kind, sev) = s.split_once(':').ok_or_else(|| {
        Error::InvalidArgument(format!("corruption '{s}' should be none or <kind>:<severity>"))
    })?;
    let kind = CorruptionKind::parse(kind.trim())?;
    let severity: u8 = sev
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad severity in corruption '{s}'")))?;
    Ok(Some(CorruptionSpec::new(kind, severity)?))
}

impl LabConfig {
    /// Built-in defaults, identical to the shipped default config file.
    pub fn default_config() -> LabConfig {
        parse_config("").expect("empty config yields defaults")
    }

    pub fn load(path: &Path) -> Result<LabConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        parse_config(&text)
    }
}

struct Entry {
    value: String,
    line: usize,
    consumed: bool,
}

struct RawConfig {
    entries: BTreeMap<(String, String), Entry>,
    sections: Vec<String>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<RawConfig> {
        let mut entries = BTreeMap::new();
        let mut sections = Vec::new();
        let mut section = String::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.split_once('#') {
                Some((before, _)) => before,
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner.strip_suffix(']').ok_or_else(|| {
                    Error::Malformed(format!("config line {line_no}: unterminated section header"))
                })?;
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(Error::Malformed(format!("config line {line_no}: empty section name")));
                }
                if !sections.contains(&section) {
                    sections.push(section.clone());
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Malformed(format!("config line {line_no}: expected 'key = value'"))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Malformed(format!("config line {line_no}: empty key")));
            }
            if section.is_empty() {
                return Err(Error::Malformed(format!(
                    "config line {line_no}: key '{key}' appears before any [section]"
                )));
            }
            let slot = (section.clone(), key.clone());
            if entries.contains_key(&slot) {
                return Err(Error::Malformed(format!(
                    "config line {line_no}: duplicate key '{key}' in [{section}]"
                )));
            }
            entries.insert(slot, Entry { value, line: line_no, consumed: false });
        }
        Ok(RawConfig { entries, sections })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let slot = (section.to_string(), key.to_string());
        self.entries.get_mut(&slot).map(|e| {
            e.consumed = true;
            (e.value.clone(), e.line)
        })
    }

    fn parsed<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T, what: &str) -> Result<T> {
        match self.take(section, key) {
            None => Ok(default),
            Some((value, line)) => value.parse().map_err(|_| {
                Error::Malformed(format!(
                    "config line {line}: [{section}] {key} = '{value}' is not {what}"
                ))
            }),
        }
    }

    fn usize_or(&mut self, section: &str, key: &str, default: usize) -> Result<usize> {
        self.parsed(section, key, default, "an unsigned integer")
    }

    fn u64_or(&mut self, section: &str, key: &str, default: u64) -> Result<u64> {
        self.parsed(section, key, default, "an unsigned integer")
    }

    fn f64_or(&mut self, section: &str, key: &str, default: f64) -> Result<f64> {
        self.parsed(section, key, default, "a number")
    }

    fn bool_or(&mut self, section: &str, key: &str, default: bool) -> Result<bool> {
        self.parsed(section, key, default, "true or false")
    }

    fn list_or(&mut self, section: &str, key: &str, default: &[&str]) -> Result<Vec<String>> {
        match self.take(section, key) {
            None => Ok(default.iter().map(|s| s.to_string()).collect()),
            Some((value, line)) => {
                let items: Vec<String> =
                    value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if items.is_empty() {
                    return Err(Error::Malformed(format!(
                        "config line {line}: [{section}] {key} must list at least one item"
                    )));
                }
                Ok(items)
            }
        }
    }

    fn severity_row(&mut self, key: &str, default: [f64; 5]) -> Result<[f64; 5]> {
        match self.take("corruptions", key) {
            None => Ok(default),
            Some((value, line)) => {
                let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                if items.len() != 5 {
                    return Err(Error::Malformed(format!(
                        "config line {line}: [corruptions] {key} needs exactly 5 values (severity 1..5), got {}",
                        items.len()
                    )));
                }
                let mut row = [0.0; 5];
                for (i, item) in items.iter().enumerate() {
                    row[i] = item.parse().map_err(|_| {
                        Error::Malformed(format!(
                            "config line {line}: [corruptions] {key} entry '{item}' is not a number"
                        ))
                    })?;
                }
                Ok(row)
            }
        }
    }

    fn finish(&self) -> Result<()> {
        const KNOWN_SECTIONS: [&str; 8] =
            ["dataset", "model", "train", "score", "adapt", "eval", "corruptions", "grid"];
        for name in &self.sections {
            if !KNOWN_SECTIONS.contains(&name.as_str()) {
                return Err(Error::Malformed(format!("unknown config section [{name}]")));
            }
        }
        let mut leftovers: Vec<&Entry> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for ((section, key), entry) in &self.entries {
            if !entry.consumed {
                leftovers.push(entry);
                names.push(format!("[{section}] {key}"));
            }
        }
        if let Some(first) = leftovers.first() {
            let rest = if names.len() > 1 {
                format!(" (and also: {})", names[1..].join(", "))
            } else {
                String::new()
            };
            return Err(Error::Malformed(format!(
                "config line {}: unknown key {}{rest}",
                first.line, names[0]
            )));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<LabConfig> {
    let mut raw = RawConfig::parse(text)?;

    let dataset = DatasetConfig {
        classes: raw.usize_or("dataset", "classes", 8)?,
        per_class: raw.usize_or("dataset", "per_class", 200)?,
        image_size: raw.usize_or("dataset", "image_size", 16)?,
        channels: raw.usize_or("dataset", "channels", 3)?,
        noise_sigma: raw.f64_or("dataset", "noise_sigma", 0.22)?,
        phase_jitter: raw.f64_or("dataset", "phase_jitter", 2.2)?,
        seed: raw.u64_or("dataset", "seed", 0)?,
        eval_per_class: raw.usize_or("dataset", "eval_per_class", 64)?,
        eval_draw: raw.u64_or("dataset", "eval_draw", 1)?,
    };

    let conv_channels = raw
        .list_or("model", "conv_channels", &["16", "16", "32", "32", "64", "64"])?
        .iter()
        .map(|s| {
            s.parse::<usize>().map_err(|_| {
                Error::Malformed(format!("[model] conv_channels entry '{s}' is not an unsigned integer"))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let arch = ArchConfig {
        conv_channels,
        kernel: raw.usize_or("model", "kernel", 3)?,
        downsample_every: raw.usize_or("model", "downsample_every", 2)?,
    };

    let train = TrainConfig {
        epochs: raw.usize_or("train", "epochs", 24)?,
        batch_size: raw.usize_or("train", "batch_size", 64)?,
        learning_rate: raw.f64_or("train", "learning_rate", 0.05)?,
        momentum: raw.f64_or("train", "momentum", 0.9)?,
        weight_decay: raw.f64_or("train", "weight_decay", 0.0005)?,
        bn_momentum: raw.f64_or("train", "bn_momentum", 0.1)?,
        seed: 0,
    };

    let score = ScoreConfig { per_class_cap: raw.usize_or("score", "per_class_cap", 256)? };

    let depth_rule = match raw.take("adapt", "depth_fraction") {
        None => DepthRule::Linear,
        Some((value, line)) => match value.as_str() {
            "linear" => DepthRule::Linear,
            "algorithmic" => DepthRule::Algorithmic,
            other => {
                return Err(Error::Malformed(format!(
                    "config line {line}: [adapt] depth_fraction = '{other}' (expected linear or algorithmic)"
                )))
            }
        },
    };
    let adapt = AdaptConfig { depth_rule, soft_prior: raw.bool_or("adapt", "soft_prior", false)? };

    let eval = EvalConfig {
        batch_size: raw.usize_or("eval", "batch_size", 64)?,
        repeats: raw.usize_or("eval", "repeats", 5)?,
    };

    let corruptions = CorruptionTable {
        gaussian_noise: raw.severity_row("gaussian_noise", [0.1, 0.2, 0.3, 0.4, 0.5])?,
        speckle_noise: raw.severity_row("speckle_noise", [0.15, 0.3, 0.5, 0.75, 1.0])?,
        brightness: raw.severity_row("brightness", [0.07, 0.14, 0.21, 0.28, 0.35])?,
        contrast: raw.severity_row("contrast", [0.1, 0.2, 0.3, 0.4, 0.5])?,
    };

    let corruption_entries = raw.list_or(
        "grid",
        "corruptions",
        &["none", "gaussian_noise:3", "gaussian_noise:5", "speckle_noise:5", "brightness:5", "contrast:5"],
    )?;
    let shift_entries =
        raw.list_or("grid", "shifts", &["balanced", "nclass:4", "nclass:1", "dirichlet:0.5", "dirichlet:0.1"])?;
    let method_entries = raw.list_or(
        "grid",
        "methods",
        &["source", "ttn", "hybrid_ttn", "hybrid_uniform", "hybrid_oracle", "hybrid_random_scores"],
    )?;
    let grid = GridConfig {
        corruptions: corruption_entries
            .iter()
            .map(|s| parse_grid_corruption(s))
            .collect::<Result<Vec<_>>>()?,
        shifts: shift_entries.iter().map(|s| GridShift::parse(s)).collect::<Result<Vec<_>>>()?,
        methods: method_entries.iter().map(|s| MethodId::parse(s)).collect::<Result<Vec<_>>>()?,
    };

    raw.finish()?;
    Ok(LabConfig { dataset, arch, train, score, adapt, eval, corruptions, grid })
}
