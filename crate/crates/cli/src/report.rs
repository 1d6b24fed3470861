//! Evaluation reports: raw per-seed rows, CSV and JSON serialization, and
//! the median-rank summary across scenarios.
//!
//! Reports carry every (method, scenario, seed) cell rather than aggregates,
//! so downstream statistics stay recomputable. All floats are serialized with
//! 6 significant digits; values are rounded through the same formatter before
//! JSON emission too, so a JSON -> CSV -> JSON round trip is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ttn_lab::adaptation::MethodId;
use ttn_lab::data::{CorruptionKind, CorruptionSpec};
use ttn_lab::{Error, Result};

/// One evaluated cell: a method on one sampled batch of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: MethodId,
    /// `None` is the clean column.
    pub corruption: Option<CorruptionSpec>,
    pub shift_kind: String,
    pub shift_param: f64,
    /// Repeat index within the scenario; also selects the batch seed.
    pub seed: u64,
    pub accuracy: f64,
    /// `accuracy - accuracy(source)` on the same batch; exactly 0 for source.
    pub delta_vs_source: f64,
    /// Per-class accuracy; `None` where the batch had no samples of a class.
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_count: usize,
    pub rows: Vec<EvalRow>,
}

/// A scenario identity: everything of a row except method and seed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScenarioKey {
    pub corruption_kind: String,
    pub severity: u8,
    pub shift_kind: String,
    pub shift_param_bits: u64,
}

impl ScenarioKey {
    fn of(row: &EvalRow) -> ScenarioKey {
        let (corruption_kind, severity) = match &row.corruption {
            None => ("none".to_string(), 0),
            Some(spec) => (spec.kind.name().to_string(), spec.severity),
        };
        ScenarioKey {
            corruption_kind,
            severity,
            shift_kind: row.shift_kind.clone(),
            shift_param_bits: row.shift_param.to_bits(),
        }
    }

    pub fn describe(&self) -> String {
        let corruption = if self.corruption_kind == "none" {
            "none".to_string()
        } else {
            format!("{}:{}", self.corruption_kind, self.severity)
        };
        format!(
            "corruption={corruption} shift={}:{}",
            self.shift_kind,
            f64::from_bits(self.shift_param_bits)
        )
    }
}

/// Formats with 6 significant digits as plain decimal (no exponent), the
/// report-wide float encoding.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).clamp(0, 17) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

/// Rounds to the 6-significant-digit grid by a format/parse round trip, so a
/// value that was serialized and read back compares equal to it.
pub fn round_sig6(x: f64) -> f64 {
    format_sig6(x).parse().unwrap_or(x)
}

fn csv_header(class_count: usize) -> String {
    let mut cols = vec![
        "method".to_string(),
        "corruption_kind".to_string(),
        "severity".to_string(),
        "shift_kind".to_string(),
        "shift_param".to_string(),
        "seed".to_string(),
        "accuracy".to_string(),
        "delta_vs_source".to_string(),
    ];
    for c in 0..class_count {
        cols.push(format!("per_class_acc_{c}"));
    }
    cols.join(",")
}

pub fn write_csv(report: &EvalReport) -> String {
    let mut out = csv_header(report.class_count);
    out.push('\n');
    for row in &report.rows {
        let (kind, severity) = match &row.corruption {
            None => ("none", 0u8),
            Some(spec) => (spec.kind.name(), spec.severity),
        };
        let mut fields = vec![
            row.method.to_string(),
            kind.to_string(),
            severity.to_string(),
            row.shift_kind.clone(),
            format_sig6(row.shift_param),
            row.seed.to_string(),
            format_sig6(row.accuracy),
            format_sig6(row.delta_vs_source),
        ];
        for acc in &row.per_class {
            fields.push(match acc {
                None => String::new(),
                Some(a) => format_sig6(*a),
            });
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn parse_corruption_cell(kind: &str, severity: u8, line: usize) -> Result<Option<CorruptionSpec>> {
    if kind == "none" {
        if severity != 0 {
            return Err(Error::Malformed(format!(
                "report line {line}: severity {severity} with corruption 'none'"
            )));
        }
        return Ok(None);
    }
    let kind = CorruptionKind::parse(kind)
        .map_err(|e| Error::Malformed(format!("report line {line}: {e}")))?;
    let spec = CorruptionSpec::new(kind, severity)
        .map_err(|e| Error::Malformed(format!("report line {line}: {e}")))?;
    Ok(Some(spec))
}

fn validate_shift_kind(kind: &str, line: usize) -> Result<()> {
    if kind == "nclass" || kind == "dirichlet" {
        Ok(())
    } else {
        Err(Error::Malformed(format!("report line {line}: unknown shift kind '{kind}'")))
    }
}

pub fn parse_csv(text: &str) -> Result<EvalReport> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Malformed("empty report: missing CSV header".into()))?;
    let head_fields: Vec<&str> = header.split(',').collect();
    if head_fields.len() < 8 {
        return Err(Error::Malformed(format!(
            "report header has {} columns, expected at least 8",
            head_fields.len()
        )));
    }
    let class_count = head_fields.len() - 8;
    if header != csv_header(class_count) {
        return Err(Error::Malformed("report header does not match the expected column set".into()));
    }

    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != head_fields.len() {
            return Err(Error::Malformed(format!(
                "report line {line}: {} fields, expected {}",
                fields.len(),
                head_fields.len()
            )));
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Malformed(format!("report line {line}: {what} '{s}' is not a number")))
        };
        let method = MethodId::parse(fields[0])
            .map_err(|e| Error::Malformed(format!("report line {line}: {e}")))?;
        let severity: u8 = fields[2]
            .parse()
            .map_err(|_| Error::Malformed(format!("report line {line}: bad severity '{}'", fields[2])))?;
        let corruption = parse_corruption_cell(fields[1], severity, line)?;
        validate_shift_kind(fields[3], line)?;
        let shift_param = parse_f64(fields[4], "shift_param")?;
        let seed: u64 = fields[5]
            .parse()
            .map_err(|_| Error::Malformed(format!("report line {line}: bad seed '{}'", fields[5])))?;
        let accuracy = parse_f64(fields[6], "accuracy")?;
        let delta_vs_source = parse_f64(fields[7], "delta_vs_source")?;
        let mut per_class = Vec::with_capacity(class_count);
        for (c, cell) in fields[8..].iter().enumerate() {
            per_class.push(if cell.is_empty() {
                None
            } else {
                Some(parse_f64(cell, &format!("per_class_acc_{c}"))?)
            });
        }
        rows.push(EvalRow {
            method,
            corruption,
            shift_kind: fields[3].to_string(),
            shift_param,
            seed,
            accuracy,
            delta_vs_source,
            per_class,
        });
    }
    Ok(EvalReport { class_count, rows })
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    method: String,
    corruption_kind: String,
    severity: u8,
    shift_kind: String,
    shift_param: f64,
    seed: u64,
    accuracy: f64,
    delta_vs_source: f64,
    per_class_acc: Vec<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    class_count: usize,
    rows: Vec<JsonRow>,
}

pub fn write_json(report: &EvalReport) -> Result<String> {
    let rows = report
        .rows
        .iter()
        .map(|row| {
            let (kind, severity) = match &row.corruption {
                None => ("none".to_string(), 0u8),
                Some(spec) => (spec.kind.name().to_string(), spec.severity),
            };
            JsonRow {
                method: row.method.to_string(),
                corruption_kind: kind,
                severity,
                shift_kind: row.shift_kind.clone(),
                shift_param: round_sig6(row.shift_param),
                seed: row.seed,
                accuracy: round_sig6(row.accuracy),
                delta_vs_source: round_sig6(row.delta_vs_source),
                per_class_acc: row.per_class.iter().map(|a| a.map(round_sig6)).collect(),
            }
        })
        .collect();
    serde_json::to_string_pretty(&JsonReport { class_count: report.class_count, rows })
        .map_err(|e| Error::Malformed(format!("report serialization failed: {e}")))
}

pub fn parse_json(text: &str) -> Result<EvalReport> {
    let parsed: JsonReport = serde_json::from_str(text)
        .map_err(|e| Error::Malformed(format!("bad JSON report: {e}")))?;
    let mut rows = Vec::with_capacity(parsed.rows.len());
    for (idx, row) in parsed.rows.iter().enumerate() {
        let line = idx + 1;
        if row.per_class_acc.len() != parsed.class_count {
            return Err(Error::Malformed(format!(
                "report row {line}: {} per-class entries, expected {}",
                row.per_class_acc.len(),
                parsed.class_count
            )));
        }
        let method = MethodId::parse(&row.method)
            .map_err(|e| Error::Malformed(format!("report row {line}: {e}")))?;
        let corruption = parse_corruption_cell(&row.corruption_kind, row.severity, line)?;
        validate_shift_kind(&row.shift_kind, line)?;
        rows.push(EvalRow {
            method,
            corruption,
            shift_kind: row.shift_kind.clone(),
            shift_param: row.shift_param,
            seed: row.seed,
            accuracy: row.accuracy,
            delta_vs_source: row.delta_vs_source,
            per_class: row.per_class_acc.clone(),
        });
    }
    Ok(EvalReport { class_count: parsed.class_count, rows })
}

/// Writes CSV or JSON depending on the file extension.
pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_csv(report),
        Some("json") => write_json(report)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "report path {} needs a .csv or .json extension",
                path.display()
            )))
        }
    };
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => parse_csv(&text),
        Some("json") => parse_json(&text),
        _ => Err(Error::InvalidArgument(format!(
            "report path {} needs a .csv or .json extension",
            path.display()
        ))),
    }
}

/// Mean and spread of accuracy over seeds for one (scenario, method) cell.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub method: MethodId,
    pub scenario: ScenarioKey,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: usize,
}

/// Per-cell aggregates in first-appearance order of scenario then method.
pub fn aggregate(report: &EvalReport) -> Vec<AggregateRow> {
    let mut order: Vec<(ScenarioKey, MethodId)> = Vec::new();
    let mut cells: std::collections::HashMap<(ScenarioKey, String), Vec<f64>> =
        std::collections::HashMap::new();
    for row in &report.rows {
        let key = (ScenarioKey::of(row), row.method);
        let slot = (key.0.clone(), row.method.to_string());
        if !cells.contains_key(&slot) {
            order.push(key);
        }
        cells.entry(slot).or_default().push(row.accuracy);
    }
    order
        .into_iter()
        .map(|(scenario, method)| {
            let accs = &cells[&(scenario.clone(), method.to_string())];
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let std = if accs.len() < 2 {
                0.0
            } else {
                (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            AggregateRow { method, scenario, mean_accuracy: mean, std_accuracy: std, seeds: accs.len() }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RankRow {
    pub method: MethodId,
    pub median_rank: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RankTable {
    pub scenario_count: usize,
    /// Sorted by median rank ascending, ties by mean accuracy descending.
    pub rows: Vec<RankRow>,
}

/// Ranks methods within each scenario by mean accuracy over seeds (rank 1 is
/// best, ties get the average of the ranks they span), then reports each
/// method's median rank across scenarios.
pub fn median_rank(report: &EvalReport) -> Result<RankTable> {
    if report.rows.is_empty() {
        return Err(Error::InvalidArgument("report has no rows to rank".into()));
    }
    let mut scenarios: Vec<ScenarioKey> = Vec::new();
    let mut methods: Vec<MethodId> = Vec::new();
    for row in &report.rows {
        let key = ScenarioKey::of(row);
        if !scenarios.contains(&key) {
            scenarios.push(key);
        }
        if !methods.contains(&row.method) {
            methods.push(row.method);
        }
    }

    let mut ranks: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    let mut acc_sums = vec![0.0f64; methods.len()];
    let mut acc_counts = vec![0usize; methods.len()];
    for scenario in &scenarios {
        let mut means = Vec::with_capacity(methods.len());
        for (m, method) in methods.iter().enumerate() {
            let accs: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.method == *method && ScenarioKey::of(r) == *scenario)
                .map(|r| r.accuracy)
                .collect();
            if accs.is_empty() {
                return Err(Error::Malformed(format!(
                    "report is missing method '{method}' in scenario ({})",
                    scenario.describe()
                )));
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            acc_sums[m] += mean;
            acc_counts[m] += 1;
            means.push((m, mean));
        }
        means.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        // Average ranks over tie groups: methods with equal means share the
        // mean of the positions they occupy.
        let mut i = 0;
        while i < means.len() {
            let mut j = i;
            while j + 1 < means.len() && means[j + 1].1 == means[i].1 {
                j += 1;
            }
            let shared = (i + 1 + j + 1) as f64 / 2.0;
            for entry in &means[i..=j] {
                ranks[entry.0].push(shared);
            }
            i = j + 1;
        }
    }

    let mut rows: Vec<RankRow> = methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let mut rs = ranks[m].clone();
            rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if rs.len() % 2 == 1 {
                rs[rs.len() / 2]
            } else {
                (rs[rs.len() / 2 - 1] + rs[rs.len() / 2]) / 2.0
            };
            RankRow { method: *method, median_rank: med, mean_accuracy: acc_sums[m] / acc_counts[m] as f64 }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.median_rank
            .partial_cmp(&b.median_rank)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.mean_accuracy.partial_cmp(&a.mean_accuracy).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(RankTable { scenario_count: scenarios.len(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(
        method: MethodId,
        corruption: Option<CorruptionSpec>,
        shift: (&str, f64),
        seed: u64,
        accuracy: f64,
        delta: f64,
        per_class: Vec<Option<f64>>,
    ) -> EvalRow {
        EvalRow {
            method,
            corruption,
            shift_kind: shift.0.to_string(),
            shift_param: shift.1,
            seed,
            accuracy,
            delta_vs_source: delta,
            per_class,
        }
    }

    fn sample_report() -> EvalReport {
        let gauss3 = Some(CorruptionSpec::new(CorruptionKind::GaussianNoise, 3).unwrap());
        EvalReport {
            class_count: 3,
            rows: vec![
                row(MethodId::Source, None, ("nclass", 3.0), 0, 0.9375, 0.0, vec![Some(1.0), Some(0.875), Some(0.9375)]),
                row(MethodId::Ttn, None, ("nclass", 3.0), 0, 0.875, -0.0625, vec![Some(0.875), Some(0.875), None]),
                row(MethodId::Source, gauss3, ("dirichlet", 0.5), 1, 0.5, 0.0, vec![Some(0.5), None, Some(0.5)]),
                row(MethodId::Ttn, gauss3, ("dirichlet", 0.5), 1, 0.75, 0.25, vec![Some(0.75), None, Some(0.75)]),
            ],
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.875), "0.875");
        assert_eq!(format_sig6(0.12345678), "0.123457");
        assert_eq!(format_sig6(-0.12345678), "-0.123457");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(123.456789), "123.457");
        assert_eq!(round_sig6(0.12345678), 0.123457);
        // Rounding is idempotent: a round-tripped value formats identically.
        let x = 0.8366666666666667;
        assert_eq!(format_sig6(round_sig6(x)), format_sig6(x));
    }

    #[test]
    fn csv_round_trip() {
        let report = sample_report();
        let text = write_csv(&report);
        let back = parse_csv(&text).unwrap();
        assert_eq!(back, report);
        assert!(text.starts_with("method,corruption_kind,severity,shift_kind,shift_param,seed,accuracy,delta_vs_source,per_class_acc_0,per_class_acc_1,per_class_acc_2\n"));
        // Absent class cells stay empty, not zero.
        assert!(text.lines().nth(2).unwrap().ends_with(","));
    }

    #[test]
    fn json_round_trip_and_cross_format() {
        let report = sample_report();
        let json = write_json(&report).unwrap();
        let back = parse_json(&json).unwrap();
        assert_eq!(back, report);
        // JSON -> CSV -> JSON preserves every value.
        let csv_back = parse_csv(&write_csv(&back)).unwrap();
        assert_eq!(write_json(&csv_back).unwrap(), json);
    }

    #[test]
    fn empty_report_serializes_as_header_only() {
        let report = EvalReport { class_count: 2, rows: Vec::new() };
        let text = write_csv(&report);
        assert_eq!(text.lines().count(), 1);
        let back = parse_csv(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_rejects_damage() {
        let report = sample_report();
        let text = write_csv(&report);
        // Wrong header.
        let swapped = text.replacen("method,", "methods,", 1);
        assert!(parse_csv(&swapped).is_err());
        // Field count mismatch.
        let mut lines: Vec<&str> = text.lines().collect();
        let short = lines[1].rsplit_once(',').unwrap().0.to_string();
        lines[1] = &short;
        assert!(parse_csv(&lines.join("\n")).is_err());
        // Unknown method.
        let bad_method = text.replacen("ttn,", "ttt,", 1);
        assert!(parse_csv(&bad_method).is_err());
        // Severity outside 1..=5 for a real corruption.
        let bad_sev = text.replacen("gaussian_noise,3", "gaussian_noise,9", 1);
        assert!(parse_csv(&bad_sev).is_err());
    }

    #[test]
    fn delta_arithmetic_survives_round_trip() {
        // Accuracies are multiples of 1/64 here, as in real 64-sample
        // batches; after rounding to 6 significant digits the delta column
        // still equals the difference of the accuracy columns.
        let source_acc = 53.0 / 64.0;
        let ttn_acc = 61.0 / 64.0;
        let report = EvalReport {
            class_count: 2,
            rows: vec![
                row(MethodId::Source, None, ("nclass", 2.0), 0, source_acc, 0.0, vec![Some(0.8), Some(0.85)]),
                row(MethodId::Ttn, None, ("nclass", 2.0), 0, ttn_acc, ttn_acc - source_acc, vec![Some(0.9), Some(1.0)]),
            ],
        };
        let back = parse_csv(&write_csv(&report)).unwrap();
        let src = &back.rows[0];
        let ttn = &back.rows[1];
        assert_eq!(src.delta_vs_source, 0.0);
        assert!((ttn.delta_vs_source - (ttn.accuracy - src.accuracy)).abs() < 1e-9);
    }

    #[test]
    fn median_rank_two_scenarios_with_tie() {
        // Accuracies per scenario: s1 (A 0.9, B 0.8, C 0.8), s2 (A 0.7,
        // B 0.9, C 0.5). Scenario ranks: s1 (1, 2.5, 2.5) with B and C
        // sharing 2nd/3rd, s2 (2, 1, 3). With an even scenario count the
        // median is the mean of the middle two, so A (1+2)/2 = 1.5,
        // B (1+2.5)/2 = 1.75, C (2.5+3)/2 = 2.75.
        let mk = |method, scenario: u64, acc: f64| {
            row(method, None, ("nclass", scenario as f64), 0, acc, 0.0, vec![None, None])
        };
        let report = EvalReport {
            class_count: 2,
            rows: vec![
                mk(MethodId::Source, 1, 0.9),
                mk(MethodId::Ttn, 1, 0.8),
                mk(MethodId::HybridTtn, 1, 0.8),
                mk(MethodId::Source, 2, 0.7),
                mk(MethodId::Ttn, 2, 0.9),
                mk(MethodId::HybridTtn, 2, 0.5),
            ],
        };
        let table = median_rank(&report).unwrap();
        let by_method: std::collections::HashMap<String, f64> =
            table.rows.iter().map(|r| (r.method.to_string(), r.median_rank)).collect();
        assert_eq!(by_method["source"], 1.5);
        assert_eq!(by_method["ttn"], 1.75);
        assert_eq!(by_method["hybrid_ttn"], 2.75);
    }

    #[test]
    fn median_rank_single_and_dominant() {
        let mk = |method, scenario: u64, acc: f64| {
            row(method, None, ("nclass", scenario as f64), 0, acc, 0.0, vec![None, None])
        };
        let solo = EvalReport { class_count: 2, rows: vec![mk(MethodId::Ttn, 1, 0.5), mk(MethodId::Ttn, 2, 0.6)] };
        let table = median_rank(&solo).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].median_rank, 1.0);

        let mut rows = Vec::new();
        for s in 1..=3u64 {
            rows.push(mk(MethodId::Source, s, 0.9));
            rows.push(mk(MethodId::Ttn, s, 0.4));
        }
        let table = median_rank(&EvalReport { class_count: 2, rows }).unwrap();
        assert_eq!(table.rows[0].method, MethodId::Source);
        assert_eq!(table.rows[0].median_rank, 1.0);
        assert_eq!(table.rows[1].median_rank, 2.0);
    }

    #[test]
    fn ranks_invariant_under_monotone_transform() {
        let report = sample_report();
        let mut squashed = report.clone();
        for r in &mut squashed.rows {
            r.accuracy = (r.accuracy * 3.0).tanh();
        }
        let a = median_rank(&report).unwrap();
        let b = median_rank(&squashed).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.method, rb.method);
            assert_eq!(ra.median_rank, rb.median_rank);
        }
    }

    #[test]
    fn median_rank_four_scenarios() {
        // Three methods over four scenarios with mean accuracies:
        //   s1: A 0.9, B 0.8, C 0.7   -> ranks A1 B2 C3
        //   s2: A 0.5, B 0.5, C 0.4   -> A and B tie for 1st: both 1.5, C 3
        //   s3: B 0.9, A 0.8, C 0.8   -> B1, A and C tie: both 2.5
        //   s4: A 0.6, B 0.5, C 0.55  -> A1 C2 B3
        // Ranks: A [1, 1.5, 2.5, 1] median 1.25; B [2, 1.5, 1, 3] median 1.75;
        //        C [3, 3, 2.5, 2] median 2.75.
        let mk = |method, scenario: u64, acc: f64| {
            row(method, None, ("nclass", scenario as f64), 0, acc, 0.0, vec![None, None])
        };
        let report = EvalReport {
            class_count: 2,
            rows: vec![
                mk(MethodId::Source, 1, 0.9),
                mk(MethodId::Ttn, 1, 0.8),
                mk(MethodId::HybridTtn, 1, 0.7),
                mk(MethodId::Source, 2, 0.5),
                mk(MethodId::Ttn, 2, 0.5),
                mk(MethodId::HybridTtn, 2, 0.4),
                mk(MethodId::Source, 3, 0.8),
                mk(MethodId::Ttn, 3, 0.9),
                mk(MethodId::HybridTtn, 3, 0.8),
                mk(MethodId::Source, 4, 0.6),
                mk(MethodId::Ttn, 4, 0.5),
                mk(MethodId::HybridTtn, 4, 0.55),
            ],
        };
        let table = median_rank(&report).unwrap();
        assert_eq!(table.scenario_count, 4);
        let by_method: std::collections::HashMap<String, f64> =
            table.rows.iter().map(|r| (r.method.to_string(), r.median_rank)).collect();
        assert_eq!(by_method["source"], 1.25);
        assert_eq!(by_method["ttn"], 1.75);
        assert_eq!(by_method["hybrid_ttn"], 2.75);
        assert_eq!(table.rows[0].method, MethodId::Source);
    }

    #[test]
    fn median_rank_averages_seeds_first() {
        // Two seeds per cell; ranking uses the per-scenario mean, so TTN's
        // mean 0.85 beats source's 0.8 even though seed 0 went the other way.
        let report = EvalReport {
            class_count: 2,
            rows: vec![
                row(MethodId::Source, None, ("nclass", 1.0), 0, 0.9, 0.0, vec![None, None]),
                row(MethodId::Source, None, ("nclass", 1.0), 1, 0.7, 0.0, vec![None, None]),
                row(MethodId::Ttn, None, ("nclass", 1.0), 0, 0.8, -0.1, vec![None, None]),
                row(MethodId::Ttn, None, ("nclass", 1.0), 1, 0.9, 0.2, vec![None, None]),
            ],
        };
        let table = median_rank(&report).unwrap();
        assert_eq!(table.rows[0].method, MethodId::Ttn);
        assert_eq!(table.rows[0].median_rank, 1.0);
        assert_eq!(table.rows[1].median_rank, 2.0);
    }

    #[test]
    fn median_rank_missing_cell_names_coordinates() {
        let mut report = sample_report();
        report.rows.remove(3);
        let err = median_rank(&report).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ttn"), "{msg}");
        assert!(msg.contains("dirichlet"), "{msg}");
    }

    #[test]
    fn aggregate_means_and_std() {
        let report = EvalReport {
            class_count: 2,
            rows: vec![
                row(MethodId::Ttn, None, ("nclass", 1.0), 0, 0.8, 0.0, vec![None, None]),
                row(MethodId::Ttn, None, ("nclass", 1.0), 1, 0.9, 0.0, vec![None, None]),
            ],
        };
        let agg = aggregate(&report);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean_accuracy - 0.85).abs() < 1e-12);
        assert!((agg[0].std_accuracy - (0.005f64).sqrt()).abs() < 1e-12);
        assert_eq!(agg[0].seeds, 2);
    }
}
