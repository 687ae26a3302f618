//! Manual-versus-automated score comparison and timing summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::time::{secs_between, Instant};

/// Largest sample for which exact permutation p-values are enumerated.
pub const MAX_EXACT_N: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// Both vectors rank identically.
    Identical,
    /// At least one vector has zero variance.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    Value { r: f64, p: Option<f64> },
    Degenerate(Degenerate),
}

impl Correlation {
    pub fn r(&self) -> Option<f64> {
        match self {
            Correlation::Value { r, .. } => Some(*r),
            Correlation::Degenerate(Degenerate::Identical) => Some(1.0),
            Correlation::Degenerate(Degenerate::Constant) => None,
        }
    }

    pub fn p(&self) -> Option<f64> {
        match self {
            Correlation::Value { p, .. } => *p,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorrelationError {
    #[error("LengthMismatch: {left} vs {right} values")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 paired values, got {0}")]
    TooShort(usize),
    #[error("non-finite score")]
    NonFinite,
}

fn check(x: &[f64], y: &[f64]) -> Result<(), CorrelationError> {
    if x.len() != y.len() {
        return Err(CorrelationError::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(CorrelationError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CorrelationError::NonFinite);
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample correlation coefficient; `None` when either vector is constant.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `r` from the t-statistic with `n - 2` degrees of
/// freedom. Needs `n >= 3`.
pub fn t_test_p(r: f64, n: usize) -> Option<f64> {
    if n < 3 {
        return None;
    }
    if r.abs() >= 1.0 {
        return Some(0.0);
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    Some((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation, CorrelationError> {
    check(x, y)?;
    Ok(match pearson_r(x, y) {
        None => Correlation::Degenerate(Degenerate::Constant),
        Some(r) => Correlation::Value { r, p: t_test_p(r, x.len()) },
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation, CorrelationError> {
    check(x, y)?;
    let (rx, ry) = (fractional_ranks(x), fractional_ranks(y));
    Ok(match pearson_r(&rx, &ry) {
        None => Correlation::Degenerate(Degenerate::Constant),
        Some(_) if rx == ry => Correlation::Degenerate(Degenerate::Identical),
        Some(r) => Correlation::Value { r, p: t_test_p(r, x.len()) },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pearson,
    Spearman,
}

/// Exact two-sided permutation p-value: the share of orderings of `y` whose
/// |r| reaches the observed |r|. `None` above [`MAX_EXACT_N`] or for
/// constant vectors.
pub fn permutation_p(x: &[f64], y: &[f64], method: Method) -> Option<f64> {
    let n = x.len();
    if n != y.len() || !(2..=MAX_EXACT_N).contains(&n) {
        return None;
    }
    let (x, mut y) = match method {
        Method::Pearson => (x.to_vec(), y.to_vec()),
        Method::Spearman => (fractional_ranks(x), fractional_ranks(y)),
    };
    let observed = pearson_r(&x, &y)?.abs();
    let tolerance = 1e-12;
    let (mut hits, mut total) = (0u64, 0u64);
    let mut count = |y: &[f64]| {
        total += 1;
        if pearson_r(&x, y).is_some_and(|r| r.abs() >= observed - tolerance) {
            hits += 1;
        }
    };
    // Heap's algorithm, iterative.
    let mut c = vec![0usize; n];
    count(&y);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                y.swap(0, i);
            } else {
                y.swap(c[i], i);
            }
            count(&y);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Some(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricVectorPair {
    pub metric: String,
    pub manual: Vec<f64>,
    pub automated: Vec<f64>,
}

/// A report cell: number, marker text, or blank.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Number(f64),
    Text(String),
    Empty,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Number(v) => write!(f, "{v:.6}"),
            Cell::Text(t) => f.write_str(t),
            Cell::Empty => Ok(()),
        }
    }
}

pub const SAME: &str = "same";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub n: usize,
    pub spearman_r: Cell,
    pub spearman_p: Cell,
    pub pearson_r: Cell,
    pub pearson_p: Cell,
    pub flag: String,
}

pub const REPORT_COLUMNS: [&str; 7] = ["metric", "n", "spearman_r", "spearman_p", "pearson_r", "pearson_p", "flag"];

impl ComparisonRow {
    fn blank(metric: &str, n: usize, flag: String) -> Self {
        Self {
            metric: metric.to_string(),
            n,
            spearman_r: Cell::Empty,
            spearman_p: Cell::Empty,
            pearson_r: Cell::Empty,
            pearson_p: Cell::Empty,
            flag,
        }
    }

    pub fn warning(metric: &str, message: &str) -> Self {
        Self::blank(metric, 0, format!("warning: {message}"))
    }

    pub fn cells(&self) -> [String; 7] {
        [
            self.metric.clone(),
            self.n.to_string(),
            self.spearman_r.to_string(),
            self.spearman_p.to_string(),
            self.pearson_r.to_string(),
            self.pearson_p.to_string(),
            self.flag.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_COLUMNS).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.cells()).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

fn p_cell(p: Option<f64>) -> Cell {
    p.map_or(Cell::Empty, Cell::Number)
}

/// One row per metric. Invalid pairs become error rows; `exact` adds
/// permutation p-values where `n` allows.
pub fn compare_pair(pair: &MetricVectorPair, exact: bool) -> ComparisonRow {
    let n = pair.manual.len();
    let (x, y) = (&pair.manual, &pair.automated);
    let (s, p) = match (spearman(x, y), pearson(x, y)) {
        (Ok(s), Ok(p)) => (s, p),
        (Err(e), _) | (_, Err(e)) => return ComparisonRow::blank(&pair.metric, n, format!("error: {e}")),
    };
    let exact_p = |m| if exact { permutation_p(x, y, m) } else { None };
    let mut row = ComparisonRow::blank(&pair.metric, n, String::new());
    match s {
        Correlation::Value { r, p } => {
            row.spearman_r = Cell::Number(r);
            row.spearman_p = p_cell(exact_p(Method::Spearman).or(p));
        }
        Correlation::Degenerate(Degenerate::Identical) => {
            row.spearman_r = Cell::Number(1.0);
            row.spearman_p = Cell::Text(SAME.into());
        }
        Correlation::Degenerate(Degenerate::Constant) => {
            row.spearman_r = Cell::Text(SAME.into());
            row.spearman_p = Cell::Text(SAME.into());
        }
    }
    match p {
        Correlation::Value { r, p } => {
            row.pearson_r = Cell::Number(r);
            row.pearson_p = p_cell(exact_p(Method::Pearson).or(p));
        }
        // Zero variance is shown as no correlation with p = 1.
        _ => {
            row.pearson_r = Cell::Number(0.0);
            row.pearson_p = Cell::Number(1.0);
        }
    }
    if x == y || matches!(s, Correlation::Degenerate(_)) {
        row.flag = SAME.into();
    }
    row
}

pub fn compare_scores(pairs: &[MetricVectorPair], exact: bool) -> ComparisonReport {
    let mut warnings = Vec::new();
    if pairs.is_empty() {
        warnings.push("no metric pairs to compare".to_string());
    }
    ComparisonReport {
        rows: pairs.iter().map(|p| compare_pair(p, exact)).collect(),
        warnings,
    }
}

/// One `(metric, patient_id, score)` observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub metric: String,
    pub patient_id: String,
    pub score: f64,
}

#[derive(Debug, Error)]
pub enum ScoreTableError {
    #[error("ParseError at {location}: {reason}")]
    Parse { location: String, reason: String },
}

/// Reads `metric,patient_id,<score>` rows, taking the score from the first
/// of `columns` present in the header.
pub fn read_score_table(source: impl Read, columns: &[&str]) -> Result<Vec<ScoreEntry>, ScoreTableError> {
    let parse_err = |location: String, reason: String| ScoreTableError::Parse { location, reason };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| parse_err("header".into(), e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let metric = find("metric").ok_or_else(|| parse_err("header".into(), "missing column `metric`".into()))?;
    let patient = find("patient_id").ok_or_else(|| parse_err("header".into(), "missing column `patient_id`".into()))?;
    let score = columns
        .iter()
        .find_map(|c| find(c))
        .ok_or_else(|| parse_err("header".into(), format!("missing score column (one of {})", columns.join(", "))))?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let location = format!("row {}", i + 2);
        let record = record.map_err(|e| parse_err(location.clone(), e.to_string()))?;
        let cell = record.get(score).unwrap_or("");
        let value: f64 = cell
            .parse()
            .map_err(|_| parse_err(location.clone(), format!("score `{cell}` is not a number")))?;
        out.push(ScoreEntry {
            metric: record.get(metric).unwrap_or("").to_string(),
            patient_id: record.get(patient).unwrap_or("").to_string(),
            score: value,
        });
    }
    Ok(out)
}

/// Joins manual and automated entries on `(metric, patient_id)`.
///
/// Metrics present on only one side, and patients scored on only one side,
/// become warning rows. With `manual_metrics_only`, automated metrics the
/// manual side never mentions are ignored silently.
pub fn pair_scores(
    manual: &[ScoreEntry],
    automated: &[ScoreEntry],
    manual_metrics_only: bool,
) -> (Vec<MetricVectorPair>, Vec<ComparisonRow>) {
    let index = |entries: &[ScoreEntry]| {
        let mut m: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for e in entries {
            m.entry(e.metric.clone()).or_default().insert(e.patient_id.clone(), e.score);
        }
        m
    };
    let (man, auto) = (index(manual), index(automated));
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    let metrics: BTreeSet<&String> = if manual_metrics_only {
        man.keys().collect()
    } else {
        man.keys().chain(auto.keys()).collect()
    };
    for metric in metrics {
        match (man.get(metric), auto.get(metric)) {
            (Some(m), Some(a)) => {
                let shared: Vec<&String> = m.keys().filter(|p| a.contains_key(*p)).collect();
                let unmatched = m.len() + a.len() - 2 * shared.len();
                if unmatched > 0 {
                    warnings.push(ComparisonRow::warning(
                        metric,
                        &format!("{unmatched} patient score(s) without a counterpart"),
                    ));
                }
                pairs.push(MetricVectorPair {
                    metric: metric.clone(),
                    manual: shared.iter().map(|p| m[*p]).collect(),
                    automated: shared.iter().map(|p| a[*p]).collect(),
                });
            }
            (Some(_), None) => warnings.push(ComparisonRow::warning(metric, "metric missing from automated scores")),
            (None, _) => warnings.push(ComparisonRow::warning(metric, "metric missing from manual scores")),
        }
    }
    (pairs, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingSummary {
    pub n: usize,
    pub durations_secs: Vec<f64>,
    pub mean_secs: Option<f64>,
    /// Sample standard deviation (`n - 1` denominator).
    pub sd_secs: Option<f64>,
    /// Least-squares slope of duration against patient order, seconds per
    /// patient.
    pub trend_secs_per_patient: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("assessment of `{patient_id}` ends before it starts")]
    EndBeforeStart { patient_id: String },
}

pub fn timing_log(entries: &[(String, Instant, Instant)]) -> Result<TimingSummary, TimingError> {
    let mut durations = Vec::with_capacity(entries.len());
    for (patient_id, start, end) in entries {
        if end < start {
            return Err(TimingError::EndBeforeStart { patient_id: patient_id.clone() });
        }
        durations.push(secs_between(*start, *end));
    }
    let n = durations.len();
    let mean_secs = (n > 0).then(|| mean(&durations));
    let (sd_secs, trend) = match mean_secs {
        Some(m) if n >= 2 => {
            let var = durations.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let mx = (n - 1) as f64 / 2.0;
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (i, d) in durations.iter().enumerate() {
                let dx = i as f64 - mx;
                sxy += dx * (d - m);
                sxx += dx * dx;
            }
            (Some(var.sqrt()), Some(sxy / sxx))
        }
        _ => (None, None),
    };
    Ok(TimingSummary {
        n,
        durations_secs: durations,
        mean_secs,
        sd_secs,
        trend_secs_per_patient: trend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn pearson_perfect_and_anti() {
        let x = [0.1, 0.5, 0.9];
        match pearson(&x, &x).unwrap() {
            Correlation::Value { r, p } => {
                assert!((r - 1.0).abs() < 1e-12);
                assert!(p.unwrap() < 1e-6);
            }
            other => panic!("{other:?}"),
        }
        let r = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().r().unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vector_is_degenerate() {
        let c = pearson(&[0.5, 0.5, 0.5], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(c, Correlation::Degenerate(Degenerate::Constant));
        let row = compare_pair(
            &MetricVectorPair {
                metric: "m".into(),
                manual: vec![0.5; 3],
                automated: vec![0.1, 0.2, 0.3],
            },
            false,
        );
        assert_eq!((row.pearson_r, row.pearson_p), (Cell::Number(0.0), Cell::Number(1.0)));
        assert_eq!(row.flag, SAME);
    }

    #[test]
    fn spearman_hand_examples() {
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap().r().unwrap();
        assert!((r - 0.6).abs() < 1e-12);
        assert_eq!(fractional_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(fractional_ranks(&[1.0, 2.0, 2.0]), vec![1.0, 2.5, 2.5]);
        // Centred ranks (-0.5,-0.5,1) and (-1,0.5,0.5): 0.75 / sqrt(1.5 * 1.5).
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0]).unwrap().r().unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_vectors_flag_same() {
        let v = vec![0.2, 0.9, 0.4, 0.7];
        let report = compare_scores(
            &[MetricVectorPair {
                metric: "diet".into(),
                manual: v.clone(),
                automated: v,
            }],
            false,
        );
        assert_eq!(report.rows[0].flag, SAME);
        assert_eq!(report.rows[0].spearman_p, Cell::Text(SAME.into()));
        assert!(compare_scores(&[], false).warnings.len() == 1);
    }

    #[test]
    fn length_mismatch_is_an_error_row() {
        let row = compare_pair(
            &MetricVectorPair {
                metric: "m".into(),
                manual: vec![1.0, 2.0],
                automated: vec![1.0],
            },
            false,
        );
        assert!(row.flag.starts_with("error: LengthMismatch"));
    }

    #[test]
    fn p_values_fall_with_r() {
        let ps: Vec<f64> = [0.0, 0.2, 0.5, 0.8, 0.99].iter().map(|r| t_test_p(*r, 10).unwrap()).collect();
        assert!(ps.windows(2).all(|w| w[1] < w[0]));
        assert!((ps[0] - 1.0).abs() < 1e-12);
        assert_eq!(t_test_p(0.5, 2), None);
    }

    #[test]
    fn permutation_p_small_case() {
        // n = 3, perfect order: 2 of 6 orderings reach |r| = 1.
        let p = permutation_p(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], Method::Pearson).unwrap();
        assert!((p - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(permutation_p(&[1.0; 11], &[1.0; 11], Method::Pearson), None);
    }

    #[test]
    fn timing_examples() {
        let t0 = chrono::Utc.with_ymd_and_hms(2017, 1, 1, 8, 0, 0).unwrap();
        let log = |ds: &[i64]| -> Vec<(String, Instant, Instant)> {
            ds.iter()
                .enumerate()
                .map(|(i, d)| (format!("p{i}"), t0, t0 + chrono::Duration::seconds(*d)))
                .collect()
        };
        let s = timing_log(&log(&[600, 600, 600])).unwrap();
        assert_eq!((s.mean_secs, s.sd_secs), (Some(600.0), Some(0.0)));
        let s = timing_log(&log(&[500, 700])).unwrap();
        assert_eq!(s.mean_secs, Some(600.0));
        assert!((s.sd_secs.unwrap() - 141.4213562373095).abs() < 1e-9);
        let s = timing_log(&log(&[900, 700, 650, 400])).unwrap();
        assert!(s.trend_secs_per_patient.unwrap() < 0.0);
        let bad = vec![("p".to_string(), t0, t0 - chrono::Duration::seconds(1))];
        assert!(timing_log(&bad).is_err());
    }

    #[test]
    fn pairing_warns_on_mismatch() {
        let e = |m: &str, p: &str, s: f64| ScoreEntry {
            metric: m.into(),
            patient_id: p.into(),
            score: s,
        };
        let manual = [e("a", "1", 0.5), e("a", "2", 0.7), e("b", "1", 1.0)];
        let auto = [e("a", "1", 0.4), e("a", "2", 0.9), e("c", "1", 1.0)];
        let (pairs, warnings) = pair_scores(&manual, &auto, false);
        assert_eq!(pairs.len(), 1);
        assert_eq!(warnings.len(), 2);
    }
}
