//! Filtered scoring over a loaded snapshot. The CLI and the HTTP service both
//! go through [`Snapshot`] and [`to_json`], so identical filters render
//! byte-identical JSON.

use std::borrow::Cow;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use qa_core::aggregation::{compare_cohorts, group_tree, score_patient, DiffRow, Granularity};
use qa_core::eval::ScoreEntry;
use qa_core::events::{load_events, load_events_file, Cohort, EventFormat, LoadError, LoadOptions, LoadReport, ProfileError};
use qa_core::protocol::{parse_protocol_file, Protocol, ProtocolError};
use qa_core::time::{format_instant, parse_instant, Instant, Interval};
use qa_core::{PatientRecord, ScoreNode};

/// Errors in the files a command was given. All map to exit status 2.
#[derive(Debug, Error)]
pub enum InputError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("IoError reading {path}: {message}")]
    Io { path: String, message: String },
}

impl InputError {
    /// Machine-readable error name, the first word of the message.
    pub fn kind(&self) -> String {
        match self {
            InputError::Protocol(e) => e.kind().to_string(),
            InputError::Query(e) => e.error.clone(),
            other => leading_word(&other.to_string()),
        }
    }
}

fn leading_word(message: &str) -> String {
    message
        .split(|c: char| !c.is_ascii_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string()
}

/// A rejected query. Serialises as the `{error, path, detail}` error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[error("{error} at {path}: {detail}")]
pub struct QueryError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    pub path: String,
    pub detail: String,
}

impl QueryError {
    pub fn bad_filter(path: &str, detail: impl Into<String>) -> Self {
        Self {
            status: 400,
            error: "BadFilter".into(),
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn unknown(path: &str, detail: impl Into<String>) -> Self {
        Self {
            status: 404,
            error: "UnknownId".into(),
            path: path.into(),
            detail: detail.into(),
        }
    }
}

/// Date range, population and stage selection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryFilter {
    pub from: Option<Instant>,
    pub to: Option<Instant>,
    pub wards: Vec<String>,
    pub patients: Vec<String>,
    pub stage: Option<String>,
    pub granularity: Granularity,
    /// Prefix of the `from`/`to` parameters, for error paths.
    pub prefix: String,
}

pub fn parse_time(param: &str, value: &str) -> Result<Instant, QueryError> {
    parse_instant(value).map_err(|_| QueryError::bad_filter(param, format!("`{value}` is not an ISO-8601 timestamp")))
}

impl QueryFilter {
    /// Builds a filter from query parameters. `prefix` selects e.g. the
    /// `frameA_` variants of `from`/`to`; other keys outside `extra` are
    /// rejected.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (Cow<'a, str>, Cow<'a, str>)>,
        prefix: &str,
        extra: &[&str],
    ) -> Result<Self, QueryError> {
        let mut f = QueryFilter {
            prefix: prefix.to_string(),
            ..QueryFilter::default()
        };
        for (key, value) in pairs {
            let key = key.as_ref();
            match key.strip_prefix(prefix) {
                Some("from") => f.from = Some(parse_time(key, &value)?),
                Some("to") => f.to = Some(parse_time(key, &value)?),
                _ => match key {
                    "ward" => f.wards.push(value.into_owned()),
                    "patient" => f.patients.push(value.into_owned()),
                    "stage" => f.stage = Some(value.into_owned()),
                    "granularity" => {
                        f.granularity = value.parse().map_err(|e: String| QueryError::bad_filter(key, e))?
                    }
                    k if extra.contains(&k) => {}
                    k => return Err(QueryError::bad_filter(k, format!("unknown parameter `{k}`"))),
                },
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sources {
    pub protocol: PathBuf,
    pub events: PathBuf,
}

/// Protocol and cohort loaded together; immutable once built.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub protocol: Protocol,
    pub cohort: Cohort,
    pub report: LoadReport,
}

/// Reads events from a file, or CSV from stdin when the path is `-`.
pub fn load_cohort(path: &std::path::Path) -> Result<(Cohort, LoadReport), InputError> {
    if path.as_os_str() == "-" {
        return Ok(load_events(std::io::stdin().lock(), EventFormat::Csv, "stdin", LoadOptions::default())?);
    }
    Ok(load_events_file(path, LoadOptions::default())?)
}

#[derive(Debug, Clone, Serialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub ward: String,
    pub admission: String,
    pub discharge: Option<String>,
    pub events: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActionSummary {
    pub id: String,
    pub name: String,
    pub concept: String,
    pub weight: f64,
    pub constraint: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub id: String,
    pub name: String,
    pub weight: f64,
    pub entry_condition: Option<String>,
    pub actions: Vec<ActionSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolSummary {
    pub id: String,
    pub name: String,
    pub version: String,
    pub stages: Vec<StageSummary>,
    pub patients: usize,
    pub events: usize,
    pub from: Option<String>,
    pub to: Option<String>,
}

/// One `(patient, action)` line of the flat report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub patient_id: String,
    pub ward: String,
    pub stage_id: String,
    pub action_id: String,
    pub weight: f64,
    pub value: Option<f64>,
    pub percent: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameLabel {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub frame_a: FrameLabel,
    pub frame_b: FrameLabel,
    pub rows: Vec<DiffRow>,
}

/// Scores each record over `frame`, spreading patients over the available
/// cores. Output order follows `records`.
pub fn score_all(records: &[&PatientRecord], protocol: &Protocol, frame: &Interval, granularity: Granularity) -> Vec<ScoreNode> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(records.len().max(1));
    let chunk = records.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|r| score_patient(r, protocol, frame, granularity)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("scoring thread panicked")).collect()
    })
}

impl Snapshot {
    pub fn load(sources: &Sources) -> Result<Self, InputError> {
        let protocol = parse_protocol_file(&sources.protocol)?;
        let (cohort, report) = load_cohort(&sources.events)?;
        Ok(Self { protocol, cohort, report })
    }

    pub fn new(protocol: Protocol, cohort: Cohort) -> Self {
        Self {
            protocol,
            cohort,
            report: LoadReport::default(),
        }
    }

    pub fn summary(&self) -> ProtocolSummary {
        let p = &self.protocol;
        let span = self.cohort.span();
        ProtocolSummary {
            id: p.id.clone(),
            name: p.name.clone(),
            version: p.version.clone(),
            stages: p
                .stages
                .iter()
                .map(|s| StageSummary {
                    id: s.id.clone(),
                    name: s.name.clone(),
                    weight: s.weight,
                    entry_condition: s.entry_condition.as_ref().map(ToString::to_string),
                    actions: s
                        .actions
                        .iter()
                        .map(|a| ActionSummary {
                            id: a.id.clone(),
                            name: a.name.clone(),
                            concept: a.concept.clone(),
                            weight: a.weight,
                            constraint: a.constraint.kind_name(),
                        })
                        .collect(),
                })
                .collect(),
            patients: self.cohort.patients.len(),
            events: self.cohort.patients.iter().map(|p| p.events.len()).sum(),
            from: span.map(|s| format_instant(&s.from)),
            to: span.map(|s| format_instant(&s.to)),
        }
    }

    pub fn patients(&self, wards: &[String]) -> Result<Vec<PatientSummary>, QueryError> {
        self.check_wards(wards)?;
        Ok(self
            .cohort
            .patients
            .iter()
            .filter(|p| wards.is_empty() || wards.contains(&p.ward))
            .map(|p| PatientSummary {
                patient_id: p.patient_id.clone(),
                ward: p.ward.clone(),
                admission: format_instant(&p.admission),
                discharge: p.discharge.as_ref().map(format_instant),
                events: p.events.len(),
            })
            .collect())
    }

    fn check_wards(&self, wards: &[String]) -> Result<(), QueryError> {
        let known = self.cohort.wards();
        match wards.iter().find(|w| !known.contains(&w.as_str())) {
            Some(w) => Err(QueryError::unknown("ward", format!("no patient in ward `{w}`"))),
            None => Ok(()),
        }
    }

    /// The scoring frame: the filter's range, defaulting to the cohort span.
    pub fn frame(&self, f: &QueryFilter) -> Result<Interval, QueryError> {
        let span = self.cohort.span();
        let from = f.from.or(span.map(|s| s.from));
        let to = f.to.or(span.map(|s| s.to));
        let param = format!("{}from", f.prefix);
        let (Some(from), Some(to)) = (from, to) else {
            return Err(QueryError::bad_filter(&param, "cohort is empty; give both `from` and `to`"));
        };
        Interval::new(from, to).map_err(|_| {
            QueryError::bad_filter(
                &param,
                format!("`from` ({}) must precede `to` ({})", format_instant(&from), format_instant(&to)),
            )
        })
    }

    /// Patients matching the ward and patient lists, in cohort order.
    pub fn select(&self, f: &QueryFilter) -> Result<Vec<&PatientRecord>, QueryError> {
        self.check_wards(&f.wards)?;
        if let Some(id) = f.patients.iter().find(|id| self.cohort.patient(id).is_none()) {
            return Err(QueryError::unknown("patient", format!("unknown patient `{id}`")));
        }
        if let Some(stage) = &f.stage {
            if self.protocol.stage(stage).is_none() {
                return Err(QueryError::unknown("stage", format!("unknown stage `{stage}`")));
            }
        }
        Ok(self
            .cohort
            .patients
            .iter()
            .filter(|p| f.wards.is_empty() || f.wards.contains(&p.ward))
            .filter(|p| f.patients.is_empty() || f.patients.contains(&p.patient_id))
            .collect())
    }

    fn restrict(tree: ScoreNode, stage: &Option<String>) -> ScoreNode {
        match stage {
            Some(id) => tree.children.into_iter().find(|c| &c.id == id).expect("stage checked in select"),
            None => tree,
        }
    }

    fn group(&self, f: &QueryFilter, frame: &Interval) -> Result<ScoreNode, QueryError> {
        let records = self.select(f)?;
        let trees = score_all(&records, &self.protocol, frame, f.granularity);
        let entries: Vec<(&str, &ScoreNode)> = records.iter().map(|r| r.patient_id.as_str()).zip(&trees).collect();
        Ok(group_tree(&self.protocol, frame, &self.protocol.name, &entries))
    }

    /// Patient-averaged score tree, or the selected stage's subtree.
    pub fn score(&self, f: &QueryFilter) -> Result<ScoreNode, QueryError> {
        let frame = self.frame(f)?;
        Ok(Self::restrict(self.group(f, &frame)?, &f.stage))
    }

    /// One patient's tree over the frame.
    pub fn patient_tree(&self, patient_id: &str, f: &QueryFilter) -> Result<ScoreNode, QueryError> {
        let record = self
            .cohort
            .patient(patient_id)
            .ok_or_else(|| QueryError::unknown("patient_id", format!("unknown patient `{patient_id}`")))?;
        let single = QueryFilter {
            patients: vec![patient_id.to_string()],
            wards: Vec::new(),
            ..f.clone()
        };
        self.select(&single)?;
        let frame = self.frame(f)?;
        Ok(Self::restrict(score_patient(record, &self.protocol, &frame, f.granularity), &f.stage))
    }

    /// Node-aligned difference between the same population over two frames.
    pub fn compare(&self, a: &QueryFilter, b: &QueryFilter) -> Result<CompareReport, QueryError> {
        let (fa, fb) = (self.frame(a)?, self.frame(b)?);
        let (ta, tb) = (self.score(a)?, self.score(b)?);
        let rows = compare_cohorts(&ta, &tb).map_err(|e| QueryError::bad_filter("stage", e.to_string()))?;
        let label = |i: Interval| FrameLabel {
            from: format_instant(&i.from),
            to: format_instant(&i.to),
        };
        Ok(CompareReport {
            frame_a: label(fa),
            frame_b: label(fb),
            rows,
        })
    }

    /// Per-patient trees for the selection, paired with their records.
    fn patient_trees(&self, f: &QueryFilter) -> Result<Vec<(&PatientRecord, ScoreNode)>, QueryError> {
        let frame = self.frame(f)?;
        let records = self.select(f)?;
        let trees = score_all(&records, &self.protocol, &frame, f.granularity);
        Ok(records.into_iter().zip(trees).collect())
    }

    /// One row per selected patient and action.
    pub fn score_rows(&self, f: &QueryFilter) -> Result<Vec<ScoreRow>, QueryError> {
        let mut rows = Vec::new();
        for (record, tree) in self.patient_trees(f)? {
            for stage in &tree.children {
                if f.stage.as_ref().is_some_and(|s| s != &stage.id) {
                    continue;
                }
                for action in &stage.children {
                    rows.push(ScoreRow {
                        patient_id: record.patient_id.clone(),
                        ward: record.ward.clone(),
                        stage_id: stage.id.clone(),
                        action_id: action.id.clone(),
                        weight: action.weight,
                        value: action.value,
                        percent: action.percent,
                    });
                }
            }
        }
        Ok(rows)
    }

    /// Defined action scores as `stage/action` metrics, for comparison with
    /// manual assessments.
    pub fn automated_scores(&self, f: &QueryFilter) -> Result<Vec<ScoreEntry>, QueryError> {
        Ok(self
            .score_rows(f)?
            .into_iter()
            .filter_map(|r| {
                r.value.map(|score| ScoreEntry {
                    metric: format!("{}/{}", r.stage_id, r.action_id),
                    patient_id: r.patient_id,
                    score,
                })
            })
            .collect())
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

pub fn rows_to_csv(rows: &[ScoreRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["patient_id", "ward", "stage_id", "action_id", "weight", "value", "percent"])
            .expect("in-memory write");
    }
    for row in rows {
        w.serialize(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
