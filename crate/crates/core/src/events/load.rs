//! CSV and JSON event ingestion and serialisation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Cohort, Event, EventKind, PatientRecord, ADMISSION_CONCEPT, DISCHARGE_CONCEPT};
use crate::time::{format_instant, parse_instant, Instant};
use crate::value::Value;

pub const CSV_HEADER: [&str; 6] = ["patient_id", "ward", "concept", "kind", "timestamp", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Json,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(EventFormat::Csv),
            "json" => Some(EventFormat::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject patients without an admission record instead of inferring it.
    pub strict: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub patients: usize,
    pub events: usize,
    pub duplicates_dropped: usize,
    pub out_of_stay: usize,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("IoError reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("ParseError at {location}: {reason}")]
    Parse { location: String, reason: String },
    #[error("TimestampError at {location}: cannot parse `{value}` as ISO-8601")]
    Timestamp { location: String, value: String },
    #[error("UnknownPatient: patient `{patient_id}` has events but no admission record")]
    UnknownPatient { patient_id: String },
    #[error("ValidationError: patient `{patient_id}` is discharged before admission")]
    InvalidStay { patient_id: String },
}

#[derive(Default)]
struct PatientBuilder {
    ward: String,
    admission: Option<Instant>,
    discharge: Option<Instant>,
    events: Vec<Event>,
}

impl PatientBuilder {
    fn absorb(&mut self, event: Event) {
        match event.concept.as_str() {
            ADMISSION_CONCEPT => {
                self.admission = Some(self.admission.map_or(event.timestamp, |a| a.min(event.timestamp)))
            }
            DISCHARGE_CONCEPT => {
                self.discharge = Some(self.discharge.map_or(event.timestamp, |d| d.max(event.timestamp)))
            }
            _ => self.events.push(event),
        }
    }
}

#[derive(Default)]
struct CohortBuilder {
    order: Vec<String>,
    patients: HashMap<String, PatientBuilder>,
    rows: usize,
}

impl CohortBuilder {
    fn patient(&mut self, id: &str) -> &mut PatientBuilder {
        if !self.patients.contains_key(id) {
            self.order.push(id.to_string());
        }
        self.patients.entry(id.to_string()).or_default()
    }

    fn finish(mut self, provenance: String, opts: LoadOptions) -> Result<(Cohort, LoadReport), LoadError> {
        let mut report = LoadReport {
            rows: self.rows,
            ..LoadReport::default()
        };
        let mut patients = Vec::with_capacity(self.order.len());
        for id in self.order {
            let b = self.patients.remove(&id).expect("builder exists");
            let admission = match b.admission {
                Some(a) => a,
                None if opts.strict => return Err(LoadError::UnknownPatient { patient_id: id }),
                None => match b.events.iter().map(|e| e.timestamp).min() {
                    Some(first) => first,
                    None => return Err(LoadError::UnknownPatient { patient_id: id }),
                },
            };
            if b.discharge.is_some_and(|d| d < admission) {
                return Err(LoadError::InvalidStay { patient_id: id });
            }
            let (record, dropped) = PatientRecord::new(&id, &b.ward, admission, b.discharge, b.events);
            report.duplicates_dropped += dropped;
            report.events += record.events.len();
            report.out_of_stay += record.events.iter().filter(|e| e.out_of_stay).count();
            patients.push(record);
        }
        report.patients = patients.len();
        Ok((Cohort { patients, provenance }, report))
    }
}

/// Loads a cohort from CSV or JSON text.
pub fn load_events(
    source: impl Read,
    format: EventFormat,
    provenance: &str,
    opts: LoadOptions,
) -> Result<(Cohort, LoadReport), LoadError> {
    let builder = match format {
        EventFormat::Csv => read_csv(source)?,
        EventFormat::Json => read_json(source)?,
    };
    builder.finish(provenance.to_string(), opts)
}

/// Loads a cohort from a `.csv` or `.json` file.
pub fn load_events_file(
    path: impl AsRef<Path>,
    opts: LoadOptions,
) -> Result<(Cohort, LoadReport), LoadError> {
    let path = path.as_ref();
    let io_err = |message: String| LoadError::Io {
        path: path.display().to_string(),
        message,
    };
    let format = EventFormat::from_path(path)
        .ok_or_else(|| io_err("expected a .csv or .json extension".into()))?;
    let file = std::fs::File::open(path).map_err(|e| io_err(e.to_string()))?;
    load_events(std::io::BufReader::new(file), format, &path.display().to_string(), opts)
}

fn read_csv(source: impl Read) -> Result<CohortBuilder, LoadError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| LoadError::Parse {
            location: "header".into(),
            reason: e.to_string(),
        })?
        .clone();
    let mut index = [0usize; 6];
    for (slot, name) in index.iter_mut().zip(CSV_HEADER) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| LoadError::Parse {
            location: "header".into(),
            reason: format!("missing column `{name}`"),
        })?;
    }
    let mut builder = CohortBuilder::default();
    for (i, record) in reader.records().enumerate() {
        // Line 1 is the header.
        let location = format!("row {}", i + 2);
        let record = record.map_err(|e| LoadError::Parse {
            location: location.clone(),
            reason: e.to_string(),
        })?;
        let field = |k: usize| record.get(index[k]).unwrap_or("");
        let patient_id = field(0);
        if patient_id.is_empty() {
            return Err(LoadError::Parse {
                location,
                reason: "empty patient_id".into(),
            });
        }
        let event = parse_event(patient_id, field(2), field(3), field(4), field(5), &location)?;
        builder.rows += 1;
        let ward = field(1);
        let p = builder.patient(patient_id);
        if p.ward.is_empty() && !ward.is_empty() {
            p.ward = ward.to_string();
        }
        p.absorb(event);
    }
    Ok(builder)
}

fn parse_event(
    patient_id: &str,
    concept: &str,
    kind: &str,
    timestamp: &str,
    value: &str,
    location: &str,
) -> Result<Event, LoadError> {
    if concept.is_empty() {
        return Err(LoadError::Parse {
            location: location.to_string(),
            reason: "empty concept".into(),
        });
    }
    let special = concept == ADMISSION_CONCEPT || concept == DISCHARGE_CONCEPT;
    let kind = if special && kind.is_empty() {
        EventKind::Observation
    } else {
        kind.parse::<EventKind>().map_err(|reason| LoadError::Parse {
            location: location.to_string(),
            reason,
        })?
    };
    let timestamp = parse_instant(timestamp).map_err(|_| LoadError::Timestamp {
        location: location.to_string(),
        value: timestamp.to_string(),
    })?;
    Ok(Event {
        patient_id: patient_id.to_string(),
        concept: concept.to_string(),
        kind,
        timestamp,
        value: Value::parse_cell(value),
        out_of_stay: false,
    })
}

#[derive(Deserialize)]
struct PatientDoc {
    patient_id: String,
    #[serde(default)]
    ward: String,
    #[serde(default)]
    admission: Option<String>,
    #[serde(default)]
    discharge: Option<String>,
    #[serde(default)]
    events: Vec<EventDoc>,
}

#[derive(Deserialize)]
struct EventDoc {
    concept: String,
    #[serde(default)]
    kind: Option<String>,
    timestamp: String,
    #[serde(default)]
    value: Option<Value>,
}

fn read_json(mut source: impl Read) -> Result<CohortBuilder, LoadError> {
    let mut text = String::new();
    source.read_to_string(&mut text).map_err(|e| LoadError::Io {
        path: "<input>".into(),
        message: e.to_string(),
    })?;
    let docs: Vec<PatientDoc> = serde_json::from_str(&text).map_err(|e| LoadError::Parse {
        location: format!("line {}, column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let mut builder = CohortBuilder::default();
    for (pi, doc) in docs.into_iter().enumerate() {
        let stamp = |s: &str, what: &str| {
            parse_instant(s).map_err(|_| LoadError::Timestamp {
                location: format!("patients[{pi}].{what}"),
                value: s.to_string(),
            })
        };
        let admission = doc.admission.as_deref().map(|s| stamp(s, "admission")).transpose()?;
        let discharge = doc.discharge.as_deref().map(|s| stamp(s, "discharge")).transpose()?;
        let mut events = Vec::with_capacity(doc.events.len());
        for (ei, e) in doc.events.iter().enumerate() {
            let location = format!("patients[{pi}].events[{ei}]");
            let mut event = parse_event(
                &doc.patient_id,
                &e.concept,
                e.kind.as_deref().unwrap_or(""),
                &e.timestamp,
                "",
                &location,
            )?;
            event.value = e.value.clone();
            events.push(event);
        }
        builder.rows += events.len();
        let p = builder.patient(&doc.patient_id);
        if p.ward.is_empty() {
            p.ward = doc.ward;
        }
        if let Some(a) = admission {
            p.admission = Some(p.admission.map_or(a, |x| x.min(a)));
        }
        if let Some(d) = discharge {
            p.discharge = Some(p.discharge.map_or(d, |x| x.max(d)));
        }
        for e in events {
            p.absorb(e);
        }
    }
    Ok(builder)
}

fn value_cell(v: &Option<Value>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes the cohort as event CSV, with admission and discharge as events.
pub fn write_cohort_csv(cohort: &Cohort, out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for p in &cohort.patients {
        let row = |w: &mut csv::Writer<_>, concept: &str, kind: EventKind, t: &Instant, value: String| {
            w.write_record([
                p.patient_id.as_str(),
                p.ward.as_str(),
                concept,
                kind.as_str(),
                &format_instant(t),
                &value,
            ])
        };
        row(&mut w, ADMISSION_CONCEPT, EventKind::Observation, &p.admission, String::new())?;
        for e in &p.events {
            row(&mut w, &e.concept, e.kind, &e.timestamp, value_cell(&e.value))?;
        }
        if let Some(d) = &p.discharge {
            row(&mut w, DISCHARGE_CONCEPT, EventKind::Observation, d, String::new())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cohort_json(cohort: &Cohort, out: impl Write) -> serde_json::Result<()> {
    #[derive(Serialize)]
    struct EventOut<'a> {
        concept: &'a str,
        kind: EventKind,
        timestamp: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        value: &'a Option<Value>,
    }
    #[derive(Serialize)]
    struct PatientOut<'a> {
        patient_id: &'a str,
        ward: &'a str,
        admission: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        discharge: Option<String>,
        events: Vec<EventOut<'a>>,
    }
    let docs: Vec<PatientOut> = cohort
        .patients
        .iter()
        .map(|p| PatientOut {
            patient_id: &p.patient_id,
            ward: &p.ward,
            admission: format_instant(&p.admission),
            discharge: p.discharge.as_ref().map(format_instant),
            events: p
                .events
                .iter()
                .map(|e| EventOut {
                    concept: &e.concept,
                    kind: e.kind,
                    timestamp: format_instant(&e.timestamp),
                    value: &e.value,
                })
                .collect(),
        })
        .collect();
    serde_json::to_writer_pretty(out, &docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_csv(text: &str) -> Result<(Cohort, LoadReport), LoadError> {
        load_events(text.as_bytes(), EventFormat::Csv, "test", LoadOptions::default())
    }

    #[test]
    fn sorts_out_of_order_rows() {
        let (cohort, report) = load_csv(
            "patient_id,ward,concept,kind,timestamp,value\n\
             p1,A,PAIN,performance,2017-01-03T10:00:00Z,\n\
             p1,A,PAIN,performance,2017-01-01T10:00:00Z,\n\
             p1,A,NORTON_SCORE,observation,2017-01-02T10:00:00Z,12\n",
        )
        .unwrap();
        assert_eq!(report.rows, 3);
        let p = &cohort.patients[0];
        assert_eq!(p.events.len(), 3);
        assert!(p.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert_eq!(p.events[1].value, Some(Value::Number(12.0)));
        // Admission inferred from the earliest event outside strict mode.
        assert_eq!(p.admission, p.events[0].timestamp);
    }

    #[test]
    fn duplicate_rows_are_counted() {
        let (cohort, report) = load_csv(
            "patient_id,ward,concept,kind,timestamp,value\n\
             p1,A,PAIN,performance,2017-01-01T10:00:00Z,\n\
             p1,A,PAIN,performance,2017-01-01T10:00:00Z,\n",
        )
        .unwrap();
        assert_eq!(cohort.patients[0].events.len(), 1);
        assert_eq!(report.duplicates_dropped, 1);
    }

    #[test]
    fn admission_rows_set_the_stay() {
        let (cohort, report) = load_csv(
            "patient_id,ward,concept,kind,timestamp,value\n\
             p1,A,ADMISSION,observation,2017-01-01T00:00:00Z,\n\
             p1,A,PAIN,performance,2017-01-01T10:00:00Z,\n\
             p1,A,PAIN,performance,2017-02-01T10:00:00Z,\n\
             p1,A,DISCHARGE,observation,2017-01-10T00:00:00Z,\n",
        )
        .unwrap();
        let p = &cohort.patients[0];
        assert_eq!(p.events.len(), 2);
        assert_eq!(report.out_of_stay, 1);
        assert!(p.discharge.is_some());
    }

    #[test]
    fn strict_mode_requires_admission() {
        let err = load_events(
            "patient_id,ward,concept,kind,timestamp,value\np1,A,PAIN,performance,2017-01-01T10:00:00Z,\n"
                .as_bytes(),
            EventFormat::Csv,
            "test",
            LoadOptions { strict: true },
        )
        .unwrap_err();
        assert!(matches!(err, LoadError::UnknownPatient { .. }));
    }

    #[test]
    fn bad_timestamp_names_row() {
        let err = load_csv(
            "patient_id,ward,concept,kind,timestamp,value\np1,A,PAIN,performance,yesterday,\n",
        )
        .unwrap_err();
        match err {
            LoadError::Timestamp { location, value } => {
                assert_eq!(location, "row 2");
                assert_eq!(value, "yesterday");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_kind_is_parse_error() {
        let err = load_csv(
            "patient_id,ward,concept,kind,timestamp,value\np1,A,PAIN,done,2017-01-01T10:00:00Z,\n",
        )
        .unwrap_err();
        assert!(matches!(err, LoadError::Parse { .. }));
    }

    #[test]
    fn json_and_csv_agree() {
        let json = r#"[{"patient_id": "p1", "ward": "A",
                        "admission": "2017-01-01T00:00:00Z", "discharge": "2017-01-10T00:00:00Z",
                        "events": [{"concept": "ULCER_COLOR", "kind": "observation",
                                    "timestamp": "2017-01-02T00:00:00Z", "value": "red"}]}]"#;
        let (from_json, _) =
            load_events(json.as_bytes(), EventFormat::Json, "test", LoadOptions::default()).unwrap();
        let mut csv = Vec::new();
        write_cohort_csv(&from_json, &mut csv).unwrap();
        let (from_csv, _) = load_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
        assert_eq!(from_json.patients, from_csv.patients);
    }
}
