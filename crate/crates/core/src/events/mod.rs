//! Immutable per-patient event timelines.

mod generate;
mod load;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{secs_between, Instant, Interval};
use crate::value::Value;

pub use generate::{generate_cohort, ComplianceProfile, ProfileError};
pub use load::{
    load_events, load_events_file, write_cohort_csv, write_cohort_json, EventFormat, LoadError,
    LoadOptions, LoadReport,
};

/// Concept codes that carry admission and discharge when supplied as events.
pub const ADMISSION_CONCEPT: &str = "ADMISSION";
pub const DISCHARGE_CONCEPT: &str = "DISCHARGE";

/// Declaration order is the tie-break order for identical timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Instruction,
    Performance,
    Observation,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Instruction => "instruction",
            EventKind::Performance => "performance",
            EventKind::Observation => "observation",
        }
    }
}

impl std::str::FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "instruction" => Ok(EventKind::Instruction),
            "performance" => Ok(EventKind::Performance),
            "observation" => Ok(EventKind::Observation),
            other => Err(format!("unknown event kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub patient_id: String,
    pub concept: String,
    pub kind: EventKind,
    pub timestamp: Instant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    /// Set at load time for events outside `[admission, discharge]`.
    #[serde(skip)]
    pub out_of_stay: bool,
}

impl Event {
    pub fn new(patient_id: &str, concept: &str, kind: EventKind, timestamp: Instant) -> Self {
        Self {
            patient_id: patient_id.to_string(),
            concept: concept.to_string(),
            kind,
            timestamp,
            value: None,
            out_of_stay: false,
        }
    }

    pub fn with_value(mut self, value: impl Into<Value>) -> Self {
        self.value = Some(value.into());
        self
    }

    fn dedup_key(&self) -> (String, EventKind, Instant) {
        (self.concept.clone(), self.kind, self.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    #[serde(default)]
    pub ward: String,
    pub admission: Instant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discharge: Option<Instant>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SliceError {
    #[error("EmptyWindow: window start equals its end")]
    EmptyWindow,
    #[error("window start {from} is after its end {to}")]
    Reversed { from: Instant, to: Instant },
}

impl PatientRecord {
    /// Builds a record, sorting events, dropping duplicates and flagging
    /// events outside the stay. Returns the number of duplicates dropped.
    pub fn new(
        patient_id: &str,
        ward: &str,
        admission: Instant,
        discharge: Option<Instant>,
        events: Vec<Event>,
    ) -> (Self, usize) {
        let mut seen = std::collections::HashSet::new();
        let before = events.len();
        let mut events: Vec<Event> = events
            .into_iter()
            .filter(|e| seen.insert(e.dedup_key()))
            .map(|mut e| {
                e.patient_id = patient_id.to_string();
                e
            })
            .collect();
        let dropped = before - events.len();
        events.sort_by_key(|e| (e.timestamp, e.kind));
        let mut record = Self {
            patient_id: patient_id.to_string(),
            ward: ward.to_string(),
            admission,
            discharge,
            events,
        };
        record.flag_out_of_stay();
        (record, dropped)
    }

    fn flag_out_of_stay(&mut self) {
        let (admission, discharge) = (self.admission, self.discharge);
        for e in &mut self.events {
            e.out_of_stay =
                e.timestamp < admission || discharge.is_some_and(|d| e.timestamp > d);
        }
    }

    /// The stay as a half-open interval, open-ended stays running to `until`.
    pub fn stay_until(&self, until: Instant) -> Option<Interval> {
        Interval::new(self.admission, self.discharge.unwrap_or(until)).ok()
    }

    /// Part of `window` during which the patient was in hospital.
    pub fn observed(&self, window: &Interval) -> Option<Interval> {
        self.stay_until(window.to)?.intersect(window)
    }

    pub fn observed_secs(&self, window: &Interval) -> f64 {
        self.observed(window).map_or(0.0, |iv| iv.duration_secs())
    }

    /// Length of the recorded stay, or zero for an open-ended record.
    pub fn stay_secs(&self) -> f64 {
        self.discharge
            .map_or(0.0, |d| secs_between(self.admission, d).max(0.0))
    }

    /// In-stay events, in timeline order.
    pub fn scorable(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| !e.out_of_stay)
    }

    /// In-stay events of one concept and kind inside `window`.
    pub fn matching<'a>(
        &'a self,
        concept: &'a str,
        kind: EventKind,
        window: &'a Interval,
    ) -> impl Iterator<Item = &'a Event> + 'a {
        self.scorable()
            .filter(move |e| e.kind == kind && e.concept == concept && window.contains(e.timestamp))
    }

    /// Restricts the record to `[from, to)`, clipping the stay to the window.
    pub fn slice(&self, from: Instant, to: Instant) -> Result<PatientRecord, SliceError> {
        if from == to {
            return Err(SliceError::EmptyWindow);
        }
        if from > to {
            return Err(SliceError::Reversed { from, to });
        }
        let clamp = |t: Instant| t.clamp(from, to);
        Ok(PatientRecord {
            patient_id: self.patient_id.clone(),
            ward: self.ward.clone(),
            admission: clamp(self.admission),
            discharge: Some(clamp(self.discharge.unwrap_or(to))),
            events: self
                .events
                .iter()
                .filter(|e| from <= e.timestamp && e.timestamp < to)
                .cloned()
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    /// File path or generator seed the cohort came from.
    pub provenance: String,
}

impl Cohort {
    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    /// Smallest window covering every stay and every event.
    pub fn span(&self) -> Option<Interval> {
        let from = self
            .patients
            .iter()
            .flat_map(|p| std::iter::once(p.admission).chain(p.events.first().map(|e| e.timestamp)))
            .min()?;
        let last = self
            .patients
            .iter()
            .flat_map(|p| p.discharge.into_iter().chain(p.events.last().map(|e| e.timestamp)))
            .max()
            .unwrap_or(from);
        Interval::new(from, last + chrono::Duration::seconds(1)).ok()
    }

    pub fn wards(&self) -> Vec<&str> {
        let mut wards: Vec<&str> = self.patients.iter().map(|p| p.ward.as_str()).collect();
        wards.sort_unstable();
        wards.dedup();
        wards
    }
}
