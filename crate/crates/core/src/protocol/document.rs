//! JSON protocol documents: parsing, validation, normalisation and the
//! reverse conversion used for re-serialisation.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    BinarySpec, Calculation, CombinationPart, CombinationSpec, ComponentKind, Concept,
    ConditionExpr, ConstraintSpec, CyclicalSpec, EntryConditionSpec, MultipleSpec, OrderSpec,
    Protocol, Reference, Stage, TimeSpec, Trapezoid,
};
use crate::events::EventKind;
use crate::protocol::ActionSpec;

/// Authored sibling weights must sum to 100 within this many percentage
/// points before they are renormalised.
pub const WEIGHT_SUM_TOLERANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("SchemaError at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("ValidationError at {path}: {message}")]
    Validation { path: String, message: String },
    #[error("UnknownConcept at {path}: concept `{concept}` is not declared")]
    UnknownConcept { path: String, concept: String },
    #[error("IoError reading {path}: {message}")]
    Io { path: String, message: String },
}

impl ProtocolError {
    /// JSON-pointer path to the offending node, when there is one.
    pub fn path(&self) -> Option<&str> {
        match self {
            ProtocolError::Validation { path, .. } | ProtocolError::UnknownConcept { path, .. } => {
                Some(path)
            }
            ProtocolError::Io { path, .. } => Some(path),
            ProtocolError::Schema { .. } => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolError::Schema { .. } => "SchemaError",
            ProtocolError::Validation { .. } => "ValidationError",
            ProtocolError::UnknownConcept { .. } => "UnknownConcept",
            ProtocolError::Io { .. } => "IoError",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolDoc {
    id: String,
    name: String,
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comment: Option<String>,
    concepts: Vec<Concept>,
    stages: Vec<StageDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDoc {
    id: String,
    name: String,
    weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entry_condition: Option<ConditionExpr>,
    actions: Vec<ActionDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionDoc {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    concept: String,
    weight: f64,
    constraint: ConstraintDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

fn default_performance() -> EventKind {
    EventKind::Performance
}

fn default_instruction() -> EventKind {
    EventKind::Instruction
}

fn is_performance(k: &EventKind) -> bool {
    *k == EventKind::Performance
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ConstraintDoc {
    Binary {
        #[serde(default = "default_performance", skip_serializing_if = "is_performance")]
        event_kind: EventKind,
    },
    Cyclical {
        expected_cardinality: u32,
        window_hours: f64,
        calculation: Calculation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trapezoid: Option<Trapezoid>,
    },
    Time {
        reference: Reference,
        trapezoid: Trapezoid,
    },
    EntryCondition {
        condition: ConditionExpr,
    },
    Order {
        must_follow: String,
        #[serde(default = "default_instruction")]
        must_follow_kind: EventKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_lag_hours: Option<f64>,
    },
    Multiple {
        conditions: Vec<ConditionExpr>,
    },
    Combination {
        parts: Vec<PartDoc>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartDoc {
    weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    component: Option<ComponentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    concept: Option<String>,
    constraint: ConstraintDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

/// Parses and validates a protocol document.
pub fn parse_protocol(source: &str) -> Result<Protocol, ProtocolError> {
    let doc: ProtocolDoc = serde_json::from_str(source).map_err(|e| ProtocolError::Schema {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Builder::new(&doc).build(&doc)
}

pub fn parse_protocol_file(path: impl AsRef<Path>) -> Result<Protocol, ProtocolError> {
    let path = path.as_ref();
    let source = std::fs::read_to_string(path).map_err(|e| ProtocolError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_protocol(&source)
}

impl Protocol {
    /// Serialises back to the document format, with authored percentages.
    pub fn to_json(&self) -> String {
        let doc = ProtocolDoc {
            id: self.id.clone(),
            name: self.name.clone(),
            version: self.version.clone(),
            comment: self.comment.clone(),
            concepts: self.concepts.clone(),
            stages: self.stages.iter().map(stage_doc).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("protocol serialises")
    }
}

fn stage_doc(s: &Stage) -> StageDoc {
    StageDoc {
        id: s.id.clone(),
        name: s.name.clone(),
        weight: s.authored_weight,
        entry_condition: s.entry_condition.clone(),
        actions: s
            .actions
            .iter()
            .map(|a| ActionDoc {
                id: a.id.clone(),
                name: (a.name != a.id).then(|| a.name.clone()),
                concept: a.concept.clone(),
                weight: a.authored_weight,
                constraint: constraint_doc(&a.constraint),
                note: a.note.clone(),
            })
            .collect(),
        note: s.note.clone(),
    }
}

fn constraint_doc(c: &ConstraintSpec) -> ConstraintDoc {
    match c {
        ConstraintSpec::Binary(b) => ConstraintDoc::Binary {
            event_kind: b.event_kind,
        },
        ConstraintSpec::Cyclical(c) => ConstraintDoc::Cyclical {
            expected_cardinality: c.expected_cardinality,
            window_hours: c.window_hours,
            calculation: c.calculation,
            trapezoid: c.trapezoid,
        },
        ConstraintSpec::Time(t) => ConstraintDoc::Time {
            reference: t.reference.clone(),
            trapezoid: t.trapezoid,
        },
        ConstraintSpec::EntryCondition(e) => ConstraintDoc::EntryCondition {
            condition: e.condition.clone(),
        },
        ConstraintSpec::Order(o) => ConstraintDoc::Order {
            must_follow: o.must_follow.clone(),
            must_follow_kind: o.must_follow_kind,
            max_lag_hours: o.max_lag_hours,
        },
        ConstraintSpec::Multiple(m) => ConstraintDoc::Multiple {
            conditions: m.conditions.clone(),
        },
        ConstraintSpec::Combination(c) => ConstraintDoc::Combination {
            parts: c
                .parts
                .iter()
                .map(|p| PartDoc {
                    weight: p.authored_weight,
                    component: p.component,
                    label: Some(p.label.clone()),
                    concept: p.concept.clone(),
                    constraint: constraint_doc(&p.constraint),
                    note: p.note.clone(),
                })
                .collect(),
        },
    }
}

struct Builder {
    concepts: HashSet<String>,
}

fn invalid(path: &str, message: impl Into<String>) -> ProtocolError {
    ProtocolError::Validation {
        path: path.to_string(),
        message: message.into(),
    }
}

fn check_id(path: &str, id: &str) -> Result<(), ProtocolError> {
    if id.trim().is_empty() {
        Err(invalid(path, "identifier must not be empty"))
    } else {
        Ok(())
    }
}

/// Validates authored percentages and returns the normalised fractions.
fn normalise(path: &str, authored: &[f64]) -> Result<Vec<f64>, ProtocolError> {
    for (i, w) in authored.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 || *w > 100.0 {
            return Err(invalid(
                &format!("{path}/{i}/weight"),
                format!("weight {w} is outside [0, 100] percent"),
            ));
        }
    }
    let total: f64 = authored.iter().sum();
    if (total - 100.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(invalid(
            path,
            format!(
                "sibling weights sum to {total}%, outside [{}, {}]",
                100.0 - WEIGHT_SUM_TOLERANCE,
                100.0 + WEIGHT_SUM_TOLERANCE
            ),
        ));
    }
    Ok(authored.iter().map(|w| w / total).collect())
}

impl Builder {
    fn new(doc: &ProtocolDoc) -> Self {
        Self {
            concepts: doc.concepts.iter().map(|c| c.code.clone()).collect(),
        }
    }

    fn build(&self, doc: &ProtocolDoc) -> Result<Protocol, ProtocolError> {
        check_id("/id", &doc.id)?;
        let mut seen = HashSet::new();
        for (i, c) in doc.concepts.iter().enumerate() {
            let path = format!("/concepts/{i}/code");
            check_id(&path, &c.code)?;
            if !seen.insert(c.code.as_str()) {
                return Err(invalid(&path, format!("duplicate concept `{}`", c.code)));
            }
        }
        if doc.stages.is_empty() {
            return Err(invalid("/stages", "protocol has no stages"));
        }
        let mut stage_ids = HashSet::new();
        for (i, s) in doc.stages.iter().enumerate() {
            check_id(&format!("/stages/{i}/id"), &s.id)?;
            if !stage_ids.insert(s.id.as_str()) {
                return Err(invalid(
                    &format!("/stages/{i}/id"),
                    format!("duplicate stage id `{}`", s.id),
                ));
            }
        }
        let weights = normalise(
            "/stages",
            &doc.stages.iter().map(|s| s.weight).collect::<Vec<_>>(),
        )?;
        let stages = doc
            .stages
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (s, w))| self.stage(&format!("/stages/{i}"), s, w))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Protocol {
            id: doc.id.clone(),
            name: doc.name.clone(),
            version: doc.version.clone(),
            comment: doc.comment.clone(),
            concepts: doc.concepts.clone(),
            stages,
        })
    }

    fn stage(&self, path: &str, s: &StageDoc, weight: f64) -> Result<Stage, ProtocolError> {
        if let Some(cond) = &s.entry_condition {
            self.condition(&format!("{path}/entry_condition"), cond)?;
        }
        if s.actions.is_empty() {
            return Err(invalid(&format!("{path}/actions"), "stage has no actions"));
        }
        let mut ids = HashSet::new();
        for (i, a) in s.actions.iter().enumerate() {
            let p = format!("{path}/actions/{i}/id");
            check_id(&p, &a.id)?;
            if !ids.insert(a.id.as_str()) {
                return Err(invalid(&p, format!("duplicate action id `{}`", a.id)));
            }
        }
        let weights = normalise(
            &format!("{path}/actions"),
            &s.actions.iter().map(|a| a.weight).collect::<Vec<_>>(),
        )?;
        let actions = s
            .actions
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (a, w))| {
                let p = format!("{path}/actions/{i}");
                self.known_concept(&format!("{p}/concept"), &a.concept)?;
                Ok(ActionSpec {
                    id: a.id.clone(),
                    name: a.name.clone().unwrap_or_else(|| a.id.clone()),
                    concept: a.concept.clone(),
                    weight: w,
                    authored_weight: a.weight,
                    constraint: self.constraint(&format!("{p}/constraint"), &a.concept, &a.constraint)?,
                    note: a.note.clone(),
                })
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        Ok(Stage {
            id: s.id.clone(),
            name: s.name.clone(),
            weight,
            authored_weight: s.weight,
            entry_condition: s.entry_condition.clone(),
            actions,
            note: s.note.clone(),
        })
    }

    fn known_concept(&self, path: &str, code: &str) -> Result<(), ProtocolError> {
        if self.concepts.contains(code) {
            Ok(())
        } else {
            Err(ProtocolError::UnknownConcept {
                path: path.to_string(),
                concept: code.to_string(),
            })
        }
    }

    fn condition(&self, path: &str, cond: &ConditionExpr) -> Result<(), ProtocolError> {
        match cond {
            ConditionExpr::All(xs) | ConditionExpr::Any(xs) => {
                let key = if matches!(cond, ConditionExpr::All(_)) { "all" } else { "any" };
                if xs.is_empty() {
                    return Err(invalid(&format!("{path}/{key}"), "empty connective"));
                }
                for (i, x) in xs.iter().enumerate() {
                    self.condition(&format!("{path}/{key}/{i}"), x)?;
                }
                Ok(())
            }
            ConditionExpr::Not(x) => self.condition(&format!("{path}/not"), x),
            ConditionExpr::Atom(a) => {
                self.known_concept(&format!("{path}/atom/concept"), &a.concept)?;
                if a.op.is_ordering() && a.value.as_number().is_none() {
                    return Err(invalid(
                        &format!("{path}/atom/value"),
                        "ordering comparator needs a numeric value",
                    ));
                }
                Ok(())
            }
        }
    }

    fn constraint(
        &self,
        path: &str,
        concept: &str,
        doc: &ConstraintDoc,
    ) -> Result<ConstraintSpec, ProtocolError> {
        Ok(match doc {
            ConstraintDoc::Binary { event_kind } => {
                if *event_kind == EventKind::Observation {
                    return Err(invalid(
                        &format!("{path}/event_kind"),
                        "binary constraints count instructions or performances",
                    ));
                }
                ConstraintSpec::Binary(BinarySpec {
                    event_kind: *event_kind,
                })
            }
            ConstraintDoc::Cyclical {
                expected_cardinality,
                window_hours,
                calculation,
                trapezoid,
            } => {
                if *expected_cardinality < 1 {
                    return Err(invalid(
                        &format!("{path}/expected_cardinality"),
                        "expected cardinality must be at least 1",
                    ));
                }
                if !(window_hours.is_finite() && *window_hours > 0.0) {
                    return Err(invalid(
                        &format!("{path}/window_hours"),
                        "window must be a positive number of hours",
                    ));
                }
                match (calculation, trapezoid) {
                    (Calculation::Fuzzy, None) => {
                        return Err(invalid(
                            &format!("{path}/trapezoid"),
                            "fuzzy cyclical constraint needs a trapezoid",
                        ))
                    }
                    (Calculation::Proportional, Some(_)) => {
                        return Err(invalid(
                            &format!("{path}/trapezoid"),
                            "proportional cyclical constraint takes no trapezoid",
                        ))
                    }
                    (_, Some(t)) => self.trapezoid(&format!("{path}/trapezoid"), t)?,
                    _ => {}
                }
                ConstraintSpec::Cyclical(CyclicalSpec {
                    expected_cardinality: *expected_cardinality,
                    window_hours: *window_hours,
                    calculation: *calculation,
                    trapezoid: *trapezoid,
                })
            }
            ConstraintDoc::Time {
                reference,
                trapezoid,
            } => {
                if let Reference::Concept(c) = reference {
                    self.known_concept(&format!("{path}/reference/concept"), c)?;
                }
                self.trapezoid(&format!("{path}/trapezoid"), trapezoid)?;
                ConstraintSpec::Time(TimeSpec {
                    reference: reference.clone(),
                    trapezoid: *trapezoid,
                })
            }
            ConstraintDoc::EntryCondition { condition } => {
                self.condition(&format!("{path}/condition"), condition)?;
                ConstraintSpec::EntryCondition(EntryConditionSpec {
                    condition: condition.clone(),
                })
            }
            ConstraintDoc::Order {
                must_follow,
                must_follow_kind,
                max_lag_hours,
            } => {
                self.known_concept(&format!("{path}/must_follow"), must_follow)?;
                if must_follow == concept && *must_follow_kind == EventKind::Performance {
                    return Err(invalid(
                        &format!("{path}/must_follow_kind"),
                        "an action cannot be ordered after its own performances",
                    ));
                }
                if let Some(lag) = max_lag_hours {
                    if !(lag.is_finite() && *lag > 0.0) {
                        return Err(invalid(
                            &format!("{path}/max_lag_hours"),
                            "maximum lag must be a positive number of hours",
                        ));
                    }
                }
                ConstraintSpec::Order(OrderSpec {
                    must_follow: must_follow.clone(),
                    must_follow_kind: *must_follow_kind,
                    max_lag_hours: *max_lag_hours,
                })
            }
            ConstraintDoc::Multiple { conditions } => {
                if conditions.is_empty() {
                    return Err(invalid(&format!("{path}/conditions"), "no conditions given"));
                }
                for (i, c) in conditions.iter().enumerate() {
                    self.condition(&format!("{path}/conditions/{i}"), c)?;
                }
                ConstraintSpec::Multiple(MultipleSpec {
                    conditions: conditions.clone(),
                })
            }
            ConstraintDoc::Combination { parts } => {
                if parts.is_empty() {
                    return Err(invalid(&format!("{path}/parts"), "combination has no parts"));
                }
                let weights = normalise(
                    &format!("{path}/parts"),
                    &parts.iter().map(|p| p.weight).collect::<Vec<_>>(),
                )?;
                let parts = parts
                    .iter()
                    .zip(weights)
                    .enumerate()
                    .map(|(i, (p, w))| {
                        let pp = format!("{path}/parts/{i}");
                        let part_concept = match &p.concept {
                            Some(c) => {
                                self.known_concept(&format!("{pp}/concept"), c)?;
                                c.as_str()
                            }
                            None => concept,
                        };
                        let constraint =
                            self.constraint(&format!("{pp}/constraint"), part_concept, &p.constraint)?;
                        let label = p
                            .label
                            .clone()
                            .or_else(|| p.component.map(|c| c.as_str().to_string()))
                            .unwrap_or_else(|| constraint.kind_name().to_string());
                        Ok(CombinationPart {
                            label,
                            component: p.component,
                            concept: p.concept.clone(),
                            weight: w,
                            authored_weight: p.weight,
                            constraint,
                            note: p.note.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, ProtocolError>>()?;
                ConstraintSpec::Combination(CombinationSpec { parts })
            }
        })
    }

    fn trapezoid(&self, path: &str, t: &Trapezoid) -> Result<(), ProtocolError> {
        t.validate().map_err(|e| invalid(path, e.0))
    }
}
