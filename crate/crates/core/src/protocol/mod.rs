//! Machine-readable care protocol: stages, actions, constraints and weights.
//!
//! Protocol files are JSON documents with weights written as percentages.
//! [`parse_protocol`] validates every invariant and normalises each sibling
//! weight group to sum to one; the authored percentages are kept so that a
//! parsed protocol re-serialises to an equivalent document.

mod condition;
mod document;
mod trapezoid;

use serde::{Deserialize, Serialize};

use crate::events::EventKind;

pub use condition::{Atom, Comparator, ConditionExpr, ObservationState};
pub use document::{parse_protocol, parse_protocol_file, ProtocolError, WEIGHT_SUM_TOLERANCE};
pub use trapezoid::{Bound, Trapezoid, TrapezoidError};

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub id: String,
    pub name: String,
    pub version: String,
    pub comment: Option<String>,
    pub concepts: Vec<Concept>,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: ConceptKind,
    #[serde(default)]
    pub value_type: ValueType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Action,
    Instruction,
    Observation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    #[default]
    None,
    Numeric,
    Category,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub id: String,
    pub name: String,
    /// Normalised weight in `[0, 1]`.
    pub weight: f64,
    pub authored_weight: f64,
    pub entry_condition: Option<ConditionExpr>,
    pub actions: Vec<ActionSpec>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpec {
    pub id: String,
    pub name: String,
    /// Event concept whose occurrences realise this action.
    pub concept: String,
    pub weight: f64,
    pub authored_weight: f64,
    pub constraint: ConstraintSpec,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    Binary(BinarySpec),
    Cyclical(CyclicalSpec),
    Time(TimeSpec),
    EntryCondition(EntryConditionSpec),
    Order(OrderSpec),
    Multiple(MultipleSpec),
    Combination(CombinationSpec),
}

/// Performed at least once.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySpec {
    /// Which events count; performances unless the part scores the command.
    pub event_kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calculation {
    Proportional,
    Fuzzy,
}

/// Expected `expected_cardinality` performances per `window_hours`.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicalSpec {
    pub expected_cardinality: u32,
    pub window_hours: f64,
    pub calculation: Calculation,
    /// Gap membership; present iff the calculation is fuzzy.
    pub trapezoid: Option<Trapezoid>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    StageEntry,
    Concept(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSpec {
    pub reference: Reference,
    pub trapezoid: Trapezoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryConditionSpec {
    pub condition: ConditionExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderSpec {
    pub must_follow: String,
    pub must_follow_kind: EventKind,
    pub max_lag_hours: Option<f64>,
}

/// At least one of several conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipleSpec {
    pub conditions: Vec<ConditionExpr>,
}

impl MultipleSpec {
    pub fn disjunction(&self) -> ConditionExpr {
        ConditionExpr::Any(self.conditions.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinationSpec {
    pub parts: Vec<CombinationPart>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinationPart {
    pub label: String,
    pub component: Option<ComponentKind>,
    /// Scores a different concept than the enclosing action when set.
    pub concept: Option<String>,
    pub weight: f64,
    pub authored_weight: f64,
    pub constraint: ConstraintSpec,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Command,
    Performance,
    Frequency,
    Order,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Command => "command",
            ComponentKind::Performance => "performance",
            ComponentKind::Frequency => "frequency",
            ComponentKind::Order => "order",
        }
    }
}

impl ConstraintSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ConstraintSpec::Binary(_) => "binary",
            ConstraintSpec::Cyclical(_) => "cyclical",
            ConstraintSpec::Time(_) => "time",
            ConstraintSpec::EntryCondition(_) => "entry_condition",
            ConstraintSpec::Order(_) => "order",
            ConstraintSpec::Multiple(_) => "multiple",
            ConstraintSpec::Combination(_) => "combination",
        }
    }

    /// Visits this constraint and every nested part together with the
    /// concept it scores.
    pub fn walk<'a>(&'a self, concept: &'a str, f: &mut dyn FnMut(&'a str, &'a ConstraintSpec)) {
        f(concept, self);
        if let ConstraintSpec::Combination(c) = self {
            for part in &c.parts {
                let concept = part.concept.as_deref().unwrap_or(concept);
                part.constraint.walk(concept, f);
            }
        }
    }
}

impl ActionSpec {
    /// Top-level weighted components, when the action is a combination.
    pub fn components(&self) -> Vec<(Option<ComponentKind>, &str, f64)> {
        match &self.constraint {
            ConstraintSpec::Combination(c) => c
                .parts
                .iter()
                .map(|p| (p.component, p.label.as_str(), p.weight))
                .collect(),
            _ => Vec::new(),
        }
    }
}

impl Protocol {
    pub fn stage(&self, id: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.id == id)
    }

    pub fn concept(&self, code: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.code == code)
    }

    /// Every `(stage, action)` pair in document order.
    pub fn actions(&self) -> impl Iterator<Item = (&Stage, &ActionSpec)> {
        self.stages
            .iter()
            .flat_map(|s| s.actions.iter().map(move |a| (s, a)))
    }
}

impl Stage {
    pub fn action(&self, id: &str) -> Option<&ActionSpec> {
        self.actions.iter().find(|a| a.id == id)
    }
}
