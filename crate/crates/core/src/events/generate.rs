//! Seeded synthetic cohorts with controlled compliance.
//!
//! Each `(patient, action)` pair is compliant or not. Compliant actions get
//! an event plan that scores exactly 1; non-compliant ones have their events
//! removed from the action's scope, or replaced by misordered, badly spaced
//! performances where removal alone would leave the score undefined.
//! Compliance is stratified over patients so the share of compliant
//! patients tracks the target closely even for small cohorts.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Cohort, Event, EventKind, PatientRecord};
use crate::protocol::{
    ActionSpec, Calculation, ConditionExpr, ConstraintSpec, ObservationState, Protocol, Reference, Stage,
};
use crate::scoring::{find_episodes, stage_scope, ScoringWindow, StageScope};
use crate::time::{add_hours, parse_instant, round_to_minute, Instant, Interval};
use crate::value::Value;

/// Gap between a generated performance and the event it must follow.
const COMPANION_LEAD_MINUTES: i64 = 30;
const FIRST_ACTION_HOURS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceProfile {
    /// Target for actions not listed in `actions`.
    #[serde(default = "defaults::one")]
    pub default: f64,
    /// Targets keyed by `stage/action` or by a bare action id.
    #[serde(default)]
    pub actions: BTreeMap<String, f64>,
    /// Chance that a conditioned stage is entered during a stay.
    #[serde(default = "defaults::entry_probability")]
    pub stage_entry_probability: f64,
    #[serde(default = "defaults::stay_days")]
    pub stay_days: f64,
    #[serde(default = "defaults::wards")]
    pub wards: Vec<String>,
    /// Earliest admission; admissions spread over the following 30 days.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<String>,
}

mod defaults {
    pub fn one() -> f64 {
        1.0
    }
    pub fn entry_probability() -> f64 {
        0.75
    }
    pub fn stay_days() -> f64 {
        90.0
    }
    pub fn wards() -> Vec<String> {
        vec!["internal_a".into(), "internal_b".into(), "geriatric".into()]
    }
}

impl Default for ComplianceProfile {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl ComplianceProfile {
    pub fn uniform(target: f64) -> Self {
        Self {
            default: target,
            actions: BTreeMap::new(),
            stage_entry_probability: defaults::entry_probability(),
            stay_days: defaults::stay_days(),
            wards: defaults::wards(),
            start: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        serde_json::from_str(text).map_err(|e| ProfileError::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("ProfileError: {0}")]
    Parse(String),
    #[error("ProfileError: target `{0}` references an unknown action")]
    UnknownAction(String),
    #[error("ProfileError: `{key}` = {value} is outside [0, 1]")]
    OutOfRange { key: String, value: f64 },
    #[error("ProfileError: {0}")]
    Invalid(String),
}

fn check_unit(key: &str, value: f64) -> Result<(), ProfileError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ProfileError::OutOfRange { key: key.into(), value })
    }
}

/// Resolves the profile to one target per `(stage index, action index)`.
fn resolve_targets(protocol: &Protocol, profile: &ComplianceProfile) -> Result<Vec<Vec<f64>>, ProfileError> {
    check_unit("default", profile.default)?;
    check_unit("stage_entry_probability", profile.stage_entry_probability)?;
    let mut targets: Vec<Vec<f64>> = protocol
        .stages
        .iter()
        .map(|s| vec![profile.default; s.actions.len()])
        .collect();
    for (key, &value) in &profile.actions {
        check_unit(key, value)?;
        let mut hit = false;
        for (si, stage) in protocol.stages.iter().enumerate() {
            for (ai, action) in stage.actions.iter().enumerate() {
                let full = format!("{}/{}", stage.id, action.id);
                if *key == full || *key == action.id {
                    targets[si][ai] = value;
                    hit = true;
                }
            }
        }
        if !hit {
            return Err(ProfileError::UnknownAction(key.clone()));
        }
    }
    Ok(targets)
}

/// Assignment of concept values making `expr` evaluate to `want`.
fn witness(protocol: &Protocol, expr: &ConditionExpr, want: bool) -> Vec<(String, Value)> {
    match expr {
        ConditionExpr::Atom(atom) => {
            let op = if want { atom.op } else { atom.op.negated() };
            use crate::protocol::Comparator::*;
            let value = match (&atom.value, op) {
                (Value::Number(v), Eq | Le | Ge) => Value::Number(*v),
                (Value::Number(v), Ne | Gt) => Value::Number(v + 1.0),
                (Value::Number(v), Lt) => Value::Number(v - 1.0),
                (Value::Text(t), Eq) => Value::Text(t.clone()),
                (Value::Text(t), _) => {
                    let other = protocol
                        .concept(&atom.concept)
                        .and_then(|c| c.categories.iter().find(|k| *k != t).cloned());
                    Value::Text(other.unwrap_or_else(|| format!("not_{t}")))
                }
            };
            vec![(atom.concept.clone(), value)]
        }
        ConditionExpr::Not(x) => witness(protocol, x, !want),
        ConditionExpr::All(xs) if want => xs.iter().flat_map(|x| witness(protocol, x, true)).collect(),
        ConditionExpr::Any(xs) if !want => xs.iter().flat_map(|x| witness(protocol, x, false)).collect(),
        ConditionExpr::All(xs) | ConditionExpr::Any(xs) => {
            xs.first().map(|x| witness(protocol, x, want)).unwrap_or_default()
        }
    }
}

fn holds(expr: &ConditionExpr, assignment: &[(String, Value)]) -> bool {
    let state: ObservationState = assignment.iter().map(|(c, v)| (c.as_str(), v)).collect();
    expr.eval(&state)
}

fn observations(patient_id: &str, at: Instant, assignment: &[(String, Value)]) -> Vec<Event> {
    assignment
        .iter()
        .map(|(c, v)| Event::new(patient_id, c, EventKind::Observation, at).with_value(v.clone()))
        .collect()
}

/// Parts of a constraint tree with the concept each one scores.
fn parts(action: &ActionSpec) -> Vec<(&str, &ConstraintSpec)> {
    let mut out = Vec::new();
    action.constraint.walk(&action.concept, &mut |c, spec| out.push((c, spec)));
    out
}

/// Whether removing every event still leaves the score defined, so that
/// omission alone lowers it.
fn omission_scores_zero(constraint: &ConstraintSpec) -> bool {
    match constraint {
        ConstraintSpec::Binary(_) | ConstraintSpec::EntryCondition(_) | ConstraintSpec::Multiple(_) => true,
        ConstraintSpec::Cyclical(c) => c.calculation == Calculation::Proportional,
        ConstraintSpec::Time(t) => t.reference == Reference::StageEntry,
        ConstraintSpec::Order(_) => false,
        ConstraintSpec::Combination(c) => c.parts.iter().any(|p| omission_scores_zero(&p.constraint)),
    }
}

struct Planner<'a> {
    patient_id: String,
    admission: Instant,
    /// Predecessors required before performances of each concept.
    predecessors: BTreeMap<&'a str, BTreeSet<(&'a str, EventKind)>>,
}

impl<'a> Planner<'a> {
    fn at(&self, t: Instant, concept: &str, kind: EventKind) -> Event {
        Event::new(&self.patient_id, concept, kind, round_to_minute(t))
    }

    /// A performance together with the events it must follow.
    fn perform(&self, t: Instant, concept: &str, out: &mut Vec<Event>) {
        let t = round_to_minute(t);
        out.push(self.at(t, concept, EventKind::Performance));
        if let Some(preds) = self.predecessors.get(concept) {
            let lead = (t - Duration::minutes(COMPANION_LEAD_MINUTES)).max(self.admission);
            for (code, kind) in preds {
                // Observations sort after performances at equal instants.
                let at = if *kind == EventKind::Observation && lead == t { t - Duration::minutes(1) } else { lead };
                out.push(self.at(at, code, *kind));
            }
        }
    }

    /// Events that make `constraint` score 1 in `scope`. Entry-condition
    /// episodes are served later, once the final episodes are known.
    fn comply(&self, concept: &str, constraint: &ConstraintSpec, scope: &ScoringWindow, out: &mut Vec<Event>) {
        let w = scope.window;
        let hours = w.duration_secs() / 3600.0;
        let first = add_hours(w.from, FIRST_ACTION_HOURS.min(hours / 2.0));
        match constraint {
            ConstraintSpec::Binary(b) => match b.event_kind {
                EventKind::Performance => self.perform(first, concept, out),
                kind => out.push(self.at(first, concept, kind)),
            },
            ConstraintSpec::Order(_) => self.perform(first, concept, out),
            ConstraintSpec::Cyclical(c) => {
                let mut spacing = c.window_hours / f64::from(c.expected_cardinality);
                if let Some(t) = &c.trapezoid {
                    spacing = spacing.min(t.c.0);
                }
                // One more than the expectation so rounding never falls short.
                let count = (hours / spacing).floor() + 1.0;
                let step = hours / count;
                for j in 0..count as usize {
                    self.perform(add_hours(w.from, step / 2.0 + j as f64 * step), concept, out);
                }
            }
            ConstraintSpec::Time(t) => {
                let reference = match &t.reference {
                    Reference::StageEntry => scope.entry,
                    Reference::Concept(code) => {
                        let at = add_hours(w.from, 1.0f64.min(hours / 4.0));
                        out.push(self.at(at, code, EventKind::Instruction));
                        Some(round_to_minute(at))
                    }
                };
                if let Some(r) = reference {
                    let done = add_hours(r, t.trapezoid.plateau_midpoint());
                    if w.contains(done) {
                        self.perform(done, concept, out);
                    }
                }
            }
            ConstraintSpec::EntryCondition(_) | ConstraintSpec::Multiple(_) => {}
            ConstraintSpec::Combination(c) => {
                for part in &c.parts {
                    let concept = part.concept.as_deref().unwrap_or(concept);
                    self.comply(concept, &part.constraint, scope, out);
                }
            }
        }
    }

    /// Performances that score 0 where omission would leave the action
    /// undefined: too far apart and never preceded by what they must follow.
    fn violate(&self, action: &ActionSpec, scope: &ScoringWindow, out: &mut Vec<Event>) {
        let gap = parts(action)
            .iter()
            .filter_map(|(_, spec)| match spec {
                ConstraintSpec::Cyclical(c) => c.trapezoid.map(|t| t.d.0).filter(|d| d.is_finite()),
                _ => None,
            })
            .fold(24.0, f64::max)
            + 12.0;
        let w = scope.window;
        let first = add_hours(w.from, FIRST_ACTION_HOURS);
        let second = add_hours(first, gap);
        if !w.contains(second) {
            return;
        }
        for (concept, spec) in parts(action) {
            if matches!(spec, ConstraintSpec::Combination(_)) {
                continue;
            }
            for t in [first, second] {
                out.push(self.at(t, concept, EventKind::Performance));
            }
            if let ConstraintSpec::Order(o) = spec {
                out.push(self.at(add_hours(second, 1.0), &o.must_follow, o.must_follow_kind));
            }
        }
    }
}

/// Stratified uniform draws: exactly one draw per `n`-quantile, shuffled.
fn stratified(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    ranks.into_iter().map(|r| (r as f64 + 0.5) / n as f64).collect()
}

fn build(patient_id: &str, ward: &str, admission: Instant, discharge: Instant, events: &[Event]) -> PatientRecord {
    PatientRecord::new(patient_id, ward, admission, Some(discharge), events.to_vec()).0
}

fn active_scopes(record: &PatientRecord, protocol: &Protocol, stay: &Interval) -> Vec<Option<ScoringWindow>> {
    protocol
        .stages
        .iter()
        .map(|s| match stage_scope(record, s, stay) {
            StageScope::Active(scope) => Some(scope),
            _ => None,
        })
        .collect()
}

fn conditioned(stage: &Stage) -> Option<&ConditionExpr> {
    stage.entry_condition.as_ref()
}

/// Generates `n_patients` synthetic stays. A pure function of its inputs.
pub fn generate_cohort(
    protocol: &Protocol,
    n_patients: usize,
    profile: &ComplianceProfile,
    seed: u64,
) -> Result<Cohort, ProfileError> {
    if n_patients == 0 {
        return Err(ProfileError::Invalid("at least one patient is required".into()));
    }
    if !(profile.stay_days > 0.0 && profile.stay_days.is_finite()) {
        return Err(ProfileError::Invalid("stay_days must be positive".into()));
    }
    if profile.wards.is_empty() {
        return Err(ProfileError::Invalid("at least one ward is required".into()));
    }
    let start = match &profile.start {
        Some(s) => parse_instant(s).map_err(|_| ProfileError::Invalid(format!("start `{s}` is not ISO-8601")))?,
        None => Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap(),
    };
    let targets = resolve_targets(protocol, profile)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Actions realised by the same concept share one draw: removing the
    // events of one would otherwise remove them for the others too.
    let mut draws: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (_, action) in protocol.actions() {
        if !draws.contains_key(action.concept.as_str()) {
            draws.insert(&action.concept, stratified(&mut rng, n_patients));
        }
    }

    let mut predecessors: BTreeMap<&str, BTreeSet<(&str, EventKind)>> = BTreeMap::new();
    for (_, action) in protocol.actions() {
        for (concept, spec) in parts(action) {
            if let ConstraintSpec::Order(o) = spec {
                predecessors
                    .entry(concept)
                    .or_default()
                    .insert((o.must_follow.as_str(), o.must_follow_kind));
            }
        }
    }

    let mut patients = Vec::with_capacity(n_patients);
    for p in 0..n_patients {
        let patient_id = format!("P{:04}", p + 1);
        let ward = profile.wards[rng.gen_range(0..profile.wards.len())].clone();
        let admission = round_to_minute(start + Duration::minutes(rng.gen_range(0..30 * 24 * 60)));
        let discharge = round_to_minute(add_hours(admission, profile.stay_days * 24.0));
        let stay = Interval::new(admission, discharge).expect("positive stay");
        let planner = Planner {
            patient_id: patient_id.clone(),
            admission,
            predecessors: predecessors.clone(),
        };
        let mut events = Vec::new();

        // Conditioned stages start false and are entered at most once.
        let mut baseline: Vec<(String, Value)> = Vec::new();
        for cond in protocol.stages.iter().filter_map(conditioned) {
            if holds(cond, &baseline) || cond.concepts().iter().any(|c| !baseline.iter().any(|(k, _)| k == c)) {
                for (c, v) in witness(protocol, cond, false) {
                    if !baseline.iter().any(|(k, _)| *k == c) {
                        baseline.push((c, v));
                    }
                }
            }
        }
        events.extend(observations(&patient_id, admission, &baseline));
        for cond in protocol.stages.iter().filter_map(conditioned) {
            let max_day = (profile.stay_days / 2.0).clamp(1.0, 14.0);
            let onset = round_to_minute(add_hours(admission, 24.0 * rng.gen_range(0.5..max_day)));
            if rng.gen_bool(profile.stage_entry_probability) {
                let truth = witness(protocol, cond, true);
                if holds(cond, &truth) {
                    events.extend(observations(&patient_id, onset, &truth));
                }
            }
        }

        // Two episodes for every condition an action is scored against.
        let record = build(&patient_id, &ward, admission, discharge, &events);
        let scopes = active_scopes(&record, protocol, &stay);
        for (stage, scope) in protocol.stages.iter().zip(&scopes) {
            let Some(scope) = scope else { continue };
            let conditions: Vec<ConditionExpr> = stage
                .actions
                .iter()
                .flat_map(parts)
                .filter_map(|(_, spec)| match spec {
                    ConstraintSpec::EntryCondition(e) => Some(e.condition.clone()),
                    ConstraintSpec::Multiple(m) => Some(m.disjunction()),
                    _ => None,
                })
                .collect();
            let hours = scope.window.duration_secs() / 3600.0;
            for (i, cond) in conditions.iter().enumerate() {
                let (yes, no) = (witness(protocol, cond, true), witness(protocol, cond, false));
                if !holds(cond, &yes) || holds(cond, &no) {
                    continue;
                }
                for open in [0.15, 0.55] {
                    let from = add_hours(scope.window.from, hours * (open + 0.03 * i as f64));
                    let to = add_hours(from, hours * 0.2);
                    events.extend(observations(&patient_id, round_to_minute(from), &yes));
                    events.extend(observations(&patient_id, round_to_minute(to), &no));
                }
            }
        }

        let record = build(&patient_id, &ward, admission, discharge, &events);
        let scopes = active_scopes(&record, protocol, &stay);
        let mut suppress: Vec<(Interval, BTreeSet<String>)> = Vec::new();
        let mut violations = Vec::new();
        let mut compliant_actions = Vec::new();
        for (si, (stage, scope)) in protocol.stages.iter().zip(&scopes).enumerate() {
            let Some(scope) = scope else { continue };
            for (ai, action) in stage.actions.iter().enumerate() {
                if draws[action.concept.as_str()][p] < targets[si][ai] {
                    planner.comply(&action.concept, &action.constraint, scope, &mut events);
                    compliant_actions.push((action, *scope));
                } else {
                    let mut concepts = BTreeSet::new();
                    for (concept, spec) in parts(action) {
                        concepts.insert(concept.to_string());
                        if let ConstraintSpec::Order(o) = spec {
                            concepts.insert(o.must_follow.clone());
                        }
                    }
                    suppress.push((scope.window, concepts));
                    if !omission_scores_zero(&action.constraint) {
                        planner.violate(action, scope, &mut violations);
                    }
                }
            }
        }
        events.retain(|e| {
            e.kind == EventKind::Observation
                || !suppress
                    .iter()
                    .any(|(w, concepts)| w.contains(e.timestamp) && concepts.contains(&e.concept))
        });
        events.extend(violations);

        // Serve every episode of a compliant action that still lacks a performance.
        let record = build(&patient_id, &ward, admission, discharge, &events);
        for (action, scope) in compliant_actions {
            for (concept, spec) in parts(action) {
                let condition = match spec {
                    ConstraintSpec::EntryCondition(e) => e.condition.clone(),
                    ConstraintSpec::Multiple(m) => m.disjunction(),
                    _ => continue,
                };
                for ep in find_episodes(&record, &condition, &scope.window) {
                    let (from, to) = ep.span(scope.window.to);
                    let served = record
                        .matching(concept, EventKind::Performance, &scope.window)
                        .any(|e| ep.contains(e.timestamp, scope.window.to));
                    if !served {
                        let minutes = ((to - from).num_minutes() / 2).clamp(0, 60);
                        planner.perform(from + Duration::minutes(minutes), concept, &mut events);
                    }
                }
            }
        }

        patients.push(build(&patient_id, &ward, admission, discharge, &events));
    }
    Ok(Cohort {
        patients,
        provenance: format!("generated: protocol={} n={n_patients} seed={seed}", protocol.id),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{parse_protocol, Comparator};

    #[test]
    fn witnesses_satisfy_and_falsify() {
        let protocol = parse_protocol(
            r#"{"id": "p", "name": "p", "version": "1",
                "concepts": [{"code": "C", "kind": "observation", "value_type": "category",
                              "categories": ["red", "pink"]},
                             {"code": "S", "kind": "observation", "value_type": "category",
                              "categories": ["none", "little", "heavy"]},
                             {"code": "N", "kind": "observation", "value_type": "numeric"},
                             {"code": "X", "kind": "action"}],
                "stages": [{"id": "s", "name": "s", "weight": 100,
                            "actions": [{"id": "a", "name": "a", "concept": "X", "weight": 100,
                                         "constraint": {"kind": "binary"}}]}]}"#,
        )
        .unwrap();
        let exprs = [
            ConditionExpr::All(vec![
                ConditionExpr::atom("C", Comparator::Eq, "red"),
                ConditionExpr::Any(vec![
                    ConditionExpr::atom("S", Comparator::Eq, "none"),
                    ConditionExpr::atom("S", Comparator::Eq, "little"),
                ]),
            ]),
            ConditionExpr::atom("N", Comparator::Lt, 14.0),
            ConditionExpr::Not(Box::new(ConditionExpr::atom("N", Comparator::Ge, 2.0))),
        ];
        for e in &exprs {
            assert!(holds(e, &witness(&protocol, e, true)), "{e}");
            assert!(!holds(e, &witness(&protocol, e, false)), "{e}");
        }
    }

    #[test]
    fn stratified_draws_cover_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = stratified(&mut rng, 4);
        d.sort_by(f64::total_cmp);
        assert_eq!(d, vec![0.125, 0.375, 0.625, 0.875]);
    }
}
