//! Per-action compliance scores against one patient timeline.
//!
//! Every function here is a pure function of the record, the constraint and
//! the [`ScoringWindow`]. Scores are in `[0, 1]`; `value == None` means the
//! score has no denominator in the window (no episode, no performance to
//! order, no observed time) and carries a `reason`.

mod episodes;
mod order;

use serde::Serialize;

use crate::aggregation::weighted_mean;
use crate::events::{EventKind, PatientRecord};
use crate::protocol::{
    ActionSpec, BinarySpec, Calculation, CombinationSpec, ComponentKind, ConditionExpr,
    ConstraintSpec, CyclicalSpec, OrderSpec, Reference, Stage, TimeSpec,
};
use crate::time::{format_instant, hours_between, Instant, Interval, SECS_PER_HOUR};

pub use episodes::{find_episodes, first_onset, Episode};
pub use order::{pair_performances, Pairing};

/// Where and from when an action is scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringWindow {
    pub window: Interval,
    /// Stage entry, when it falls inside the window.
    pub entry: Option<Instant>,
}

impl ScoringWindow {
    /// Scope of a stage without entry condition: entered at admission.
    pub fn new(record: &PatientRecord, window: Interval) -> Self {
        Self {
            window,
            entry: window.contains(record.admission).then_some(record.admission),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageScope {
    Active(ScoringWindow),
    NotInStay,
    NotEntered,
}

/// Part of `window` in which `stage` applies to the patient.
///
/// A conditioned stage is entered when its condition first holds during the
/// stay and stays active until the window ends.
pub fn stage_scope(record: &PatientRecord, stage: &Stage, window: &Interval) -> StageScope {
    let Some(observed) = record.observed(window) else {
        return StageScope::NotInStay;
    };
    let Some(condition) = &stage.entry_condition else {
        return StageScope::Active(ScoringWindow::new(record, observed));
    };
    match first_onset(record, condition, observed.to) {
        Some(onset) if onset < observed.to => StageScope::Active(ScoringWindow {
            window: Interval {
                from: onset.max(observed.from),
                to: observed.to,
            },
            entry: observed.contains(onset).then_some(onset),
        }),
        _ => StageScope::NotEntered,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evidence {
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    pub contribution: f64,
}

impl Evidence {
    fn new(description: impl Into<String>, from: Option<Instant>, to: Option<Instant>, contribution: f64) -> Self {
        Self {
            description: description.into(),
            from: from.as_ref().map(format_instant),
            to: to.as_ref().map(format_instant),
            contribution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionScore {
    /// Action id, or the part label for a component.
    pub action_id: String,
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub component: Option<ComponentKind>,
    pub weight: f64,
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub numerator: f64,
    pub denominator: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ActionScore>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<Evidence>,
}

impl ActionScore {
    fn defined(kind: &'static str, value: f64, numerator: f64, denominator: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&value), "{kind} score {value}");
        Self {
            action_id: String::new(),
            kind,
            component: None,
            weight: 1.0,
            value: Some(value),
            reason: None,
            numerator,
            denominator,
            components: Vec::new(),
            evidence: Vec::new(),
        }
    }

    fn undefined(kind: &'static str, reason: impl Into<String>) -> Self {
        Self {
            value: None,
            reason: Some(reason.into()),
            ..Self::defined(kind, 0.0, 0.0, 0.0)
        }
    }

    fn with_evidence(mut self, evidence: Vec<Evidence>) -> Self {
        self.evidence = evidence;
        self
    }
}

/// Scores one action, dispatching on its constraint.
pub fn score_action(record: &PatientRecord, action: &ActionSpec, scope: &ScoringWindow) -> ActionScore {
    let mut score = score_constraint(record, &action.concept, &action.constraint, scope);
    score.action_id = action.id.clone();
    score.weight = action.weight;
    score
}

/// Scores `constraint` for occurrences of `concept`.
pub fn score_constraint(
    record: &PatientRecord,
    concept: &str,
    constraint: &ConstraintSpec,
    scope: &ScoringWindow,
) -> ActionScore {
    match constraint {
        ConstraintSpec::Binary(spec) => score_binary(record, concept, spec, scope),
        ConstraintSpec::Cyclical(spec) => match spec.calculation {
            Calculation::Proportional => score_cyclical_proportional(record, concept, spec, scope),
            Calculation::Fuzzy => score_cyclical_fuzzy(record, concept, spec, scope),
        },
        ConstraintSpec::Time(spec) => score_time_constraint(record, concept, spec, scope),
        ConstraintSpec::EntryCondition(spec) => {
            score_entry_condition(record, concept, &spec.condition, scope)
        }
        ConstraintSpec::Order(spec) => score_order(record, concept, spec, scope),
        ConstraintSpec::Multiple(spec) => {
            let mut s = score_entry_condition(record, concept, &spec.disjunction(), scope);
            s.kind = "multiple";
            s
        }
        ConstraintSpec::Combination(spec) => score_combination(record, concept, spec, scope),
    }
}

fn performances<'a>(record: &'a PatientRecord, concept: &'a str, scope: &'a ScoringWindow) -> impl Iterator<Item = Instant> + 'a {
    record
        .matching(concept, EventKind::Performance, &scope.window)
        .map(|e| e.timestamp)
}

/// 1 when at least one matching event occurs in the window; repeats are not
/// penalised.
pub fn score_binary(record: &PatientRecord, concept: &str, spec: &BinarySpec, scope: &ScoringWindow) -> ActionScore {
    let times: Vec<Instant> = record
        .matching(concept, spec.event_kind, &scope.window)
        .map(|e| e.timestamp)
        .collect();
    let Some(&first) = times.first() else {
        return ActionScore::defined("binary", 0.0, 0.0, 1.0).with_evidence(vec![Evidence::new(
            format!("no {} of {concept} in window", spec.event_kind.as_str()),
            None,
            None,
            0.0,
        )]);
    };
    ActionScore::defined("binary", 1.0, 1.0, 1.0).with_evidence(vec![Evidence::new(
        format!("{} {}(s) of {concept}, first shown", times.len(), spec.event_kind.as_str()),
        Some(first),
        None,
        1.0,
    )])
}

/// Performed count over the expectation scaled to the observed part of the
/// window, capped at 1.
pub fn score_cyclical_proportional(
    record: &PatientRecord,
    concept: &str,
    spec: &CyclicalSpec,
    scope: &ScoringWindow,
) -> ActionScore {
    let observed = record.observed_secs(&scope.window);
    if observed <= 0.0 {
        return ActionScore::undefined("cyclical", "patient not observed during window");
    }
    let time_proportion = observed / (spec.window_hours * SECS_PER_HOUR);
    let expected = f64::from(spec.expected_cardinality) * time_proportion;
    let count = performances(record, concept, scope).count() as f64;
    let value = (count / expected).min(1.0);
    ActionScore::defined("cyclical", value, count, expected).with_evidence(vec![Evidence::new(
        format!(
            "{count} performed, {expected:.4} expected over {:.2} h observed",
            observed / SECS_PER_HOUR
        ),
        Some(scope.window.from),
        Some(scope.window.to),
        value,
    )])
}

/// Mean trapezoid membership of the gaps between consecutive performances.
pub fn score_cyclical_fuzzy(
    record: &PatientRecord,
    concept: &str,
    spec: &CyclicalSpec,
    scope: &ScoringWindow,
) -> ActionScore {
    let Some(trapezoid) = &spec.trapezoid else {
        return ActionScore::undefined("cyclical", "fuzzy calculation without trapezoid");
    };
    let times: Vec<Instant> = performances(record, concept, scope).collect();
    if times.len() < 2 {
        return ActionScore::undefined("cyclical", "fewer than two performances in window");
    }
    let evidence: Vec<Evidence> = times
        .windows(2)
        .map(|w| {
            let gap = hours_between(w[0], w[1]);
            Evidence::new(format!("gap of {gap:.2} h"), Some(w[0]), Some(w[1]), trapezoid.membership(gap))
        })
        .collect();
    let total: f64 = evidence.iter().map(|e| e.contribution).sum();
    let gaps = evidence.len() as f64;
    ActionScore::defined("cyclical", (total / gaps).clamp(0.0, 1.0), total, gaps).with_evidence(evidence)
}

/// Trapezoid membership of the delay from the reference to the first
/// performance at or after it.
pub fn score_time_constraint(record: &PatientRecord, concept: &str, spec: &TimeSpec, scope: &ScoringWindow) -> ActionScore {
    let reference = match &spec.reference {
        Reference::StageEntry => scope.entry.ok_or("stage entry not in window"),
        Reference::Concept(code) => record
            .scorable()
            .find(|e| &e.concept == code && scope.window.contains(e.timestamp))
            .map(|e| e.timestamp)
            .ok_or("reference event not in window"),
    };
    let reference = match reference {
        Ok(t) => t,
        Err(reason) => return ActionScore::undefined("time", reason),
    };
    match performances(record, concept, scope).find(|t| *t >= reference) {
        None => ActionScore::defined("time", 0.0, 0.0, 1.0).with_evidence(vec![Evidence::new(
            "no performance after reference",
            Some(reference),
            None,
            0.0,
        )]),
        Some(done) => {
            let elapsed = hours_between(reference, done);
            let value = spec.trapezoid.membership(elapsed);
            ActionScore::defined("time", value, value, 1.0).with_evidence(vec![Evidence::new(
                format!("performed {elapsed:.2} h after reference"),
                Some(reference),
                Some(done),
                value,
            )])
        }
    }
}

/// Share of condition episodes containing at least one performance.
pub fn score_entry_condition(
    record: &PatientRecord,
    concept: &str,
    condition: &ConditionExpr,
    scope: &ScoringWindow,
) -> ActionScore {
    let episodes = find_episodes(record, condition, &scope.window);
    if episodes.is_empty() {
        return ActionScore::undefined("entry_condition", "condition never met in window");
    }
    let times: Vec<Instant> = performances(record, concept, scope).collect();
    let until = scope.window.to;
    let evidence: Vec<Evidence> = episodes
        .iter()
        .map(|ep| {
            let treated = times.iter().any(|t| ep.contains(*t, until));
            let outcome = if treated { "performed" } else { "not performed" };
            Evidence::new(
                format!("episode ({}): {outcome}", ep.trigger),
                Some(ep.start),
                ep.end,
                if treated { 1.0 } else { 0.0 },
            )
        })
        .collect();
    let treated: f64 = evidence.iter().map(|e| e.contribution).sum();
    let n = episodes.len() as f64;
    ActionScore::defined("entry_condition", treated / n, treated, n).with_evidence(evidence)
}

/// Share of in-window performances that follow an unconsumed predecessor.
pub fn score_order(record: &PatientRecord, concept: &str, spec: &OrderSpec, scope: &ScoringWindow) -> ActionScore {
    let pairing = pair_performances(record, concept, spec, &scope.window);
    let total = pairing.performances.len();
    if total == 0 {
        return ActionScore::undefined("order", "no performances in window");
    }
    let paired = pairing.paired() as f64;
    let mut evidence: Vec<Evidence> = pairing
        .performances
        .iter()
        .map(|(done, before)| match before {
            Some(b) => Evidence::new(format!("follows {}", spec.must_follow), Some(*b), Some(*done), 1.0),
            None => Evidence::new(format!("no preceding {}", spec.must_follow), None, Some(*done), 0.0),
        })
        .collect();
    if pairing.predecessors_in_window > 0 {
        let covered = pairing.predecessors_in_window_paired as f64 / pairing.predecessors_in_window as f64;
        evidence.push(Evidence::new(
            format!(
                "{} of {} {} events in window received a performance",
                pairing.predecessors_in_window_paired,
                pairing.predecessors_in_window,
                spec.must_follow_kind.as_str()
            ),
            None,
            None,
            covered,
        ));
    }
    ActionScore::defined("order", paired / total as f64, paired, total as f64).with_evidence(evidence)
}

/// Weighted mean over defined parts, renormalising the weights.
pub fn score_combination(
    record: &PatientRecord,
    concept: &str,
    spec: &CombinationSpec,
    scope: &ScoringWindow,
) -> ActionScore {
    let parts: Vec<ActionScore> = spec
        .parts
        .iter()
        .map(|part| {
            let concept = part.concept.as_deref().unwrap_or(concept);
            let mut s = score_constraint(record, concept, &part.constraint, scope);
            s.action_id = part.label.clone();
            s.component = part.component;
            s.weight = part.weight;
            s
        })
        .collect();
    let defined_weight: f64 = parts.iter().filter(|p| p.value.is_some()).map(|p| p.weight).sum();
    let mut score = match weighted_mean(parts.iter().map(|p| (p.weight, p.value))) {
        Some(v) => ActionScore::defined("combination", v, v * defined_weight, defined_weight),
        None => ActionScore::undefined("combination", "every part undefined"),
    };
    score.components = parts;
    score
}
