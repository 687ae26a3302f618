//! Episodes: maximal runs during which a condition holds.

use serde::Serialize;

use crate::events::{EventKind, PatientRecord};
use crate::protocol::{ConditionExpr, ObservationState};
use crate::time::{Instant, Interval};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Episode {
    pub start: Instant,
    /// `None` while the condition still holds at the end of the window.
    pub end: Option<Instant>,
    pub trigger: String,
}

impl Episode {
    /// The episode as a half-open interval, open episodes ending at `until`.
    pub fn span(&self, until: Instant) -> (Instant, Instant) {
        (self.start, self.end.unwrap_or(until))
    }

    pub fn contains(&self, t: Instant, until: Instant) -> bool {
        let (from, to) = self.span(until);
        from <= t && t < to
    }
}

/// Finds the episodes of `condition` inside `window`.
///
/// Only observations of concepts the condition mentions take part. State is
/// seeded from observations up to and including `window.from`; observations
/// sharing a timestamp are applied together before the condition is checked.
pub fn find_episodes(
    record: &PatientRecord,
    condition: &ConditionExpr,
    window: &Interval,
) -> Vec<Episode> {
    let concepts = condition.concepts();
    let observations: Vec<_> = record
        .scorable()
        .filter(|e| {
            e.kind == EventKind::Observation
                && e.value.is_some()
                && e.timestamp < window.to
                && concepts.contains(e.concept.as_str())
        })
        .collect();

    let mut state = ObservationState::new();
    let mut i = 0;
    while i < observations.len() && observations[i].timestamp <= window.from {
        let e = observations[i];
        state.insert(e.concept.as_str(), e.value.as_ref().expect("filtered"));
        i += 1;
    }

    let mut episodes = Vec::new();
    let mut open: Option<Episode> = None;
    if condition.eval(&state) {
        open = Some(Episode {
            start: window.from,
            end: None,
            trigger: "condition held at window start".to_string(),
        });
    }
    while i < observations.len() {
        let at = observations[i].timestamp;
        let mut changed = Vec::new();
        while i < observations.len() && observations[i].timestamp == at {
            let e = observations[i];
            let v = e.value.as_ref().expect("filtered");
            state.insert(e.concept.as_str(), v);
            changed.push(format!("{} = {}", e.concept, v));
            i += 1;
        }
        let holds = condition.eval(&state);
        match (&mut open, holds) {
            (None, true) => {
                open = Some(Episode {
                    start: at,
                    end: None,
                    trigger: changed.join(", "),
                })
            }
            (Some(ep), false) => {
                ep.end = Some(at);
                episodes.push(open.take().expect("open"));
            }
            _ => {}
        }
    }
    episodes.extend(open);
    episodes
}

/// Instant the condition first held during the stay, looking no later than
/// `until`.
pub fn first_onset(record: &PatientRecord, condition: &ConditionExpr, until: Instant) -> Option<Instant> {
    let stay = Interval::new(record.admission, until).ok()?;
    find_episodes(record, condition, &stay).first().map(|e| e.start)
}
