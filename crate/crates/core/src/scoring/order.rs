//! Pairing of performances with the events they must follow.

use std::collections::VecDeque;

use crate::events::{EventKind, PatientRecord};
use crate::protocol::OrderSpec;
use crate::time::{secs_between, Instant, Interval, SECS_PER_HOUR};

#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    /// `(performance, paired predecessor)` for every in-window performance.
    pub performances: Vec<(Instant, Option<Instant>)>,
    pub predecessors_in_window: usize,
    pub predecessors_in_window_paired: usize,
}

impl Pairing {
    pub fn paired(&self) -> usize {
        self.performances.iter().filter(|(_, p)| p.is_some()).count()
    }
}

/// Pairs every in-window performance of `concept` with an unconsumed
/// predecessor event, taking the oldest one still within the lag.
///
/// Predecessors may come from anywhere in the stay before the window end.
/// Equal timestamps follow timeline order, so an instruction and a
/// performance at the same instant are correctly ordered. Oldest-first is a
/// maximum matching because predecessors expire in arrival order.
pub fn pair_performances(
    record: &PatientRecord,
    concept: &str,
    spec: &OrderSpec,
    window: &Interval,
) -> Pairing {
    let lag = spec.max_lag_hours.map(|h| h * SECS_PER_HOUR);
    let mut queue: VecDeque<(Instant, bool)> = VecDeque::new();
    let mut performances = Vec::new();
    let mut paired_in_window = 0;
    for e in record.scorable().filter(|e| e.timestamp < window.to) {
        if e.concept == spec.must_follow && e.kind == spec.must_follow_kind {
            queue.push_back((e.timestamp, window.contains(e.timestamp)));
        } else if e.concept == concept
            && e.kind == EventKind::Performance
            && window.contains(e.timestamp)
        {
            if let Some(lag) = lag {
                while queue
                    .front()
                    .is_some_and(|(t, _)| secs_between(*t, e.timestamp) > lag)
                {
                    queue.pop_front();
                }
            }
            let partner = queue.pop_front();
            if let Some((_, true)) = partner {
                paired_in_window += 1;
            }
            performances.push((e.timestamp, partner.map(|(t, _)| t)));
        }
    }
    let predecessors_in_window = record
        .scorable()
        .filter(|e| {
            e.concept == spec.must_follow
                && e.kind == spec.must_follow_kind
                && window.contains(e.timestamp)
        })
        .count();
    Pairing {
        performances,
        predecessors_in_window,
        predecessors_in_window_paired: paired_in_window,
    }
}
