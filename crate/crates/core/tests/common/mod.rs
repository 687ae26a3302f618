//! Random timelines and brute-force reference scorers shared by the property
//! suites. The reference scorers deliberately avoid the library's episode and
//! pairing code: they replay state from scratch and enumerate matchings.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use chrono::TimeZone;
use proptest::prelude::*;
use qa_core::events::{Event, EventKind, PatientRecord};
use qa_core::protocol::{parse_protocol_file, Comparator, ConceptKind, ConditionExpr, OrderSpec, Protocol, ValueType};
use qa_core::time::{add_hours, secs_between, Instant, Interval};
use qa_core::Value;

/// Stay length of generated timelines, hours.
pub const STAY_HOURS: f64 = 48.0;
pub const ACTION: &str = "P";
pub const OTHER: &str = "Q";

pub fn shipped() -> Protocol {
    parse_protocol_file(concat!(env!("CARGO_MANIFEST_DIR"), "/../../protocols/pressure_ulcer.json")).unwrap()
}

pub fn t0() -> Instant {
    chrono::Utc.with_ymd_and_hms(2017, 3, 1, 8, 0, 0).unwrap()
}

pub fn at(hours: f64) -> Instant {
    add_hours(t0(), hours)
}

#[derive(Debug, Clone)]
pub enum Draw {
    NumObs(u8),
    TextObs(bool),
    Perform,
    Instruct,
    OtherPerform,
    OtherInstruct,
}

/// Events on a half-hour grid, so equal timestamps are common.
pub fn event_strategy() -> impl Strategy<Value = (u8, Draw)> {
    let draw = prop_oneof![
        (0u8..6).prop_map(Draw::NumObs),
        any::<bool>().prop_map(Draw::TextObs),
        Just(Draw::Perform),
        Just(Draw::Instruct),
        Just(Draw::OtherPerform),
        Just(Draw::OtherInstruct),
    ];
    (0u8..(2.0 * STAY_HOURS) as u8, draw)
}

pub fn to_event((slot, draw): &(u8, Draw)) -> Event {
    let t = at(f64::from(*slot) / 2.0);
    match draw {
        Draw::NumObs(v) => Event::new("p", "A", EventKind::Observation, t).with_value(f64::from(*v)),
        Draw::TextObs(x) => Event::new("p", "B", EventKind::Observation, t).with_value(if *x { "x" } else { "y" }),
        Draw::Perform => Event::new("p", ACTION, EventKind::Performance, t),
        Draw::Instruct => Event::new("p", ACTION, EventKind::Instruction, t),
        Draw::OtherPerform => Event::new("p", OTHER, EventKind::Performance, t),
        Draw::OtherInstruct => Event::new("p", OTHER, EventKind::Instruction, t),
    }
}

pub fn record_from(draws: &[(u8, Draw)]) -> PatientRecord {
    let events = draws.iter().map(to_event).collect();
    PatientRecord::new("p", "w", t0(), Some(at(STAY_HOURS)), events).0
}

/// Timelines of at most 20 events.
pub fn timeline() -> impl Strategy<Value = PatientRecord> {
    prop::collection::vec(event_strategy(), 0..=20).prop_map(|d| record_from(&d))
}

/// A window inside the stay, on the half-hour grid.
pub fn window() -> impl Strategy<Value = Interval> {
    let slots = (2.0 * STAY_HOURS) as u8;
    (0u8..slots, 1u8..=slots).prop_map(move |(a, len)| {
        let from = f64::from(a) / 2.0;
        let to = (f64::from(a) + f64::from(len)).min(f64::from(slots)) / 2.0;
        Interval::new(at(from), at(to)).unwrap()
    })
}

fn atom() -> impl Strategy<Value = ConditionExpr> {
    let ops = prop_oneof![
        Just(Comparator::Eq),
        Just(Comparator::Ne),
        Just(Comparator::Lt),
        Just(Comparator::Le),
        Just(Comparator::Gt),
        Just(Comparator::Ge),
    ];
    prop_oneof![
        (ops, 0u8..6).prop_map(|(op, v)| ConditionExpr::atom("A", op, f64::from(v))),
        (any::<bool>(), any::<bool>()).prop_map(|(eq, x)| {
            let op = if eq { Comparator::Eq } else { Comparator::Ne };
            ConditionExpr::atom("B", op, if x { "x" } else { "y" })
        }),
    ]
}

pub fn condition() -> impl Strategy<Value = ConditionExpr> {
    atom().prop_recursive(2, 8, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..3).prop_map(ConditionExpr::All),
            prop::collection::vec(inner.clone(), 1..3).prop_map(ConditionExpr::Any),
            inner.prop_map(|c| ConditionExpr::Not(Box::new(c))),
        ]
    })
}

pub fn order_spec() -> impl Strategy<Value = OrderSpec> {
    let target = prop_oneof![
        Just((ACTION, EventKind::Instruction)),
        Just((OTHER, EventKind::Instruction)),
        Just((OTHER, EventKind::Performance)),
    ];
    let lag = prop_oneof![Just(None), (0u8..12).prop_map(|h| Some(f64::from(h) / 2.0))];
    (target, lag).prop_map(|((concept, kind), max_lag_hours)| OrderSpec {
        must_follow: concept.to_string(),
        must_follow_kind: kind,
        max_lag_hours,
    })
}

/// Latest value per concept among observations at or before `t`, rebuilt
/// from nothing on every call.
fn state_at(record: &PatientRecord, t: Instant) -> BTreeMap<&str, &Value> {
    let mut state = BTreeMap::new();
    for e in record.scorable() {
        if e.kind == EventKind::Observation && e.timestamp <= t {
            if let Some(v) = &e.value {
                state.insert(e.concept.as_str(), v);
            }
        }
    }
    state
}

/// Episodes of the disjunction of `conditions` as explicit `[start, end)`
/// spans over every instant at which the state can change.
pub fn oracle_episodes(record: &PatientRecord, conditions: &[ConditionExpr], window: &Interval) -> Vec<(Instant, Instant)> {
    let mut instants = vec![window.from];
    instants.extend(
        record
            .scorable()
            .filter(|e| e.kind == EventKind::Observation && window.contains(e.timestamp) && e.timestamp > window.from)
            .map(|e| e.timestamp),
    );
    instants.dedup();
    let truth: Vec<bool> = instants
        .iter()
        .map(|t| {
            let state = state_at(record, *t);
            conditions.iter().any(|c| c.eval(&state))
        })
        .collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < instants.len() {
        if truth[i] {
            let j = (i + 1..instants.len()).find(|&j| !truth[j]);
            spans.push((instants[i], j.map_or(window.to, |j| instants[j])));
            i = j.unwrap_or(instants.len());
        } else {
            i += 1;
        }
    }
    spans
}

/// Share of episodes with a performance of `concept` inside them.
pub fn oracle_episode_score(record: &PatientRecord, concept: &str, conditions: &[ConditionExpr], window: &Interval) -> Option<f64> {
    let spans = oracle_episodes(record, conditions, window);
    if spans.is_empty() {
        return None;
    }
    let performed: Vec<Instant> = record
        .matching(concept, EventKind::Performance, window)
        .map(|e| e.timestamp)
        .collect();
    let treated = spans
        .iter()
        .filter(|(a, b)| performed.iter().any(|t| a <= t && t < b))
        .count();
    Some(treated as f64 / spans.len() as f64)
}

/// Random timelines over the concepts of `protocol`, ten days long.
pub fn protocol_timeline(protocol: &Protocol) -> impl Strategy<Value = PatientRecord> {
    let concepts = protocol.concepts.clone();
    let n = concepts.len();
    prop::collection::vec((0u32..240 * 4, 0..n, any::<bool>(), 0u8..25), 0..80).prop_map(move |draws| {
        let events = draws
            .iter()
            .map(|&(slot, ci, flag, v)| {
                let c = &concepts[ci];
                let t = at(f64::from(slot) / 4.0);
                match (c.kind, c.value_type) {
                    (ConceptKind::Observation, ValueType::Category) => {
                        let cat = &c.categories[usize::from(v) % c.categories.len()];
                        Event::new("p", &c.code, EventKind::Observation, t).with_value(cat.as_str())
                    }
                    (ConceptKind::Observation, _) => {
                        Event::new("p", &c.code, EventKind::Observation, t).with_value(f64::from(v))
                    }
                    _ => {
                        let kind = if flag { EventKind::Performance } else { EventKind::Instruction };
                        Event::new("p", &c.code, kind, t)
                    }
                }
            })
            .collect();
        PatientRecord::new("p", "w", t0(), Some(at(240.0)), events).0
    })
}

/// Maximum matching of in-window performances to earlier predecessors,
/// by exhaustive search.
pub fn oracle_order_score(record: &PatientRecord, concept: &str, spec: &OrderSpec, window: &Interval) -> Option<f64> {
    let timeline: Vec<&Event> = record.scorable().collect();
    let preds: Vec<usize> = (0..timeline.len())
        .filter(|&i| {
            let e = timeline[i];
            e.concept == spec.must_follow && e.kind == spec.must_follow_kind && e.timestamp < window.to
        })
        .collect();
    let perfs: Vec<usize> = (0..timeline.len())
        .filter(|&i| {
            let e = timeline[i];
            e.concept == concept && e.kind == EventKind::Performance && window.contains(e.timestamp)
        })
        .collect();
    if perfs.is_empty() {
        return None;
    }
    let allowed = |p: usize, q: usize| {
        let lag = secs_between(timeline[p].timestamp, timeline[q].timestamp);
        p < q && spec.max_lag_hours.is_none_or(|h| lag <= h * 3600.0)
    };
    fn best(i: usize, used: u32, perfs: &[usize], preds: &[usize], allowed: &dyn Fn(usize, usize) -> bool, memo: &mut HashMap<(usize, u32), usize>) -> usize {
        if i == perfs.len() {
            return 0;
        }
        if let Some(v) = memo.get(&(i, used)) {
            return *v;
        }
        let mut v = best(i + 1, used, perfs, preds, allowed, memo);
        for (k, &p) in preds.iter().enumerate() {
            if used & (1 << k) == 0 && allowed(p, perfs[i]) {
                v = v.max(1 + best(i + 1, used | (1 << k), perfs, preds, allowed, memo));
            }
        }
        memo.insert((i, used), v);
        v
    }
    let matched = best(0, 0, &perfs, &preds, &allowed, &mut HashMap::new());
    Some(matched as f64 / perfs.len() as f64)
}
