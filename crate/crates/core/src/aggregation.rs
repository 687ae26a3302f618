//! Roll-up of action scores into the drill-down tree.
//!
//! Per-patient trees weight children by their normalised weights. Group
//! trees average patients node by node, and timeframe trees average
//! sub-interval trees by duration. Undefined children are dropped and the
//! remaining weights renormalised.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::PatientRecord;
use crate::protocol::{ActionSpec, ConstraintSpec, Protocol, Stage};
use crate::scoring::{score_action, stage_scope, ActionScore, Evidence, StageScope};
use crate::time::Interval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Component,
    Action,
    Stage,
    Protocol,
    Timeframe,
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNode {
    pub kind: NodeKind,
    pub id: String,
    pub label: String,
    pub weight: f64,
    pub value: Option<f64>,
    /// Display value: `100 * value` rounded half up.
    pub percent: Option<u32>,
    pub window: Interval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub population: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<ScoreEvidence>,
    #[serde(default)]
    pub children: Vec<ScoreNode>,
}

/// Evidence as carried on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEvidence {
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    pub contribution: f64,
}

impl From<&Evidence> for ScoreEvidence {
    fn from(e: &Evidence) -> Self {
        Self {
            description: e.description.clone(),
            from: e.from.clone(),
            to: e.to.clone(),
            contribution: e.contribution,
        }
    }
}

impl ScoreNode {
    fn new(kind: NodeKind, id: &str, label: &str, weight: f64, window: Interval) -> Self {
        Self {
            kind,
            id: id.to_string(),
            label: label.to_string(),
            weight,
            value: None,
            percent: None,
            window,
            constraint: None,
            reason: None,
            population: Vec::new(),
            evidence: Vec::new(),
            children: Vec::new(),
        }
    }

    fn set_value(&mut self, value: Option<f64>) {
        self.value = value;
        self.percent = value.map(percent);
    }

    /// Node reached by following child ids.
    pub fn find(&self, path: &[&str]) -> Option<&ScoreNode> {
        match path.split_first() {
            None => Some(self),
            Some((head, rest)) => self.children.iter().find(|c| c.id == *head)?.find(rest),
        }
    }

    pub fn find_mut(&mut self, path: &[&str]) -> Option<&mut ScoreNode> {
        match path.split_first() {
            None => Some(self),
            Some((head, rest)) => self.children.iter_mut().find(|c| c.id == *head)?.find_mut(rest),
        }
    }

    /// Visits every node with its id path, root first.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&[&'a str], &'a ScoreNode)) {
        fn go<'a>(n: &'a ScoreNode, path: &mut Vec<&'a str>, f: &mut dyn FnMut(&[&'a str], &'a ScoreNode)) {
            path.push(&n.id);
            f(path, n);
            for c in &n.children {
                go(c, path, f);
            }
            path.pop();
        }
        go(self, &mut Vec::new(), f);
    }

    fn same_shape(&self, other: &ScoreNode) -> bool {
        self.id == other.id
            && self.children.len() == other.children.len()
            && self.children.iter().zip(&other.children).all(|(a, b)| a.same_shape(b))
    }
}

/// Integer percentage, half rounded up.
pub fn percent(value: f64) -> u32 {
    (100.0 * value + 0.5 + 1e-9).floor() as u32
}

/// `Σ wᵢvᵢ / Σ wᵢ` over pairs with a defined value; `None` when no defined
/// weight remains.
pub fn weighted_mean(items: impl IntoIterator<Item = (f64, Option<f64>)>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (w, v) in items {
        if let Some(v) = v {
            num += w * v;
            den += w;
        }
    }
    (den > 0.0).then(|| (num / den).clamp(0.0, 1.0))
}

/// Unweighted mean of the defined patient scores.
pub fn score_group(scores: &[Option<f64>]) -> Option<f64> {
    weighted_mean(scores.iter().map(|s| (1.0, *s)))
}

/// Value an internal node should carry given its children's weights and
/// values.
pub fn recompute(node: &ScoreNode) -> Option<f64> {
    weighted_mean(node.children.iter().map(|c| (c.weight, c.value)))
}

fn component_nodes(constraint: &ConstraintSpec, score: Option<&ActionScore>, window: Interval, reason: &Option<String>) -> Vec<ScoreNode> {
    let ConstraintSpec::Combination(spec) = constraint else {
        return Vec::new();
    };
    spec.parts
        .iter()
        .enumerate()
        .map(|(i, part)| {
            let sub = score.and_then(|s| s.components.get(i));
            let mut node = ScoreNode::new(NodeKind::Component, &part.label, &part.label, part.weight, window);
            node.constraint = Some(part.constraint.kind_name().to_string());
            fill_from_score(&mut node, sub, reason);
            node.children = component_nodes(&part.constraint, sub, window, reason);
            node
        })
        .collect()
}

fn fill_from_score(node: &mut ScoreNode, score: Option<&ActionScore>, reason: &Option<String>) {
    match score {
        Some(s) => {
            node.set_value(s.value);
            node.reason = s.reason.clone();
            node.evidence = s.evidence.iter().map(ScoreEvidence::from).collect();
        }
        None => {
            node.set_value(None);
            node.reason = reason.clone();
        }
    }
}

fn action_node(action: &ActionSpec, score: Option<&ActionScore>, window: Interval, reason: &Option<String>) -> ScoreNode {
    let mut node = ScoreNode::new(NodeKind::Action, &action.id, &action.name, action.weight, window);
    node.constraint = Some(action.constraint.kind_name().to_string());
    fill_from_score(&mut node, score, reason);
    node.children = component_nodes(&action.constraint, score, window, reason);
    node
}

/// Scores every action of `stage`; undefined with a reason when the stage
/// does not apply to the patient during `window`.
pub fn score_stage(record: &PatientRecord, stage: &Stage, window: &Interval) -> ScoreNode {
    let mut node = ScoreNode::new(NodeKind::Stage, &stage.id, &stage.name, stage.weight, *window);
    match stage_scope(record, stage, window) {
        StageScope::Active(scope) => {
            node.children = stage
                .actions
                .iter()
                .map(|a| action_node(a, Some(&score_action(record, a, &scope)), *window, &None))
                .collect();
            node.set_value(recompute(&node));
            if node.value.is_none() {
                node.reason = Some("no action defined in window".into());
            }
        }
        other => {
            let reason = Some(
                match other {
                    StageScope::NotInStay => "patient not in hospital during window",
                    _ => "stage not entered",
                }
                .to_string(),
            );
            node.children = stage.actions.iter().map(|a| action_node(a, None, *window, &reason)).collect();
            node.reason = reason;
        }
    }
    node
}

/// Full per-patient tree for one window.
pub fn score_protocol(record: &PatientRecord, protocol: &Protocol, window: &Interval) -> ScoreNode {
    let mut node = ScoreNode::new(NodeKind::Protocol, &protocol.id, &protocol.name, 1.0, *window);
    node.children = protocol.stages.iter().map(|s| score_stage(record, s, window)).collect();
    node.set_value(recompute(&node));
    if node.value.is_none() {
        node.reason = Some("no stage defined in window".into());
    }
    node.population = vec![record.patient_id.clone()];
    node
}

/// Tree of the protocol with every value undefined.
pub fn skeleton(protocol: &Protocol, window: &Interval) -> ScoreNode {
    let mut node = ScoreNode::new(NodeKind::Protocol, &protocol.id, &protocol.name, 1.0, *window);
    node.children = protocol
        .stages
        .iter()
        .map(|s| {
            let mut st = ScoreNode::new(NodeKind::Stage, &s.id, &s.name, s.weight, *window);
            st.children = s.actions.iter().map(|a| action_node(a, None, *window, &None)).collect();
            st
        })
        .collect();
    node
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Granularity {
    /// One window covering the whole frame.
    #[default]
    Whole,
    /// Blocks of the given length counted from midnight UTC.
    Hours(u32),
}

impl Granularity {
    pub const DAY: Granularity = Granularity::Hours(24);

    pub fn split(self, frame: &Interval) -> Vec<Interval> {
        match self {
            Granularity::Whole => vec![*frame],
            Granularity::Hours(h) => frame.split(h),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whole" => Ok(Granularity::Whole),
            "day" => Ok(Granularity::DAY),
            other => match other.strip_prefix("hours:").map(str::parse::<u32>) {
                Some(Ok(h)) if h > 0 => Ok(Granularity::Hours(h)),
                _ => Err(format!("granularity must be `whole`, `day` or `hours:N`, got `{other}`")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimeframeError {
    #[error("OverlapError: sub-intervals {a:?} and {b:?} overlap")]
    Overlap { a: Interval, b: Interval },
    #[error("sub-interval {sub:?} is not inside frame {frame:?}")]
    NotContained { sub: Interval, frame: Interval },
    #[error("StructureMismatch at {path}")]
    StructureMismatch { path: String },
}

/// Duration-weighted score of a frame together with the defined duration it
/// rests on, so frame scores combine exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeframeScore {
    pub value: Option<f64>,
    pub defined_secs: f64,
}

impl TimeframeScore {
    /// Combines adjacent frame scores.
    pub fn combine(parts: &[TimeframeScore]) -> TimeframeScore {
        let defined_secs = parts.iter().filter(|p| p.value.is_some()).map(|p| p.defined_secs).sum();
        TimeframeScore {
            value: weighted_mean(parts.iter().map(|p| (p.defined_secs, p.value))),
            defined_secs,
        }
    }
}

fn check_partition(subs: &[Interval], frame: &Interval) -> Result<(), TimeframeError> {
    if let Some(sub) = subs.iter().find(|s| !s.is_within(frame)) {
        return Err(TimeframeError::NotContained { sub: *sub, frame: *frame });
    }
    let mut sorted = subs.to_vec();
    sorted.sort_by_key(|s| s.from);
    for w in sorted.windows(2) {
        if w[1].from < w[0].to {
            return Err(TimeframeError::Overlap { a: w[0], b: w[1] });
        }
    }
    Ok(())
}

/// `Σ durationᵢ × scoreᵢ / Σ durationᵢ` over defined sub-interval scores.
pub fn score_timeframe(sub_scores: &[(Interval, Option<f64>)], frame: &Interval) -> Result<TimeframeScore, TimeframeError> {
    let subs: Vec<Interval> = sub_scores.iter().map(|(i, _)| *i).collect();
    check_partition(&subs, frame)?;
    let parts: Vec<TimeframeScore> = sub_scores
        .iter()
        .map(|(i, v)| TimeframeScore {
            value: *v,
            defined_secs: i.duration_secs(),
        })
        .collect();
    Ok(TimeframeScore::combine(&parts))
}

/// Merges same-shaped trees node by node. `weights[i]` weighs `trees[i]`.
fn merge_nodes(trees: &[&ScoreNode], weights: &[f64], population: Option<&[&str]>) -> ScoreNode {
    let first = trees[0];
    let mut node = ScoreNode {
        value: None,
        percent: None,
        reason: None,
        population: Vec::new(),
        evidence: Vec::new(),
        children: Vec::new(),
        ..first.clone()
    };
    node.set_value(weighted_mean(weights.iter().zip(trees).map(|(w, t)| (*w, t.value))));
    if node.value.is_none() {
        node.reason = trees.iter().find_map(|t| t.reason.clone());
    }
    if let Some(ids) = population {
        node.population = ids
            .iter()
            .zip(trees)
            .filter(|(_, t)| t.value.is_some())
            .map(|(id, _)| id.to_string())
            .collect();
    }
    node.children = (0..first.children.len())
        .map(|i| {
            let kids: Vec<&ScoreNode> = trees.iter().map(|t| &t.children[i]).collect();
            merge_nodes(&kids, weights, population)
        })
        .collect();
    node
}

/// Combines per-sub-interval trees of one patient into a frame tree.
pub fn merge_timeframe_trees(trees: &[ScoreNode], frame: &Interval) -> Result<ScoreNode, TimeframeError> {
    let Some(first) = trees.first() else {
        return Err(TimeframeError::StructureMismatch { path: "<empty>".into() });
    };
    if trees.len() == 1 && trees[0].window == *frame {
        return Ok(trees[0].clone());
    }
    let subs: Vec<Interval> = trees.iter().map(|t| t.window).collect();
    check_partition(&subs, frame)?;
    if let Some(bad) = trees.iter().find(|t| !t.same_shape(first)) {
        return Err(TimeframeError::StructureMismatch { path: bad.id.clone() });
    }
    let refs: Vec<&ScoreNode> = trees.iter().collect();
    let weights: Vec<f64> = subs.iter().map(Interval::duration_secs).collect();
    let mut merged = merge_nodes(&refs, &weights, None);
    set_window(&mut merged, *frame);
    merged.kind = NodeKind::Timeframe;
    merged.population = first.population.clone();
    Ok(merged)
}

fn set_window(node: &mut ScoreNode, window: Interval) {
    node.window = window;
    node.children.iter_mut().for_each(|c| set_window(c, window));
}

/// Scores one patient over `frame`, split at `granularity` and merged by
/// duration.
pub fn score_patient(record: &PatientRecord, protocol: &Protocol, frame: &Interval, granularity: Granularity) -> ScoreNode {
    let trees: Vec<ScoreNode> = granularity
        .split(frame)
        .iter()
        .map(|w| score_protocol(record, protocol, w))
        .collect();
    merge_timeframe_trees(&trees, frame).expect("split produces a partition of same-shaped trees")
}

/// Node-wise patient average. The root carries the group score; every node
/// lists the patients defined at it.
pub fn group_tree(protocol: &Protocol, frame: &Interval, label: &str, patients: &[(&str, &ScoreNode)]) -> ScoreNode {
    let mut root = if patients.is_empty() {
        let mut s = skeleton(protocol, frame);
        s.reason = Some("no patients selected".into());
        s
    } else {
        let ids: Vec<&str> = patients.iter().map(|(id, _)| *id).collect();
        let trees: Vec<&ScoreNode> = patients.iter().map(|(_, t)| *t).collect();
        let weights = vec![1.0; trees.len()];
        let mut merged = merge_nodes(&trees, &weights, Some(&ids));
        set_window(&mut merged, *frame);
        merged
    };
    root.kind = NodeKind::Group;
    root.label = label.to_string();
    root
}

/// One aligned node of two trees.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffRow {
    pub path: String,
    pub kind: NodeKind,
    pub value_a: Option<f64>,
    pub value_b: Option<f64>,
    /// `value_b - value_a` when both are defined.
    pub delta: Option<f64>,
}

/// Aligns two trees of the same protocol node by node.
pub fn compare_cohorts(a: &ScoreNode, b: &ScoreNode) -> Result<Vec<DiffRow>, TimeframeError> {
    fn go(a: &ScoreNode, b: &ScoreNode, prefix: &str, out: &mut Vec<DiffRow>) -> Result<(), TimeframeError> {
        let path = if prefix.is_empty() { a.id.clone() } else { format!("{prefix}/{}", a.id) };
        if a.id != b.id || a.children.len() != b.children.len() {
            return Err(TimeframeError::StructureMismatch { path });
        }
        out.push(DiffRow {
            path: path.clone(),
            kind: a.kind,
            value_a: a.value,
            value_b: b.value,
            delta: a.value.zip(b.value).map(|(x, y)| y - x),
        });
        a.children.iter().zip(&b.children).try_for_each(|(x, y)| go(x, y, &path, out))
    }
    let mut out = Vec::new();
    go(a, b, "", &mut out)?;
    Ok(out)
}

/// Recomputes every weighted internal node bottom-up, after leaves changed.
pub fn refresh(node: &mut ScoreNode) {
    if node.children.is_empty() {
        return;
    }
    node.children.iter_mut().for_each(refresh);
    node.set_value(recompute(node));
}

/// Count of nodes per kind, for summaries.
pub fn kind_counts(node: &ScoreNode) -> BTreeMap<NodeKind, usize> {
    let mut out = BTreeMap::new();
    node.visit(&mut |_, n| *out.entry(n.kind).or_default() += 1);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn day(d: u32) -> crate::time::Instant {
        chrono::Utc.with_ymd_and_hms(2017, 1, d, 0, 0, 0).unwrap()
    }

    fn leaf(id: &str, weight: f64, value: Option<f64>) -> ScoreNode {
        let mut n = ScoreNode::new(NodeKind::Action, id, id, weight, Interval::new(day(1), day(2)).unwrap());
        n.set_value(value);
        n
    }

    fn stage(children: Vec<ScoreNode>) -> ScoreNode {
        let mut n = ScoreNode::new(NodeKind::Stage, "follow_up", "Follow-up", 1.0, Interval::new(day(1), day(2)).unwrap());
        n.children = children;
        n.set_value(recompute(&n));
        n
    }

    #[test]
    fn follow_up_stage_displays_89() {
        let s = stage(vec![leaf("pain", 0.30, Some(0.85)), leaf("skin", 0.35, Some(0.90)), leaf("norton", 0.35, Some(0.92))]);
        assert!((s.value.unwrap() - 0.892).abs() < 1e-12);
        assert_eq!(s.percent, Some(89));
    }

    #[test]
    fn undefined_child_renormalises() {
        let s = stage(vec![leaf("pain", 0.30, Some(0.85)), leaf("skin", 0.35, None), leaf("norton", 0.35, Some(0.92))]);
        let expected = (0.30 * 0.85 + 0.35 * 0.92) / 0.65;
        assert!((s.value.unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.8877).abs() < 1e-4);
    }

    #[test]
    fn protocol_with_undefined_stages() {
        let v = weighted_mean([(0.26, Some(1.0)), (0.22, Some(0.5)), (0.26, None), (0.21, None), (0.05, None)]).unwrap();
        assert!((v - 0.7708).abs() < 1e-4);
    }

    #[test]
    fn percent_rounds_half_up() {
        assert_eq!(percent(0.892), 89);
        assert_eq!(percent(0.885), 89);
        assert_eq!(percent(0.98), 98);
        assert_eq!(percent(1.0), 100);
        assert_eq!(percent(0.0), 0);
    }

    #[test]
    fn timeframe_examples() {
        let f = Interval::new(day(1), day(4)).unwrap();
        let two = Interval::new(day(1), day(3)).unwrap();
        let one = Interval::new(day(3), day(4)).unwrap();
        let s = score_timeframe(&[(two, Some(1.0)), (one, Some(0.5))], &f).unwrap();
        assert!((s.value.unwrap() - 2.5 / 3.0).abs() < 1e-12);
        assert_eq!(score_timeframe(&[(f, Some(0.3))], &f).unwrap().value, Some(0.3));
        let a = Interval::new(day(1), day(2)).unwrap();
        let b = Interval::new(day(2), day(3)).unwrap();
        let s = score_timeframe(&[(a, Some(0.4)), (b, Some(0.8))], &f).unwrap();
        assert!((s.value.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn timeframe_rejects_overlap_and_escape() {
        let f = Interval::new(day(1), day(4)).unwrap();
        let a = Interval::new(day(1), day(3)).unwrap();
        let b = Interval::new(day(2), day(4)).unwrap();
        assert!(matches!(score_timeframe(&[(a, Some(1.0)), (b, Some(1.0))], &f), Err(TimeframeError::Overlap { .. })));
        let out = Interval::new(day(3), day(5)).unwrap();
        assert!(matches!(score_timeframe(&[(out, Some(1.0))], &f), Err(TimeframeError::NotContained { .. })));
    }

    #[test]
    fn group_examples() {
        assert!((score_group(&[Some(0.8), Some(1.0)]).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(score_group(&[Some(0.3)]), Some(0.3));
        assert_eq!(score_group(&[Some(0.5), None, Some(1.0)]), Some(0.75));
        assert_eq!(score_group(&[]), None);
        assert_eq!(score_group(&[None]), None);
    }

    #[test]
    fn compare_identical_and_perturbed() {
        let a = stage(vec![leaf("pain", 0.30, Some(0.85)), leaf("skin", 0.35, Some(0.90)), leaf("norton", 0.35, Some(0.92))]);
        assert!(compare_cohorts(&a, &a).unwrap().iter().all(|r| r.delta == Some(0.0)));
        let mut b = a.clone();
        b.children[1].set_value(Some(1.0));
        refresh(&mut b);
        let rows = compare_cohorts(&a, &b).unwrap();
        let changed: Vec<&str> = rows.iter().filter(|r| r.delta != Some(0.0)).map(|r| r.path.as_str()).collect();
        assert_eq!(changed, ["follow_up", "follow_up/skin"]);
        assert!((rows[0].delta.unwrap() - 0.035).abs() < 1e-12);
        let mut c = a.clone();
        c.children.pop();
        assert!(matches!(compare_cohorts(&a, &c), Err(TimeframeError::StructureMismatch { .. })));
    }

    #[test]
    fn granularity_parses() {
        assert_eq!("day".parse::<Granularity>(), Ok(Granularity::Hours(24)));
        assert_eq!("hours:8".parse::<Granularity>(), Ok(Granularity::Hours(8)));
        assert!("hours:0".parse::<Granularity>().is_err());
        assert!("weekly".parse::<Granularity>().is_err());
    }
}
