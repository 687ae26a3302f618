//! Boolean conditions over the latest observed value of each concept.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionExpr {
    All(Vec<ConditionExpr>),
    Any(Vec<ConditionExpr>),
    Not(Box<ConditionExpr>),
    Atom(Atom),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub concept: String,
    pub op: Comparator,
    pub value: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Latest known value per concept.
pub type ObservationState<'a> = BTreeMap<&'a str, &'a Value>;

impl Comparator {
    pub fn is_ordering(self) -> bool {
        matches!(self, Comparator::Lt | Comparator::Le | Comparator::Gt | Comparator::Ge)
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "=",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    pub fn negated(self) -> Comparator {
        match self {
            Comparator::Eq => Comparator::Ne,
            Comparator::Ne => Comparator::Eq,
            Comparator::Lt => Comparator::Ge,
            Comparator::Le => Comparator::Gt,
            Comparator::Gt => Comparator::Le,
            Comparator::Ge => Comparator::Lt,
        }
    }
}

impl Atom {
    pub fn new(concept: &str, op: Comparator, value: impl Into<Value>) -> Self {
        Self {
            concept: concept.to_string(),
            op,
            value: value.into(),
        }
    }

    /// Compares an observed value against this atom. Mixed number/text
    /// comparisons are never equal and never ordered.
    pub fn holds_for(&self, observed: &Value) -> bool {
        match (observed, &self.value) {
            (Value::Number(x), Value::Number(y)) => match self.op {
                Comparator::Eq => x == y,
                Comparator::Ne => x != y,
                Comparator::Lt => x < y,
                Comparator::Le => x <= y,
                Comparator::Gt => x > y,
                Comparator::Ge => x >= y,
            },
            (Value::Text(x), Value::Text(y)) => match self.op {
                Comparator::Eq => x == y,
                Comparator::Ne => x != y,
                _ => false,
            },
            _ => self.op == Comparator::Ne,
        }
    }
}

impl ConditionExpr {
    pub fn atom(concept: &str, op: Comparator, value: impl Into<Value>) -> Self {
        ConditionExpr::Atom(Atom::new(concept, op, value))
    }

    /// Evaluates against the current state. An atom whose concept has not been
    /// observed yet is false.
    pub fn eval(&self, state: &ObservationState<'_>) -> bool {
        match self {
            ConditionExpr::All(xs) => xs.iter().all(|x| x.eval(state)),
            ConditionExpr::Any(xs) => xs.iter().any(|x| x.eval(state)),
            ConditionExpr::Not(x) => !x.eval(state),
            ConditionExpr::Atom(atom) => state
                .get(atom.concept.as_str())
                .is_some_and(|v| atom.holds_for(v)),
        }
    }

    pub fn concepts(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_concepts(&mut out);
        out
    }

    fn collect_concepts<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            ConditionExpr::All(xs) | ConditionExpr::Any(xs) => {
                xs.iter().for_each(|x| x.collect_concepts(out))
            }
            ConditionExpr::Not(x) => x.collect_concepts(out),
            ConditionExpr::Atom(a) => {
                out.insert(a.concept.as_str());
            }
        }
    }

    pub fn atoms(&self) -> Vec<&Atom> {
        match self {
            ConditionExpr::All(xs) | ConditionExpr::Any(xs) => {
                xs.iter().flat_map(|x| x.atoms()).collect()
            }
            ConditionExpr::Not(x) => x.atoms(),
            ConditionExpr::Atom(a) => vec![a],
        }
    }
}

impl fmt::Display for ConditionExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, xs: &[ConditionExpr], sep: &str| {
            f.write_str("(")?;
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    write!(f, " {sep} ")?;
                }
                write!(f, "{x}")?;
            }
            f.write_str(")")
        };
        match self {
            ConditionExpr::All(xs) => join(f, xs, "AND"),
            ConditionExpr::Any(xs) => join(f, xs, "OR"),
            ConditionExpr::Not(x) => write!(f, "NOT {x}"),
            ConditionExpr::Atom(a) => write!(f, "{} {} {}", a.concept, a.op.symbol(), a.value),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_with_little_secretion() -> ConditionExpr {
        ConditionExpr::All(vec![
            ConditionExpr::atom("ULCER_COLOR", Comparator::Eq, "red"),
            ConditionExpr::Any(vec![
                ConditionExpr::atom("ULCER_SECRETION", Comparator::Eq, "none"),
                ConditionExpr::atom("ULCER_SECRETION", Comparator::Eq, "little"),
            ]),
        ])
    }

    #[test]
    fn evaluates_nested_expression() {
        let cond = red_with_little_secretion();
        let red = Value::from("red");
        let little = Value::from("little");
        let heavy = Value::from("heavy");
        let mut state = ObservationState::new();
        assert!(!cond.eval(&state));
        state.insert("ULCER_COLOR", &red);
        assert!(!cond.eval(&state));
        state.insert("ULCER_SECRETION", &little);
        assert!(cond.eval(&state));
        state.insert("ULCER_SECRETION", &heavy);
        assert!(!cond.eval(&state));
    }

    #[test]
    fn numeric_comparisons() {
        let below = ConditionExpr::atom("NORTON_SCORE", Comparator::Lt, 14.0);
        let twelve = Value::from(12.0);
        let text = Value::from("12");
        let mut state = ObservationState::new();
        state.insert("NORTON_SCORE", &twelve);
        assert!(below.eval(&state));
        state.insert("NORTON_SCORE", &text);
        assert!(!below.eval(&state));
    }

    #[test]
    fn missing_concept_is_false_even_under_ne() {
        let cond = ConditionExpr::atom("ULCER_ODOR", Comparator::Ne, "none");
        assert!(!cond.eval(&ObservationState::new()));
        assert!(ConditionExpr::Not(Box::new(cond)).eval(&ObservationState::new()));
    }

    #[test]
    fn json_shape() {
        let json = r#"{"all":[{"atom":{"concept":"ULCER_COLOR","op":"eq","value":"red"}},
                              {"not":{"atom":{"concept":"ULCER_GRADE","op":"ge","value":3}}}]}"#;
        let cond: ConditionExpr = serde_json::from_str(json).unwrap();
        assert_eq!(cond.concepts().len(), 2);
        assert_eq!(cond.to_string(), "(ULCER_COLOR = red AND NOT ULCER_GRADE >= 3)");
    }
}
