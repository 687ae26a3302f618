//! Guideline quality-assessment engine.
//!
//! Scores how well recorded clinical care complied with a formally specified
//! care protocol. A [`protocol::Protocol`] is a weighted hierarchy of stages
//! and actions, each action carrying one constraint (binary, cyclical, time,
//! entry-condition, order, multiple or combination). Patient timelines from
//! the [`events`] store are scored per action by the [`scoring`] engine,
//! rolled up by [`aggregation`] into a drill-down tree, and compared against
//! manual assessments with the [`eval`] harness.

pub mod aggregation;
pub mod eval;
pub mod events;
pub mod protocol;
pub mod scoring;
pub mod time;
pub mod value;

pub use aggregation::{NodeKind, ScoreNode};
pub use events::{Cohort, Event, EventKind, PatientRecord};
pub use protocol::{parse_protocol, Protocol};
pub use scoring::{score_action, ActionScore};
pub use time::{Instant, Interval};
pub use value::Value;
