//! Instants, half-open intervals and duration helpers.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Instant = DateTime<Utc>;

pub const SECS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IntervalError {
    #[error("interval start {from} is not before its end {to}")]
    Empty { from: Instant, to: Instant },
}

/// Half-open time window `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub from: Instant,
    pub to: Instant,
}

impl Interval {
    pub fn new(from: Instant, to: Instant) -> Result<Self, IntervalError> {
        if from < to {
            Ok(Self { from, to })
        } else {
            Err(IntervalError::Empty { from, to })
        }
    }

    pub fn contains(&self, t: Instant) -> bool {
        self.from <= t && t < self.to
    }

    pub fn duration_secs(&self) -> f64 {
        secs_between(self.from, self.to)
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let from = self.from.max(other.from);
        let to = self.to.min(other.to);
        Interval::new(from, to).ok()
    }

    pub fn is_within(&self, outer: &Interval) -> bool {
        outer.from <= self.from && self.to <= outer.to
    }

    /// Splits the interval at every multiple of `block_hours` counted from
    /// midnight UTC of the start day. `block_hours = 24` gives calendar days.
    pub fn split(&self, block_hours: u32) -> Vec<Interval> {
        assert!(block_hours > 0, "block size must be positive");
        let block = Duration::hours(i64::from(block_hours));
        let midnight = self
            .from
            .date_naive()
            .and_hms_opt(0, 0, 0)
            .expect("midnight exists")
            .and_utc();
        let mut boundary = midnight;
        while boundary <= self.from {
            boundary += block;
        }
        let mut out = Vec::new();
        let mut start = self.from;
        while boundary < self.to {
            out.push(Interval { from: start, to: boundary });
            start = boundary;
            boundary += block;
        }
        out.push(Interval { from: start, to: self.to });
        out
    }
}

/// Signed seconds from `a` to `b`.
pub fn secs_between(a: Instant, b: Instant) -> f64 {
    let d = b - a;
    d.num_milliseconds() as f64 / 1000.0
}

pub fn hours_between(a: Instant, b: Instant) -> f64 {
    secs_between(a, b) / SECS_PER_HOUR
}

pub fn add_hours(t: Instant, hours: f64) -> Instant {
    t + Duration::milliseconds((hours * SECS_PER_HOUR * 1000.0).round() as i64)
}

/// Rounds to the nearest whole minute.
pub fn round_to_minute(t: Instant) -> Instant {
    let secs = t.timestamp();
    let rounded = ((secs as f64) / 60.0).round() as i64 * 60;
    DateTime::from_timestamp(rounded, 0).expect("timestamp in range")
}

pub fn format_instant(t: &Instant) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true)
}

pub fn parse_instant(s: &str) -> Result<Instant, chrono::ParseError> {
    let s = s.trim();
    match DateTime::parse_from_rfc3339(s) {
        Ok(t) => Ok(t.with_timezone(&Utc)),
        Err(e) => {
            // Accept naive timestamps and bare dates as UTC.
            chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
                .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
                .or_else(|_| chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").map(|d| d.and_time(chrono::NaiveTime::MIN)))
                .map(|n| n.and_utc())
                .map_err(|_| e)
        }
    }
}
