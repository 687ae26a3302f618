//! Four-point fuzzy membership over durations.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

/// Piecewise-linear membership `a ≤ b ≤ c ≤ d`, points in hours.
///
/// The plateau `[b, c]` scores 1, the edges `(a, b)` and `(c, d)` are linear
/// and anything at or beyond `a`/`d` scores 0. An infinite `a` or `d` removes
/// the corresponding edge: the function stays at 1 on that side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trapezoid {
    pub a: Bound,
    pub b: Bound,
    pub c: Bound,
    pub d: Bound,
}

/// A trapezoid point: hours, or an unbounded end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound(pub f64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct TrapezoidError(pub String);

impl Trapezoid {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self {
            a: Bound(a),
            b: Bound(b),
            c: Bound(c),
            d: Bound(d),
        }
    }

    /// Checks point ordering and the allowed infinities.
    pub fn validate(&self) -> Result<(), TrapezoidError> {
        let (a, b, c, d) = (self.a.0, self.b.0, self.c.0, self.d.0);
        if [a, b, c, d].iter().any(|v| v.is_nan()) {
            return Err(TrapezoidError("trapezoid point is NaN".into()));
        }
        if a == f64::INFINITY {
            return Err(TrapezoidError("a must be finite or -inf".into()));
        }
        if !b.is_finite() {
            return Err(TrapezoidError("b must be finite".into()));
        }
        if c == f64::NEG_INFINITY {
            return Err(TrapezoidError("c must be finite or +inf".into()));
        }
        if d == f64::NEG_INFINITY {
            return Err(TrapezoidError("d must be finite or +inf".into()));
        }
        if a > b {
            return Err(TrapezoidError("a ≤ b violated".into()));
        }
        if b > c {
            return Err(TrapezoidError("b ≤ c violated".into()));
        }
        if c > d {
            return Err(TrapezoidError("c ≤ d violated".into()));
        }
        Ok(())
    }

    /// Membership of a duration given in hours.
    pub fn membership(&self, t: f64) -> f64 {
        let (a, b, c, d) = (self.a.0, self.b.0, self.c.0, self.d.0);
        if t.is_nan() {
            return 0.0;
        }
        if b <= t && t <= c {
            return 1.0;
        }
        if t < b {
            if t <= a {
                return 0.0;
            }
            if a == f64::NEG_INFINITY {
                return 1.0;
            }
            return (t - a) / (b - a);
        }
        if t >= d {
            return 0.0;
        }
        if d == f64::INFINITY {
            return 1.0;
        }
        (d - t) / (d - c)
    }

    /// Midpoint of the plateau, or one hour past `b` when `c` is unbounded.
    pub fn plateau_midpoint(&self) -> f64 {
        if self.c.0.is_finite() {
            (self.b.0 + self.c.0) / 2.0
        } else {
            self.b.0 + 1.0
        }
    }
}

impl fmt::Display for Trapezoid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.a, self.b, self.c, self.d)
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("+inf")
        } else if self.0 == f64::NEG_INFINITY {
            f.write_str("-inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Bound {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else {
            serializer.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Bound {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct BoundVisitor;

        impl Visitor<'_> for BoundVisitor {
            type Value = Bound;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number of hours, \"-inf\" or \"+inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Bound, E> {
                Ok(Bound(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Bound, E> {
                Ok(Bound(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Bound, E> {
                Ok(Bound(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Bound, E> {
                match v {
                    "-inf" => Ok(Bound(f64::NEG_INFINITY)),
                    "+inf" | "inf" => Ok(Bound(f64::INFINITY)),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }

        deserializer.deserialize_any(BoundVisitor)
    }
}
