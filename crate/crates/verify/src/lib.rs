//! Holds the `acceptance` test target. It is a separate package so that a
//! failing criterion does not stop the rest of the workspace suite.
