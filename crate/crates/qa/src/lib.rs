//! Command-line tool and HTTP service around `qa-core`.

pub mod cli;
pub mod query;
pub mod service;
