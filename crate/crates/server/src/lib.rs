//! Preference-elicitation HTTP service and the `vizpref` command line.

pub mod cli;
pub mod service;

pub use service::{router, serve, spawn, AppState, ServiceConfig, ServiceError, Stats};
