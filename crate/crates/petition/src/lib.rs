//! petition: files, the case service, the load harness and the command
//! line around `petition-core`.
//!
//! - [`pnm`]: P5/P6 pixmaps.
//! - [`manifest`]: line-delimited corpus manifests.
//! - [`corpus`]: rendering a synthetic corpus to disk.
//! - [`training`]: training, evaluation, grid search, checkpoint files.
//! - [`rules`]: regulation tables and templates.
//! - [`service`]: event log, case store, pipeline worker, HTTP API.
//! - [`bench`]: latency, throughput and demand-growth runs over HTTP.

pub mod bench;
pub mod corpus;
pub mod manifest;
pub mod pnm;
pub mod rules;
pub mod service;
pub mod training;
