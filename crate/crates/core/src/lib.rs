//! labci: a small CI system for reproducible computational experiments.
//!
//! A coordination [`server`] turns source snapshots into builds of jobs;
//! [`runner`] agents claim jobs, execute them through the [`pipeline`]
//! executor and stream logs and artifacts back; the [`store`] keeps
//! everything content-addressed and records an append-only ledger that ties
//! each source snapshot to the logs and artifacts of every run.

pub mod config;
pub mod parallel;
pub mod pipeline;
pub mod store;
pub mod server;
pub mod runner;
