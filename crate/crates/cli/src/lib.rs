//! The `simpa` command line and HTTP service.

pub mod cli;
pub mod metrics;
pub mod server;
