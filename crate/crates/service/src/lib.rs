//! Operational shell around `foldedit-core`: layered configuration, a
//! persistent session registry, the HTTP session API and the `foldedit`
//! command line.

pub mod api;
pub mod cli;
pub mod config;
pub mod registry;
