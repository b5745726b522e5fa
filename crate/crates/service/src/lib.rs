//! Command-line pipeline and HTTP retrieval service.

pub mod cli;
pub mod server;
