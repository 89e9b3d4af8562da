//! Command-line and HTTP front ends for the atlas engine.

pub mod auth;
pub mod jobs;
pub mod log;
pub mod server;
