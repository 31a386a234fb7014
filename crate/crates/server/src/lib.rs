//! REST control plane and command-line front end for the flowgate engine.

pub mod api;
pub mod auth;
pub mod cli;
