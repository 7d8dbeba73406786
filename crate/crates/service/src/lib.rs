//! HTTP service and command-line front end for the habitus engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod store;
