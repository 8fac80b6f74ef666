//! Experiment harness: field families, the minimum-principle pipeline,
//! configs, reports and the command-line front end.

pub mod families;
pub mod contact;
pub mod pipeline;
pub mod cli;
pub mod commands;
pub mod config;
pub mod report;
