//! Command line and HTTP front end for controllable infrared/visible fusion.

pub mod args;
pub mod commands;
pub mod service;

pub use args::Cli;
pub use commands::run;
