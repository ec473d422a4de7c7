//! Configuration, CSV output, threading and the `minattn` command line.

pub mod app;
pub mod check;
pub mod cli;
pub mod config;
pub mod executor;
pub mod output;
