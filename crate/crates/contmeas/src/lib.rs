//! Host-side companion to `contmeas-core`: parallel ensembles, run
//! configuration, CSV/JSON output and the command-line front end.

pub mod cli;
pub mod config;
pub mod ensemble;
pub mod output;
pub mod run;

pub use contmeas_core as model;
