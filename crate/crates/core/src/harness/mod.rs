//! Experiment plumbing: data, evaluation, configuration, checkpoints and runs.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod eval;
pub mod gradcheck;
pub mod run;
pub mod synthetic;
