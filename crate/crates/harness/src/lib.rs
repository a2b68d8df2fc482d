//! Experiment harness: synthetic data, configuration, training, pruning
//! criteria, ablations and reports.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod criteria;
pub mod data;
pub mod report;
pub mod train;
