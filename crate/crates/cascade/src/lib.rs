//! IO, configuration and experiment orchestration around `cascade_core`.
//!
//! The `cascade` binary exposes four subcommands: `gen-data` writes a seeded
//! synthetic history, `fit` estimates the forecast and uncertainty models,
//! `dispatch` runs one rolling-horizon learning pass, and `experiment` runs
//! the result matrices. Everything a run writes goes under the configured
//! output directory next to a manifest that pins the configuration hash and
//! seeds.

pub mod config;
pub mod data;
pub mod experiment;
pub mod fit;
pub mod output;
pub mod synth;
