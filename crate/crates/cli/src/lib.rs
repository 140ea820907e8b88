//! Pipeline orchestration behind the `evasion` binary.
//!
//! Each subcommand is a [`Stage`] that reads upstream artifacts from an
//! output directory and writes its own plus a manifest stamped with the
//! config hash and seeds.

pub mod artifacts;
pub mod config;
pub mod stages;

pub use artifacts::{Manifest, Stage, Workspace};
pub use config::{Overrides, RunConfig};
pub use stages::{run_pipeline, run_stage};
