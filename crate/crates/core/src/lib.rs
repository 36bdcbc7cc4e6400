//! Registry, environment provisioning and run orchestration for reusable
//! model-load, dataset-load and verification scripts.
//!
//! Functional scripts are registered as assets and associated with an
//! environment-setup script. A selection of one script of each functional
//! kind is runnable only when all three share that association; running it
//! provisions (or reuses) the content-addressed environment and hands a JSON
//! manifest to the in-environment runner.

pub mod cli;
pub mod env;
pub mod error;
mod process;
pub mod registry;
pub mod run;
pub mod store;

pub use env::{env_id_for, EnvId, EnvRecord, EnvState};
pub use error::{Error, Result};
pub use registry::{AssetId, AssetKind, AssetRecord, Registry, Triple};
pub use run::{RunManifest, RunOutcome, RunRecord, RunResult, Verdict};
pub use store::Store;
