//! Scene files, scenario generators, the single-domain reference, metrics and
//! experiment drivers for the distributed affine-body simulator.

pub mod config;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod reference;
pub mod run;
pub mod scenarios;
pub mod snapshot;

pub use config::SceneConfig;
pub use error::{HarnessError, Result};
pub use metrics::{mse_to_reference, MetricsRecord};
pub use reference::run_reference;
pub use run::{run_distributed, Mode, RunOptions, RunOutput, RunSummary};
pub use snapshot::Snapshot;
