//! Experiment driver for segmentation super-resolution on synthetic cardiac
//! phantoms: data generation, generator training, degradation, up-sampling
//! with every method, and the evaluation tables.

pub mod config;
pub mod error;
pub mod layout;
pub mod metrics;
pub mod pipeline;

pub use config::{derive_seed, ExperimentConfig, Method};
pub use error::{CliError, CliResult};
pub use layout::Layout;
pub use metrics::{cmd_evaluate, MetricsReport, MetricsRow};
pub use pipeline::{cmd_degrade, cmd_gen_data, cmd_superres, cmd_train_vae};
