//! Config files, presets, execution, and trace output for the command-line tool.

pub mod config;
pub mod presets;
pub mod runner;
pub mod trace;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig};
pub use presets::{preset, PRESET_NAMES};
pub use runner::{run, RunError, RunOutcome};
pub use trace::emit_csv;
