//! Agent-based grid-city traffic simulator in which every vehicle combines a
//! rule-based driving controller with an online deep-Q-learning navigator.

pub mod config;
pub mod error;
pub mod metrics;
pub mod navigation;
pub mod rl;
pub mod sim;
pub mod vehicle;
pub mod world;

pub use config::{load_config, load_map_params, parse_config, Manifest, ScenarioConfig};
pub use error::{Error, Result};
pub use sim::{pretrain, run_scenario, PretrainOutcome, RunArtifacts, Simulation};
