//! Scenario files, the closed simulation loop, batch experiments and
//! file outputs.

pub mod config;
pub mod experiments;
pub mod export;
pub mod sim;

pub use config::{RunMode, Scenario, ScenarioConfig};
pub use experiments::{run_ablation, run_delta_sweep, AblationResult, SweepRow};
pub use export::{export_ablation, export_run, export_sweep};
pub use sim::{run_scenario, run_with, RunLog, RunOptions, StepRecord};
