//! Scenario runner and persistence: configuration files, evaluation
//! histories, run summaries, and plot-ready power-curve tables.

pub mod config;
pub mod files;
pub mod runner;

pub use config::{builtin_effect_set, BUILTIN_EFFECT_SETS, RunConfig, ScenarioConfig};
pub use files::{read_history, write_curves, write_history, write_summary, CurveRow, HistoryRow};
pub use runner::{emit_power_curves, emit_summary, run_scenarios, RunLabel, RunOutcome};
