//! Deterministic network simulation with adversarial validators.

pub mod config;
pub mod dht;
pub mod explain;
pub mod net;
pub mod report;
pub mod runner;
pub mod suite;

pub use config::{
    ConfigError, DelayModel, Partition, RotationSpec, ScenarioConfig, StrategyKind, TxInjection,
};
pub use explain::{explain, ExplainError};
pub use dht::{DhtError, DhtItem, TempDht};
pub use net::{schedule_broadcast, MessageKind, NetMessage, NetStats};
pub use report::{BlockReport, Check, RunReport, Status, ValidatorReport};
pub use runner::{run_scenario, run_scenario_with, RunOptions, Simulation};
pub use suite::{splitter_with_coin, suite_scenario, SUITE_NAMES};
