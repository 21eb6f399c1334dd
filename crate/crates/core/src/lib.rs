//! Discrete-event simulation of mixed real-time and generative inference
//! workloads on heterogeneous CPU/GPU/NPU backends.

pub mod engine;
pub mod error;
pub mod latencydb;
pub mod metrics;
pub mod oracle;
pub mod policies;
pub mod runner;
pub mod time;
pub mod workload;

pub use engine::{default_backends, simulate, simulate_with, BackendSpec, SimConfig, Trace};
pub use error::{Error, Result};
pub use latencydb::{BackendKind, LatencyDatabase, StageKind};
pub use metrics::{compute, MetricsReport};
pub use policies::{PolicyId, SchedulerPolicy};
pub use workload::{builtin_scenario, load_scenario, BuiltinScenario, ScenarioSpec};
