//! Deterministic discrete-event simulation of the whole protocol stack.

pub mod engine;
pub mod metrics;
pub mod nat;
pub mod pool;
pub mod scenario;

pub use engine::{run_single, run_sweep, Simulation, Taps};
pub use metrics::{EventLog, GlobalMetrics, IspMetrics, LegacyMetrics, Metrics, Outcome, SessionMetrics};
pub use nat::Nat;
pub use pool::BoxPool;
pub use scenario::{
    AdversaryKind, ClientConfig, ConfigInvalid, IspConfig, OriginConfig, PathConfig, PortBinding,
    PortsConfig, QueueConfig, ReflectionConfig, ScenarioConfig, Sessions, SfDef, SfKind,
    SignatureDef, TrafficConfig,
};
