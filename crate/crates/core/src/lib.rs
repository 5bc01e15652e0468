//! Time-aware federated learning.
//!
//! Clients train a small MLP on drifting local data, stamp each update with a
//! synchronized clock reading, and a server folds the updates into a global
//! model either by dataset size alone (FedAvg) or by dataset size times an
//! exponential freshness weight (SyncFed). Rounds run over a deterministic
//! discrete-event network with per-link latency injection, or over loopback
//! TCP sockets.
//!
//! Module map:
//!
//! - [`clocksync`]: drifting clocks and the four-timestamp offset/delay exchange.
//! - [`learner`]: MLP forward/backward, local SGD, synthetic drifting data.
//! - [`aggregation`]: freshness weights, FedAvg, SyncFed, effective AoI.
//! - [`transport`]: wire format, event queue, latency models, socket framing.
//! - [`orchestrator`]: client/server state machines and experiment drivers.
//! - [`harness`]: JSON config, comparison runs, CSV and plot-data output.

pub mod aggregation;
pub mod clocksync;
pub mod harness;
pub mod learner;
pub mod orchestrator;
pub mod seed;
pub mod transport;

pub use aggregation::{
    compute_staleness, effective_aoi, fedavg, fedavg_weights, freshness_weight, syncfed,
    AggregationError, AggregationWeights, ClientUpdate, Staleness, WeightEntry,
};
pub use clocksync::{
    estimate_offset_delay, sync_round, ClockError, ClockState, SyncEstimate, SyncFailure,
    SyncOutcome, SyncSample,
};
pub use harness::config::{parse_config, ConfigError, ExperimentConfig, StrategyChoice};
pub use learner::{Dataset, LearnerError, ModelParams, SyntheticSpec, TrainConfig};
pub use orchestrator::{
    run_experiment, ExperimentError, LagModel, RoundRecord, RunOptions, RunOutput, Strategy,
};
pub use transport::{
    wire::{decode, encode, Message, WireError},
    EventQueue, LatencyModel, Link, NodeId,
};

/// Nanoseconds per second.
pub const NANOS_PER_SEC: f64 = 1e9;

/// Converts seconds to the nearest integer nanosecond count.
pub fn secs_to_nanos(secs: f64) -> i64 {
    (secs * NANOS_PER_SEC).round() as i64
}

pub fn nanos_to_secs(nanos: i64) -> f64 {
    nanos as f64 / NANOS_PER_SEC
}
