//! Client and server state machines for synchronous freshness-aware rounds.
//!
//! One round: the server broadcasts `w^t`; each client picks a training base
//! (the current model, or with probability `p_lag` an older cached one),
//! trains locally, stamps the result with its synchronized clock, and uploads.
//! The server aggregates once every client has reported or the round timeout
//! fires, using `T_s` read once at the aggregation instant.
//!
//! [`sim::run_experiment`] drives this over the discrete-event network;
//! [`socket::run_experiment_socket`] over loopback TCP.

pub mod sim;
pub mod socket;

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    self, effective_aoi, fedavg, fedavg_weights, freshness_weight, syncfed, AggregationError,
    ClientUpdate,
};
pub use crate::aggregation::{compute_staleness, Staleness};
use crate::clocksync::{ClockError, ClockState, SyncEstimate};
use crate::harness::config::{ClockConfig, ExperimentConfig, LagConfig};
use crate::learner::{
    evaluate, generate_synthetic, init_model, local_train, Dataset, LearnerError, ModelParams,
    SyntheticSpec, TrainConfig,
};
use crate::seed::derive_seed;
use crate::transport::socket::FrameError;
use crate::transport::wire::WireError;
use crate::transport::{LatencyModel, Link, TransportError};

pub use sim::{run_experiment, RunOptions};
pub use socket::run_experiment_socket;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment setting {field}: {message}")]
    Setting { field: String, message: String },
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("socket transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Syncfed,
    Fedavg,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::Syncfed, Strategy::Fedavg];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Syncfed => "syncfed",
            Strategy::Fedavg => "fedavg",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "syncfed" => Ok(Strategy::Syncfed),
            "fedavg" => Ok(Strategy::Fedavg),
            other => Err(format!(
                "unknown strategy `{other}` (expected syncfed or fedavg)"
            )),
        }
    }
}

/// Seeded straggler model.
#[derive(Debug, Clone, PartialEq)]
pub struct LagModel {
    pub p_lag: f64,
    pub max_lag_rounds: u32,
    /// Uniform extra compute delay bounds, seconds.
    pub extra_delay: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagDraw {
    /// 0 when the client trains on the current model.
    pub lag_rounds: u32,
    pub extra_delay: f64,
}

impl LagModel {
    pub fn none() -> Self {
        Self {
            p_lag: 0.0,
            max_lag_rounds: 1,
            extra_delay: (0.0, 0.0),
        }
    }

    /// Three draws per call regardless of outcome, so the stream stays aligned
    /// across parameter changes.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> LagDraw {
        let trigger: f64 = rng.random();
        let depth = rng.random_range(1..=self.max_lag_rounds.max(1));
        let unit: f64 = rng.random();
        let (lo, hi) = self.extra_delay;
        LagDraw {
            lag_rounds: if trigger < self.p_lag { depth } else { 0 },
            extra_delay: lo + unit * (hi - lo),
        }
    }
}

impl From<&LagConfig> for LagModel {
    fn from(c: &LagConfig) -> Self {
        Self {
            p_lag: c.p_lag,
            max_lag_rounds: c.max_lag_rounds,
            extra_delay: (c.extra_delay_s[0], c.extra_delay_s[1]),
        }
    }
}

#[derive(Debug, Clone)]
struct CachedGlobal {
    round: u32,
    params: ModelParams,
    /// True time the model arrived.
    received_at: f64,
}

/// What a client produced in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStep {
    pub update: ClientUpdate,
    /// True time the upload leaves the client.
    pub send_at: f64,
    /// Round of the global model the update was trained from.
    pub base_round: u32,
    /// `round - base_round`.
    pub lag_rounds: u32,
    /// The requested lag had no cached model; the oldest cached one was used.
    pub lag_fallback: bool,
    pub extra_delay: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u16,
    pub name: String,
    pub clock: ClockState,
    pub data_spec: SyntheticSpec,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub lag: LagModel,
    lag_rng: ChaCha8Rng,
    /// Simulated local training time, seconds.
    pub compute_time: f64,
    cache: VecDeque<CachedGlobal>,
    pub sync: Option<SyncEstimate>,
}

impl ClientState {
    /// Highest round whose global model this client has seen.
    pub fn last_round(&self) -> Option<u32> {
        self.cache.back().map(|c| c.round)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        client_id: u16,
        name: impl Into<String>,
        clock: ClockState,
        data_spec: SyntheticSpec,
        data_seed: u64,
        train: TrainConfig,
        lag: LagModel,
        lag_seed: u64,
        compute_time: f64,
    ) -> Self {
        Self {
            client_id,
            name: name.into(),
            clock,
            data_spec,
            data_seed,
            train,
            lag,
            lag_rng: rand::SeedableRng::seed_from_u64(lag_seed),
            compute_time,
            cache: VecDeque::new(),
            sync: None,
        }
    }

    /// Local dataset as of `round`.
    pub fn dataset(&self, round: u32) -> Result<Dataset, LearnerError> {
        generate_synthetic(&self.data_spec, round, self.data_seed)
    }

    pub fn m_n(&self) -> u64 {
        self.data_spec.samples_per_client as u64
    }

    /// Handles `GLOBAL_MODEL{round}` arriving at `true_time`.
    ///
    /// Without lag the client trains `global` on its round-`round` data and
    /// stamps `T_n` after `compute_time + extra_delay`. A lagged client
    /// instead delivers the update it computed from the round `round - k`
    /// model on that round's data; its timestamp is that computation's
    /// completion time, so the server sees it as `k` rounds stale.
    pub fn client_step(
        &mut self,
        round: u32,
        global: &ModelParams,
        true_time: f64,
    ) -> Result<ClientStep, ExperimentError> {
        if let Some(last) = self.cache.back() {
            if round < last.round {
                return Err(ExperimentError::Protocol(format!(
                    "client {} got round {round} after round {}",
                    self.client_id, last.round
                )));
            }
        }
        self.cache.push_back(CachedGlobal {
            round,
            params: global.clone(),
            received_at: true_time,
        });
        while self.cache.len() > self.lag.max_lag_rounds as usize + 1 {
            self.cache.pop_front();
        }

        let draw = self.lag.draw(&mut self.lag_rng);
        let (base, lag_fallback) = if draw.lag_rounds == 0 {
            (self.cache.back().expect("just pushed"), false)
        } else {
            let wanted = round.checked_sub(draw.lag_rounds);
            match wanted.and_then(|w| self.cache.iter().find(|c| c.round == w)) {
                Some(c) => (c, false),
                None => (self.cache.front().expect("non-empty"), true),
            }
        };
        let base_round = base.round;
        let data = self.dataset(base_round)?;
        let cfg = TrainConfig {
            seed: derive_seed(self.train.seed, "round", base_round as u64),
            ..self.train.clone()
        };
        let params = local_train(&base.params, &data, &cfg)?;

        let send_at = true_time + self.compute_time + draw.extra_delay;
        let completed_at = if base_round == round {
            send_at
        } else {
            base.received_at + self.compute_time
        };
        let generated_at = self.clock.read_clock(completed_at)?;

        Ok(ClientStep {
            update: ClientUpdate {
                client_id: self.client_id,
                round,
                params,
                generated_at,
                m_n: self.m_n(),
            },
            send_at,
            base_round,
            lag_rounds: round - base_round,
            lag_fallback,
            extra_delay: draw.extra_delay,
        })
    }
}

/// An update as received by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub update: ClientUpdate,
    /// Server clock reading on arrival.
    pub arrived_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: u16,
    pub generated_at: f64,
    pub arrived_at: f64,
    pub staleness: f64,
    /// `T_n > T_s`; staleness was clamped to zero.
    pub negative_staleness: bool,
    pub lambda: f64,
    /// Normalized weight under the run's strategy.
    pub weight: f64,
    pub m_n: u64,
    pub lagged: bool,
    pub lag_rounds: u32,
}

/// Per-round telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// `T_s`, server clock.
    pub server_time: f64,
    /// Accuracy on the round's drifted validation sample.
    pub accuracy: f64,
    /// Accuracy on the fixed round-0 validation sample.
    pub stationary_accuracy: f64,
    /// Weighted mean staleness under the strategy's weights; NaN when skipped.
    pub effective_aoi: f64,
    /// Weighted mean staleness under FedAvg weights; NaN when skipped.
    pub reference_aoi: f64,
    pub clients: Vec<ClientRecord>,
    pub stragglers: Vec<u16>,
    pub underflow_fallback: bool,
    pub skipped: bool,
}

struct Validation {
    spec: SyntheticSpec,
    seed: u64,
    stationary: Dataset,
}

pub struct ServerState {
    pub global: ModelParams,
    pub round: u32,
    pub gamma: f64,
    pub strategy: Strategy,
    pub clock: ClockState,
    pub round_timeout: f64,
    pub n_clients: usize,
    validation: Validation,
}

impl ServerState {
    /// Aggregates `arrivals` at true time `true_time` and advances the round.
    pub fn server_round(
        &mut self,
        arrivals: Vec<Arrival>,
        true_time: f64,
    ) -> Result<RoundRecord, ExperimentError> {
        let server_time = self.clock.read_clock(true_time)?;
        let round = self.round;
        let mut arrivals = arrivals;
        arrivals.sort_by_key(|a| a.update.client_id);
        let stragglers: Vec<u16> = (0..self.n_clients as u16)
            .filter(|id| !arrivals.iter().any(|a| a.update.client_id == *id))
            .collect();

        if arrivals.is_empty() {
            log::warn!("round {round}: no updates before timeout; round skipped");
            let (accuracy, stationary_accuracy) = self.accuracies(round)?;
            self.round += 1;
            return Ok(RoundRecord {
                round,
                server_time,
                accuracy,
                stationary_accuracy,
                effective_aoi: f64::NAN,
                reference_aoi: f64::NAN,
                clients: Vec::new(),
                stragglers,
                underflow_fallback: false,
                skipped: true,
            });
        }

        let updates: Vec<ClientUpdate> = arrivals.iter().map(|a| a.update.clone()).collect();
        let reference = fedavg_weights(&updates)?;
        let (aggregate, weights, lambdas, underflow_fallback) = match self.strategy {
            Strategy::Syncfed => {
                let (agg, w) = syncfed(&updates, server_time, self.gamma)?;
                (agg, w.normalized(), w.lambdas(), w.underflow_fallback)
            }
            Strategy::Fedavg => {
                let lambdas = updates
                    .iter()
                    .map(|u| freshness_weight(server_time, u.generated_at, self.gamma))
                    .collect::<Result<Vec<_>, _>>()?;
                (fedavg(&updates)?, reference.clone(), lambdas, false)
            }
        };
        let effective = effective_aoi(&updates, &weights, server_time)?;
        let reference_aoi = effective_aoi(&updates, &reference, server_time)?;
        if aggregate.values().iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite { layer: 0 }.into());
        }

        let clients = arrivals
            .iter()
            .zip(weights.iter().zip(&lambdas))
            .map(|(a, (&weight, &lambda))| {
                let s = aggregation::compute_staleness(server_time, a.update.generated_at);
                if s.clamped {
                    log::warn!(
                        "round {round}: client {} timestamp {:.6} is ahead of T_s {:.6}",
                        a.update.client_id,
                        a.update.generated_at,
                        server_time
                    );
                }
                ClientRecord {
                    client_id: a.update.client_id,
                    generated_at: a.update.generated_at,
                    arrived_at: a.arrived_at,
                    staleness: s.seconds,
                    negative_staleness: s.clamped,
                    lambda,
                    weight,
                    m_n: a.update.m_n,
                    lagged: false,
                    lag_rounds: 0,
                }
            })
            .collect();

        self.global = aggregate;
        let (accuracy, stationary_accuracy) = self.accuracies(round)?;
        self.round += 1;
        Ok(RoundRecord {
            round,
            server_time,
            accuracy,
            stationary_accuracy,
            effective_aoi: effective,
            reference_aoi,
            clients,
            stragglers,
            underflow_fallback,
            skipped: false,
        })
    }

    fn accuracies(&self, round: u32) -> Result<(f64, f64), LearnerError> {
        let drifted = generate_synthetic(&self.validation.spec, round, self.validation.seed)?;
        Ok((
            evaluate(&self.global, &drifted)?,
            evaluate(&self.global, &self.validation.stationary)?,
        ))
    }
}

/// Everything one run needs, built deterministically from a config.
pub struct Testbed {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub links: Vec<Link>,
    pub initial: ModelParams,
    pub rounds: u32,
    pub sync_samples: usize,
}

fn clock_from(c: &ClockConfig, seed: u64) -> Result<ClockState, ClockError> {
    ClockState::new(c.offset_s, c.drift_ppm, c.jitter_s, 0.0, seed)
}

impl Testbed {
    pub fn build(cfg: &ExperimentConfig, strategy: Strategy) -> Result<Self, ExperimentError> {
        cfg.validate().map_err(|e| match e {
            crate::harness::config::ConfigError::OutOfRange { field, message } => {
                ExperimentError::Setting { field, message }
            }
            other => ExperimentError::Setting {
                field: "config".into(),
                message: other.to_string(),
            },
        })?;
        let seed = cfg.seed;
        let layer_sizes = cfg.layer_sizes();
        let initial = init_model(&layer_sizes, derive_seed(seed, "init", 0))?;
        let d = &cfg.data;
        let geometry = derive_seed(seed, "geometry", 0);
        let uniform = vec![1.0 / d.n_classes as f64; d.n_classes];
        let spec_for = |mix: Vec<f64>, samples: usize| {
            SyntheticSpec::with_geometry(
                d.n_classes,
                d.d_in,
                d.class_separation,
                d.noise_std,
                d.drift_rate,
                mix,
                samples,
                geometry,
            )
        };

        let mut clients = Vec::with_capacity(cfg.clients.len());
        let mut links = Vec::with_capacity(cfg.clients.len());
        for (i, c) in cfg.clients.iter().enumerate() {
            let idx = i as u64;
            let mix = c.class_mix.clone().unwrap_or_else(|| uniform.clone());
            let (up, down) = c.one_way_delays();
            let scale = cfg.latency_scale;
            let jitter = c.jitter_ms / 1000.0 * scale;
            links.push(Link {
                uplink: LatencyModel::new(
                    up * scale,
                    jitter,
                    c.drop_probability,
                    derive_seed(seed, "uplink", idx),
                )?,
                downlink: LatencyModel::new(
                    down * scale,
                    jitter,
                    c.drop_probability,
                    derive_seed(seed, "downlink", idx),
                )?,
            });
            clients.push(ClientState::new(
                i as u16,
                c.name.clone(),
                clock_from(&c.clock, derive_seed(seed, "clock", idx))?,
                spec_for(mix, c.samples)?,
                derive_seed(seed, "data", idx),
                TrainConfig {
                    learning_rate: cfg.train.learning_rate,
                    local_epochs: cfg.train.local_epochs,
                    batch_size: cfg.train.batch_size,
                    seed: derive_seed(seed, "train", idx),
                },
                LagModel::from(&c.lag),
                derive_seed(seed, "lag", idx),
                c.compute_time_s,
            ));
        }

        let validation_spec = spec_for(uniform, d.validation_samples)?;
        let stationary = generate_synthetic(
            &validation_spec,
            0,
            derive_seed(seed, "validation-stationary", 0),
        )?;
        let server = ServerState {
            global: initial.clone(),
            round: 0,
            gamma: cfg.gamma,
            strategy,
            clock: clock_from(&cfg.server.clock, derive_seed(seed, "clock-server", 0))?,
            round_timeout: cfg.round_timeout(),
            n_clients: clients.len(),
            validation: Validation {
                spec: validation_spec,
                seed: derive_seed(seed, "validation", 0),
                stationary,
            },
        };
        Ok(Self {
            server,
            clients,
            links,
            initial,
            rounds: cfg.rounds,
            sync_samples: cfg.sync.samples,
        })
    }
}

/// Complete output of one experiment run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub records: Vec<RoundRecord>,
    pub initial: ModelParams,
    /// Global model after each recorded round.
    pub globals: Vec<ModelParams>,
    /// Hex digest of every random draw that must match across paired runs.
    pub draw_digest: String,
    pub sync: Vec<Option<SyncEstimate>>,
    pub transcript: Option<Vec<u8>>,
    pub end_time: f64,
}

impl RunOutput {
    pub fn final_params(&self) -> &ModelParams {
        self.globals.last().unwrap_or(&self.initial)
    }
}

/// Fills per-client lag telemetry the server cannot observe itself.
fn annotate_lag(record: &mut RoundRecord, steps: &[(u32, u16, u32)]) {
    for c in &mut record.clients {
        if let Some(&(_, _, lag)) = steps
            .iter()
            .find(|(r, id, _)| *r == record.round && *id == c.client_id)
        {
            c.lag_rounds = lag;
            c.lagged = lag > 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config;

    fn tiny_client(lag: LagModel, compute: f64) -> ClientState {
        let spec =
            SyntheticSpec::with_geometry(3, 2, 2.0, 0.5, 0.1, vec![1.0 / 3.0; 3], 30, 1).unwrap();
        ClientState::new(
            0,
            "c",
            ClockState::ideal(),
            spec,
            5,
            TrainConfig::single_step(0.1, 3),
            lag,
            8,
            compute,
        )
    }

    fn model() -> ModelParams {
        init_model(&[2, 4, 3], 0).unwrap()
    }

    fn models() -> Vec<ModelParams> {
        (0..5).map(|s| init_model(&[2, 4, 3], s).unwrap()).collect()
    }

    #[test]
    fn no_lag_trains_current_round() {
        let mut c = tiny_client(LagModel::none(), 1.0);
        for (r, m) in models().iter().enumerate() {
            let step = c.client_step(r as u32, m, 10.0 * r as f64).unwrap();
            assert_eq!(step.base_round, r as u32);
            assert_eq!(step.lag_rounds, 0);
            assert_eq!(step.update.generated_at, 10.0 * r as f64 + 1.0);
        }
    }

    #[test]
    fn full_lag_uses_previous_round() {
        let lag = LagModel {
            p_lag: 0.999_999_999,
            max_lag_rounds: 1,
            extra_delay: (0.0, 0.0),
        };
        let mut c = tiny_client(lag, 1.0);
        let ms = models();
        let first = c.client_step(0, &ms[0], 0.0).unwrap();
        assert!(first.lag_fallback);
        assert_eq!(first.base_round, 0);
        for r in 1..5u32 {
            let step = c.client_step(r, &ms[r as usize], 10.0 * r as f64).unwrap();
            assert_eq!(step.base_round, r - 1);
            assert!(!step.lag_fallback);
            // Timestamp of the earlier computation.
            assert_eq!(step.update.generated_at, 10.0 * (r - 1) as f64 + 1.0);
            assert_eq!(step.send_at, 10.0 * r as f64 + 1.0);
        }
    }

    #[test]
    fn lagged_update_matches_training_old_base() {
        let lag = LagModel {
            p_lag: 0.999_999_999,
            max_lag_rounds: 1,
            extra_delay: (0.0, 0.0),
        };
        let mut c = tiny_client(lag, 0.5);
        let reference = tiny_client(LagModel::none(), 0.5);
        let ms = models();
        c.client_step(0, &ms[0], 0.0).unwrap();
        let step = c.client_step(1, &ms[1], 5.0).unwrap();
        let cfg = TrainConfig {
            seed: derive_seed(reference.train.seed, "round", 0),
            ..reference.train.clone()
        };
        let expect = local_train(&ms[0], &reference.dataset(0).unwrap(), &cfg).unwrap();
        assert_eq!(step.update.params, expect);
    }

    #[test]
    fn rejects_round_regression() {
        let mut c = tiny_client(LagModel::none(), 0.0);
        c.client_step(3, &model(), 0.0).unwrap();
        assert!(matches!(
            c.client_step(2, &model(), 1.0),
            Err(ExperimentError::Protocol(_))
        ));
    }

    #[test]
    fn extra_delay_shifts_stamp() {
        let lag = LagModel {
            p_lag: 0.0,
            max_lag_rounds: 1,
            extra_delay: (2.0, 2.0),
        };
        let mut c = tiny_client(lag, 0.0);
        let step = c.client_step(0, &model(), 3.0).unwrap();
        assert_eq!(step.update.generated_at, 5.0);
        assert_eq!(step.send_at, 5.0);
    }

    fn server_with(strategy: Strategy, gamma: f64) -> ServerState {
        let cfg = parse_config(
            br#"{"rounds": 1, "clients": [{"name":"a","ping_ms":0},{"name":"b","ping_ms":0},{"name":"c","ping_ms":0}], "gamma": 1.0, "seed": 3,
                 "model": {"hidden": [4]}, "data": {"d_in": 2, "n_classes": 3, "validation_samples": 20}}"#,
        )
        .unwrap();
        let mut tb = Testbed::build(&cfg, strategy).unwrap();
        tb.server.gamma = gamma;
        tb.server
    }

    fn arrivals(stamps: [f64; 3]) -> Vec<Arrival> {
        stamps
            .iter()
            .enumerate()
            .map(|(i, &t)| Arrival {
                update: ClientUpdate {
                    client_id: i as u16,
                    round: 0,
                    params: init_model(&[2, 4, 3], i as u64 + 10).unwrap(),
                    generated_at: t,
                    m_n: 50,
                },
                arrived_at: t,
            })
            .collect()
    }

    #[test]
    fn three_client_weights() {
        let mut s = server_with(Strategy::Syncfed, 1.0);
        let rec = s.server_round(arrivals([9.9, 9.75, 7.6]), 10.0).unwrap();
        let w: Vec<f64> = rec.clients.iter().map(|c| c.weight).collect();
        // Brute force: lambda_n * m / sum(lambda_j * m) for s = (0.1, 0.25, 2.4).
        let l: Vec<f64> = [0.1f64, 0.25, 2.4]
            .iter()
            .map(|s| (-s).exp() * 50.0)
            .collect();
        let total: f64 = l.iter().sum();
        for k in 0..3 {
            assert!((w[k] - l[k] / total).abs() < 1e-12);
        }
        assert!((w[0] - 0.509953).abs() < 1e-6);
        assert!((w[1] - 0.438920).abs() < 1e-6);
        assert!((w[2] - 0.051127).abs() < 1e-6);
        // Pairwise ratios are exp of the staleness gaps.
        assert!((w[0] / w[1] - 0.15f64.exp()).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s.round, 1);
        assert!(rec.effective_aoi < rec.reference_aoi);
    }

    #[test]
    fn zero_gamma_and_equal_staleness_match_fedavg() {
        let mut a = server_with(Strategy::Syncfed, 0.0);
        let mut b = server_with(Strategy::Fedavg, 0.0);
        a.server_round(arrivals([1.0, 4.0, 9.0]), 10.0).unwrap();
        b.server_round(arrivals([1.0, 4.0, 9.0]), 10.0).unwrap();
        assert_eq!(a.global, b.global);

        let mut c = server_with(Strategy::Syncfed, 0.7);
        let rec = c.server_round(arrivals([6.0, 6.0, 6.0]), 10.0).unwrap();
        assert!(rec.clients.iter().all(|c| c.weight == 1.0 / 3.0));
    }

    #[test]
    fn empty_round_is_skipped() {
        let mut s = server_with(Strategy::Syncfed, 0.1);
        let before = s.global.clone();
        let rec = s.server_round(Vec::new(), 10.0).unwrap();
        assert!(rec.skipped);
        assert_eq!(rec.stragglers, vec![0, 1, 2]);
        assert_eq!(s.global, before);
        assert_eq!(s.round, 1);
    }

    #[test]
    fn clock_ahead_is_flagged() {
        let mut s = server_with(Strategy::Syncfed, 0.1);
        let rec = s.server_round(arrivals([10.002, 9.0, 8.0]), 10.0).unwrap();
        assert!(rec.clients[0].negative_staleness);
        assert_eq!(rec.clients[0].staleness, 0.0);
        assert_eq!(rec.clients[0].lambda, 1.0);
    }
}
