//! Experiment configuration (strict JSON).
//!
//! Every optional field has an explicit default, and [`parse_config`] resolves
//! derived defaults (one-way delays, class mix, round timeout) into concrete
//! values, so the serialized echo of a parsed config parses back equal.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown config key `{key}` (line {line}, column {column})")]
    UnknownKey {
        key: String,
        line: usize,
        column: usize,
    },
    #[error("missing config key `{key}`")]
    MissingKey { key: String },
    #[error("invalid config value at line {line}, column {column}: {message}")]
    Invalid {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config value `{field}` out of range: {message}")]
    OutOfRange { field: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyChoice {
    Syncfed,
    Fedavg,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockConfig {
    pub offset_s: f64,
    pub drift_ppm: f64,
    pub jitter_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LagConfig {
    pub p_lag: f64,
    pub max_lag_rounds: u32,
    /// Uniform extra compute delay `[low, high]` seconds, drawn every round.
    pub extra_delay_s: [f64; 2],
}

impl Default for LagConfig {
    fn default() -> Self {
        Self {
            p_lag: 0.0,
            max_lag_rounds: 1,
            extra_delay_s: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub name: String,
    /// Measured round-trip time in milliseconds, before latency scaling.
    pub ping_ms: f64,
    /// One-way client-to-server delay; defaults to `ping_ms / 2`.
    #[serde(default)]
    pub uplink_ms: Option<f64>,
    /// One-way server-to-client delay; defaults to `ping_ms / 2`.
    #[serde(default)]
    pub downlink_ms: Option<f64>,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub drop_probability: f64,
    /// Local dataset size `m_n`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Defaults to uniform over `data.n_classes`.
    #[serde(default)]
    pub class_mix: Option<Vec<f64>>,
    #[serde(default)]
    pub clock: ClockConfig,
    #[serde(default = "default_compute_time")]
    pub compute_time_s: f64,
    #[serde(default)]
    pub lag: LagConfig,
}

impl ClientConfig {
    /// Unscaled one-way delays `(uplink, downlink)` in seconds.
    pub fn one_way_delays(&self) -> (f64, f64) {
        let half = self.ping_ms / 2.0;
        (
            self.uplink_ms.unwrap_or(half) / 1000.0,
            self.downlink_ms.unwrap_or(half) / 1000.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub name: String,
    pub clock: ClockConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            name: "server".into(),
            clock: ClockConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub local_epochs: u32,
    /// `null` means one full-batch step per epoch.
    pub batch_size: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_classes: usize,
    pub d_in: usize,
    /// Standard deviation of class-mean coordinates.
    pub class_separation: f64,
    pub noise_std: f64,
    /// Translation of each class mean per round along its drift direction.
    pub drift_rate: f64,
    pub validation_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            d_in: 8,
            class_separation: 1.0,
            noise_std: 1.0,
            drift_rate: 0.0,
            validation_samples: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncConfig {
    /// Exchanges per sync round.
    pub samples: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { samples: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    pub clients: Vec<ClientConfig>,
    /// Freshness decay per second of staleness.
    pub gamma: f64,
    pub seed: u64,
    #[serde(default = "default_latency_scale")]
    pub latency_scale: f64,
    #[serde(default)]
    pub strategy: StrategyChoice,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sync: SyncConfig,
    /// Defaults to ten times the median expected client round trip, at least 1 s.
    #[serde(default)]
    pub round_timeout_s: Option<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Accuracy level used for the rounds-to-threshold summary metric.
    #[serde(default = "default_accuracy_threshold")]
    pub accuracy_threshold: f64,
}

fn default_rounds() -> u32 {
    20
}
fn default_latency_scale() -> f64 {
    100.0
}
fn default_samples() -> usize {
    200
}
fn default_compute_time() -> f64 {
    1.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_accuracy_threshold() -> f64 {
    0.5
}

/// Lower bound of the derived round timeout, seconds.
pub const MIN_ROUND_TIMEOUT_S: f64 = 1.0;

impl ExperimentConfig {
    /// Layer sizes `[d_in, hidden..., n_classes]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.data.d_in];
        sizes.extend(&self.model.hidden);
        sizes.push(self.data.n_classes);
        sizes
    }

    /// Round timeout in seconds, derived when not configured.
    pub fn round_timeout(&self) -> f64 {
        self.round_timeout_s
            .unwrap_or_else(|| self.derived_timeout())
    }

    fn derived_timeout(&self) -> f64 {
        let mut rtts: Vec<f64> = self
            .clients
            .iter()
            .map(|c| {
                let (up, down) = c.one_way_delays();
                (up + down) * self.latency_scale
                    + c.compute_time_s
                    + (c.lag.extra_delay_s[0] + c.lag.extra_delay_s[1]) / 2.0
            })
            .collect();
        if rtts.is_empty() {
            return MIN_ROUND_TIMEOUT_S;
        }
        rtts.sort_by(f64::total_cmp);
        let n = rtts.len();
        let median = if n % 2 == 1 {
            rtts[n / 2]
        } else {
            (rtts[n / 2 - 1] + rtts[n / 2]) / 2.0
        };
        (10.0 * median).max(MIN_ROUND_TIMEOUT_S)
    }

    /// Fills derived defaults with concrete values.
    pub fn resolve(&mut self) {
        let n_classes = self.data.n_classes;
        for c in &mut self.clients {
            let half = c.ping_ms / 2.0;
            c.uplink_ms.get_or_insert(half);
            c.downlink_ms.get_or_insert(half);
            if c.class_mix.is_none() && n_classes > 0 {
                c.class_mix = Some(vec![1.0 / n_classes as f64; n_classes]);
            }
        }
        if self.round_timeout_s.is_none() {
            self.round_timeout_s = Some(self.derived_timeout());
        }
    }

    /// Checks every range constraint, naming the first offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn out(field: impl Into<String>, message: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::OutOfRange {
                field: field.into(),
                message: message.into(),
            })
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;

        if !nonneg(self.gamma) {
            return out(
                "gamma",
                format!("must be finite and >= 0, got {}", self.gamma),
            );
        }
        if !nonneg(self.latency_scale) {
            return out(
                "latency_scale",
                format!("must be >= 0, got {}", self.latency_scale),
            );
        }
        if self.clients.is_empty() {
            return out("clients", "at least one client is required");
        }
        if self.clients.len() > u16::MAX as usize {
            return out("clients", "at most 65535 clients");
        }
        if self.data.n_classes < 2 {
            return out("data.n_classes", "must be >= 2");
        }
        if self.data.d_in < 1 {
            return out("data.d_in", "must be >= 1");
        }
        if !nonneg(self.data.class_separation) {
            return out("data.class_separation", "must be >= 0");
        }
        if !(self.data.noise_std.is_finite() && self.data.noise_std > 0.0) {
            return out("data.noise_std", "must be > 0");
        }
        if !nonneg(self.data.drift_rate) {
            return out("data.drift_rate", "must be >= 0");
        }
        if self.data.validation_samples < 1 {
            return out("data.validation_samples", "must be >= 1");
        }
        if let Some(i) = self.model.hidden.iter().position(|&h| h == 0) {
            return out(format!("model.hidden[{i}]"), "layer size must be >= 1");
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return out("train.learning_rate", "must be > 0");
        }
        if self.train.local_epochs < 1 {
            return out("train.local_epochs", "must be >= 1");
        }
        if self.train.batch_size == Some(0) {
            return out("train.batch_size", "must be >= 1");
        }
        if self.sync.samples < 1 {
            return out("sync.samples", "must be >= 1");
        }
        if let Some(t) = self.round_timeout_s {
            if !(t.is_finite() && t > 0.0) {
                return out("round_timeout_s", "must be > 0");
            }
        }
        if !(0.0..=1.0).contains(&self.accuracy_threshold) {
            return out("accuracy_threshold", "must be in [0, 1]");
        }
        for (name, clock) in std::iter::once(("server.clock".to_string(), &self.server.clock))
            .chain(
                self.clients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (format!("clients[{i}].clock"), &c.clock)),
            )
        {
            if !clock.offset_s.is_finite() {
                return out(format!("{name}.offset_s"), "must be finite");
            }
            if !(clock.drift_ppm.is_finite() && clock.drift_ppm > -1e6) {
                return out(format!("{name}.drift_ppm"), "must be finite and > -1e6");
            }
            if !nonneg(clock.jitter_s) {
                return out(format!("{name}.jitter_s"), "must be >= 0");
            }
        }
        for (i, c) in self.clients.iter().enumerate() {
            let f = |k: &str| format!("clients[{i}].{k}");
            if c.name.is_empty() {
                return out(f("name"), "must not be empty");
            }
            if !nonneg(c.ping_ms) {
                return out(f("ping_ms"), "must be >= 0");
            }
            for (k, v) in [("uplink_ms", c.uplink_ms), ("downlink_ms", c.downlink_ms)] {
                if let Some(v) = v {
                    if !nonneg(v) {
                        return out(f(k), "must be >= 0");
                    }
                }
            }
            if !nonneg(c.jitter_ms) {
                return out(f("jitter_ms"), "must be >= 0");
            }
            if !(0.0..1.0).contains(&c.drop_probability) {
                return out(f("drop_probability"), "must be in [0, 1)");
            }
            if c.samples < 1 {
                return out(f("samples"), "must be >= 1");
            }
            if let Some(b) = self.train.batch_size {
                if b > c.samples {
                    return out(
                        "train.batch_size",
                        format!("exceeds {} samples of client {}", c.samples, c.name),
                    );
                }
            }
            if let Some(mix) = &c.class_mix {
                if mix.len() != self.data.n_classes {
                    return out(
                        f("class_mix"),
                        format!("needs {} entries", self.data.n_classes),
                    );
                }
                if mix.iter().any(|p| !nonneg(*p)) {
                    return out(f("class_mix"), "entries must be >= 0");
                }
                let total: f64 = mix.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return out(f("class_mix"), format!("must sum to 1, sums to {total}"));
                }
            }
            if !nonneg(c.compute_time_s) {
                return out(f("compute_time_s"), "must be >= 0");
            }
            if !(0.0..1.0).contains(&c.lag.p_lag) {
                return out(f("lag.p_lag"), "must be in [0, 1)");
            }
            if c.lag.max_lag_rounds < 1 {
                return out(f("lag.max_lag_rounds"), "must be >= 1");
            }
            let [lo, hi] = c.lag.extra_delay_s;
            if !(nonneg(lo) && nonneg(hi) && lo <= hi) {
                return out(f("lag.extra_delay_s"), "must satisfy 0 <= low <= high");
            }
        }
        Ok(())
    }

    /// Pretty JSON of the effective configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn classify(err: serde_json::Error) -> ConfigError {
    use serde_json::error::Category;
    let (line, column) = (err.line(), err.column());
    let message = err.to_string();
    match err.classify() {
        Category::Syntax | Category::Eof | Category::Io => ConfigError::Syntax {
            line,
            column,
            message,
        },
        Category::Data => {
            let quoted = |prefix: &str| {
                message
                    .strip_prefix(prefix)
                    .and_then(|rest| rest.split('`').next())
                    .map(str::to_string)
            };
            if let Some(key) = quoted("unknown field `") {
                ConfigError::UnknownKey { key, line, column }
            } else if let Some(key) = quoted("missing field `") {
                ConfigError::MissingKey { key }
            } else {
                ConfigError::Invalid {
                    line,
                    column,
                    message,
                }
            }
        }
    }
}

/// Parses, resolves, and validates a config document.
pub fn parse_config(bytes: &[u8]) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg: ExperimentConfig = serde_json::from_slice(bytes).map_err(classify)?;
    cfg.validate()?;
    cfg.resolve();
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&bytes)
}
