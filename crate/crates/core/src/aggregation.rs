//! Freshness-weighted aggregation.
//!
//! FedAvg weights client `n` by `m_n / M`. SyncFed multiplies by the
//! freshness weight `exp(-gamma * (T_s - T_n))` and renormalizes. Both
//! accumulate in ascending `client_id` order so results do not depend on the
//! order updates arrived in.

use thiserror::Error;

use crate::learner::ModelParams;

/// Below this total of `lambda_n * m_n` SyncFed falls back to FedAvg weights.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("update from client {client_id} has a different parameter shape")]
    ShapeMismatch { client_id: u16 },
    #[error("client {client_id} reports an empty dataset")]
    ZeroDatasetSize { client_id: u16 },
    #[error("decay factor gamma must be finite and >= 0, got {0}")]
    InvalidGamma(f64),
    #[error("{weights} weights for {updates} updates")]
    LengthMismatch { weights: usize, updates: usize },
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
}

/// A trained local model with its generation timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u16,
    pub round: u32,
    pub params: ModelParams,
    /// Client clock reading when training finished, seconds.
    pub generated_at: f64,
    pub m_n: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Staleness {
    pub seconds: f64,
    /// The raw difference was negative (client clock ahead of the server).
    pub clamped: bool,
}

/// `max(0, T_s - T_n)`, flagging negative raw values.
pub fn compute_staleness(server_time: f64, generated_at: f64) -> Staleness {
    let raw = server_time - generated_at;
    if raw < 0.0 {
        Staleness {
            seconds: 0.0,
            clamped: true,
        }
    } else {
        Staleness {
            seconds: raw,
            clamped: false,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<(), AggregationError> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(AggregationError::InvalidGamma(gamma))
    }
}

/// `exp(-gamma * staleness)` with staleness clamped at zero.
pub fn freshness_weight(
    server_time: f64,
    generated_at: f64,
    gamma: f64,
) -> Result<f64, AggregationError> {
    check_gamma(gamma)?;
    Ok((-gamma * compute_staleness(server_time, generated_at).seconds).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub client_id: u16,
    pub staleness: f64,
    pub negative_staleness: bool,
    pub lambda: f64,
    pub weight: f64,
}

/// Per-client weights of one SyncFed aggregation, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub gamma: f64,
    pub server_time: f64,
    pub entries: Vec<WeightEntry>,
    pub underflow_fallback: bool,
}

impl AggregationWeights {
    pub fn normalized(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lambda).collect()
    }
}

fn validate(updates: &[ClientUpdate]) -> Result<(), AggregationError> {
    let first = updates.first().ok_or(AggregationError::Empty)?;
    for u in updates {
        if !u.params.same_shape(&first.params)
            || u.params.values().len() != first.params.values().len()
        {
            return Err(AggregationError::ShapeMismatch {
                client_id: u.client_id,
            });
        }
        if u.m_n == 0 {
            return Err(AggregationError::ZeroDatasetSize {
                client_id: u.client_id,
            });
        }
    }
    Ok(())
}

/// Indices of `updates` in accumulation order.
fn accumulation_order(updates: &[ClientUpdate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| (updates[i].client_id, updates[i].round));
    order
}

fn weighted_sum(updates: &[ClientUpdate], weights: &[f64], order: &[usize]) -> ModelParams {
    let mut acc =
        ModelParams::zeros(updates[0].params.layer_sizes().to_vec()).expect("validated shape");
    for &i in order {
        let w = weights[i];
        for (a, v) in acc.values_mut().iter_mut().zip(updates[i].params.values()) {
            *a += w * v;
        }
    }
    acc
}

/// Dataset-size weights `m_n / M`, in input order.
pub fn fedavg_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>, AggregationError> {
    validate(updates)?;
    let total = updates.iter().map(|u| u.m_n).sum::<u64>() as f64;
    Ok(updates.iter().map(|u| u.m_n as f64 / total).collect())
}

pub fn fedavg(updates: &[ClientUpdate]) -> Result<ModelParams, AggregationError> {
    let weights = fedavg_weights(updates)?;
    Ok(weighted_sum(
        updates,
        &weights,
        &accumulation_order(updates),
    ))
}

/// Freshness- and size-weighted aggregate.
///
/// Normalization divides every `lambda_n` by the largest one first; the
/// ratio is unchanged but identical timestamps give weights bit-identical to
/// FedAvg and moderately stale rounds do not lose precision.
pub fn syncfed(
    updates: &[ClientUpdate],
    server_time: f64,
    gamma: f64,
) -> Result<(ModelParams, AggregationWeights), AggregationError> {
    check_gamma(gamma)?;
    validate(updates)?;
    let order = accumulation_order(updates);
    let staleness: Vec<Staleness> = updates
        .iter()
        .map(|u| compute_staleness(server_time, u.generated_at))
        .collect();
    let lambdas: Vec<f64> = staleness
        .iter()
        .map(|s| (-gamma * s.seconds).exp())
        .collect();

    let raw_total: f64 = order
        .iter()
        .map(|&i| lambdas[i] * updates[i].m_n as f64)
        .sum();
    let underflow_fallback = !(raw_total >= UNDERFLOW_FLOOR);
    let weights = if underflow_fallback {
        log::warn!("freshness weights underflowed at T_s={server_time}; using FedAvg weights");
        fedavg_weights(updates)?
    } else {
        let freshest = staleness
            .iter()
            .map(|s| s.seconds)
            .fold(f64::INFINITY, f64::min);
        let scaled: Vec<f64> = staleness
            .iter()
            .zip(updates)
            .map(|(s, u)| (-gamma * (s.seconds - freshest)).exp() * u.m_n as f64)
            .collect();
        let total: f64 = order.iter().map(|&i| scaled[i]).sum();
        scaled.iter().map(|s| s / total).collect()
    };

    let aggregate = weighted_sum(updates, &weights, &order);
    let entries = updates
        .iter()
        .zip(&staleness)
        .zip(lambdas.iter().zip(&weights))
        .map(|((u, s), (&lambda, &weight))| WeightEntry {
            client_id: u.client_id,
            staleness: s.seconds,
            negative_staleness: s.clamped,
            lambda,
            weight,
        })
        .collect();
    Ok((
        aggregate,
        AggregationWeights {
            gamma,
            server_time,
            entries,
            underflow_fallback,
        },
    ))
}

/// Weighted mean staleness `sum_n weight_n * max(0, T_s - T_n)`.
pub fn effective_aoi(
    updates: &[ClientUpdate],
    weights: &[f64],
    server_time: f64,
) -> Result<f64, AggregationError> {
    if updates.is_empty() {
        return Err(AggregationError::Empty);
    }
    if weights.len() != updates.len() {
        return Err(AggregationError::LengthMismatch {
            weights: weights.len(),
            updates: updates.len(),
        });
    }
    let order = accumulation_order(updates);
    let sum: f64 = order.iter().map(|&i| weights[i]).sum();
    if !((sum - 1.0).abs() <= 1e-9) {
        return Err(AggregationError::WeightSum(sum));
    }
    Ok(order
        .iter()
        .map(|&i| weights[i] * compute_staleness(server_time, updates[i].generated_at).seconds)
        .sum())
}
