//! Multiclass MLP trained with plain SGD, and a synthetic drifting dataset.
//!
//! Parameters live in one flat vector: every weight matrix in layer order,
//! then every bias vector in layer order. The weight matrix of layer `l` is
//! row-major `out x in`, so `W[j][i]` sits at `offset + j * in + i`.
//! Hidden layers use ReLU, the output layer softmax, and the loss is mean
//! cross-entropy.

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("architecture needs at least an input and an output layer")]
    EmptyArchitecture,
    #[error("layer {index} has size zero")]
    ZeroLayerSize { index: usize },
    #[error("parameter vector has {actual} values, architecture needs {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("input has {actual} features, model expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layer_sizes: Vec<usize>,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn param_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_sizes(layer_sizes: &[usize]) -> Result<(), LearnerError> {
        if layer_sizes.len() < 2 {
            return Err(LearnerError::EmptyArchitecture);
        }
        if let Some(index) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(LearnerError::ZeroLayerSize { index });
        }
        Ok(())
    }

    pub fn from_values(layer_sizes: Vec<usize>, values: Vec<f64>) -> Result<Self, LearnerError> {
        Self::check_sizes(&layer_sizes)?;
        let expected = Self::param_count(&layer_sizes);
        if values.len() != expected {
            return Err(LearnerError::ShapeMismatch {
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite { layer: 0 });
        }
        Ok(Self {
            layer_sizes,
            values,
        })
    }

    pub fn zeros(layer_sizes: Vec<usize>) -> Result<Self, LearnerError> {
        let n = Self::param_count(&layer_sizes);
        Self::from_values(layer_sizes, vec![0.0; n])
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Offset of layer `l`'s weight matrix.
    pub fn weight_offset(&self, l: usize) -> usize {
        self.layer_sizes
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1])
            .sum()
    }

    /// Offset of layer `l`'s bias vector.
    pub fn bias_offset(&self, l: usize) -> usize {
        let weights: usize = self.layer_sizes.windows(2).map(|w| w[0] * w[1]).sum();
        weights + self.layer_sizes[1..1 + l].iter().sum::<usize>()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(layer_sizes: &[usize], seed: u64) -> Result<ModelParams, LearnerError> {
    let mut params = ModelParams::zeros(layer_sizes.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..params.n_layers() {
        let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let off = params.weight_offset(l);
        for v in &mut params.values[off..off + fan_in * fan_out] {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Labelled rows, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    d_in: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, d_in: usize) -> Result<Self, LearnerError> {
        if labels.is_empty() {
            return Err(LearnerError::EmptyBatch);
        }
        if d_in == 0 || features.len() != labels.len() * d_in {
            return Err(LearnerError::DimensionMismatch {
                expected: labels.len() * d_in,
                actual: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite { layer: 0 });
        }
        Ok(Self {
            features,
            labels,
            d_in,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// New dataset made of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self, LearnerError> {
        let mut features = Vec::with_capacity(rows.len() * self.d_in);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self::new(
            features,
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.d_in,
        )
    }
}

fn check_input(params: &ModelParams, d_in: usize) -> Result<(), LearnerError> {
    if params.input_dim() != d_in {
        return Err(LearnerError::DimensionMismatch {
            expected: params.input_dim(),
            actual: d_in,
        });
    }
    Ok(())
}

/// Post-activation values of every layer (input first) and the output logits.
struct Trace {
    activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn trace(params: &ModelParams, x: &[f64]) -> Result<Trace, LearnerError> {
    let sizes = &params.layer_sizes;
    let last = params.n_layers() - 1;
    let mut activations = vec![x.to_vec()];
    let mut logits = Vec::new();
    for l in 0..=last {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w = &params.values[params.weight_offset(l)..][..n_in * n_out];
        let b = &params.values[params.bias_offset(l)..][..n_out];
        let a = &activations[l];
        let mut z: Vec<f64> = (0..n_out)
            .map(|j| {
                b[j] + w[j * n_in..(j + 1) * n_in]
                    .iter()
                    .zip(a)
                    .map(|(w, a)| w * a)
                    .sum::<f64>()
            })
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite { layer: l });
        }
        if l == last {
            logits = z;
        } else {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            activations.push(z);
        }
    }
    Ok(Trace {
        activations,
        logits,
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class probabilities for one input.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>, LearnerError> {
    check_input(params, x.len())?;
    Ok(softmax(&trace(params, x)?.logits))
}

/// Mean cross-entropy and its gradient over the whole batch.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Dataset,
) -> Result<(f64, Vec<f64>), LearnerError> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    loss_and_grad_rows(params, batch, &rows)
}

fn loss_and_grad_rows(
    params: &ModelParams,
    data: &Dataset,
    rows: &[usize],
) -> Result<(f64, Vec<f64>), LearnerError> {
    if rows.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    check_input(params, data.d_in)?;
    let sizes = &params.layer_sizes;
    let classes = params.n_classes();
    let n_layers = params.n_layers();
    let mut grad = vec![0.0; params.values.len()];
    let mut loss = 0.0;

    for &r in rows {
        let label = data.labels[r];
        if label >= classes {
            return Err(LearnerError::LabelOutOfRange { label, classes });
        }
        let t = trace(params, data.row(r))?;
        let max = t.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - t.logits[label];

        // dL/dz at the output: softmax minus one-hot.
        let mut delta = softmax(&t.logits);
        delta[label] -= 1.0;

        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let a = &t.activations[l];
            let w_off = params.weight_offset(l);
            let b_off = params.bias_offset(l);
            for j in 0..n_out {
                let d = delta[j];
                grad[b_off + j] += d;
                if d != 0.0 {
                    let g = &mut grad[w_off + j * n_in..w_off + (j + 1) * n_in];
                    for (gi, ai) in g.iter_mut().zip(a) {
                        *gi += d * ai;
                    }
                }
            }
            if l > 0 {
                let w = &params.values[w_off..w_off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        if a[i] > 0.0 {
                            (0..n_out).map(|j| w[j * n_in + i] * delta[j]).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
    }

    let m = rows.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    let loss = loss / m;
    if !loss.is_finite() {
        return Err(LearnerError::NonFinite {
            layer: n_layers - 1,
        });
    }
    if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
        return Err(LearnerError::NonFinite {
            layer: layer_of(params, pos),
        });
    }
    Ok((loss, grad))
}

fn layer_of(params: &ModelParams, index: usize) -> usize {
    let layers = 0..params.n_layers();
    if index < params.bias_offset(0) {
        layers
            .rev()
            .find(|&l| params.weight_offset(l) <= index)
            .unwrap_or(0)
    } else {
        layers
            .rev()
            .find(|&l| params.bias_offset(l) <= index)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: u32,
    /// `None` trains on the full local dataset per step.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// One full-batch gradient step.
    pub fn single_step(learning_rate: f64, seed: u64) -> Self {
        Self {
            learning_rate,
            local_epochs: 1,
            batch_size: None,
            seed,
        }
    }

    pub fn validate(&self, m_n: usize) -> Result<(), LearnerError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LearnerError::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.local_epochs < 1 {
            return Err(LearnerError::InvalidConfig(
                "local_epochs must be >= 1".into(),
            ));
        }
        if let Some(b) = self.batch_size {
            if b < 1 || b > m_n {
                return Err(LearnerError::InvalidConfig(format!(
                    "batch_size must be in [1, {m_n}], got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// `local_epochs` passes of mini-batch SGD starting from `global`.
///
/// With one epoch and a full batch this is exactly `global - lr * grad`.
pub fn local_train(
    global: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<ModelParams, LearnerError> {
    cfg.validate(data.len())?;
    let m = data.len();
    let batch = cfg.batch_size.unwrap_or(m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut params = global.clone();
    for _ in 0..cfg.local_epochs {
        if batch < m {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (_, grad) = loss_and_grad_rows(&params, data, chunk)?;
            for (p, g) in params.values.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }
    Ok(params)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose most probable class equals the label.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<f64, LearnerError> {
    check_input(params, data.d_in)?;
    let mut correct = 0usize;
    for i in 0..data.len() {
        if argmax(&forward(params, data.row(i))?) == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Gaussian class clusters whose means translate linearly with the round.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub d_in: usize,
    pub class_means: Vec<Vec<f64>>,
    /// Unit vectors; class `c` moves along `drift_directions[c]`.
    pub drift_directions: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub drift_rate: f64,
    pub class_mix: Vec<f64>,
    pub samples_per_client: usize,
}

impl SyntheticSpec {
    /// Draws class means from `N(0, separation^2)` per coordinate and random
    /// unit drift directions, both from `geometry_seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_geometry(
        n_classes: usize,
        d_in: usize,
        separation: f64,
        noise_std: f64,
        drift_rate: f64,
        class_mix: Vec<f64>,
        samples_per_client: usize,
        geometry_seed: u64,
    ) -> Result<Self, LearnerError> {
        if n_classes == 0 || d_in == 0 {
            return Err(LearnerError::InvalidSpec(
                "n_classes and d_in must be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(geometry_seed);
        let mut gaussian = |scale: f64| -> Vec<f64> {
            (0..d_in)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        };
        let class_means = (0..n_classes).map(|_| gaussian(separation)).collect();
        let drift_directions = (0..n_classes)
            .map(|_| {
                let v = gaussian(1.0);
                let norm = v
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let spec = Self {
            n_classes,
            d_in,
            class_means,
            drift_directions,
            noise_std,
            drift_rate,
            class_mix,
            samples_per_client,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |msg: String| Err(LearnerError::InvalidSpec(msg));
        if self.n_classes == 0 || self.d_in == 0 {
            return bad("n_classes and d_in must be >= 1".into());
        }
        if self.class_means.len() != self.n_classes
            || self.drift_directions.len() != self.n_classes
            || self.class_mix.len() != self.n_classes
        {
            return bad("per-class vectors must have n_classes entries".into());
        }
        if self
            .class_means
            .iter()
            .chain(&self.drift_directions)
            .any(|v| v.len() != self.d_in)
        {
            return bad("class means and drift directions must have d_in entries".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(self.drift_rate.is_finite() && self.drift_rate >= 0.0) {
            return bad(format!("drift_rate must be >= 0, got {}", self.drift_rate));
        }
        if self.class_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("class_mix entries must be nonnegative".into());
        }
        let total: f64 = self.class_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("class_mix must sum to 1, sums to {total}"));
        }
        if self.samples_per_client == 0 {
            return bad("samples_per_client must be >= 1".into());
        }
        Ok(())
    }

    /// Mean of class `c` at `round`.
    pub fn mean_at(&self, c: usize, round: u32) -> Vec<f64> {
        let shift = round as f64 * self.drift_rate;
        self.class_means[c]
            .iter()
            .zip(&self.drift_directions[c])
            .map(|(m, d)| m + shift * d)
            .collect()
    }
}

/// Draws `samples_per_client` rows for `round`.
///
/// The random draws depend only on `seed`; `round` only translates the class
/// means, so with zero drift every round yields the same dataset.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    round: u32,
    seed: u64,
) -> Result<Dataset, LearnerError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = WeightedIndex::new(&spec.class_mix)
        .map_err(|e| LearnerError::InvalidSpec(format!("class_mix: {e}")))?;
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|c| spec.mean_at(c, round))
        .collect();
    let mut features = Vec::with_capacity(spec.samples_per_client * spec.d_in);
    let mut labels = Vec::with_capacity(spec.samples_per_client);
    for _ in 0..spec.samples_per_client {
        let c = classes.sample(&mut rng);
        labels.push(c);
        for m in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(m + spec.noise_std * z);
        }
    }
    Dataset::new(features, labels, spec.d_in)
}
