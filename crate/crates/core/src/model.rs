//! Forward-Forward layers and networks.
//!
//! Each layer computes `a = ReLU(x·W + b)` and a goodness logit `Σ_j a_j² − θ`; its
//! probability of calling the input positive is `y = σ(logit)`. Layers are trained only
//! by their own loss: binary cross-entropy on `y` against the sample polarity, plus a
//! peer-normalization penalty on the spread of per-unit running mean activity. The
//! activations handed to the next layer are normalized and carry no gradient.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, DatasetSplit, ImageVector, PairedBatch, Polarity, NUM_CLASSES};
use crate::nn::{init_weights, matmul, matmul_tn, Matrix, NnError, OptimizerState, SgdConfig};

/// Guards the division in [`normalize_activity`].
pub const NORM_EPSILON: f64 = 1e-8;
pub const CHECKPOINT_SCHEMA: &str = "ffdyn.checkpoint.v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch has {rows} rows but {polarities} polarity tags")]
    PolarityCount { rows: usize, polarities: usize },
    #[error("layer {layer} expects {expected} inputs, got {found}")]
    InputWidth {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in layer {layer}")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// How activity vectors are rescaled before they feed the next layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivityNorm {
    /// Each row divided by `‖row‖₂ + ε`.
    UnitLength,
    /// Each row divided by `sqrt(mean(row²)) + ε`, so a normalized row has mean-square 1.
    #[default]
    UnitMeanSquare,
}

/// Row-wise rescaling of an activity matrix; zero rows stay zero.
pub fn normalize_activity(activations: &Matrix, mode: ActivityNorm) -> Matrix {
    let mut out = activations.clone();
    let width = activations.cols().max(1) as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let sq: f64 = row.iter().map(|x| x * x).sum();
        let scale = match mode {
            ActivityNorm::UnitLength => sq.sqrt(),
            ActivityNorm::UnitMeanSquare => (sq / width).sqrt(),
        };
        let denom = scale + NORM_EPSILON;
        row.iter_mut().for_each(|x| *x /= denom);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodnessConfig {
    threshold: f64,
}

impl GoodnessConfig {
    pub fn new(threshold: f64) -> Result<Self, ModelError> {
        if threshold > 0.0 && threshold.is_finite() {
            Ok(GoodnessConfig { threshold })
        } else {
            Err(ModelError::InvalidConfig(format!(
                "goodness threshold must be positive, got {threshold}"
            )))
        }
    }

    /// θ equal to the layer width: the boundary sits at unit mean-square activity.
    pub fn for_width(width: usize) -> Self {
        GoodnessConfig {
            threshold: width as f64,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerNormConfig {
    /// λ, the penalty coefficient.
    pub weight: f64,
    /// m, the share of the current batch mean blended into the running mean.
    pub momentum: f64,
}

/// One locally trained layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FFLayer {
    pub weights: Matrix,
    pub biases: Matrix,
    pub goodness: GoodnessConfig,
    pub peer_running_mean: Vec<f64>,
    pub weight_opt: OptimizerState,
    pub bias_opt: OptimizerState,
}

impl FFLayer {
    pub fn new<R: Rng + ?Sized>(
        fan_in: usize,
        width: usize,
        goodness: GoodnessConfig,
        optimizer: SgdConfig,
        running_mean_init: f64,
        rng: &mut R,
    ) -> Self {
        FFLayer {
            weights: init_weights(fan_in, width, rng),
            biases: Matrix::zeros(1, width),
            goodness,
            peer_running_mean: vec![running_mean_init; width],
            weight_opt: OptimizerState::new(optimizer, fan_in, width),
            bias_opt: OptimizerState::new(optimizer, 1, width),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn width(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerForwardResult {
    /// ReLU outputs, `batch x width`.
    pub activations: Matrix,
    pub goodness_logits: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn layer_forward(layer: &FFLayer, input: &Matrix) -> Result<LayerForwardResult, ModelError> {
    let mut activations = matmul(input, &layer.weights)?;
    let bias = layer.biases.row(0);
    for r in 0..activations.rows() {
        for (a, &b) in activations.row_mut(r).iter_mut().zip(bias) {
            *a = (*a + b).max(0.0);
        }
    }
    let theta = layer.goodness.threshold();
    let goodness_logits: Vec<f64> = activations
        .iter_rows()
        .map(|row| row.iter().map(|a| a * a).sum::<f64>() - theta)
        .collect();
    let y = goodness_logits.iter().map(|&l| sigmoid(l)).collect();
    Ok(LayerForwardResult {
        activations,
        goodness_logits,
        y,
    })
}

fn check_polarities(rows: usize, polarities: &[Polarity]) -> Result<(), ModelError> {
    if rows == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if rows != polarities.len() {
        return Err(ModelError::PolarityCount {
            rows,
            polarities: polarities.len(),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy of `y` against the polarity, evaluated from the logits:
/// `softplus(−l)` for positives and `softplus(l)` for negatives.
pub fn layer_loss(result: &LayerForwardResult, polarities: &[Polarity]) -> Result<f64, ModelError> {
    check_polarities(result.goodness_logits.len(), polarities)?;
    let total: f64 = result
        .goodness_logits
        .iter()
        .zip(polarities)
        .map(|(&l, p)| match p {
            Polarity::Positive => softplus(-l),
            Polarity::Negative => softplus(l),
        })
        .sum();
    Ok(total / polarities.len() as f64)
}

fn updated_running_mean(running: &[f64], activations: &Matrix, momentum: f64) -> Vec<f64> {
    let n = activations.rows() as f64;
    let sums = activations.column_sums();
    running
        .iter()
        .zip(sums.row(0))
        .map(|(&r, &s)| (1.0 - momentum) * r + momentum * s / n)
        .collect()
}

fn peer_penalty(running: &[f64], weight: f64) -> f64 {
    let mean = running.iter().sum::<f64>() / running.len() as f64;
    weight * running.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / running.len() as f64
}

/// Blends the batch mean activity into the running means, then penalizes their spread:
/// `r ← (1−m)·r + m·mean_batch(a)`, `loss = λ · mean_j (r_j − mean(r))²`.
pub fn peer_norm_loss(
    layer: &FFLayer,
    activations: &Matrix,
    peer: PeerNormConfig,
) -> Result<(f64, Vec<f64>), ModelError> {
    if activations.rows() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if activations.cols() != layer.width() {
        return Err(NnError::ShapeMismatch {
            op: "peer_norm_loss",
            left: (1, layer.width()),
            right: activations.shape(),
        }
        .into());
    }
    let running = updated_running_mean(&layer.peer_running_mean, activations, peer.momentum);
    Ok((peer_penalty(&running, peer.weight), running))
}

/// Gradients of one layer's local objective with respect to its own parameters.
#[derive(Clone, Debug)]
pub struct LayerGradients {
    pub weights: Matrix,
    pub biases: Matrix,
    pub goodness_loss: f64,
    pub peer_loss: f64,
    pub running_mean: Vec<f64>,
    pub forward: LayerForwardResult,
}

impl LayerGradients {
    pub fn total_loss(&self) -> f64 {
        self.goodness_loss + self.peer_loss
    }
}

/// Exact gradient of `layer_loss + peer_norm_loss` with respect to `W` and `b`.
///
/// The input is treated as a constant, so nothing flows to earlier layers.
pub fn layer_grad(
    layer: &FFLayer,
    input: &Matrix,
    polarities: &[Polarity],
    peer: PeerNormConfig,
) -> Result<LayerGradients, ModelError> {
    check_polarities(input.rows(), polarities)?;
    let forward = layer_forward(layer, input)?;
    let goodness_loss = layer_loss(&forward, polarities)?;
    let (peer_loss, running_mean) = peer_norm_loss(layer, &forward.activations, peer)?;

    let n = input.rows() as f64;
    let width = layer.width() as f64;
    let mean_r = running_mean.iter().sum::<f64>() / width;
    // dL/da_ij from the peer term: 2λ/W · (r_j − mean(r)) · m/n; the mean(r) path sums to zero
    let peer_coef: Vec<f64> = running_mean
        .iter()
        .map(|&r| 2.0 * peer.weight / width * (r - mean_r) * peer.momentum / n)
        .collect();

    let mut d_pre = forward.activations.clone();
    for (r, p) in polarities.iter().enumerate() {
        let d_logit = (forward.y[r] - p.target()) / n;
        for (d, &c) in d_pre.row_mut(r).iter_mut().zip(&peer_coef) {
            // d currently holds a_ij; ReLU passes gradient only where a_ij > 0
            *d = if *d > 0.0 { d_logit * 2.0 * *d + c } else { 0.0 };
        }
    }
    let weights = matmul_tn(input, &d_pre)?;
    let biases = d_pre.column_sums();
    Ok(LayerGradients {
        weights,
        biases,
        goodness_loss,
        peer_loss,
        running_mean,
        forward,
    })
}

/// Architecture and training hyperparameters of an [`FFNetwork`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// `None` means θ = layer width.
    pub threshold: Option<f64>,
    pub optimizer: SgdConfig,
    pub peer: PeerNormConfig,
    pub peer_running_mean_init: f64,
    pub activity_norm: ActivityNorm,
    /// Apply `activity_norm` to the raw input before the first layer as well.
    pub normalize_input: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return bad(format!(
                "input_dim, hidden_dim and num_layers must be >= 1 (got {}, {}, {})",
                self.input_dim, self.hidden_dim, self.num_layers
            ));
        }
        if let Some(t) = self.threshold {
            GoodnessConfig::new(t)?;
        }
        if !(0.0..=1.0).contains(&self.peer.momentum) {
            return bad(format!("peer momentum {} outside [0, 1]", self.peer.momentum));
        }
        if self.peer.weight < 0.0 || self.peer_running_mean_init < 0.0 {
            return bad("peer weight and running-mean init must be non-negative".into());
        }
        Ok(())
    }
}

/// A stack of [`FFLayer`]s with the shared peer-normalization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FFNetwork {
    layers: Vec<FFLayer>,
    pub peer: PeerNormConfig,
    pub activity_norm: ActivityNorm,
    pub normalize_input: bool,
}

impl FFNetwork {
    pub fn new<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let goodness = match config.threshold {
            Some(t) => GoodnessConfig::new(t)?,
            None => GoodnessConfig::for_width(config.hidden_dim),
        };
        let layers = (0..config.num_layers)
            .map(|i| {
                let fan_in = if i == 0 {
                    config.input_dim
                } else {
                    config.hidden_dim
                };
                FFLayer::new(
                    fan_in,
                    config.hidden_dim,
                    goodness,
                    config.optimizer,
                    config.peer_running_mean_init,
                    rng,
                )
            })
            .collect();
        Ok(FFNetwork {
            layers,
            peer: config.peer,
            activity_norm: config.activity_norm,
            normalize_input: config.normalize_input,
        })
    }

    /// Assembles a network from existing layers, checking that their shapes compose.
    pub fn from_layers(
        layers: Vec<FFLayer>,
        peer: PeerNormConfig,
        activity_norm: ActivityNorm,
        normalize_input: bool,
    ) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].fan_in() != pair[0].width() {
                return Err(ModelError::InputWidth {
                    layer: i + 2,
                    expected: pair[1].fan_in(),
                    found: pair[0].width(),
                });
            }
        }
        Ok(FFNetwork {
            layers,
            peer,
            activity_norm,
            normalize_input,
        })
    }

    pub fn layers(&self) -> &[FFLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FFLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn prepare_input(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::InputWidth {
                layer: 1,
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        Ok(if self.normalize_input {
            normalize_activity(x, self.activity_norm)
        } else {
            x.clone()
        })
    }

    /// Runs every layer on `x` without touching any parameter or running mean.
    pub fn forward(&self, x: &Matrix) -> Result<Vec<LayerForwardResult>, ModelError> {
        let mut input = self.prepare_input(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let res = layer_forward(layer, &input)?;
            input = normalize_activity(&res.activations, self.activity_norm);
            out.push(res);
        }
        Ok(out)
    }

    /// Normalized activity of every layer, as passed to the next one.
    pub fn normalized_activities(&self, x: &Matrix) -> Result<Vec<Matrix>, ModelError> {
        Ok(self
            .forward(x)?
            .into_iter()
            .map(|r| normalize_activity(&r.activations, self.activity_norm))
            .collect())
    }

    /// One local update of every layer on a single batch; returns each layer's loss.
    pub fn train_batch(
        &mut self,
        x: &Matrix,
        polarities: &[Polarity],
    ) -> Result<Vec<f64>, ModelError> {
        let mut input = self.prepare_input(x)?;
        let peer = self.peer;
        let norm = self.activity_norm;
        let mut losses = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let grads = layer_grad(layer, &input, polarities, peer)?;
            let loss = grads.total_loss();
            if !loss.is_finite() {
                return Err(ModelError::NonFinite { layer: i + 1 });
            }
            layer.weight_opt.step(&mut layer.weights, &grads.weights)?;
            layer.bias_opt.step(&mut layer.biases, &grads.biases)?;
            layer.peer_running_mean = grads.running_mean;
            input = normalize_activity(&grads.forward.activations, norm);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// One pass over `batches`, updating every layer on every batch.
///
/// Returns each layer's loss averaged over samples.
pub fn train_epoch(
    network: &mut FFNetwork,
    batches: impl IntoIterator<Item = PairedBatch>,
) -> Result<Vec<f64>, ModelError> {
    let mut totals = vec![0.0; network.num_layers()];
    let mut count = 0usize;
    for batch in batches {
        let (x, polarities) = batch.stacked();
        let losses = network.train_batch(&x, &polarities)?;
        for (t, l) in totals.iter_mut().zip(losses) {
            *t += l * x.rows() as f64;
        }
        count += x.rows();
    }
    if count == 0 {
        return Err(ModelError::EmptyBatch);
    }
    Ok(totals.into_iter().map(|t| t / count as f64).collect())
}

/// True positives and negatives of one layer's threshold decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAccuracyStats {
    pub true_positives: usize,
    pub true_negatives: usize,
    pub samples: usize,
}

impl LayerAccuracyStats {
    /// Counts `y > 0.5` on positives and `y < 0.5` on negatives; `y == 0.5` counts for neither.
    pub fn from_outputs(y: &[f64], polarities: &[Polarity]) -> Self {
        let mut stats = LayerAccuracyStats::default();
        stats.accumulate(y, polarities);
        stats
    }

    fn accumulate(&mut self, y: &[f64], polarities: &[Polarity]) {
        for (&v, p) in y.iter().zip(polarities) {
            match p {
                Polarity::Positive if v > 0.5 => self.true_positives += 1,
                Polarity::Negative if v < 0.5 => self.true_negatives += 1,
                _ => {}
            }
        }
        self.samples += y.len();
    }

    pub fn accuracy(&self) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        (self.true_positives + self.true_negatives) as f64 / self.samples as f64
    }
}

/// Per-layer accuracy of the goodness threshold over balanced evaluation batches.
pub fn layer_accuracy(
    network: &FFNetwork,
    batches: impl IntoIterator<Item = PairedBatch>,
) -> Result<Vec<LayerAccuracyStats>, ModelError> {
    let mut stats = vec![LayerAccuracyStats::default(); network.num_layers()];
    for batch in batches {
        let (x, polarities) = batch.stacked();
        for (s, res) in stats.iter_mut().zip(network.forward(&x)?) {
            s.accumulate(&res.y, &polarities);
        }
    }
    if stats[0].samples == 0 {
        return Err(ModelError::EmptyBatch);
    }
    Ok(stats)
}

/// Options for label-scan inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Leave layer 1 out of the summed goodness.
    pub skip_first_layer: bool,
}

/// Summed goodness logits for every candidate label, `images.rows() x 10`.
pub fn goodness_scores(
    network: &FFNetwork,
    images: &Matrix,
    opts: ScanOptions,
) -> Result<Matrix, ModelError> {
    let skip = usize::from(opts.skip_first_layer && network.num_layers() > 1);
    let mut scores = Matrix::zeros(images.rows(), NUM_CLASSES);
    for label in 0..NUM_CLASSES as u8 {
        let x = data::labelled_matrix(images, label)?;
        for res in network.forward(&x)?.iter().skip(skip) {
            for (r, &l) in res.goodness_logits.iter().enumerate() {
                let s = scores.get(r, usize::from(label));
                scores.set(r, usize::from(label), s + l);
            }
        }
    }
    Ok(scores)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn goodness_predict_batch(
    network: &FFNetwork,
    images: &Matrix,
    opts: ScanOptions,
) -> Result<Vec<u8>, ModelError> {
    let scores = goodness_scores(network, images, opts)?;
    Ok(scores.iter_rows().map(|r| argmax(r) as u8).collect())
}

/// The label whose embedding maximizes summed goodness.
pub fn goodness_predict(
    network: &FFNetwork,
    image: &ImageVector,
    opts: ScanOptions,
) -> Result<u8, ModelError> {
    let x = Matrix::from_rows(&[image.pixels()]);
    Ok(goodness_predict_batch(network, &x, opts)?[0])
}

/// Fraction of `split` classified correctly by label scan.
pub fn goodness_scan_accuracy(
    network: &FFNetwork,
    split: &DatasetSplit,
    opts: ScanOptions,
    chunk: usize,
) -> Result<f64, ModelError> {
    if split.is_empty() {
        return Err(DataError::EmptySplit.into());
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let x = split.image_matrix(part.iter().copied());
        let pred = goodness_predict_batch(network, &x, opts)?;
        correct += part
            .iter()
            .zip(pred)
            .filter(|(&i, p)| split.labels()[i] == *p)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    network: FFNetwork,
}

/// Writes the network (shapes, parameters, running means, optimizer state) as JSON.
pub fn save_checkpoint(network: &FFNetwork, path: &Path) -> Result<(), ModelError> {
    let ckpt = Checkpoint {
        schema: CHECKPOINT_SCHEMA.to_string(),
        network: network.clone(),
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<FFNetwork, ModelError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if ckpt.schema != CHECKPOINT_SCHEMA {
        return Err(ModelError::Checkpoint(format!(
            "unsupported schema {:?}, expected {CHECKPOINT_SCHEMA:?}",
            ckpt.schema
        )));
    }
    let n = ckpt.network;
    FFNetwork::from_layers(n.layers, n.peer, n.activity_norm, n.normalize_input)
}
