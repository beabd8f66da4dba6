//! Overall-model accuracy through a linear softmax head on the FF stack's activity.
//!
//! The head sees each image with the neutral label written in, so the FF layers'
//! label pixels leak nothing. It only ever borrows the network immutably.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DataError, DatasetSplit, ImageVector, NUM_CLASSES};
use crate::model::{argmax, FFNetwork, ModelError};
use crate::nn::{matmul, Matrix, OptimizerState, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    /// Leave layer 1 out of the feature vector. Ignored for single-layer networks.
    pub skip_first_layer: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            skip_first_layer: true,
        }
    }
}

impl FeatureOptions {
    fn first_included(&self, network: &FFNetwork) -> usize {
        usize::from(self.skip_first_layer && network.num_layers() > 1)
    }

    /// Width of the concatenated feature vector for `network`.
    pub fn feature_dim(&self, network: &FFNetwork) -> usize {
        network.layers()[self.first_included(network)..]
            .iter()
            .map(|l| l.width())
            .sum()
    }
}

/// Feature rows for a batch of images; label pixels are overwritten with the neutral code.
pub fn collect_features_batch(
    network: &FFNetwork,
    images: &Matrix,
    opts: FeatureOptions,
) -> Result<Matrix, ModelError> {
    let mut x = images.clone();
    for r in 0..x.rows() {
        x.row_mut(r)[..NUM_CLASSES].fill(data::NEUTRAL_PIXEL_VALUE);
    }
    let acts = network.normalized_activities(&x)?;
    Ok(Matrix::hstack(&acts[opts.first_included(network)..])?)
}

pub fn collect_features(
    network: &FFNetwork,
    image: &ImageVector,
    opts: FeatureOptions,
) -> Result<Vec<f64>, ModelError> {
    let x = Matrix::from_rows(&[image.pixels()]);
    Ok(collect_features_batch(network, &x, opts)?.into_vec())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[u8]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[usize::from(label)];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - log_sum).exp();
            let t = if c == usize::from(label) { 1.0 } else { 0.0 };
            *g = (p - t) / n;
        }
    }
    (loss / n, grad)
}

/// Linear 10-way softmax classifier over concatenated layer activity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamClassifier {
    pub weights: Matrix,
    pub biases: Matrix,
    pub weight_opt: OptimizerState,
    pub bias_opt: OptimizerState,
    pub features: FeatureOptions,
}

/// Loss and parameter gradients of the classifier on one batch.
#[derive(Clone, Debug)]
pub struct ClassifierGradients {
    pub loss: f64,
    pub weights: Matrix,
    pub biases: Matrix,
}

impl DownstreamClassifier {
    /// Zero-initialized classifier sized for `network`.
    pub fn new(network: &FFNetwork, features: FeatureOptions, optimizer: SgdConfig) -> Self {
        let dim = features.feature_dim(network);
        DownstreamClassifier {
            weights: Matrix::zeros(dim, NUM_CLASSES),
            biases: Matrix::zeros(1, NUM_CLASSES),
            weight_opt: OptimizerState::new(optimizer, dim, NUM_CLASSES),
            bias_opt: OptimizerState::new(optimizer, 1, NUM_CLASSES),
            features,
        }
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix, ModelError> {
        let mut z = matmul(features, &self.weights)?;
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(self.biases.row(0)) {
                *v += b;
            }
        }
        Ok(z)
    }

    pub fn gradients(
        &self,
        features: &Matrix,
        labels: &[u8],
    ) -> Result<ClassifierGradients, ModelError> {
        if features.rows() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let (loss, d_logits) = softmax_cross_entropy(&self.logits(features)?, labels);
        Ok(ClassifierGradients {
            loss,
            weights: crate::nn::matmul_tn(features, &d_logits)?,
            biases: d_logits.column_sums(),
        })
    }

    /// Class predictions; ties go to the lowest class id.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<u8>, ModelError> {
        Ok(self
            .logits(features)?
            .iter_rows()
            .map(|r| argmax(r) as u8)
            .collect())
    }
}

/// One shuffled pass of softmax training over `split`; returns the sample-mean loss.
pub fn train_downstream_epoch<R: Rng + ?Sized>(
    classifier: &mut DownstreamClassifier,
    network: &FFNetwork,
    split: &DatasetSplit,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64, ModelError> {
    if split.is_empty() {
        return Err(DataError::EmptySplit.into());
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize.into());
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let x = split.image_matrix(chunk.iter().copied());
        let feats = collect_features_batch(network, &x, classifier.features)?;
        let labels: Vec<u8> = chunk.iter().map(|&i| split.labels()[i]).collect();
        let g = classifier.gradients(&feats, &labels)?;
        if !g.loss.is_finite() {
            return Err(ModelError::NonFinite { layer: 0 });
        }
        classifier.weight_opt.step(&mut classifier.weights, &g.weights)?;
        classifier.bias_opt.step(&mut classifier.biases, &g.biases)?;
        total += g.loss * chunk.len() as f64;
    }
    Ok(total / split.len() as f64)
}

/// Fraction of `split` whose predicted class equals the true label.
pub fn overall_accuracy(
    classifier: &DownstreamClassifier,
    network: &FFNetwork,
    split: &DatasetSplit,
    chunk: usize,
) -> Result<f64, ModelError> {
    if split.is_empty() {
        return Err(DataError::EmptySplit.into());
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let x = split.image_matrix(part.iter().copied());
        let pred = classifier.predict(&collect_features_batch(network, &x, classifier.features)?)?;
        correct += part
            .iter()
            .zip(pred)
            .filter(|(&i, p)| split.labels()[i] == *p)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}
