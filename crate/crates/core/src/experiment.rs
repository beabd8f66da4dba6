//! Experiment configuration, single-run training loop, and the sweep runner that
//! persists long-format metric CSVs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, make_batches_with, DataError, DatasetSplit, IMAGE_PIXELS};
use crate::downstream::{overall_accuracy, train_downstream_epoch, DownstreamClassifier, FeatureOptions};
use crate::model::{
    goodness_scan_accuracy, layer_accuracy, train_epoch, ActivityNorm, FFNetwork, ModelError,
    NetworkConfig, PeerNormConfig, ScanOptions,
};
use crate::nn::SgdConfig;

pub const METRICS_HEADER: [&str; 8] = [
    "run_id",
    "seed",
    "num_layers",
    "hidden_dim",
    "epoch",
    "layer_index",
    "metric",
    "value",
];
pub const METRICS_FILE: &str = "metrics.csv";
pub const FAILURES_FILE: &str = "failures.csv";

/// Rows per chunk when scoring a whole split.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {key}: {message}")]
    InvalidConfig { key: String, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("unknown plan `{0}` (expected paper-full, desk-small or a plan file)")]
    UnknownPlan(String),
    #[error("sweep plan is empty")]
    EmptyPlan,
    #[error("duplicate run id {0}")]
    DuplicateRunId(String),
    #[error("{0}")]
    Diverged(Divergence),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("metrics invariant violated: {0}")]
    InvalidMetrics(String),
    #[error("{path}: line {line}: {message}")]
    MalformedCsv {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Data(d) => ExperimentError::Data(d),
            other => ExperimentError::Model(other),
        }
    }
}

/// Where a run stopped producing finite numbers. Layer 0 is the downstream head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub run_id: String,
    pub epoch: usize,
    pub layer: usize,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let place = if self.layer == 0 {
            "the downstream classifier".to_string()
        } else {
            format!("layer {}", self.layer)
        };
        write!(
            f,
            "run {}: non-finite loss at epoch {} in {}",
            self.run_id, self.epoch, place
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallMethod {
    /// Linear softmax head over normalized hidden activities.
    #[default]
    Downstream,
    /// Embed every label, pick the one with the largest summed goodness.
    GoodnessScan,
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Peer-normalization penalty λ.
    pub peer_normalization: f64,
    pub peer_normalization_momentum: f64,
    pub downstream_learning_rate: f64,
    pub downstream_weight_decay: f64,
    pub target_accuracy: f64,
    pub overall_method: OverallMethod,
    /// Goodness threshold; absent means the layer width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub activity_norm: ActivityNorm,
    pub normalize_input: bool,
    pub peer_running_mean_init: f64,
    /// Leave layer 1 out of the downstream classifier's features.
    pub downstream_skip_first_layer: bool,
    /// Leave layer 1 out of the label-scan goodness sum.
    pub scan_skip_first_layer: bool,
    /// Use only the first n training images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    /// Use only the first n test images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            batch_size: 1000,
            hidden_dim: 1000,
            num_layers: 4,
            epochs: 30,
            learning_rate: 1e-3,
            weight_decay: 3e-4,
            momentum: 0.9,
            peer_normalization: 0.03,
            peer_normalization_momentum: 0.09,
            downstream_learning_rate: 1e-2,
            downstream_weight_decay: 3e-3,
            target_accuracy: 0.7,
            overall_method: OverallMethod::Downstream,
            threshold: None,
            activity_norm: ActivityNorm::UnitMeanSquare,
            normalize_input: true,
            peer_running_mean_init: 0.5,
            downstream_skip_first_layer: true,
            scan_skip_first_layer: false,
            train_samples: None,
            test_samples: None,
        }
    }
}

/// Keys accepted by config files and `--set`.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "batch_size",
    "hidden_dim",
    "num_layers",
    "epochs",
    "learning_rate",
    "weight_decay",
    "momentum",
    "peer_normalization",
    "peer_normalization_momentum",
    "downstream_learning_rate",
    "downstream_weight_decay",
    "target_accuracy",
    "overall_method",
    "threshold",
    "activity_norm",
    "normalize_input",
    "peer_running_mean_init",
    "downstream_skip_first_layer",
    "scan_skip_first_layer",
    "train_samples",
    "test_samples",
];

const FLOAT_KEYS: &[&str] = &[
    "learning_rate",
    "weight_decay",
    "momentum",
    "peer_normalization",
    "peer_normalization_momentum",
    "downstream_learning_rate",
    "downstream_weight_decay",
    "target_accuracy",
    "threshold",
    "peer_running_mean_init",
];

/// Integers written for float-valued keys are widened so `lr = 1` parses.
fn widen_floats(table: &mut toml::Table) {
    for key in FLOAT_KEYS {
        if let Some(toml::Value::Integer(i)) = table.get(*key) {
            let f = *i as f64;
            table.insert((*key).to_string(), toml::Value::Float(f));
        }
    }
}

fn config_from_table(mut table: toml::Table) -> Result<ExperimentConfig, ExperimentError> {
    if let Some(key) = table.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
        return Err(ExperimentError::UnknownKey(key.clone()));
    }
    widen_floats(&mut table);
    table
        .try_into()
        .map_err(|e: toml::de::Error| ExperimentError::ConfigParse(e.message().to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ExperimentError::ConfigParse(e.to_string()))?;
        config_from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces one key with a value given as text.
    ///
    /// The text is read as a TOML value when it parses as one, otherwise as a bare
    /// string, so `overall_method=goodness_scan` and `threshold=250` both work.
    /// `threshold=none` (likewise the sample limits) clears an optional key.
    pub fn set_override(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        if !CONFIG_KEYS.contains(&key) {
            return Err(ExperimentError::UnknownKey(key.to_string()));
        }
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        let trimmed = value.trim();
        if trimmed.eq_ignore_ascii_case("none")
            && matches!(key, "threshold" | "train_samples" | "test_samples")
        {
            table.remove(key);
        } else {
            let parsed = format!("v = {trimmed}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(trimmed.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let updated = config_from_table(table).map_err(|e| match e {
            ExperimentError::ConfigParse(msg) => ExperimentError::InvalidConfig {
                key: key.to_string(),
                message: format!("cannot use `{trimmed}`: {msg}"),
            },
            other => other,
        })?;
        *self = updated;
        Ok(())
    }

    /// Checks every documented invariant; the error names the offending key.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |key: &str, message: String| {
            Err(ExperimentError::InvalidConfig {
                key: key.to_string(),
                message,
            })
        };
        if self.seed < 1 {
            return bad("seed", "must be >= 1".into());
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("epochs", self.epochs),
        ] {
            if v < 1 {
                return bad(key, format!("must be >= 1 (got {v})"));
            }
        }
        for (key, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("peer_normalization", self.peer_normalization),
            ("peer_normalization_momentum", self.peer_normalization_momentum),
            ("downstream_learning_rate", self.downstream_learning_rate),
            ("downstream_weight_decay", self.downstream_weight_decay),
            ("peer_running_mean_init", self.peer_running_mean_init),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("must be a finite value >= 0 (got {v})"));
            }
        }
        if self.peer_normalization_momentum > 1.0 {
            return bad(
                "peer_normalization_momentum",
                format!("must be <= 1 (got {})", self.peer_normalization_momentum),
            );
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy < 1.0) {
            return bad(
                "target_accuracy",
                format!("must lie in (0, 1) (got {})", self.target_accuracy),
            );
        }
        if let Some(t) = self.threshold {
            if !(t.is_finite() && t > 0.0) {
                return bad("threshold", format!("must be a finite value > 0 (got {t})"));
            }
        }
        for (key, v) in [
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
        ] {
            if v == Some(0) {
                return bad(key, "must be >= 1 when set".into());
            }
        }
        Ok(())
    }

    /// Zero-padded identifier, e.g. `l04-h0100-s001`.
    pub fn run_id(&self) -> String {
        format!(
            "l{:02}-h{:04}-s{:03}",
            self.num_layers, self.hidden_dim, self.seed
        )
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_dim: IMAGE_PIXELS,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            threshold: self.threshold,
            optimizer: SgdConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            peer: PeerNormConfig {
                weight: self.peer_normalization,
                momentum: self.peer_normalization_momentum,
            },
            peer_running_mean_init: self.peer_running_mean_init,
            activity_norm: self.activity_norm,
            normalize_input: self.normalize_input,
        }
    }

    pub fn downstream_optimizer(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.downstream_learning_rate,
            momentum: self.momentum,
            weight_decay: self.downstream_weight_decay,
        }
    }
}

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Negatives,
    Downstream,
    Eval,
}

impl Stream {
    pub fn label(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::Shuffle => "shuffle",
            Stream::Negatives => "negatives",
            Stream::Downstream => "downstream",
            Stream::Eval => "eval",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the stream named `label`; depends only on `(seed, label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(splitmix64(seed) ^ fnv1a(label))
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream.label()))
}

/// Measurements taken after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub run_id: String,
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// 1-based.
    pub epoch: usize,
    pub per_layer_accuracy: Vec<f64>,
    pub per_layer_loss: Vec<f64>,
    pub overall_accuracy: f64,
    /// Seconds; not persisted, so CSVs stay reproducible.
    pub wall_time: f64,
}

impl EpochMetrics {
    pub fn validate(&self, epochs: usize) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::InvalidMetrics(format!("{}: {m}", self.run_id)));
        if self.per_layer_accuracy.len() != self.num_layers
            || self.per_layer_loss.len() != self.num_layers
        {
            return fail(format!(
                "epoch {} has {} accuracies and {} losses for {} layers",
                self.epoch,
                self.per_layer_accuracy.len(),
                self.per_layer_loss.len(),
                self.num_layers
            ));
        }
        if self.epoch < 1 || self.epoch > epochs {
            return fail(format!("epoch {} outside 1..={epochs}", self.epoch));
        }
        let accs = self
            .per_layer_accuracy
            .iter()
            .chain(std::iter::once(&self.overall_accuracy));
        if accs.clone().any(|a| !(0.0..=1.0).contains(a)) {
            return fail(format!("epoch {} has an accuracy outside [0, 1]", self.epoch));
        }
        if self.per_layer_loss.iter().any(|l| !l.is_finite()) {
            return fail(format!("epoch {} has a non-finite loss", self.epoch));
        }
        Ok(())
    }
}

fn limited(split: &DatasetSplit, limit: Option<usize>) -> std::borrow::Cow<'_, DatasetSplit> {
    match limit {
        Some(n) if n < split.len() => std::borrow::Cow::Owned(split.head(n)),
        _ => std::borrow::Cow::Borrowed(split),
    }
}

pub fn run_experiment(
    config: &ExperimentConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
) -> Result<Vec<EpochMetrics>, ExperimentError> {
    run_experiment_with(config, train, test, |_| {})
}

/// Trains one network, calling `on_epoch` after each epoch's measurements.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, ExperimentError> {
    config.validate()?;
    let train = limited(train, config.train_samples);
    let test = limited(test, config.test_samples);
    let run_id = config.run_id();
    let diverged = |epoch: usize, layer: usize| {
        ExperimentError::Diverged(Divergence {
            run_id: run_id.clone(),
            epoch,
            layer,
        })
    };

    let mut init_rng = stream_rng(config.seed, Stream::Init);
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut negative_rng = stream_rng(config.seed, Stream::Negatives);
    let mut downstream_rng = stream_rng(config.seed, Stream::Downstream);

    let mut network = FFNetwork::new(&config.network_config(), &mut init_rng)?;
    let features = FeatureOptions {
        skip_first_layer: config.downstream_skip_first_layer,
    };
    let mut classifier =
        DownstreamClassifier::new(&network, features, config.downstream_optimizer());
    let scan = ScanOptions {
        skip_first_layer: config.scan_skip_first_layer,
    };

    let mut out = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let batches = make_batches_with(&train, config.batch_size, &mut shuffle_rng, &mut negative_rng)?;
        let losses = match train_epoch(&mut network, batches) {
            Err(ModelError::NonFinite { layer }) => return Err(diverged(epoch, layer)),
            other => other?,
        };

        let overall = match config.overall_method {
            OverallMethod::Downstream => {
                match train_downstream_epoch(
                    &mut classifier,
                    &network,
                    &train,
                    config.batch_size,
                    &mut downstream_rng,
                ) {
                    Err(ModelError::NonFinite { .. }) => return Err(diverged(epoch, 0)),
                    other => other?,
                };
                overall_accuracy(&classifier, &network, &test, EVAL_CHUNK)?
            }
            OverallMethod::GoodnessScan => goodness_scan_accuracy(&network, &test, scan, EVAL_CHUNK)?,
        };

        // The same evaluation pairs every epoch.
        let mut eval_rng = stream_rng(config.seed, Stream::Eval);
        let eval = make_batches(&test, config.batch_size, &mut eval_rng)?;
        let accuracy = layer_accuracy(&network, eval)?
            .iter()
            .map(|s| s.accuracy())
            .collect();

        let metrics = EpochMetrics {
            run_id: run_id.clone(),
            seed: config.seed,
            num_layers: config.num_layers,
            hidden_dim: config.hidden_dim,
            epoch,
            per_layer_accuracy: accuracy,
            per_layer_loss: losses,
            overall_accuracy: overall,
            wall_time: start.elapsed().as_secs_f64(),
        };
        metrics.validate(config.epochs)?;
        log::debug!(
            "{run_id} epoch {epoch}: overall {:.4} in {:.1}s",
            metrics.overall_accuracy,
            metrics.wall_time
        );
        on_epoch(&metrics);
        out.push(metrics);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LayerAccuracy,
    LayerLoss,
    OverallAccuracy,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::LayerAccuracy => "layer_accuracy",
            Metric::LayerLoss => "layer_loss",
            Metric::OverallAccuracy => "overall_accuracy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layer_accuracy" => Some(Metric::LayerAccuracy),
            "layer_loss" => Some(Metric::LayerLoss),
            "overall_accuracy" => Some(Metric::OverallAccuracy),
            _ => None,
        }
    }
}

/// One line of the long-format metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub epoch: usize,
    /// 1-based layer, or 0 for the whole model.
    pub layer_index: usize,
    pub metric: Metric,
    pub value: f64,
}

/// Flattens epochs into rows: the overall row, then accuracy and loss per layer.
pub fn metrics_to_rows(metrics: &[EpochMetrics]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for m in metrics {
        let row = |layer_index, metric, value| MetricRow {
            run_id: m.run_id.clone(),
            seed: m.seed,
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            epoch: m.epoch,
            layer_index,
            metric,
            value,
        };
        rows.push(row(0, Metric::OverallAccuracy, m.overall_accuracy));
        for (i, (&acc, &loss)) in m.per_layer_accuracy.iter().zip(&m.per_layer_loss).enumerate() {
            rows.push(row(i + 1, Metric::LayerAccuracy, acc));
            rows.push(row(i + 1, Metric::LayerLoss, loss));
        }
    }
    rows
}

/// Nine significant digits; plain decimal for moderate magnitudes, exponent form otherwise.
pub fn format_value(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    if (-5..9).contains(&exp) {
        format!("{:.*}", (8 - exp) as usize, v)
    } else {
        sci
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.num_layers.to_string(),
            r.hidden_dim.to_string(),
            r.epoch.to_string(),
            r.layer_index.to_string(),
            r.metric.as_str().to_string(),
            format_value(r.value),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_io(path: &Path, e: csv::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>, ExperimentError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_metrics_csv(file, path)
}

/// Parses and validates metrics CSV text; `path` only labels errors.
pub fn parse_metrics_csv(
    reader: impl std::io::Read,
    path: &Path,
) -> Result<Vec<MetricRow>, ExperimentError> {
    let malformed = |line: u64, message: String| ExperimentError::MalformedCsv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = r.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| malformed(1, e.to_string()))?,
        None => return Err(malformed(1, "file is empty".into())),
    };
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(malformed(
            1,
            format!("header must be `{}`", METRICS_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| malformed(line, e.to_string()))?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(malformed(
                line,
                format!("expected {} fields, found {}", METRICS_HEADER.len(), rec.len()),
            ));
        }
        let field = |k: usize| &rec[k];
        fn num<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("{name} `{s}` is not a valid number"))
        }
        let parsed = (|| -> Result<MetricRow, String> {
            let metric = Metric::parse(field(6))
                .ok_or_else(|| format!("unknown metric `{}`", field(6)))?;
            let row = MetricRow {
                run_id: field(0).to_string(),
                seed: num(field(1), "seed")?,
                num_layers: num(field(2), "num_layers")?,
                hidden_dim: num(field(3), "hidden_dim")?,
                epoch: num(field(4), "epoch")?,
                layer_index: num(field(5), "layer_index")?,
                metric,
                value: num(field(7), "value")?,
            };
            if row.run_id.is_empty() {
                return Err("empty run_id".into());
            }
            if row.epoch < 1 {
                return Err("epoch must be >= 1".into());
            }
            if !row.value.is_finite() {
                return Err("value must be finite".into());
            }
            let overall = row.metric == Metric::OverallAccuracy;
            if overall != (row.layer_index == 0) {
                return Err("layer_index 0 is reserved for overall_accuracy".into());
            }
            if row.layer_index > row.num_layers {
                return Err(format!(
                    "layer_index {} exceeds num_layers {}",
                    row.layer_index, row.num_layers
                ));
            }
            Ok(row)
        })()
        .map_err(|m| malformed(line, m))?;
        rows.push(parsed);
    }
    Ok(rows)
}

/// A named list of runs sharing one output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub configs: Vec<ExperimentConfig>,
    pub output_dir: PathBuf,
}

/// Plan files: a grid over seeds, widths and depths applied to a base config.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    seeds: Vec<u64>,
    hidden_dims: Vec<usize>,
    num_layers: Vec<usize>,
    #[serde(default)]
    base: toml::Table,
}

impl SweepPlan {
    pub fn new(configs: Vec<ExperimentConfig>, output_dir: PathBuf) -> Result<Self, ExperimentError> {
        let mut ids: Vec<String> = configs.iter().map(|c| c.run_id()).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ExperimentError::DuplicateRunId(w[0].clone()));
        }
        Ok(SweepPlan {
            configs,
            output_dir,
        })
    }

    /// Cartesian product of seeds × widths × depths over `base`.
    pub fn grid(
        base: &ExperimentConfig,
        seeds: &[u64],
        hidden_dims: &[usize],
        num_layers: &[usize],
        output_dir: PathBuf,
    ) -> Result<Self, ExperimentError> {
        let mut configs = Vec::new();
        for &h in hidden_dims {
            for &l in num_layers {
                for &s in seeds {
                    configs.push(ExperimentConfig {
                        seed: s,
                        hidden_dim: h,
                        num_layers: l,
                        ..base.clone()
                    });
                }
            }
        }
        Self::new(configs, output_dir)
    }

    /// 30 seeds × widths {100, 1000} × depths {2, 4, 8, 16, 32}.
    pub fn paper_full(base: &ExperimentConfig, output_dir: PathBuf) -> Result<Self, ExperimentError> {
        let seeds: Vec<u64> = (1..=30).collect();
        Self::grid(base, &seeds, &[100, 1000], &[2, 4, 8, 16, 32], output_dir)
    }

    /// 5 seeds × depths {2, 4} at width 100.
    pub fn desk_small(base: &ExperimentConfig, output_dir: PathBuf) -> Result<Self, ExperimentError> {
        Self::grid(base, &[1, 2, 3, 4, 5], &[100], &[2, 4], output_dir)
    }

    pub fn from_toml_str(
        text: &str,
        base: &ExperimentConfig,
        output_dir: PathBuf,
    ) -> Result<Self, ExperimentError> {
        let file: PlanFile =
            toml::from_str(text).map_err(|e| ExperimentError::ConfigParse(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).expect("config serializes");
        merged.extend(file.base);
        let base = config_from_table(merged)?;
        Self::grid(&base, &file.seeds, &file.hidden_dims, &file.num_layers, output_dir)
    }

    /// `paper-full`, `desk-small`, or a path to a plan file.
    pub fn resolve(
        name: &str,
        base: &ExperimentConfig,
        output_dir: PathBuf,
    ) -> Result<Self, ExperimentError> {
        match name {
            "paper-full" => Self::paper_full(base, output_dir),
            "desk-small" => Self::desk_small(base, output_dir),
            other => {
                let path = Path::new(other);
                if !path.is_file() {
                    return Err(ExperimentError::UnknownPlan(other.to_string()));
                }
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                Self::from_toml_str(&text, base, output_dir)
            }
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join(METRICS_FILE)
    }

    pub fn failures_path(&self) -> PathBuf {
        self.output_dir.join(FAILURES_FILE)
    }
}

/// Outcome of one run inside a sweep.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub run_id: String,
    /// Final overall accuracy, or the error text.
    pub result: Result<f64, String>,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub metrics_path: PathBuf,
    pub completed: Vec<String>,
    /// `(run_id, error)` of every failed run, sorted by run id.
    pub failures: Vec<(String, String)>,
}

pub fn run_sweep(
    plan: &SweepPlan,
    train: &DatasetSplit,
    test: &DatasetSplit,
    max_parallel: usize,
) -> Result<SweepOutcome, ExperimentError> {
    run_sweep_with(plan, train, test, max_parallel, &|_| {})
}

/// Runs every config with at most `max_parallel` in flight and writes the sorted CSV.
///
/// A failing run is listed in the failures sidecar; the others still complete.
pub fn run_sweep_with(
    plan: &SweepPlan,
    train: &DatasetSplit,
    test: &DatasetSplit,
    max_parallel: usize,
    on_run: &(dyn Fn(&RunReport) + Sync),
) -> Result<SweepOutcome, ExperimentError> {
    if plan.configs.is_empty() {
        return Err(ExperimentError::EmptyPlan);
    }
    fs::create_dir_all(&plan.output_dir).map_err(io_err(&plan.output_dir))?;
    let metrics_path = plan.metrics_path();
    // Fail on an unwritable directory before any training.
    fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_parallel.max(1))
        .build()
        .map_err(|e| ExperimentError::ConfigParse(format!("thread pool: {e}")))?;
    let mut results: Vec<(String, Result<Vec<EpochMetrics>, ExperimentError>)> = pool.install(|| {
        plan.configs
            .par_iter()
            .map(|cfg| {
                let start = Instant::now();
                log::info!("starting {}", cfg.run_id());
                let res = run_experiment(cfg, train, test);
                on_run(&RunReport {
                    run_id: cfg.run_id(),
                    result: match &res {
                        Ok(m) => Ok(m.last().map_or(0.0, |e| e.overall_accuracy)),
                        Err(e) => Err(e.to_string()),
                    },
                    wall_time: start.elapsed().as_secs_f64(),
                });
                (cfg.run_id(), res)
            })
            .collect()
    });
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut rows = Vec::new();
    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (id, res) in results {
        match res {
            Ok(metrics) => {
                rows.extend(metrics_to_rows(&metrics));
                completed.push(id);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    write_metrics_csv(&metrics_path, &rows)?;

    let failures_path = plan.failures_path();
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(io_err(&failures_path))?;
        }
    } else {
        let mut w = csv::Writer::from_path(&failures_path).map_err(|e| csv_io(&failures_path, e))?;
        w.write_record(["run_id", "error"]).map_err(|e| csv_io(&failures_path, e))?;
        for (id, err) in &failures {
            w.write_record([id, err]).map_err(|e| csv_io(&failures_path, e))?;
        }
        w.flush().map_err(io_err(&failures_path))?;
    }
    Ok(SweepOutcome {
        metrics_path,
        completed,
        failures,
    })
}
