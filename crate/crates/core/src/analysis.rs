//! Seed-averaged accuracy curves, delay-to-target, and layer-versus-model correlations
//! computed from metric rows, plus tidy CSV and SVG export.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{format_value, Metric, MetricRow};

/// Coefficients above this magnitude count as strong.
pub const STRONG_CORRELATION: f64 = 0.7;
pub const DEFAULT_TARGET: f64 = 0.7;

pub const CURVES_FILE: &str = "accuracy_curves.csv";
pub const DELAY_FILE: &str = "delay.csv";
pub const RUN_DELAY_FILE: &str = "delay_per_run.csv";
pub const CORRELATION_FILE: &str = "correlation.csv";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no rows to analyze")]
    Empty,
    #[error("{key} layer {layer_index}: run {run_id} covers epochs {found:?}, expected {expected:?}")]
    InconsistentEpochs {
        key: ConfigKey,
        layer_index: usize,
        run_id: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{key} layer {layer_index}: epochs {epochs:?} do not run contiguously from 1")]
    NonContiguousEpochs {
        key: ConfigKey,
        layer_index: usize,
        epochs: Vec<usize>,
    },
    #[error("run {run_id} epoch {epoch} layer {layer_index}: duplicate {metric} row")]
    DuplicateRow {
        run_id: String,
        epoch: usize,
        layer_index: usize,
        metric: &'static str,
    },
    #[error("run {run_id} epoch {epoch}: no overall_accuracy row")]
    MissingOverall { run_id: String, epoch: usize },
    #[error("target {0} outside (0, 1)")]
    TargetOutOfRange(f64),
    #[error("accuracy curve is empty")]
    EmptyCurve,
    #[error("correlation needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("correlation is undefined: {0} series is constant")]
    ConstantSeries(&'static str),
    #[error("correlation input contains a non-finite value")]
    NonFinite,
    #[error("no rows for config {0}")]
    UnknownConfig(ConfigKey),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture shared by all seeds of one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConfigKey {
    pub num_layers: usize,
    pub hidden_dim: usize,
}

impl ConfigKey {
    fn of(row: &MetricRow) -> Self {
        ConfigKey {
            num_layers: row.num_layers,
            hidden_dim: row.hidden_dim,
        }
    }
}

impl fmt::Display for ConfigKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{:02}-h{:04}", self.num_layers, self.hidden_dim)
    }
}

/// Mean and sample standard deviation over runs, per epoch. Layer 0 is the overall model.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyCurve {
    pub key: ConfigKey,
    pub layer_index: usize,
    /// Entry `i` belongs to epoch `i + 1`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_runs: usize,
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

type Cells = BTreeMap<(ConfigKey, usize), BTreeMap<String, BTreeMap<usize, f64>>>;

/// Groups accuracy rows as (config, layer) → run → epoch → value.
fn accuracy_cells(rows: &[MetricRow]) -> Result<Cells, AnalysisError> {
    let mut cells: Cells = BTreeMap::new();
    for r in rows {
        if r.metric == Metric::LayerLoss {
            continue;
        }
        let per_run = cells
            .entry((ConfigKey::of(r), r.layer_index))
            .or_default()
            .entry(r.run_id.clone())
            .or_default();
        if per_run.insert(r.epoch, r.value).is_some() {
            return Err(AnalysisError::DuplicateRow {
                run_id: r.run_id.clone(),
                epoch: r.epoch,
                layer_index: r.layer_index,
                metric: r.metric.as_str(),
            });
        }
    }
    Ok(cells)
}

/// Per (config, layer, epoch): mean and n−1 standard deviation over runs.
///
/// Every run of a group must cover the same epochs, contiguous from 1.
pub fn aggregate_curves(rows: &[MetricRow]) -> Result<Vec<AccuracyCurve>, AnalysisError> {
    let cells = accuracy_cells(rows)?;
    if cells.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut curves = Vec::with_capacity(cells.len());
    for ((key, layer_index), runs) in cells {
        let mut iter = runs.iter();
        let (_, first) = iter.next().expect("group has a run");
        let expected: Vec<usize> = first.keys().copied().collect();
        for (run_id, epochs) in iter {
            if epochs.keys().ne(expected.iter()) {
                return Err(AnalysisError::InconsistentEpochs {
                    key,
                    layer_index,
                    run_id: run_id.clone(),
                    expected,
                    found: epochs.keys().copied().collect(),
                });
            }
        }
        if expected.iter().enumerate().any(|(i, &e)| e != i + 1) {
            return Err(AnalysisError::NonContiguousEpochs {
                key,
                layer_index,
                epochs: expected,
            });
        }
        let mut mean = Vec::with_capacity(expected.len());
        let mut std = Vec::with_capacity(expected.len());
        for e in &expected {
            let vals: Vec<f64> = runs.values().map(|m| m[e]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            mean.push(m);
            std.push(sample_std(&vals, m));
        }
        curves.push(AccuracyCurve {
            key,
            layer_index,
            mean,
            std,
            n_runs: runs.len(),
        });
    }
    Ok(curves)
}

/// First epoch at which a target accuracy is met.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Delay {
    Reached(usize),
    NotReached,
}

impl Delay {
    pub fn epoch(self) -> Option<usize> {
        match self {
            Delay::Reached(e) => Some(e),
            Delay::NotReached => None,
        }
    }
}

impl fmt::Display for Delay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delay::Reached(e) => write!(f, "{e}"),
            Delay::NotReached => f.write_str("NA"),
        }
    }
}

fn check_target(target: f64) -> Result<(), AnalysisError> {
    if target > 0.0 && target < 1.0 {
        Ok(())
    } else {
        Err(AnalysisError::TargetOutOfRange(target))
    }
}

/// Smallest 1-based epoch whose accuracy is at least `target`.
pub fn compute_delay(curve: &[f64], target: f64) -> Result<Delay, AnalysisError> {
    check_target(target)?;
    if curve.is_empty() {
        return Err(AnalysisError::EmptyCurve);
    }
    Ok(curve
        .iter()
        .position(|&a| a >= target)
        .map_or(Delay::NotReached, |i| Delay::Reached(i + 1)))
}

/// Delay of every layer of one configuration; `delays[i]` is layer `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayCurve {
    pub key: ConfigKey,
    pub target: f64,
    pub delays: Vec<Delay>,
}

/// Delays read off the seed-averaged layer curves.
pub fn delay_curves(curves: &[AccuracyCurve], target: f64) -> Result<Vec<DelayCurve>, AnalysisError> {
    check_target(target)?;
    let mut by_key: BTreeMap<ConfigKey, Vec<(usize, Delay)>> = BTreeMap::new();
    for c in curves.iter().filter(|c| c.layer_index > 0) {
        by_key
            .entry(c.key)
            .or_default()
            .push((c.layer_index, compute_delay(&c.mean, target)?));
    }
    Ok(by_key
        .into_iter()
        .map(|(key, mut d)| {
            d.sort();
            DelayCurve {
                key,
                target,
                delays: d.into_iter().map(|(_, x)| x).collect(),
            }
        })
        .collect())
}

/// Delays of one individual run, for checking spread across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct RunDelay {
    pub key: ConfigKey,
    pub run_id: String,
    pub target: f64,
    pub delays: Vec<Delay>,
}

pub fn per_run_delays(rows: &[MetricRow], target: f64) -> Result<Vec<RunDelay>, AnalysisError> {
    check_target(target)?;
    let cells = accuracy_cells(rows)?;
    if cells.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut by_run: BTreeMap<(ConfigKey, String), Vec<(usize, Delay)>> = BTreeMap::new();
    for ((key, layer_index), runs) in cells.iter().filter(|((_, l), _)| *l > 0) {
        for (run_id, epochs) in runs {
            let curve: Vec<f64> = epochs.values().copied().collect();
            by_run
                .entry((*key, run_id.clone()))
                .or_default()
                .push((*layer_index, compute_delay(&curve, target)?));
        }
    }
    Ok(by_run
        .into_iter()
        .map(|((key, run_id), mut d)| {
            d.sort();
            RunDelay {
                key,
                run_id,
                target,
                delays: d.into_iter().map(|(_, x)| x).collect(),
            }
        })
        .collect())
}

fn check_pairs(pairs: &[(f64, f64)]) -> Result<(), AnalysisError> {
    if pairs.len() < 2 {
        return Err(AnalysisError::TooFewPairs(pairs.len()));
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok(())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    check_pairs(pairs)?;
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::ConstantSeries("x"));
    }
    if syy == 0.0 {
        return Err(AnalysisError::ConstantSeries("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i..j hold ranks i+1..=j.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(pairs: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    check_pairs(pairs)?;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ranked: Vec<(f64, f64)> = average_ranks(&xs)
        .into_iter()
        .zip(average_ranks(&ys))
        .collect();
    pearson(&ranked)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationResult {
    pub key: ConfigKey,
    pub layer_index: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub n_pairs: usize,
}

impl CorrelationResult {
    pub fn strong_pearson(&self) -> bool {
        self.pearson.abs() > STRONG_CORRELATION
    }

    pub fn strong_spearman(&self) -> bool {
        self.spearman.abs() > STRONG_CORRELATION
    }
}

/// Correlation of each layer's accuracy with overall accuracy over all (run, epoch) cells of `key`.
pub fn layer_model_correlation(
    rows: &[MetricRow],
    key: ConfigKey,
) -> Result<Vec<CorrelationResult>, AnalysisError> {
    let cells = accuracy_cells(rows)?;
    let overall = cells
        .get(&(key, 0))
        .ok_or(AnalysisError::UnknownConfig(key))?;
    let mut out = Vec::new();
    for ((_, layer_index), runs) in cells.range((key, 1)..=(key, usize::MAX)) {
        let mut pairs = Vec::new();
        for (run_id, epochs) in runs {
            for (&epoch, &acc) in epochs {
                let total = overall
                    .get(run_id)
                    .and_then(|o| o.get(&epoch))
                    .ok_or_else(|| AnalysisError::MissingOverall {
                        run_id: run_id.clone(),
                        epoch,
                    })?;
                pairs.push((acc, *total));
            }
        }
        out.push(CorrelationResult {
            key,
            layer_index: *layer_index,
            pearson: pearson(&pairs)?,
            spearman: spearman(&pairs)?,
            n_pairs: pairs.len(),
        });
    }
    Ok(out)
}

/// Every configuration present in `rows`, sorted.
pub fn config_keys(rows: &[MetricRow]) -> Vec<ConfigKey> {
    let mut keys: Vec<ConfigKey> = rows.iter().map(ConfigKey::of).collect();
    keys.sort();
    keys.dedup();
    keys
}

pub fn all_correlations(rows: &[MetricRow]) -> Result<Vec<CorrelationResult>, AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut out = Vec::new();
    for key in config_keys(rows) {
        out.extend(layer_model_correlation(rows, key)?);
    }
    Ok(out)
}

/// What to export; empty families are skipped, but at least one must be present.
#[derive(Clone, Debug, Default)]
pub struct PlotData<'a> {
    pub curves: &'a [AccuracyCurve],
    pub delays: &'a [DelayCurve],
    pub run_delays: &'a [RunDelay],
    pub correlations: &'a [CorrelationResult],
}

impl PlotData<'_> {
    fn is_empty(&self) -> bool {
        self.curves.is_empty()
            && self.delays.is_empty()
            && self.run_delays.is_empty()
            && self.correlations.is_empty()
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), AnalysisError> {
    fs::write(path, text).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn curves_csv(curves: &[AccuracyCurve]) -> String {
    let mut s = String::from("config,num_layers,hidden_dim,layer_index,epoch,mean,std,n_runs\n");
    for c in curves {
        for (i, (m, sd)) in c.mean.iter().zip(&c.std).enumerate() {
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                c.key,
                c.key.num_layers,
                c.key.hidden_dim,
                c.layer_index,
                i + 1,
                format_value(*m),
                format_value(*sd),
                c.n_runs
            );
        }
    }
    s
}

fn delays_csv(delays: &[DelayCurve]) -> String {
    let mut s = String::from("config,layer_index,target,delay_epoch\n");
    for d in delays {
        for (i, delay) in d.delays.iter().enumerate() {
            s += &format!("{},{},{},{}\n", d.key, i + 1, d.target, delay);
        }
    }
    s
}

fn run_delays_csv(delays: &[RunDelay]) -> String {
    let mut s = String::from("config,run_id,layer_index,target,delay_epoch\n");
    for d in delays {
        for (i, delay) in d.delays.iter().enumerate() {
            s += &format!("{},{},{},{},{}\n", d.key, d.run_id, i + 1, d.target, delay);
        }
    }
    s
}

fn correlations_csv(results: &[CorrelationResult]) -> String {
    let mut s = String::from(
        "config,layer_index,n_pairs,pearson,spearman,strong_pearson,strong_spearman\n",
    );
    for r in results {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            r.key,
            r.layer_index,
            r.n_pairs,
            format_value(r.pearson),
            format_value(r.spearman),
            r.strong_pearson(),
            r.strong_spearman()
        );
    }
    s
}

/// Writes one tidy CSV per figure family and, if `svg` is set, line charts beside them.
///
/// Returns the written paths in a fixed order. Nothing is written for empty input.
pub fn export_plot_data(
    data: &PlotData<'_>,
    out_dir: &Path,
    svg: bool,
) -> Result<Vec<PathBuf>, AnalysisError> {
    if data.is_empty() {
        return Err(AnalysisError::Empty);
    }
    fs::create_dir_all(out_dir).map_err(|source| AnalysisError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    if !data.curves.is_empty() {
        files.push((out_dir.join(CURVES_FILE), curves_csv(data.curves)));
        if svg {
            let mut keys: Vec<ConfigKey> = data.curves.iter().map(|c| c.key).collect();
            keys.dedup();
            for key in keys {
                let chart = plot::accuracy_chart(key, data.curves);
                files.push((out_dir.join(format!("accuracy_curves_{key}.svg")), chart));
            }
        }
    }
    if !data.delays.is_empty() {
        files.push((out_dir.join(DELAY_FILE), delays_csv(data.delays)));
        if svg {
            files.push((out_dir.join("delay.svg"), plot::delay_chart(data.delays)));
        }
    }
    if !data.run_delays.is_empty() {
        files.push((out_dir.join(RUN_DELAY_FILE), run_delays_csv(data.run_delays)));
    }
    if !data.correlations.is_empty() {
        files.push((out_dir.join(CORRELATION_FILE), correlations_csv(data.correlations)));
        if svg {
            for (name, pick) in [
                ("pearson", (|r: &CorrelationResult| r.pearson) as fn(&CorrelationResult) -> f64),
                ("spearman", |r: &CorrelationResult| r.spearman),
            ] {
                let chart = plot::correlation_chart(name, data.correlations, pick);
                files.push((out_dir.join(format!("correlation_{name}.svg")), chart));
            }
        }
    }
    let mut written = Vec::with_capacity(files.len());
    for (path, text) in files {
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Minimal SVG line charts.
mod plot {
    use std::fmt::Write;

    use super::{AccuracyCurve, ConfigKey, CorrelationResult, DelayCurve};

    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 150.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    const PALETTE: [&str; 8] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
    ];

    pub struct Series {
        pub name: String,
        pub points: Vec<(f64, f64)>,
        /// Symmetric half-width of a shaded band around each point.
        pub band: Option<Vec<f64>>,
        pub dashed: bool,
    }

    struct Frame {
        x: (f64, f64),
        y: (f64, f64),
    }

    impl Frame {
        fn px(&self, x: f64) -> f64 {
            let span = (self.x.1 - self.x.0).max(1e-12);
            LEFT + (x - self.x.0) / span * (W - LEFT - RIGHT)
        }

        fn py(&self, y: f64) -> f64 {
            let span = (self.y.1 - self.y.0).max(1e-12);
            H - BOTTOM - (y - self.y.0) / span * (H - TOP - BOTTOM)
        }
    }

    fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
    }

    fn fmt_tick(v: f64) -> String {
        if (v - v.round()).abs() < 1e-9 {
            format!("{}", v.round() as i64)
        } else {
            format!("{v:.2}")
        }
    }

    pub fn chart(title: &str, x_label: &str, y_label: &str, y: (f64, f64), series: &[Series]) -> String {
        let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let x_lo = xs.clone().fold(f64::INFINITY, f64::min);
        let x_hi = xs.fold(f64::NEG_INFINITY, f64::max);
        let (x_lo, x_hi) = if x_lo.is_finite() {
            (x_lo, x_hi.max(x_lo + 1.0))
        } else {
            (0.0, 1.0)
        };
        let f = Frame { x: (x_lo, x_hi), y };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (W - RIGHT + LEFT) / 2.0,
            title
        );
        for t in ticks(f.y.0, f.y.1, 5) {
            let yy = f.py(t);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                W - RIGHT,
                LEFT - 6.0,
                yy + 4.0,
                fmt_tick(t)
            );
        }
        let n_x = ((x_hi - x_lo).round() as usize).clamp(1, 10);
        for t in ticks(x_lo, x_hi, n_x) {
            let xx = f.px(t);
            let _ = writeln!(
                s,
                r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                H - BOTTOM + 16.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            W - LEFT - RIGHT,
            H - TOP - BOTTOM
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x_label}</text>"#,
            (W - RIGHT + LEFT) / 2.0,
            H - 12.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{y_label}</text>"#,
            (H - BOTTOM + TOP) / 2.0,
            (H - BOTTOM + TOP) / 2.0
        );
        for (i, ser) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            if let Some(band) = &ser.band {
                let upper = ser.points.iter().zip(band).map(|(p, b)| (p.0, p.1 + b));
                let lower = ser.points.iter().zip(band).rev().map(|(p, b)| (p.0, p.1 - b));
                let pts: Vec<String> = upper
                    .chain(lower)
                    .map(|(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y.clamp(f.y.0, f.y.1))))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                    pts.join(" ")
                );
            }
            let pts: Vec<String> = ser
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
                .collect();
            let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"{dash}/>"#,
                pts.join(" ")
            );
            for &(x, y) in &ser.points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{color}"/>"#,
                    f.px(x),
                    f.py(y)
                );
            }
            let ly = TOP + 14.0 + 18.0 * i as f64;
            let lx = W - RIGHT + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                ser.name
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn accuracy_chart(key: ConfigKey, curves: &[AccuracyCurve]) -> String {
        let mut series: Vec<Series> = curves
            .iter()
            .filter(|c| c.key == key)
            .map(|c| Series {
                name: if c.layer_index == 0 {
                    "overall".to_string()
                } else {
                    format!("layer {}", c.layer_index)
                },
                points: c
                    .mean
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| ((i + 1) as f64, m))
                    .collect(),
                band: Some(c.std.clone()),
                dashed: c.layer_index == 0,
            })
            .collect();
        // Layers first, overall last.
        let shift = 1.min(series.len());
        series.rotate_left(shift);
        let n = curves.iter().find(|c| c.key == key).map_or(0, |c| c.n_runs);
        chart(
            &format!("Accuracy, {key} (mean ± 1 sd over {n} runs)"),
            "epoch",
            "accuracy",
            (0.0, 1.0),
            &series,
        )
    }

    pub fn delay_chart(delays: &[DelayCurve]) -> String {
        let series: Vec<Series> = delays
            .iter()
            .map(|d| Series {
                name: d.key.to_string(),
                points: d
                    .delays
                    .iter()
                    .enumerate()
                    .filter_map(|(i, x)| x.epoch().map(|e| ((i + 1) as f64, e as f64)))
                    .collect(),
                band: None,
                dashed: false,
            })
            .collect();
        let y_hi = series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .fold(1.0, f64::max)
            .ceil();
        let target = delays.first().map_or(0.0, |d| d.target);
        chart(
            &format!("Epoch reaching target accuracy {target}"),
            "layer depth",
            "epoch",
            (0.0, y_hi),
            &series,
        )
    }

    pub fn correlation_chart(
        name: &str,
        results: &[CorrelationResult],
        pick: fn(&CorrelationResult) -> f64,
    ) -> String {
        let mut keys: Vec<ConfigKey> = results.iter().map(|r| r.key).collect();
        keys.dedup();
        let series: Vec<Series> = keys
            .iter()
            .map(|&k| Series {
                name: k.to_string(),
                points: results
                    .iter()
                    .filter(|r| r.key == k)
                    .map(|r| (r.layer_index as f64, pick(r)))
                    .collect(),
                band: None,
                dashed: false,
            })
            .collect();
        chart(
            &format!("{name} correlation of layer and overall accuracy"),
            "layer depth",
            "coefficient",
            (-1.0, 1.0),
            &series,
        )
    }
}
