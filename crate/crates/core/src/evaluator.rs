//! Many-episode test protocol: per-episode accuracy, mean and 95% interval, paired
//! mode comparison and plot-data export.

use std::fs::File;
use std::hash::Hasher;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{episode_stream, EmbeddingDataset, Episode};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objectives::{episode_objective, predict, ObjectiveConfig};
use crate::protomodel::{extract_prototype, make_token, ExtractorParams, SupportSlice};

pub const DEFAULT_TEST_EPISODES: u64 = 2000;
pub const DEFAULT_TEST_QUERIES: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: u64,
    pub seed: u64,
    pub bypass_module: bool,
    /// Recorded in the fingerprint; it describes how the evaluated parameters were trained.
    pub use_prototype_loss: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            queries: DEFAULT_TEST_QUERIES,
            episodes: DEFAULT_TEST_EPISODES,
            seed: 0,
            bypass_module: false,
            use_prototype_loss: true,
        }
    }
}

/// Everything that determines an evaluation's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFingerprint {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
    pub bypass_module: bool,
    pub use_prototype_loss: bool,
    pub layers: Option<usize>,
    pub params_hash: Option<u64>,
    pub dataset_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episode_count: u64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub fingerprint: EvalFingerprint,
    /// Digest over the sampled episodes, equal for identical streams.
    pub episode_digest: u64,
    pub wall_time_secs: f64,
}

impl EvalReport {
    /// Equality of every field except wall time.
    pub fn same_results(&self, other: &Self) -> bool {
        self.episode_count == other.episode_count
            && self.mean.to_bits() == other.mean.to_bits()
            && self.ci95.to_bits() == other.ci95.to_bits()
            && self.fingerprint == other.fingerprint
            && self.episode_digest == other.episode_digest
            && self.accuracies.len() == other.accuracies.len()
            && self
                .accuracies
                .iter()
                .zip(&other.accuracies)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn render(&self) -> String {
        let f = &self.fingerprint;
        let mode = if f.bypass_module { "bypass" } else { "module" };
        let layers = f.layers.map_or("-".to_string(), |l| l.to_string());
        format!(
            "{}-way {}-shot, {} queries/class, {} episodes, seed {}\n\
             mode {mode}, layers {layers}, prototype loss {}\n\
             accuracy {:.2}% +/- {:.2}%  ({:.3}s)\n",
            f.way,
            f.shot,
            f.queries,
            self.episode_count,
            f.seed,
            if f.use_prototype_loss { "on" } else { "off" },
            100.0 * self.mean,
            100.0 * self.ci95,
            self.wall_time_secs
        )
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `1.96 · s / √n` with the n−1 sample standard deviation; 0 for fewer than two values
/// or when all values are equal.
pub fn ci95(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 || xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

fn check_params(params: Option<&ExtractorParams<f32>>, ds: &EmbeddingDataset, bypass: bool) -> Result<()> {
    match params {
        Some(p) if !bypass && p.dim() != ds.dim() => Err(Error::Dimension(format!(
            "model dim {} does not match dataset dim {}",
            p.dim(),
            ds.dim()
        ))),
        None if !bypass => Err(Error::Config(
            "evaluation without parameters requires bypass mode".into(),
        )),
        _ => Ok(()),
    }
}

/// Fraction of correctly classified queries.
pub fn episode_accuracy(
    params: Option<&ExtractorParams<f32>>,
    episode: &Episode<f32>,
    bypass_module: bool,
) -> Result<f64> {
    let config = ObjectiveConfig {
        use_prototype_loss: false,
        bypass_module,
    };
    let losses = episode_objective(params, episode, config)?;
    let correct = predict(&losses.logits)
        .iter()
        .zip(&episode.query_labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / episode.query_labels.len() as f64)
}

/// Runs `settings.episodes` episodes in parallel. Results are gathered by episode
/// index, so they do not depend on the thread count.
pub fn evaluate(
    params: Option<&ExtractorParams<f32>>,
    ds: &EmbeddingDataset,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    check_params(params, ds, settings.bypass_module)?;
    let start = Instant::now();
    let stream = episode_stream(
        ds,
        settings.way,
        settings.shot,
        settings.queries,
        settings.seed,
        settings.episodes,
    )?;
    let results: Vec<(f64, u64)> = (0..settings.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = stream.get(i);
            let acc = episode_accuracy(params, &ep, settings.bypass_module)
                .map_err(|e| tag_episode(e, i))?;
            Ok((acc, ep.digest()))
        })
        .collect::<Result<_>>()?;
    let mut digest = FnvHasher::default();
    for &(_, d) in &results {
        digest.write_u64(d);
    }
    let accuracies: Vec<f64> = results.into_iter().map(|(a, _)| a).collect();
    let module_params = params.filter(|_| !settings.bypass_module);
    Ok(EvalReport {
        episode_count: settings.episodes,
        mean: mean(&accuracies),
        ci95: ci95(&accuracies),
        fingerprint: EvalFingerprint {
            way: settings.way,
            shot: settings.shot,
            queries: settings.queries,
            seed: settings.seed,
            bypass_module: settings.bypass_module,
            use_prototype_loss: settings.use_prototype_loss,
            layers: module_params.map(|p| p.config().layers),
            params_hash: module_params.map(ExtractorParams::fingerprint),
            dataset_hash: ds.fingerprint(),
        },
        accuracies,
        episode_digest: digest.finish(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

pub(crate) fn tag_episode(e: Error, index: u64) -> Error {
    match e {
        Error::Numeric { name, message } => Error::Numeric {
            name: format!("episode {index}: {name}"),
            message,
        },
        other => other,
    }
}

/// One row of a paired comparison. `params = None` evaluates the bypass baseline.
#[derive(Debug, Clone, Copy)]
pub struct Mode<'a> {
    pub label: &'a str,
    pub params: Option<&'a ExtractorParams<f32>>,
    pub use_prototype_loss: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub rows: Vec<(String, EvalReport)>,
}

impl Comparison {
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>9}  {:>7}  {:>18}\n", "mode", "accuracy", "ci95", "params");
        for (label, r) in &self.rows {
            let hash = r
                .fingerprint
                .params_hash
                .map_or("-".to_string(), |h| format!("{h:016x}"));
            out.push_str(&format!(
                "{label:<width$}  {:>8.2}%  {:>6.2}%  {hash:>18}\n",
                100.0 * r.mean,
                100.0 * r.ci95
            ));
        }
        out
    }

    /// True when every row was evaluated on the same episode draws.
    pub fn paired(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].1.episode_digest == w[1].1.episode_digest)
    }
}

/// Evaluates each mode on the identical episode stream.
pub fn compare_modes(modes: &[Mode<'_>], ds: &EmbeddingDataset, settings: &EvalSettings) -> Result<Comparison> {
    let rows = modes
        .iter()
        .map(|m| {
            let s = EvalSettings {
                bypass_module: m.params.is_none(),
                use_prototype_loss: m.use_prototype_loss,
                ..*settings
            };
            Ok((m.label.to_string(), evaluate(m.params, ds, &s)?))
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotRole {
    Query,
    MeanPrototype,
    ModulePrototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub episode: u64,
    pub role: PlotRole,
    pub class: String,
    pub vector: Vec<f32>,
}

/// Query embeddings, mean prototypes and module prototypes of the first `task_count`
/// episodes, in episode order.
pub fn plot_records(
    params: &ExtractorParams<f32>,
    ds: &EmbeddingDataset,
    settings: &EvalSettings,
    task_count: u64,
) -> Result<Vec<PlotRecord>> {
    check_params(Some(params), ds, false)?;
    let stream = episode_stream(ds, settings.way, settings.shot, settings.queries, settings.seed, task_count)?;
    let mut records = Vec::new();
    for (i, ep) in stream.enumerate() {
        let episode = i as u64;
        for (row, &label) in ep.query_labels.iter().enumerate() {
            records.push(PlotRecord {
                episode,
                role: PlotRole::Query,
                class: ep.class_names[label].clone(),
                vector: ep.query.row(row).to_vec(),
            });
        }
        for (c, support) in ep.support.iter().enumerate() {
            records.push(PlotRecord {
                episode,
                role: PlotRole::MeanPrototype,
                class: ep.class_names[c].clone(),
                vector: make_token(support)?,
            });
        }
        for (c, support) in ep.support.iter().enumerate() {
            let slice = SupportSlice::new(c, support.clone())?;
            records.push(PlotRecord {
                episode,
                role: PlotRole::ModulePrototype,
                class: ep.class_names[c].clone(),
                vector: extract_prototype(params, &slice)?,
            });
        }
    }
    Ok(records)
}

/// Writes [`plot_records`] as JSON lines. Returns the number of records.
pub fn export_plot_data(
    params: &ExtractorParams<f32>,
    ds: &EmbeddingDataset,
    settings: &EvalSettings,
    task_count: u64,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let records = plot_records(params, ds, settings, task_count)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &records {
        let line = serde_json::to_string(r).expect("plot records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}

/// Per-query predictions under a given prototype matrix; used by tests and tools
/// that bring their own prototypes.
pub fn nearest_prototype(prototypes: &Tensor<f32>, queries: &Tensor<f32>) -> Vec<usize> {
    queries
        .data()
        .chunks(queries.cols())
        .map(|q| {
            let mut best = (0, f32::INFINITY);
            for c in 0..prototypes.rows() {
                let d: f32 = q.iter().zip(prototypes.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}
