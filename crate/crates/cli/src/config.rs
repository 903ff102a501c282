//! Run configuration: a flat JSON object whose keys are field names, overridden by flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use protoshot::trainer::TrainConfig;
use protoshot::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Settings that are not part of training itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Training output directory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Report file written by eval and compare.
    pub report: Option<PathBuf>,
    /// JSON-lines file written by export-plot.
    pub plot: Option<PathBuf>,
    /// Test episodes for eval and compare.
    pub episodes: u64,
    pub plot_episodes: u64,
    pub bypass_module: bool,
    pub threads: Option<usize>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            checkpoint: None,
            checkpoint_dir: None,
            report: None,
            plot: None,
            episodes: protoshot::evaluator::DEFAULT_TEST_EPISODES,
            plot_episodes: 8,
            bypass_module: false,
            threads: None,
        }
    }
}

/// The effective configuration of a command, echoed into its outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub run: RunSettings,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file with flat keys; flags take precedence.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Classes per episode.
    #[arg(long = "n", value_name = "N")]
    pub way: Option<usize>,
    /// Support samples per class.
    #[arg(long = "k", value_name = "K")]
    pub shot: Option<usize>,
    /// Query samples per class.
    #[arg(long = "q", value_name = "Q")]
    pub queries: Option<usize>,
    #[arg(long)]
    pub episodes: Option<u64>,
    /// Use support means as prototypes.
    #[arg(long)]
    pub bypass_module: bool,
    /// Train with the classification loss only.
    #[arg(long)]
    pub no_prototype_loss: bool,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub layers: Option<u64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub val: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub test: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tasks_per_epoch: Option<usize>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

/// Which setting `--out` overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutKey {
    CheckpointDir,
    Report,
    Plot,
}

fn train_keys() -> BTreeSet<String> {
    match serde_json::to_value(TrainConfig::default()).expect("config serializes") {
        Value::Object(m) => m.into_iter().map(|(k, _)| k).collect(),
        _ => unreachable!("struct serializes to an object"),
    }
}

/// Parses a flat JSON object, routing each key to the training or run settings.
pub fn parse_config(text: &str, origin: &str) -> Result<(TrainConfig, RunSettings)> {
    let bad = |e: serde_json::Error| Error::Config(format!("{origin}: {e}"));
    let map: Map<String, Value> = match serde_json::from_str(text).map_err(bad)? {
        Value::Object(m) => m,
        _ => return Err(Error::Config(format!("{origin}: expected a JSON object"))),
    };
    let keys = train_keys();
    let (train, run): (Map<String, Value>, Map<String, Value>) =
        map.into_iter().partition(|(k, _)| keys.contains(k));
    Ok((
        serde_json::from_value(Value::Object(train)).map_err(bad)?,
        serde_json::from_value(Value::Object(run)).map_err(bad)?,
    ))
}

fn resolve(base: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_relative() { base.join(p) } else { p })
}

impl ConfigArgs {
    /// File values (paths relative to the file's directory), then flag overrides.
    /// `--out` sets the output path of the running command.
    pub fn load(&self, out: OutKey) -> Result<RunConfig> {
        let (mut train, mut run) = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                let (t, mut r) = parse_config(&text, &path.display().to_string())?;
                let base = path.parent().unwrap_or(Path::new("."));
                r.train = resolve(base, r.train);
                r.val = resolve(base, r.val);
                r.test = resolve(base, r.test);
                r.checkpoint = resolve(base, r.checkpoint);
                r.checkpoint_dir = resolve(base, r.checkpoint_dir);
                r.report = resolve(base, r.report);
                r.plot = resolve(base, r.plot);
                (t, r)
            }
            None => (TrainConfig::default(), RunSettings::default()),
        };
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(train.seed, self.seed);
        set!(train.way, self.way);
        set!(train.shot, self.shot);
        set!(train.queries, self.queries);
        set!(train.heads, self.heads);
        set!(train.epochs, self.epochs);
        set!(train.tasks_per_epoch, self.tasks_per_epoch);
        set!(train.accumulation, self.accumulation);
        set!(train.lr, self.lr);
        if let Some(l) = self.layers {
            train.layers = l as usize;
        }
        if self.no_prototype_loss {
            train.use_prototype_loss = false;
        }
        if self.bypass_module {
            run.bypass_module = true;
        }
        set!(run.episodes, self.episodes);
        if self.threads.is_some() {
            run.threads = self.threads;
        }
        let out_slot = match out {
            OutKey::CheckpointDir => &mut run.checkpoint_dir,
            OutKey::Report => &mut run.report,
            OutKey::Plot => &mut run.plot,
        };
        if self.out.is_some() {
            *out_slot = self.out.clone();
        }
        for (dst, src) in [
            (&mut run.train, &self.train),
            (&mut run.val, &self.val),
            (&mut run.test, &self.test),
            (&mut run.checkpoint, &self.checkpoint),
        ] {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        Ok(RunConfig { train, run })
    }
}

impl RunConfig {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub fn require<'a>(p: &'a Option<PathBuf>, flag: &str, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {key} path given (flag --{flag} or config key \"{key}\")")))
}
