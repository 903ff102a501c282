use std::fs;
use std::path::{Path, PathBuf};

use protoshot::episodes::{inspect_pfe1, load_pfe1, save_pfe1, EmbeddingDataset};
use protoshot::evaluator::{compare_modes, evaluate, export_plot_data, EvalSettings, Mode};
use protoshot::numerics::GradFault;
use protoshot::protomodel::ExtractorParams;
use protoshot::synthetic::{gaussian_dataset, GaussianSpec};
use protoshot::trainer::{load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use protoshot::verify::{extractor_gradcheck, GradcheckSetup};
use protoshot::{Error, Result};
use serde_json::{json, Value};

use crate::config::{require, RunConfig};

/// Stdout writes that tolerate a closed pipe (`protoshot eval | head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// A command's outcome when it ran to completion: success, or a check that failed.
pub enum Outcome {
    Ok,
    CheckFailed,
}

pub const LAST_CHECKPOINT: &str = "last.pfck";
pub const BEST_CHECKPOINT: &str = "best.pfck";
pub const HISTORY_FILE: &str = "history.json";

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let ds = load_pfe1(path)?;
    log::info!(
        "{}: {} classes, dim {}",
        path.display(),
        ds.class_count(),
        ds.dim()
    );
    Ok(ds)
}

pub fn train(config: &RunConfig, resume: bool) -> Result<Outcome> {
    config.train.validate()?;
    let out = require(&config.run.checkpoint_dir, "out", "checkpoint_dir")?.to_path_buf();
    let train_path = require(&config.run.train, "train", "train")?;
    let train = load_dataset(train_path)?;
    let val = match &config.run.val {
        Some(p) => load_dataset(p)?,
        None => {
            log::warn!("no validation set given; validating on the training set");
            train.clone()
        }
    };
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let last_path = out.join(LAST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);

    let trainer = if resume {
        let mut last = load_checkpoint(&last_path)?;
        let mut best = if best_path.exists() {
            Some(load_checkpoint(&best_path)?)
        } else {
            None
        };
        // The epoch budget may be extended; everything else comes from the checkpoint.
        for c in std::iter::once(&mut last).chain(best.as_mut()) {
            c.config.epochs = config.train.epochs;
        }
        if last.config != config.train {
            log::warn!("resuming with the configuration stored in {}", last_path.display());
        }
        log::info!("resuming after epoch {}", last.epochs_completed);
        Trainer::resume(&train, &val, last, best)?
    } else {
        Trainer::new(&train, &val, config.train.clone())?
    };
    let mut effective = config.clone();
    effective.train = trainer.config().clone();
    log::info!("effective config: {}", effective.to_json());

    let every = effective.train.checkpoint_every;
    let outcome = trainer.run(|t| {
        let epoch = t.epochs_completed();
        if every > 0 && epoch % every == 0 {
            save_checkpoint(t.checkpoint(), &last_path)?;
            if t.best().is_some_and(|b| b.epoch == epoch) {
                save_checkpoint(t.checkpoint(), &best_path)?;
            }
        }
        Ok(())
    })?;
    save_checkpoint(&outcome.last, &last_path)?;
    save_checkpoint(&outcome.best_checkpoint(), &best_path)?;
    let last = &outcome.last;
    write_json(
        &out.join(HISTORY_FILE),
        &json!({
            "config": effective.to_json(),
            "epochs_completed": last.epochs_completed,
            "optimizer_steps": last.adam.t,
            "best_epoch": outcome.best.epoch,
            "best_val_accuracy": outcome.best.val_accuracy,
            "params_hash": format!("{:016x}", outcome.best.params.fingerprint()),
            "history": last.history,
        }),
    )?;
    outln!("epoch  loss      classifier  prototype  val");
    for r in &last.history {
        outln!(
            "{:>5}  {:<8.5}  {:<10.5}  {:<9.5}  {}",
            r.epoch,
            r.mean_loss,
            r.mean_classifier_loss,
            r.mean_prototype_loss,
            r.val_accuracy.map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a))
        );
    }
    outln!("best epoch {} -> {}", outcome.best.epoch, best_path.display());
    Ok(Outcome::Ok)
}

fn load_params(path: &Path, ds: &EmbeddingDataset) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.dim() != ds.dim() {
        return Err(Error::Dimension(format!(
            "checkpoint {} has dim {}, dataset has dim {}",
            path.display(),
            ckpt.params.dim(),
            ds.dim()
        )));
    }
    Ok(ckpt)
}

fn eval_settings(config: &RunConfig, bypass_module: bool, use_prototype_loss: bool) -> EvalSettings {
    EvalSettings {
        way: config.train.way,
        shot: config.train.shot,
        queries: config.train.queries,
        episodes: config.run.episodes,
        seed: config.train.seed,
        bypass_module,
        use_prototype_loss,
    }
}

pub fn eval(config: &RunConfig) -> Result<Outcome> {
    let test = load_dataset(require(&config.run.test, "test", "test")?)?;
    let bypass = config.run.bypass_module;
    let checkpoint = match (&config.run.checkpoint, bypass) {
        (Some(p), false) => Some(load_params(p, &test)?),
        (None, false) => {
            return Err(Error::Config(
                "a checkpoint is required unless --bypass-module is set".into(),
            ))
        }
        (_, true) => None,
    };
    let use_loss = checkpoint
        .as_ref()
        .map_or(config.train.use_prototype_loss, |c| c.config.use_prototype_loss);
    let settings = eval_settings(config, bypass, use_loss);
    let report = evaluate(checkpoint.as_ref().map(|c| &c.params), &test, &settings)?;
    let doc = json!({ "config": config.to_json(), "report": report });
    out!("{}", report.render());
    outln!("{}", serde_json::to_string(&doc).expect("json serializes"));
    if let Some(out) = &config.run.report {
        write_json(out, &doc)?;
    }
    Ok(Outcome::Ok)
}

pub fn compare(config: &RunConfig, checkpoints: &[PathBuf]) -> Result<Outcome> {
    let test = load_dataset(require(&config.run.test, "test", "test")?)?;
    let mut paths: Vec<PathBuf> = checkpoints.to_vec();
    if paths.is_empty() {
        paths.extend(config.run.checkpoint.clone());
    }
    let loaded: Vec<(String, Checkpoint)> = paths
        .iter()
        .map(|p| {
            let c = load_params(p, &test)?;
            Ok((p.display().to_string(), c))
        })
        .collect::<Result<_>>()?;
    let mut modes = vec![Mode {
        label: "bypass",
        params: None,
        use_prototype_loss: false,
    }];
    for (label, c) in &loaded {
        modes.push(Mode {
            label,
            params: Some(&c.params),
            use_prototype_loss: c.config.use_prototype_loss,
        });
    }
    let settings = eval_settings(config, false, config.train.use_prototype_loss);
    let table = compare_modes(&modes, &test, &settings)?;
    out!("{}", table.render());
    let doc = json!({ "config": config.to_json(), "paired": table.paired(), "rows": table.rows });
    if let Some(out) = &config.run.report {
        write_json(out, &doc)?;
    }
    Ok(Outcome::Ok)
}

pub fn export_plot(config: &RunConfig) -> Result<Outcome> {
    let test = load_dataset(require(&config.run.test, "test", "test")?)?;
    let ckpt = load_params(require(&config.run.checkpoint, "checkpoint", "checkpoint")?, &test)?;
    let out = require(&config.run.plot, "out", "plot")?;
    let settings = eval_settings(config, false, ckpt.config.use_prototype_loss);
    let params: &ExtractorParams<f32> = &ckpt.params;
    let n = export_plot_data(params, &test, &settings, config.run.plot_episodes, out)?;
    outln!("{n} records -> {}", out.display());
    Ok(Outcome::Ok)
}

pub fn gradcheck(setup: &GradcheckSetup, out: Option<&Path>) -> Result<Outcome> {
    let report = extractor_gradcheck(setup)?;
    out!("{}", report.render());
    if let Some(out) = out {
        write_json(out, &json!({ "setup": setup, "report": report }))?;
    }
    Ok(if report.passed {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    })
}

pub fn parse_fault(name: &str) -> std::result::Result<GradFault, String> {
    match name {
        "matmul" => Ok(GradFault::MatmulLhs),
        "layernorm" => Ok(GradFault::LayerNormInput),
        other => Err(format!("unknown fault {other:?}")),
    }
}

pub fn inspect(path: &Path) -> Result<Outcome> {
    let summary = inspect_pfe1(path)?;
    out!("{}", summary.render());
    if !summary.hash_valid() {
        return Err(Error::Data(format!(
            "{}: stored hash {:016x} does not match computed {:016x}",
            path.display(),
            summary.stored_hash,
            summary.computed_hash
        )));
    }
    if summary.non_finite_values > 0 {
        return Err(Error::Data(format!(
            "{}: {} non-finite values",
            path.display(),
            summary.non_finite_values
        )));
    }
    Ok(Outcome::Ok)
}

pub fn synth(spec: &GaussianSpec, out: &Path) -> Result<Outcome> {
    let ds = gaussian_dataset(spec)?;
    save_pfe1(&ds, out)?;
    outln!(
        "{} classes x {} samples, dim {} -> {}",
        spec.classes,
        spec.per_class,
        spec.dim,
        out.display()
    );
    Ok(Outcome::Ok)
}
