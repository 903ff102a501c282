use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, Checkpoint, TrainConfig};
use crate::episodes::{episode_stream, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, tag_episode};
use crate::objectives::episode_gradients;
use crate::protomodel::{init_params, ExtractorParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_classifier_loss: f64,
    pub mean_prototype_loss: f64,
    /// Mean total loss of the episodes behind each optimizer step.
    pub step_losses: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub val_ci95: Option<f64>,
}

/// The model state at the epoch with the highest validation accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
    pub params: ExtractorParams<f32>,
    pub adam: AdamState<ExtractorParams<f32>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: BestSnapshot,
    pub last: Checkpoint,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> Checkpoint {
        self.last.with_snapshot(&self.best)
    }
}

/// Epoch-at-a-time training, resumable from a [`Checkpoint`].
pub struct Trainer<'a> {
    train: &'a EmbeddingDataset,
    val: &'a EmbeddingDataset,
    state: Checkpoint,
    best: Option<BestSnapshot>,
}

fn check_datasets(train: &EmbeddingDataset, val: &EmbeddingDataset) -> Result<()> {
    if train.dim() != val.dim() {
        return Err(Error::Config(format!(
            "training dim {} differs from validation dim {}",
            train.dim(),
            val.dim()
        )));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(train: &'a EmbeddingDataset, val: &'a EmbeddingDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_datasets(train, val)?;
        let params = init_params::<f32>(config.extractor(train.dim())?, config.seed);
        let adam = AdamState::new(&params);
        Ok(Self {
            train,
            val,
            state: Checkpoint {
                config,
                epochs_completed: 0,
                history: Vec::new(),
                best_epoch: None,
                best_val_accuracy: None,
                params,
                adam,
            },
            best: None,
        })
    }

    /// Continues from `last`. `best` must be the checkpoint of the best epoch when that
    /// epoch is earlier than the last one.
    pub fn resume(
        train: &'a EmbeddingDataset,
        val: &'a EmbeddingDataset,
        last: Checkpoint,
        best: Option<Checkpoint>,
    ) -> Result<Self> {
        last.config.validate()?;
        check_datasets(train, val)?;
        if last.params.dim() != train.dim() {
            return Err(Error::Config(format!(
                "checkpoint dim {} differs from dataset dim {}",
                last.params.dim(),
                train.dim()
            )));
        }
        let best = match last.best_epoch {
            None => None,
            Some(e) if e == last.epochs_completed => Some(last.snapshot()),
            Some(e) => {
                let b = best.ok_or_else(|| {
                    Error::Config(format!("resuming needs the checkpoint of best epoch {e}"))
                })?;
                if b.epochs_completed != e || b.config != last.config {
                    return Err(Error::Config(format!(
                        "best checkpoint is from epoch {} of another run, expected epoch {e}",
                        b.epochs_completed
                    )));
                }
                Some(b.snapshot())
            }
        };
        Ok(Self {
            train,
            val,
            state: last,
            best,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn params(&self) -> &ExtractorParams<f32> {
        &self.state.params
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn epochs_completed(&self) -> usize {
        self.state.epochs_completed
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.state.adam.t
    }

    pub fn is_finished(&self) -> bool {
        self.state.epochs_completed >= self.state.config.epochs
    }

    /// The resumable state after the last completed epoch.
    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn best(&self) -> Option<&BestSnapshot> {
        self.best.as_ref()
    }

    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best.as_ref().map(|b| self.state.with_snapshot(b))
    }

    /// Gradients and losses of stream episodes `range`, summed in index order.
    fn window(
        &self,
        stream: &crate::episodes::EpisodeStream<'_>,
        range: std::ops::Range<u64>,
        first_index: u64,
        sums: &mut [f64; 3],
    ) -> Result<ExtractorParams<f32>> {
        let objective = self.state.config.objective();
        let params = &self.state.params;
        let mut acc: Option<ExtractorParams<f32>> = None;
        // Batches of one per worker bound memory to a few gradient buffers per thread.
        let batch = rayon::current_num_threads().max(1) as u64;
        let mut start = range.start;
        while start < range.end {
            let end = (start + batch).min(range.end);
            let results: Vec<_> = (start..end)
                .into_par_iter()
                .map(|i| {
                    episode_gradients(params, &stream.get(i), objective)
                        .map_err(|e| tag_episode(e, first_index + i))
                })
                .collect::<Result<_>>()?;
            for (losses, grads) in results {
                sums[0] += losses.total as f64;
                sums[1] += losses.classifier_loss as f64;
                sums[2] += losses.prototype_loss as f64;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.add_assign(&grads),
                }
            }
            start = end;
        }
        Ok(acc.expect("non-empty window"))
    }

    /// Trains one epoch, validates, and updates the best snapshot.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(Error::Usage("all configured epochs are complete".into()));
        }
        let config = self.state.config.clone();
        let tasks = config.tasks_per_epoch as u64;
        let epoch_start = self.state.epochs_completed as u64 * tasks;
        let stream = episode_stream(self.train, config.way, config.shot, config.queries, config.seed, tasks)?
            .with_offset(epoch_start);
        let adam = config.adam();
        let mut totals = [0.0f64; 3];
        let mut step_losses = Vec::with_capacity(config.steps_per_epoch());
        let mut start = 0;
        while start < tasks {
            let end = (start + config.accumulation as u64).min(tasks);
            let mut sums = [0.0f64; 3];
            let mut grads = self.window(&stream, start..end, epoch_start, &mut sums)?;
            let n = (end - start) as f32;
            grads.scale_assign(1.0 / n);
            adam_step(&mut self.state.params, &grads, &mut self.state.adam, &adam).map_err(|e| match e {
                Error::Numeric { name, message } => Error::Numeric {
                    name: format!("step {} gradient {name}", self.state.adam.t + 1),
                    message,
                },
                other => other,
            })?;
            step_losses.push(sums[0] / n as f64);
            for (t, s) in totals.iter_mut().zip(sums) {
                *t += s;
            }
            start = end;
        }

        let (val_accuracy, val_ci95) = if config.val_episodes > 0 {
            let r = evaluate(Some(&self.state.params), self.val, &config.validation_settings())?;
            (Some(r.mean), Some(r.ci95))
        } else {
            (None, None)
        };
        self.state.epochs_completed += 1;
        let epoch = self.state.epochs_completed;
        let record = EpochRecord {
            epoch,
            mean_loss: totals[0] / tasks as f64,
            mean_classifier_loss: totals[1] / tasks as f64,
            mean_prototype_loss: totals[2] / tasks as f64,
            step_losses,
            val_accuracy,
            val_ci95,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.5} (classifier {:.5}, prototype {:.5}){}",
            config.epochs,
            record.mean_loss,
            record.mean_classifier_loss,
            record.mean_prototype_loss,
            val_accuracy.map_or(String::new(), |a| format!(", val {:.2}%", 100.0 * a))
        );

        let improved = match (&self.best, val_accuracy) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(b), Some(a)) => b.val_accuracy.is_none_or(|best| a > best),
        };
        if improved {
            self.state.best_epoch = Some(epoch);
            self.state.best_val_accuracy = val_accuracy;
        }
        self.state.history.push(record);
        if improved {
            self.best = Some(self.state.snapshot());
        }
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// Runs the remaining epochs, calling `after_epoch` after each.
    pub fn run(mut self, mut after_epoch: impl FnMut(&Self) -> Result<()>) -> Result<TrainOutcome> {
        while !self.is_finished() {
            self.run_epoch()?;
            after_epoch(&self)?;
        }
        let best = self.best.expect("at least one epoch ran");
        Ok(TrainOutcome { best, last: self.state })
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(train: &EmbeddingDataset, val: &EmbeddingDataset, config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(train, val, config)?.run(|_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gaussian_dataset, GaussianSpec};

    fn data() -> (EmbeddingDataset, EmbeddingDataset) {
        let train = gaussian_dataset(&GaussianSpec::isotropic(8, 12, 8, 1.0, 0.7, 1)).unwrap();
        let val = gaussian_dataset(&GaussianSpec::isotropic(5, 12, 8, 1.0, 0.7, 2)).unwrap();
        (train, val)
    }

    fn small() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            tasks_per_epoch: 7,
            accumulation: 3,
            way: 3,
            shot: 2,
            queries: 2,
            seed: 11,
            layers: 1,
            heads: 2,
            lr: 1e-2,
            val_episodes: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_count_arithmetic() {
        let (tr, va) = data();
        let out = train(&tr, &va, small()).unwrap();
        assert_eq!(out.last.adam.t, 3 * 3);
        let one = TrainConfig {
            accumulation: 1,
            epochs: 1,
            ..small()
        };
        let ten = TrainConfig {
            accumulation: 10,
            tasks_per_epoch: 20,
            epochs: 1,
            ..small()
        };
        let a = train(&tr, &va, one).unwrap();
        let b = train(&tr, &va, ten).unwrap();
        assert_eq!(a.last.adam.t, 7);
        assert_eq!(b.last.adam.t, 2);
        for out in [&a, &b] {
            assert!(out.last.history[0].step_losses.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let (tr, va) = data();
        let c = TrainConfig { lr: 0.0, ..small() };
        let init = init_params::<f32>(c.extractor(8).unwrap(), c.seed);
        let out = train(&tr, &va, c).unwrap();
        assert_eq!(out.last.params, init);
        assert_eq!(out.best.params, init);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (tr, va) = data();
        let full = train(&tr, &va, small()).unwrap();

        let mut t = Trainer::new(&tr, &va, small()).unwrap();
        t.run_epoch().unwrap();
        let bytes = t.checkpoint().to_bytes();
        let best = t.best_checkpoint().unwrap().to_bytes();
        drop(t);
        let last = Checkpoint::from_bytes(&bytes).unwrap();
        let best = Checkpoint::from_bytes(&best).unwrap();
        let resumed = Trainer::resume(&tr, &va, last, Some(best)).unwrap().run(|_| Ok(())).unwrap();
        assert_eq!(resumed.last.to_bytes(), full.last.to_bytes());
        assert_eq!(resumed.best_checkpoint().to_bytes(), full.best_checkpoint().to_bytes());
    }

    #[test]
    fn training_is_deterministic_and_tracks_best() {
        let (tr, va) = data();
        let a = train(&tr, &va, small()).unwrap();
        let b = train(&tr, &va, small()).unwrap();
        assert_eq!(a.last.to_bytes(), b.last.to_bytes());
        let best_acc = a
            .last
            .history
            .iter()
            .map(|r| r.val_accuracy.unwrap())
            .fold(f64::MIN, f64::max);
        assert_eq!(a.best.val_accuracy, Some(best_acc));
        let first = a.last.history.iter().position(|r| r.val_accuracy == Some(best_acc)).unwrap();
        assert_eq!(a.best.epoch, first + 1);
        assert_eq!(a.last.history.len(), 3);
    }

    #[test]
    fn dim_mismatch_is_config_error() {
        let (tr, _) = data();
        let other = gaussian_dataset(&GaussianSpec::isotropic(5, 12, 6, 1.0, 0.7, 2)).unwrap();
        assert!(matches!(Trainer::new(&tr, &other, small()), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_data_aborts_with_episode_index() {
        let huge = gaussian_dataset(&GaussianSpec::isotropic(4, 8, 8, 1e19, 1e18, 3)).unwrap();
        let err = match train(&huge, &huge, small()) {
            Err(e) => e,
            Ok(_) => panic!("training on overflowing data succeeded"),
        };
        match err {
            Error::Numeric { name, .. } => assert!(name.starts_with("episode 0"), "{name}"),
            other => panic!("unexpected {other}"),
        }
    }
}
