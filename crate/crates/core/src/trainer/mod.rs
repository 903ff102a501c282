//! Adam with gradient accumulation over episodes, the epoch loop with best-validation
//! selection, and the PFCK checkpoint format.

mod adam;
mod checkpoint;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, PFCK_MAGIC, PFCK_VERSION,
};
pub use train::{train, BestSnapshot, EpochRecord, TrainOutcome, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::EvalSettings;
use crate::objectives::ObjectiveConfig;
use crate::protomodel::ExtractorConfig;

/// Mixed into the seed for the validation stream so it never coincides with training episodes.
pub const VALIDATION_SEED_SALT: u64 = 0x5641_4c5f_5345_4544;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    /// Episodes whose gradients are averaged into one optimizer step.
    pub accumulation: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
    pub use_prototype_loss: bool,
    pub layers: usize,
    pub heads: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Validation episodes per epoch; 0 disables validation and keeps the last epoch.
    pub val_episodes: u64,
    /// Write a checkpoint every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 100,
            tasks_per_epoch: 500,
            accumulation: 10,
            way: 5,
            shot: 5,
            queries: 15,
            seed: 0,
            use_prototype_loss: true,
            layers: 2,
            heads: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            val_episodes: 200,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.tasks_per_epoch == 0 {
            return fail("epochs and tasks_per_epoch must be at least 1".into());
        }
        if self.accumulation == 0 {
            return fail("accumulation must be at least 1".into());
        }
        if self.way < 2 {
            return fail(format!("way must be at least 2, got {}", self.way));
        }
        if self.shot == 0 || self.queries == 0 {
            return fail("shot and queries must be at least 1".into());
        }
        if self.layers == 0 || self.heads == 0 {
            return fail("layers and heads must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !self.tasks_per_epoch.is_multiple_of(self.accumulation) {
            log::warn!(
                "tasks_per_epoch {} is not a multiple of accumulation {}; the last step of each epoch averages {} episodes",
                self.tasks_per_epoch,
                self.accumulation,
                self.tasks_per_epoch % self.accumulation
            );
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn extractor(&self, dim: usize) -> Result<ExtractorConfig> {
        ExtractorConfig::new(dim, self.layers, self.heads)
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            use_prototype_loss: self.use_prototype_loss,
            bypass_module: false,
        }
    }

    /// Optimizer steps per epoch: full windows plus one for a partial remainder.
    pub fn steps_per_epoch(&self) -> usize {
        self.tasks_per_epoch.div_ceil(self.accumulation)
    }

    pub fn validation_settings(&self) -> EvalSettings {
        EvalSettings {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
            episodes: self.val_episodes,
            seed: self.seed ^ VALIDATION_SEED_SALT,
            bypass_module: false,
            use_prototype_loss: self.use_prototype_loss,
        }
    }

    /// FNV-1a of the canonical JSON form.
    pub fn fingerprint(&self) -> u64 {
        crate::episodes::fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
