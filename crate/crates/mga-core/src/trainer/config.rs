//! Training hyper-parameters and the multistep learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::ata::Reduction;
use crate::error::{MgaError, Result};
use crate::losses::{LossWeights, MiningStrategy};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Epochs after which the learning rate drops by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    /// Classes per batch.
    pub p: usize,
    /// Images per class per batch.
    pub k: usize,
    pub seed: u64,
    pub alpha: f64,
    pub margin: f64,
    pub weights: LossWeights,
    pub mining: MiningStrategy,
    pub reduction: Reduction,
    pub num_clusters: usize,
    /// Common alignment dimension; defaults to the coarse layer dim.
    pub token_dim: Option<usize>,
    pub temperature: f64,
    pub center_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            milestones: vec![15, 25],
            decay_factor: 0.1,
            epochs: 30,
            p: 6,
            k: 4,
            seed: 7,
            alpha: 0.5,
            margin: 0.3,
            weights: LossWeights::default(),
            mining: MiningStrategy::BatchHard,
            reduction: Reduction::Max,
            num_clusters: 8,
            token_dim: None,
            temperature: 4.0,
            center_rate: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: &str| {
            Err(MgaError::ConfigInvalid {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.p < 2 {
            return fail("p", "need at least 2 classes per batch");
        }
        if self.k < 2 {
            return fail("k", "need at least 2 images per class");
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return fail("milestones", "must be strictly increasing");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha", "must lie in [0, 1]");
        }
        if self.margin < 0.0 {
            return fail("margin", "must be nonnegative");
        }
        if self.weights.identity < 0.0 || self.weights.center < 0.0 || self.weights.triplet < 0.0 {
            return fail("weights", "must be nonnegative");
        }
        if self.temperature <= 0.0 {
            return fail("temperature", "must be positive");
        }
        if !(0.0..1.0).contains(&self.decay_factor) {
            return fail("decay_factor", "must lie in (0, 1)");
        }
        if self.base_lr < 0.0 {
            return fail("base_lr", "must be nonnegative");
        }
        if self.epochs == 0 {
            return fail("epochs", "must be positive");
        }
        if self.num_clusters == 0 {
            return fail("num_clusters", "must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based): the base rate
    /// decayed once per milestone at or below the epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let crossed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.decay_factor.powi(crossed as i32)
    }

    pub fn model_config(
        &self,
        coarse_dim: usize,
        fine_dim: usize,
        num_classes: usize,
    ) -> ModelConfig {
        ModelConfig {
            num_clusters: self.num_clusters,
            coarse_dim,
            fine_dim,
            token_dim: self.token_dim.unwrap_or(coarse_dim),
            temperature: self.temperature,
            num_classes,
            center_rate: self.center_rate,
            reduction: self.reduction,
        }
    }
}
