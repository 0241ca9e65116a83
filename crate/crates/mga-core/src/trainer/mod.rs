//! Training loop: P×K sampling, Adam with a multistep schedule, the
//! class-center update rule, per-epoch metrics, and checkpointing.
//!
//! Determinism: every batch's randomness comes from a stream derived from
//! (seed, epoch), so resuming from a checkpoint replays the exact epoch
//! sequence an uninterrupted run would have produced.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod sample;
pub mod step;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, Grads, OptimizerState};
pub use checkpoint::{config_digest, read_checkpoint, write_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use gradcheck::{grad_check, GradCheckReport};
pub use sample::{pk_sample, TrainSet};
pub use step::{batch_forward_backward, batch_loss, BatchStep};

use crate::data::types::{ImageRecord, LayerTag};
use crate::error::{MgaError, Result};
use crate::model::ModelParams;
use crate::numerics::matrix::Real;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_identity: f64,
    pub loss_center: f64,
    pub loss_triplet: f64,
    /// Fraction of mined triplets with a positive hinge.
    pub triplet_active_fraction: f64,
    pub triplets_total: usize,
    pub anchors_skipped: usize,
    pub batches: usize,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub set: TrainSet<T>,
    pub model: ModelParams<T>,
    pub opt: OptimizerState<T>,
    /// Completed epochs; the next `run_epoch` call runs this epoch index.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, records: Vec<ImageRecord<T>>) -> Result<Self> {
        config.validate()?;
        let set = TrainSet::new(records);
        set.check_capacity(config.p, config.k)?;
        let coarse_dim = set.records[0].layer(LayerTag::Coarse)?.dim();
        let fine_dim = set.records[0].layer(LayerTag::Fine)?.dim();
        let model_config = config.model_config(coarse_dim, fine_dim, set.num_classes());
        let mut rng = stream(config.seed, "model-init");
        let model = ModelParams::init(&model_config, &mut rng)?;
        let opt = OptimizerState::new(
            &model,
            T::from_f64(config.beta1),
            T::from_f64(config.beta2),
            T::from_f64(config.epsilon),
        );
        Ok(Self {
            config,
            set,
            model,
            opt,
            epoch: 0,
        })
    }

    /// Continues a run from a checkpoint written with the same config.
    pub fn resume(
        config: TrainConfig,
        records: Vec<ImageRecord<T>>,
        ckpt: Checkpoint<T>,
    ) -> Result<Self> {
        config.validate()?;
        if ckpt.config_digest != config_digest(&config) || ckpt.seed != config.seed {
            return Err(MgaError::CheckpointConfigMismatch);
        }
        let set = TrainSet::new(records);
        set.check_capacity(config.p, config.k)?;
        Ok(Self {
            config,
            set,
            model: ckpt.model,
            opt: ckpt.opt,
            epoch: ckpt.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            epoch: self.epoch,
            seed: self.config.seed,
            config_digest: config_digest(&self.config),
            model: self.model.clone(),
            opt: self.opt.clone(),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.set.len() / (self.config.p * self.config.k)).max(1)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut rng = stream(self.config.seed, &format!("epoch/{}", epoch));
        let batches = self.batches_per_epoch();

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut triplets_total = 0usize;
        let mut triplets_active = 0usize;
        let mut anchors_skipped = 0usize;
        for _ in 0..batches {
            let indices = pk_sample(&self.set, self.config.p, self.config.k, &mut rng)?;
            let records: Vec<&ImageRecord<T>> =
                indices.iter().map(|&i| &self.set.records[i]).collect();
            let labels: Vec<usize> = indices.iter().map(|&i| self.set.labels[i]).collect();
            let batch = batch_forward_backward(&self.model, &records, &labels, &self.config)?;
            adam_step(&mut self.model, &batch.grads, &mut self.opt, T::from_f64(lr));
            self.model.centers.centers.add_assign(&batch.center_updates);

            sums.0 += batch.loss_total.as_f64();
            sums.1 += batch.loss_identity.as_f64();
            sums.2 += batch.loss_center.as_f64();
            sums.3 += batch.loss_triplet.as_f64();
            triplets_total += batch.triplets_total;
            triplets_active += batch.triplets_active;
            anchors_skipped += batch.anchors_skipped;
        }
        self.epoch += 1;
        let n = batches as f64;
        Ok(EpochMetrics {
            epoch,
            lr,
            loss_total: sums.0 / n,
            loss_identity: sums.1 / n,
            loss_center: sums.2 / n,
            loss_triplet: sums.3 / n,
            triplet_active_fraction: if triplets_total == 0 {
                0.0
            } else {
                triplets_active as f64 / triplets_total as f64
            },
            triplets_total,
            anchors_skipped,
            batches,
        })
    }
}

/// Runs the configured number of epochs from scratch.
pub fn train<T: Real>(
    config: TrainConfig,
    records: Vec<ImageRecord<T>>,
) -> Result<(ModelParams<T>, Vec<EpochMetrics>)> {
    let epochs = config.epochs;
    let mut trainer = Trainer::new(config, records)?;
    let mut metrics = Vec::with_capacity(epochs);
    while trainer.epoch < epochs {
        metrics.push(trainer.run_epoch()?);
    }
    Ok((trainer.model, metrics))
}
