//! Training-set bookkeeping and P×K batch sampling.

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::data::types::{ImageRecord, Split};
use crate::error::{MgaError, Result};
use crate::numerics::matrix::Real;

/// Train-split records with class ids remapped to contiguous labels.
#[derive(Clone, Debug)]
pub struct TrainSet<T> {
    pub records: Vec<ImageRecord<T>>,
    /// Contiguous label per record, aligned with `records`.
    pub labels: Vec<usize>,
    /// Original class id for each contiguous label.
    pub classes: Vec<u32>,
    by_class: Vec<Vec<usize>>,
}

impl<T: Real> TrainSet<T> {
    /// Keeps only the train split and builds the label mapping.
    pub fn new(all_records: Vec<ImageRecord<T>>) -> Self {
        let records: Vec<ImageRecord<T>> = all_records
            .into_iter()
            .filter(|r| r.split == Split::Train)
            .collect();
        let mut classes: Vec<u32> = records.iter().map(|r| r.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        let labels: Vec<usize> = records
            .iter()
            .map(|r| classes.binary_search(&r.class_id).unwrap())
            .collect();
        let mut by_class = vec![Vec::new(); classes.len()];
        for (i, &label) in labels.iter().enumerate() {
            by_class[label].push(i);
        }
        Self {
            records,
            labels,
            classes,
            by_class,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks that a P×K batch can be drawn at all.
    pub fn check_capacity(&self, p: usize, k: usize) -> Result<()> {
        let eligible = self.by_class.iter().filter(|c| c.len() >= k).count();
        if eligible < p {
            return Err(MgaError::InsufficientClasses {
                needed: p,
                per_class: k,
                found: eligible,
            });
        }
        Ok(())
    }
}

/// Draws P distinct classes (each with at least K images) and K distinct
/// images per class, uniformly without replacement.
pub fn pk_sample<T: Real, R: Rng>(
    set: &TrainSet<T>,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..set.num_classes())
        .filter(|&c| set.by_class[c].len() >= k)
        .collect();
    if eligible.len() < p {
        return Err(MgaError::InsufficientClasses {
            needed: p,
            per_class: k,
            found: eligible.len(),
        });
    }
    let mut chosen: Vec<usize> = index_sample(rng, eligible.len(), p)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    let mut batch = Vec::with_capacity(p * k);
    for &class in &chosen {
        let pool = &set.by_class[class];
        let mut picks: Vec<usize> = index_sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        picks.sort_unstable();
        batch.extend(picks);
    }
    Ok(batch)
}
