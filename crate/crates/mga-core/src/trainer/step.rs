//! One batch: forward through the full model, the three losses, and
//! analytic gradients for every optimizer-owned parameter group.
//!
//! Only two loss terms reach trainable parameters. The identity loss moves
//! the linear head, and the triplet loss's token component moves the
//! aggregators and attention blocks. The global features are pooled from
//! fixed input grids, so the global side of the fused similarity and the
//! center loss carry no parameter gradient; centers follow their own rule.

use std::collections::BTreeMap;

use crate::ata::ata_backward;
use crate::data::types::{ImageRecord, LayerTag};
use crate::error::Result;
use crate::fga::fga_backward;
use crate::losses::{batch_triplets, center_loss, identity_loss, MiningResult};
use crate::model::{ImageEmbedding, ModelParams};
use crate::numerics::matrix::{Matrix, Real};
use crate::scorer::score_embeddings;
use crate::trainer::adam::Grads;
use crate::trainer::config::TrainConfig;

#[derive(Clone, Debug)]
pub struct BatchStep<T> {
    pub loss_identity: T,
    pub loss_center: T,
    pub loss_triplet: T,
    pub loss_total: T,
    pub triplets_total: usize,
    pub triplets_active: usize,
    pub anchors_skipped: usize,
    pub grads: Grads<T>,
    /// Deltas for the class centers, applied by the caller after the step.
    pub center_updates: Matrix<T>,
    pub similarities: Matrix<T>,
}

fn batch_embeddings<T: Real>(
    model: &ModelParams<T>,
    records: &[&ImageRecord<T>],
) -> Result<(Vec<ImageEmbedding<T>>, Matrix<T>)> {
    let embeddings: Vec<ImageEmbedding<T>> = records
        .iter()
        .map(|r| model.embed(r))
        .collect::<Result<_>>()?;
    let dim = embeddings[0].global.values.len();
    let mut globals = Matrix::zeros(records.len(), dim);
    for (i, e) in embeddings.iter().enumerate() {
        globals.row_mut(i).copy_from_slice(&e.global.values);
    }
    Ok((embeddings, globals))
}

/// Fused similarity for every unordered batch pair; diagonal is 1.
fn pairwise_similarities<T: Real>(
    model: &ModelParams<T>,
    embeddings: &[ImageEmbedding<T>],
    config: &TrainConfig,
) -> Result<Matrix<T>> {
    let n = embeddings.len();
    let alpha = T::from_f64(config.alpha);
    let mut sims = Matrix::zeros(n, n);
    for i in 0..n {
        sims[(i, i)] = T::one();
        for j in i + 1..n {
            let report = score_embeddings(
                &embeddings[i],
                &embeddings[j],
                model,
                alpha,
                config.reduction,
            )?;
            sims[(i, j)] = report.s_overall;
            sims[(j, i)] = report.s_overall;
        }
    }
    Ok(sims)
}

fn mined_triplet_loss<T: Real>(mining: &MiningResult<T>) -> (T, usize) {
    if mining.triplets.is_empty() {
        return (T::zero(), 0);
    }
    let mut total = T::zero();
    let mut active = 0;
    for t in &mining.triplets {
        total = total + t.loss;
        if t.loss > T::zero() {
            active += 1;
        }
    }
    (total / T::from_f64(mining.triplets.len() as f64), active)
}

/// Losses only; the cheap path used by finite-difference probes.
pub fn batch_loss<T: Real>(
    model: &ModelParams<T>,
    records: &[&ImageRecord<T>],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<T> {
    let (embeddings, globals) = batch_embeddings(model, records)?;
    let (l_id, _) = identity_loss(&globals, labels, &model.identity)?;
    let l_center = center_loss(&globals, labels, &model.centers)?.loss;
    let sims = pairwise_similarities(model, &embeddings, config)?;
    let mining = batch_triplets(&sims, labels, config.mining, T::from_f64(config.margin));
    let (l_triplet, _) = mined_triplet_loss(&mining);
    Ok(T::from_f64(config.weights.identity) * l_id
        + T::from_f64(config.weights.center) * l_center
        + T::from_f64(config.weights.triplet) * l_triplet)
}

/// Full forward and backward over one batch.
pub fn batch_forward_backward<T: Real>(
    model: &ModelParams<T>,
    records: &[&ImageRecord<T>],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<BatchStep<T>> {
    assert_eq!(records.len(), labels.len(), "one label per record");
    let (embeddings, globals) = batch_embeddings(model, records)?;
    let (l_id, id_grads) = identity_loss(&globals, labels, &model.identity)?;
    let center = center_loss(&globals, labels, &model.centers)?;
    let sims = pairwise_similarities(model, &embeddings, config)?;
    let mining = batch_triplets(&sims, labels, config.mining, T::from_f64(config.margin));
    let (l_triplet, active) = mined_triplet_loss(&mining);

    let mut grads = Grads::new();
    let lambda_id = T::from_f64(config.weights.identity);
    if config.weights.identity != 0.0 {
        grads.accumulate_scaled("identity.weight", id_grads.weight, lambda_id);
        grads.accumulate_scaled("identity.bias", id_grads.bias, lambda_id);
    }

    // upstream d(total)/d(s_overall) per unordered pair from active triplets
    let mut pair_upstream: BTreeMap<(usize, usize), T> = BTreeMap::new();
    if !mining.triplets.is_empty() && config.weights.triplet != 0.0 && config.alpha < 1.0 {
        let per = T::from_f64(config.weights.triplet)
            / T::from_f64(mining.triplets.len() as f64);
        let key = |a: usize, b: usize| (a.min(b), a.max(b));
        for t in &mining.triplets {
            if t.loss > T::zero() {
                let ap = pair_upstream
                    .entry(key(t.anchor, t.positive))
                    .or_insert_with(T::zero);
                *ap = *ap - per;
                let an = pair_upstream
                    .entry(key(t.anchor, t.negative))
                    .or_insert_with(T::zero);
                *an = *an + per;
            }
        }
    }

    // token path: d s_overall / d s_token = 1 − α
    let token_scale = T::from_f64(1.0 - config.alpha);
    let n = records.len();
    let mut coarse_upstream: Vec<Option<Matrix<T>>> = vec![None; n];
    let mut fine_upstream: Vec<Option<Matrix<T>>> = vec![None; n];
    for (&(i, j), &u) in &pair_upstream {
        let upstream = u * token_scale;
        if upstream == T::zero() {
            continue;
        }
        let ata = ata_backward(
            &embeddings[i].coarse_tokens,
            &embeddings[i].fine_tokens,
            &embeddings[j].coarse_tokens,
            &embeddings[j].fine_tokens,
            &model.ata,
            config.reduction,
            upstream,
        )?;
        for (name, g) in ata.params {
            grads.accumulate(&format!("ata.{}", name), g);
        }
        let add = |slot: &mut Option<Matrix<T>>, g: Matrix<T>| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };
        add(&mut coarse_upstream[i], ata.coarse_v);
        add(&mut fine_upstream[i], ata.fine_v);
        add(&mut coarse_upstream[j], ata.coarse_e);
        add(&mut fine_upstream[j], ata.fine_e);
    }

    for i in 0..n {
        if let Some(up) = &coarse_upstream[i] {
            let g = fga_backward(records[i].layer(LayerTag::Coarse)?, &model.fga_coarse, up)?;
            grads.accumulate("fga_coarse.centers", g.centers);
            grads.accumulate("fga_coarse.biases", g.biases);
            grads.accumulate("fga_coarse.anchors", g.anchors);
        }
        if let Some(up) = &fine_upstream[i] {
            let g = fga_backward(records[i].layer(LayerTag::Fine)?, &model.fga_fine, up)?;
            grads.accumulate("fga_fine.centers", g.centers);
            grads.accumulate("fga_fine.biases", g.biases);
            grads.accumulate("fga_fine.anchors", g.anchors);
        }
    }

    let loss_total = T::from_f64(config.weights.identity) * l_id
        + T::from_f64(config.weights.center) * center.loss
        + T::from_f64(config.weights.triplet) * l_triplet;
    Ok(BatchStep {
        loss_identity: l_id,
        loss_center: center.loss,
        loss_triplet: l_triplet,
        loss_total,
        triplets_total: mining.triplets.len(),
        triplets_active: active,
        anchors_skipped: mining.anchors_without_positive,
        grads,
        center_updates: center.center_updates,
        similarities: sims,
    })
}
