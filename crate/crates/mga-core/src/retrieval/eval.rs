//! Retrieval metrics: recall at K and mean average precision over a set of
//! ranked lists, plus the evaluation driver that produces them from an
//! index and a query set.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ata::Reduction;
use crate::data::types::ImageRecord;
use crate::error::Result;
use crate::model::ModelParams;
use crate::numerics::matrix::Real;
use crate::retrieval::index::{search, GalleryIndex, RankedList};

pub const EVAL_KS: [usize; 4] = [1, 10, 20, 50];

/// A query's class paired with its ranked gallery list.
pub struct QueryResult<'a, T> {
    pub class_id: u32,
    pub ranked: &'a RankedList<T>,
}

/// Metric fractions in [0, 1] plus the count of queries skipped because
/// their class has no gallery item.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricCounts {
    pub recall: Vec<f64>,
    pub map: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

fn gallery_class_counts(classes: &HashMap<String, u32>) -> HashMap<u32, usize> {
    let mut counts = HashMap::new();
    for &c in classes.values() {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
}

/// Fraction of queries with at least one same-class gallery item in the
/// top K, for each K. Queries whose class is absent from the gallery are
/// excluded and counted.
pub fn recall_at_k<T: Real>(
    results: &[QueryResult<'_, T>],
    gallery_classes: &HashMap<String, u32>,
    ks: &[usize],
) -> MetricCounts {
    let present = gallery_class_counts(gallery_classes);
    let mut hits = vec![0usize; ks.len()];
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for q in results {
        if !present.contains_key(&q.class_id) {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        let first_hit = q
            .ranked
            .entries
            .iter()
            .position(|e| gallery_classes.get(&e.image_id) == Some(&q.class_id));
        if let Some(rank) = first_hit {
            for (slot, &k) in hits.iter_mut().zip(ks) {
                if rank < k {
                    *slot += 1;
                }
            }
        }
    }
    let recall = hits
        .iter()
        .map(|&h| if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 })
        .collect();
    MetricCounts {
        recall,
        map: 0.0,
        evaluated,
        excluded,
    }
}

/// Uncut average precision per query (mean of precision at each relevant
/// hit, divided by the total number of relevant gallery items), averaged
/// over evaluated queries.
pub fn mean_average_precision<T: Real>(
    results: &[QueryResult<'_, T>],
    gallery_classes: &HashMap<String, u32>,
) -> MetricCounts {
    let present = gallery_class_counts(gallery_classes);
    let mut ap_sum = 0.0f64;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for q in results {
        let Some(&total_relevant) = present.get(&q.class_id) else {
            excluded += 1;
            continue;
        };
        evaluated += 1;
        let mut found = 0usize;
        let mut precision_sum = 0.0f64;
        for (rank, e) in q.ranked.entries.iter().enumerate() {
            if gallery_classes.get(&e.image_id) == Some(&q.class_id) {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / total_relevant as f64;
    }
    MetricCounts {
        recall: Vec::new(),
        map: if evaluated == 0 { 0.0 } else { ap_sum / evaluated as f64 },
        evaluated,
        excluded,
    }
}

/// Final report; recall and mAP are percentages rounded to 2 decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_at_1: f64,
    pub r_at_10: f64,
    pub r_at_20: f64,
    pub r_at_50: f64,
    pub map: f64,
    pub num_queries: usize,
    pub shortlist_k: usize,
}

fn percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

/// Runs the two-stage search for every query and aggregates the metrics.
/// Returns the report plus the number of excluded queries.
pub fn evaluate<T: Real>(
    queries: &[ImageRecord<T>],
    index: &GalleryIndex<T>,
    model: &ModelParams<T>,
    alpha: T,
    shortlist_k: usize,
    reduction: Reduction,
) -> Result<(EvalReport, usize)> {
    let lists: Vec<RankedList<T>> = queries
        .par_iter()
        .map(|q| search(q, index, model, alpha, shortlist_k, reduction))
        .collect::<Result<_>>()?;
    let results: Vec<QueryResult<'_, T>> = queries
        .iter()
        .zip(&lists)
        .map(|(q, ranked)| QueryResult {
            class_id: q.class_id,
            ranked,
        })
        .collect();
    let classes = index.class_map();
    let rec = recall_at_k(&results, &classes, &EVAL_KS);
    let map = mean_average_precision(&results, &classes);
    debug_assert_eq!(rec.excluded, map.excluded);
    Ok((
        EvalReport {
            r_at_1: percent(rec.recall[0]),
            r_at_10: percent(rec.recall[1]),
            r_at_20: percent(rec.recall[2]),
            r_at_50: percent(rec.recall[3]),
            map: percent(map.map),
            num_queries: rec.evaluated,
            shortlist_k,
        },
        rec.excluded,
    ))
}
