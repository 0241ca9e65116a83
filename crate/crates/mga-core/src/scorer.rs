//! Pair scoring: global cosine, token-level alignment similarity, and
//! their α-weighted fusion into one report.

use crate::ata::{
    bind_ata_params, stage1_attend_tape, token_similarity_tape, ImageTokenVars, Reduction,
};
use crate::autodiff::Tape;
use crate::data::types::{GlobalFeature, ImageRecord};
use crate::error::{MgaError, Result};
use crate::model::{ImageEmbedding, ModelParams};
use crate::numerics::matrix::{Matrix, Real};
use crate::numerics::ops::cosine;

/// Everything computed for one image pair: the three similarities, the α
/// used, and the token-level evidence (cosine matrix, attention weights,
/// reduction mode, argmax token when reducing by max).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport<T> {
    pub s_global: T,
    pub s_token: T,
    pub s_overall: T,
    pub alpha: T,
    pub cosine: Matrix<T>,
    pub weights: Matrix<T>,
    pub reduction: Reduction,
    pub argmax: Option<usize>,
}

/// Cosine of two pooled global features.
pub fn global_similarity<T: Real>(g1: &GlobalFeature<T>, g2: &GlobalFeature<T>) -> Result<T> {
    cosine(&g1.values, &g2.values)
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    let a = alpha.as_f64();
    if !(0.0..=1.0).contains(&a) {
        return Err(MgaError::AlphaOutOfRange(a));
    }
    Ok(())
}

/// `α·s_global + (1−α)·s_token`.
pub fn fuse<T: Real>(alpha: T, s_global: T, s_token: T) -> Result<T> {
    check_alpha(alpha)?;
    Ok(alpha * s_global + (T::one() - alpha) * s_token)
}

/// Scores a pair from cached per-image embeddings. Stage-1 attention is
/// pair-dependent and always runs here.
pub fn score_embeddings<T: Real>(
    a: &ImageEmbedding<T>,
    b: &ImageEmbedding<T>,
    model: &ModelParams<T>,
    alpha: T,
    reduction: Reduction,
) -> Result<SimilarityReport<T>> {
    check_alpha(alpha)?;
    let s_global = global_similarity(&a.global, &b.global)?;

    let mut tape = Tape::new();
    let image_a = ImageTokenVars {
        coarse: tape.input(a.coarse_tokens.tokens.clone()),
        fine: tape.input(a.fine_tokens.tokens.clone()),
    };
    let image_b = ImageTokenVars {
        coarse: tape.input(b.coarse_tokens.tokens.clone()),
        fine: tape.input(b.fine_tokens.tokens.clone()),
    };
    let vars = bind_ata_params(&mut tape, &model.ata);
    let (ta, tb) = stage1_attend_tape(&mut tape, image_a, image_b, &vars)?;
    let nodes = token_similarity_tape(&mut tape, ta, tb, model.ata.temperature, reduction)?;
    let s_token = tape.scalar(nodes.similarity);

    Ok(SimilarityReport {
        s_global,
        s_token,
        s_overall: fuse(alpha, s_global, s_token)?,
        alpha,
        cosine: tape.value(nodes.cosine).clone(),
        weights: tape.value(nodes.weights_ve).clone(),
        reduction,
        argmax: nodes.argmax,
    })
}

/// Full pipeline for one pair of raw records.
pub fn score_pair<T: Real>(
    a: &ImageRecord<T>,
    b: &ImageRecord<T>,
    model: &ModelParams<T>,
    alpha: T,
    reduction: Reduction,
) -> Result<SimilarityReport<T>> {
    check_alpha(alpha)?;
    let ea = model.embed(a)?;
    let eb = model.embed(b)?;
    score_embeddings(&ea, &eb, model, alpha, reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SynthSpec};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams<f64>, Vec<ImageRecord<f64>>) {
        let spec = SynthSpec {
            num_classes: 4,
            images_per_class: 3,
            ..SynthSpec::default()
        };
        let records: Vec<ImageRecord<f64>> = generate_synthetic(&spec)
            .unwrap()
            .iter()
            .map(|r| r.to_f64())
            .collect();
        let config = ModelConfig::new(32, 32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (ModelParams::init(&config, &mut rng).unwrap(), records)
    }

    #[test]
    fn global_similarity_identical_is_one() {
        let g = GlobalFeature {
            values: vec![0.3f64, -0.2, 0.9],
        };
        assert!((global_similarity(&g, &g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn global_similarity_orthogonal_is_zero() {
        let g1 = GlobalFeature {
            values: vec![1.0, 0.0],
        };
        let g2 = GlobalFeature {
            values: vec![0.0, 2.0],
        };
        assert_eq!(global_similarity(&g1, &g2).unwrap(), 0.0);
    }

    #[test]
    fn global_similarity_hand_cosine() {
        let g1 = GlobalFeature {
            values: vec![1.0, 0.0],
        };
        let g2 = GlobalFeature {
            values: vec![1.0, 1.0],
        };
        let s = global_similarity(&g1, &g2).unwrap();
        assert!((s - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((s - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn fuse_rejects_alpha_out_of_range() {
        assert!(matches!(
            fuse(1.5f64, 0.0, 0.0),
            Err(MgaError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            fuse(-0.1f64, 0.0, 0.0),
            Err(MgaError::AlphaOutOfRange(_))
        ));
        assert!(score_pair_alpha(2.0).is_err());
    }

    fn score_pair_alpha(alpha: f64) -> Result<SimilarityReport<f64>> {
        let (model, records) = setup();
        score_pair(&records[0], &records[1], &model, alpha, Reduction::Max)
    }

    #[test]
    fn fusion_endpoints() {
        let (model, records) = setup();
        let r1 = score_pair(&records[0], &records[1], &model, 1.0, Reduction::Max).unwrap();
        assert_eq!(r1.s_overall, r1.s_global);
        // the token path is still computed and reported
        assert!(r1.cosine.rows() > 0);
        let r0 = score_pair(&records[0], &records[1], &model, 0.0, Reduction::Max).unwrap();
        assert_eq!(r0.s_overall, r0.s_token);
    }

    #[test]
    fn identical_records_score_near_one_and_beat_cross_pairs() {
        let (model, records) = setup();
        // s_token cannot hit 1.0 exactly: at finite temperature the attended
        // vector of each token mixes in the other tokens, so self-relevance
        // stays slightly below the bound. It must still be close and must
        // dominate every cross-image pair.
        let self_pair = score_pair(&records[0], &records[0], &model, 0.3, Reduction::Max).unwrap();
        assert!((self_pair.s_global - 1.0).abs() < 1e-9);
        assert!(self_pair.s_token > 0.99);
        assert!(self_pair.s_overall > 0.99);
        for other in &records[1..6] {
            let cross = score_pair(&records[0], other, &model, 0.3, Reduction::Max).unwrap();
            assert!(cross.s_token < self_pair.s_token);
            assert!(cross.s_overall < self_pair.s_overall);
        }
    }

    #[test]
    fn fusion_is_affine_in_alpha() {
        let (model, records) = setup();
        let probe = |alpha: f64| {
            score_pair(&records[0], &records[2], &model, alpha, Reduction::Max)
                .unwrap()
                .s_overall
        };
        let s0 = probe(0.0);
        let s1 = probe(1.0);
        for alpha in [0.25, 0.5, 0.75] {
            let expect = alpha * s1 + (1.0 - alpha) * s0;
            assert!((probe(alpha) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn scoring_is_symmetric() {
        let (model, records) = setup();
        for reduction in [Reduction::Max, Reduction::Mean] {
            let ab = score_pair(&records[0], &records[3], &model, 0.5, reduction).unwrap();
            let ba = score_pair(&records[3], &records[0], &model, 0.5, reduction).unwrap();
            assert!((ab.s_global - ba.s_global).abs() < 1e-6);
            assert!((ab.s_token - ba.s_token).abs() < 1e-6);
            assert!((ab.s_overall - ba.s_overall).abs() < 1e-6);
        }
    }

    #[test]
    fn report_invariants_hold() {
        let (model, records) = setup();
        for i in 1..records.len().min(6) {
            let r = score_pair(&records[0], &records[i], &model, 0.5, Reduction::Max).unwrap();
            assert!((r.s_overall - (r.alpha * r.s_global + (1.0 - r.alpha) * r.s_token)).abs() < 1e-6);
            for s in [r.s_global, r.s_token, r.s_overall] {
                assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&s));
            }
            for row in 0..r.weights.rows() {
                let sum: f64 = r.weights.row(row).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn global_scaling_preserves_ranking() {
        let (model, records) = setup();
        let ea = model.embed(&records[0]).unwrap();
        let mut scores = Vec::new();
        let mut scaled_scores = Vec::new();
        for r in &records[1..5] {
            let eb = model.embed(r).unwrap();
            scores.push(
                score_embeddings(&ea, &eb, &model, 0.5, Reduction::Max)
                    .unwrap()
                    .s_overall,
            );
            let mut ea_s = ea.clone();
            let mut eb_s = eb.clone();
            for v in &mut ea_s.global.values {
                *v *= 7.3;
            }
            for v in &mut eb_s.global.values {
                *v *= 7.3;
            }
            scaled_scores.push(
                score_embeddings(&ea_s, &eb_s, &model, 0.5, Reduction::Max)
                    .unwrap()
                    .s_overall,
            );
        }
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
            idx
        };
        assert_eq!(rank(&scores), rank(&scaled_scores));
        for (a, b) in scores.iter().zip(&scaled_scores) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
