//! Training objectives: identity cross-entropy over a linear head, center
//! loss on pooled global features, and the hinge triplet loss on fused
//! pair similarities, plus batch triplet mining and the weighted total.
//!
//! Identity and center losses are linear or quadratic in their inputs, so
//! their gradients are written in closed form here rather than going
//! through the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MgaError, Result};
use crate::numerics::matrix::{Matrix, Real};
use crate::numerics::ops::softmax_rows_unchecked;

/// Linear classifier over global features.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityHead<T> {
    /// num_classes × D.
    pub weight: Matrix<T>,
    /// 1 × num_classes.
    pub bias: Matrix<T>,
}

impl<T: Real> IdentityHead<T> {
    pub fn init<R: Rng>(num_classes: usize, dim: usize, rng: &mut R) -> Self {
        assert!(num_classes >= 2, "identity head needs at least two classes");
        Self {
            weight: Matrix::gaussian(num_classes, dim, 1.0 / (dim as f64).sqrt(), rng),
            bias: Matrix::zeros(1, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    /// B × num_classes logits for a B × D batch.
    pub fn logits(&self, globals: &Matrix<T>) -> Matrix<T> {
        let mut out = globals.matmul(&self.weight.transpose());
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(self.bias.row(0)) {
                *o = *o + b;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct IdentityGrads<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
    pub globals: Matrix<T>,
}

/// Mean softmax cross-entropy of the head's logits against the labels.
pub fn identity_loss<T: Real>(
    globals: &Matrix<T>,
    labels: &[usize],
    head: &IdentityHead<T>,
) -> Result<(T, IdentityGrads<T>)> {
    assert_eq!(globals.rows(), labels.len(), "one label per row");
    let k = head.num_classes();
    for &y in labels {
        if y >= k {
            return Err(MgaError::LabelOutOfRange {
                label: y,
                num_classes: k,
            });
        }
    }
    let b = globals.rows();
    let bt = T::from_f64(b as f64);
    let logits = head.logits(globals);
    let probs = softmax_rows_unchecked(&logits, T::one());

    let mut loss = T::zero();
    let mut dlogits = probs;
    for (i, &y) in labels.iter().enumerate() {
        loss = loss - dlogits[(i, y)].ln();
        dlogits[(i, y)] = dlogits[(i, y)] - T::one();
    }
    loss = loss / bt;
    let dlogits = dlogits.scale(T::one() / bt);

    let weight = dlogits.transpose().matmul(globals);
    let mut bias = Matrix::zeros(1, k);
    for i in 0..b {
        for j in 0..k {
            bias[(0, j)] = bias[(0, j)] + dlogits[(i, j)];
        }
    }
    let g_globals = dlogits.matmul(&head.weight);
    Ok((
        loss,
        IdentityGrads {
            weight,
            bias,
            globals: g_globals,
        },
    ))
}

/// One learnable center per training class, pulled toward the batch mean
/// of its class by the standard mean-residual rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters<T> {
    /// num_classes × D.
    pub centers: Matrix<T>,
    pub rate: T,
}

impl<T: Real> ClassCenters<T> {
    pub fn init(num_classes: usize, dim: usize, rate: T) -> Self {
        Self {
            centers: Matrix::zeros(num_classes, dim),
            rate,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }
}

#[derive(Clone, Debug)]
pub struct CenterLossResult<T> {
    pub loss: T,
    /// Gradient with respect to the batch globals, (x_i − c_{y_i}) / B.
    pub globals: Matrix<T>,
    /// Per-class center deltas: rate · Σ_{y_i = j}(x_i − c_j) / (1 + n_j).
    pub center_updates: Matrix<T>,
}

/// Half the mean squared distance of each global to its class center.
pub fn center_loss<T: Real>(
    globals: &Matrix<T>,
    labels: &[usize],
    centers: &ClassCenters<T>,
) -> Result<CenterLossResult<T>> {
    assert_eq!(globals.rows(), labels.len(), "one label per row");
    let k = centers.num_classes();
    for &y in labels {
        if y >= k {
            return Err(MgaError::MissingCenter(y));
        }
    }
    let b = globals.rows();
    let bt = T::from_f64(b as f64);
    let d = globals.cols();

    let mut loss = T::zero();
    let mut g_globals = Matrix::zeros(b, d);
    let mut residual_sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for j in 0..d {
            let r = globals[(i, j)] - centers.centers[(y, j)];
            loss = loss + r * r;
            g_globals[(i, j)] = r / bt;
            residual_sums[(y, j)] = residual_sums[(y, j)] + r;
        }
    }
    loss = loss / (bt + bt);

    let mut center_updates = Matrix::zeros(k, d);
    for y in 0..k {
        if counts[y] == 0 {
            continue;
        }
        let denom = T::from_f64(1.0 + counts[y] as f64);
        for j in 0..d {
            center_updates[(y, j)] = centers.rate * residual_sums[(y, j)] / denom;
        }
    }
    Ok(CenterLossResult {
        loss,
        globals: g_globals,
        center_updates,
    })
}

/// Hinge triplet on fused similarities: `max(0, Δ − s_ap + s_an)`.
/// Returns the loss and its gradients with respect to `s_ap` and `s_an`;
/// the subgradient at the kink goes to the zero branch.
pub fn mg_triplet_loss<T: Real>(s_ap: T, s_an: T, margin: T) -> (T, T, T) {
    let raw = margin - s_ap + s_an;
    if raw > T::zero() {
        (raw, -T::one(), T::one())
    } else {
        (T::zero(), T::zero(), T::zero())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningStrategy {
    BatchHard,
    BatchAll,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet<T> {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub loss: T,
}

#[derive(Clone, Debug)]
pub struct MiningResult<T> {
    pub triplets: Vec<Triplet<T>>,
    /// Anchors skipped because their class had no other image in the batch.
    pub anchors_without_positive: usize,
}

/// Mines triplets from a batch similarity matrix. Ties resolve to the
/// lowest index so mining is deterministic.
pub fn batch_triplets<T: Real>(
    similarities: &Matrix<T>,
    labels: &[usize],
    strategy: MiningStrategy,
    margin: T,
) -> MiningResult<T> {
    assert_eq!(
        similarities.rows(),
        similarities.cols(),
        "similarity matrix must be square"
    );
    assert_eq!(similarities.rows(), labels.len(), "one label per row");
    let n = labels.len();
    let mut triplets = Vec::new();
    let mut skipped = 0usize;
    for a in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != a && labels[j] == labels[a])
            .collect();
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        if negatives.is_empty() {
            continue;
        }
        match strategy {
            MiningStrategy::BatchHard => {
                let p = *positives
                    .iter()
                    .min_by(|&&x, &&y| {
                        similarities[(a, x)]
                            .partial_cmp(&similarities[(a, y)])
                            .unwrap()
                            .then(x.cmp(&y))
                    })
                    .unwrap();
                let neg = *negatives
                    .iter()
                    .max_by(|&&x, &&y| {
                        similarities[(a, x)]
                            .partial_cmp(&similarities[(a, y)])
                            .unwrap()
                            .then(y.cmp(&x))
                    })
                    .unwrap();
                let (loss, _, _) =
                    mg_triplet_loss(similarities[(a, p)], similarities[(a, neg)], margin);
                triplets.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: neg,
                    loss,
                });
            }
            MiningStrategy::BatchAll => {
                for &p in &positives {
                    for &neg in &negatives {
                        let (loss, _, _) =
                            mg_triplet_loss(similarities[(a, p)], similarities[(a, neg)], margin);
                        triplets.push(Triplet {
                            anchor: a,
                            positive: p,
                            negative: neg,
                            loss,
                        });
                    }
                }
            }
        }
    }
    MiningResult {
        triplets,
        anchors_without_positive: skipped,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub identity: f64,
    pub center: f64,
    pub triplet: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            identity: 1.0,
            center: 5e-4,
            triplet: 1.0,
        }
    }
}

/// Hyper-parameters of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub alpha: f64,
    pub weights: LossWeights,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            alpha: 0.5,
            weights: LossWeights::default(),
        }
    }
}

pub fn total_loss<T: Real>(l_identity: T, l_center: T, l_triplet: T, weights: &LossWeights) -> T {
    T::from_f64(weights.identity) * l_identity
        + T::from_f64(weights.center) * l_center
        + T::from_f64(weights.triplet) * l_triplet
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{finite_diff_gradient, max_relative_error, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let head = IdentityHead {
            weight: Matrix::from_vec(2, 1, vec![50.0, -50.0]),
            bias: Matrix::zeros(1, 2),
        };
        let globals = Matrix::from_vec(1, 1, vec![1.0]);
        let (loss, _) = identity_loss(&globals, &[0], &head).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let k = 7;
        let head = IdentityHead {
            weight: Matrix::zeros(k, 3),
            bias: Matrix::zeros(1, k),
        };
        let globals = Matrix::from_vec(2, 3, vec![0.3, -0.1, 0.5, 1.0, 0.0, -0.7]);
        let (loss, _) = identity_loss(&globals, &[2, 5], &head).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_loss_rejects_out_of_range_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = IdentityHead::init(3, 4, &mut rng);
        let globals = Matrix::from_vec(1, 4, vec![0.1; 4]);
        assert!(matches!(
            identity_loss(&globals, &[3], &head),
            Err(MgaError::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn identity_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (k, d, b) = (4, 5, 3);
        let head = IdentityHead::init(k, d, &mut rng);
        let globals = Matrix::from_vec(
            b,
            d,
            (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let labels = [1usize, 3, 0];
        let (_, grads) = identity_loss(&globals, &labels, &head).unwrap();

        // pack weight, bias, globals into one flat vector
        let mut flat = head.weight.as_slice().to_vec();
        flat.extend(head.bias.as_slice());
        flat.extend(globals.as_slice());
        let numeric = finite_diff_gradient(
            |v| {
                let h = IdentityHead {
                    weight: Matrix::from_vec(k, d, v[..k * d].to_vec()),
                    bias: Matrix::from_vec(1, k, v[k * d..k * d + k].to_vec()),
                };
                let g = Matrix::from_vec(b, d, v[k * d + k..].to_vec());
                Ok(identity_loss(&g, &labels, &h).unwrap().0)
            },
            &flat,
            DEFAULT_STEP,
        )
        .unwrap();
        let mut analytic = grads.weight.as_slice().to_vec();
        analytic.extend(grads.bias.as_slice());
        analytic.extend(grads.globals.as_slice());
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn center_loss_zero_when_features_sit_on_centers() {
        let centers = ClassCenters {
            centers: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            rate: 0.5,
        };
        let globals = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = center_loss(&globals, &[0, 1], &centers).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.center_updates.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_loss_hand_arithmetic_single_sample() {
        let centers = ClassCenters {
            centers: Matrix::from_vec(2, 2, vec![0.0, 0.0, 5.0, 5.0]),
            rate: 0.5,
        };
        let globals = Matrix::from_vec(1, 2, vec![2.0, 0.0]);
        let out = center_loss(&globals, &[0], &centers).unwrap();
        assert!((out.loss - 2.0f64).abs() < 1e-12);
        assert!((out.globals[(0, 0)] - 2.0).abs() < 1e-12);
        assert_eq!(out.globals[(0, 1)], 0.0);
        // update = rate · (2, 0) / (1 + 1)
        assert!((out.center_updates[(0, 0)] - 0.5f64).abs() < 1e-12);
    }

    #[test]
    fn center_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, d, b) = (3, 4, 6);
        let centers = ClassCenters {
            centers: Matrix::gaussian(k, d, 1.0, &mut rng),
            rate: 0.5,
        };
        let globals = Matrix::gaussian(b, d, 1.0, &mut rng);
        let labels = [0usize, 1, 2, 0, 1, 0];
        let out = center_loss(&globals, &labels, &centers).unwrap();
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..d {
                let r: f64 = globals[(i, j)] - centers.centers[(y, j)];
                expect += r * r;
            }
        }
        expect /= 2.0 * b as f64;
        assert!((out.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn center_loss_missing_center_is_error() {
        let centers = ClassCenters::<f64>::init(2, 3, 0.5);
        let globals = Matrix::from_vec(1, 3, vec![0.0; 3]);
        assert!(matches!(
            center_loss(&globals, &[2], &centers),
            Err(MgaError::MissingCenter(2))
        ));
    }

    #[test]
    fn center_update_rule_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut centers = ClassCenters {
            centers: Matrix::gaussian(2, 3, 1.0, &mut rng),
            rate: 0.1,
        };
        let globals = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let labels = [0usize, 1, 0, 1, 0];
        let before = center_loss(&globals, &labels, &centers).unwrap();
        centers.centers.add_assign(&before.center_updates);
        let after = center_loss(&globals, &labels, &centers).unwrap();
        assert!(after.loss < before.loss);
    }

    #[test]
    fn triplet_easy_case_is_zero() {
        let (loss, ga, gn) = mg_triplet_loss(1.0, -1.0, 0.3);
        assert_eq!(loss, 0.0);
        assert_eq!((ga, gn), (0.0, 0.0));
    }

    #[test]
    fn triplet_coincident_pair_is_margin() {
        let (loss, _, _) = mg_triplet_loss(0.4, 0.4, 0.3);
        assert!((loss - 0.3f64).abs() < 1e-12);
    }

    #[test]
    fn triplet_active_case_hand_computed() {
        let (loss, ga, gn) = mg_triplet_loss(0.2, 0.6, 0.3);
        assert!((loss - 0.7f64).abs() < 1e-12);
        assert_eq!((ga, gn), (-1.0, 1.0));
    }

    #[test]
    fn single_class_batch_yields_no_triplets() {
        let s = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.5, 1.0]);
        let out = batch_triplets(&s, &[0, 0], MiningStrategy::BatchHard, 0.3);
        assert!(out.triplets.is_empty());
        assert_eq!(out.anchors_without_positive, 0);
    }

    #[test]
    fn anchor_without_positive_is_counted() {
        let s = Matrix::from_vec(3, 3, vec![1.0, 0.2, 0.1, 0.2, 1.0, 0.4, 0.1, 0.4, 1.0]);
        let out = batch_triplets(&s, &[0, 1, 1], MiningStrategy::BatchHard, 0.3);
        assert_eq!(out.anchors_without_positive, 1);
        assert_eq!(out.triplets.len(), 2);
    }

    #[test]
    fn batch_hard_picks_match_hand_inspection() {
        // 2 classes × 2 images: indices 0,1 class 0; 2,3 class 1
        #[rustfmt::skip]
        let s = Matrix::from_vec(4, 4, vec![
            1.0, 0.6, 0.7, 0.1,
            0.6, 1.0, 0.2, 0.5,
            0.7, 0.2, 1.0, 0.9,
            0.1, 0.5, 0.9, 1.0,
        ]);
        let labels = [0usize, 0, 1, 1];
        let out = batch_triplets(&s, &labels, MiningStrategy::BatchHard, 0.3);
        assert_eq!(out.triplets.len(), 4);
        // anchor 0: only positive 1 (s=0.6); hardest negative 2 (0.7 > 0.1)
        assert_eq!(
            (out.triplets[0].positive, out.triplets[0].negative),
            (1, 2)
        );
        assert!((out.triplets[0].loss - (0.3f64 - 0.6 + 0.7)).abs() < 1e-12);
        // anchor 3: positive 2 (0.9); hardest negative 1 (0.5 > 0.1)
        assert_eq!(
            (out.triplets[3].positive, out.triplets[3].negative),
            (2, 1)
        );
    }

    #[test]
    fn batch_all_counts_p2_k2() {
        let s = Matrix::from_vec(4, 4, vec![1.0; 16]);
        let labels = [0usize, 0, 1, 1];
        let out = batch_triplets(&s, &labels, MiningStrategy::BatchAll, 0.3);
        assert_eq!(out.triplets.len(), 8);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let zero = LossWeights {
            identity: 0.0,
            center: 0.0,
            triplet: 0.0,
        };
        assert_eq!(total_loss(3.0, 4.0, 5.0, &zero), 0.0);
        let unit = LossWeights {
            identity: 1.0,
            center: 1.0,
            triplet: 1.0,
        };
        assert_eq!(total_loss(3.0, 4.0, 5.0, &unit), 12.0);
        let w = LossWeights::default();
        let expect = 3.0 + 5e-4 * 4.0 + 5.0;
        assert!((total_loss(3.0f64, 4.0, 5.0, &w) - expect).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_gradient_matches_finite_differences() {
        // composite of identity + center losses over shared globals
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, d, b) = (3, 4, 4);
        let head = IdentityHead::init(k, d, &mut rng);
        let centers = ClassCenters {
            centers: Matrix::gaussian(k, d, 1.0, &mut rng),
            rate: 0.5,
        };
        let labels = [0usize, 1, 2, 1];
        let weights = LossWeights::default();
        let globals = Matrix::gaussian(b, d, 1.0, &mut rng);

        let (_, id_grads) = identity_loss(&globals, &labels, &head).unwrap();
        let c = center_loss(&globals, &labels, &centers).unwrap();
        let analytic: Vec<f64> = id_grads
            .globals
            .as_slice()
            .iter()
            .zip(c.globals.as_slice())
            .map(|(&a, &b)| weights.identity * a + weights.center * b)
            .collect();

        let numeric = finite_diff_gradient(
            |v| {
                let g = Matrix::from_vec(b, d, v.to_vec());
                let (l_id, _) = identity_loss(&g, &labels, &head).unwrap();
                let l_c = center_loss(&g, &labels, &centers).unwrap().loss;
                Ok(total_loss(l_id, l_c, 0.0, &weights))
            },
            globals.as_slice(),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }
}
