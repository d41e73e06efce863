//! Teacher: region confidences supervise navigator informativeness.

use std::cmp::Ordering;

use crate::error::{DrnaError, Result};
use crate::geometry::ScoredRegion;
use crate::scalar::{neg_log_clamped, Scalar};

/// Informativeness and confidence of the top-M regions of one image, plus the
/// full-image confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingBatch<T> {
    pub informativeness: Vec<T>,
    pub confidence: Vec<T>,
    pub full_confidence: T,
    pub true_class: usize,
}

impl<T: Scalar> RankingBatch<T> {
    pub fn new(informativeness: Vec<T>, confidence: Vec<T>, full_confidence: T, true_class: usize) -> Result<Self> {
        if informativeness.is_empty() || informativeness.len() != confidence.len() {
            return Err(DrnaError::Domain(format!(
                "ranking batch needs equal non-empty lists, got {} and {}",
                informativeness.len(),
                confidence.len()
            )));
        }
        Ok(RankingBatch {
            informativeness,
            confidence,
            full_confidence,
            true_class,
        })
    }
}

/// Pairwise hinge ranking loss and its gradient w.r.t. informativeness.
///
/// Every ordered pair with `C_i < C_j` contributes `max(1 - (I_j - I_i), 0)`.
/// Confidences are constants here.
pub fn ranking_loss_with_grad<T: Scalar>(informativeness: &[T], confidence: &[T]) -> (T, Vec<T>) {
    let m = informativeness.len();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); m];
    for i in 0..m {
        for j in 0..m {
            if confidence[i] < confidence[j] {
                let slack = T::one() - (informativeness[j] - informativeness[i]);
                if slack > T::zero() {
                    loss = loss + slack;
                    grad[j] = grad[j] - T::one();
                    grad[i] = grad[i] + T::one();
                }
            }
        }
    }
    (loss, grad)
}

pub fn ranking_loss<T: Scalar>(batch: &RankingBatch<T>) -> T {
    ranking_loss_with_grad(&batch.informativeness, &batch.confidence).0
}

/// `-Σ log C(R_i) - log C(X)` with clamped logs.
pub fn teacher_loss<T: Scalar>(batch: &RankingBatch<T>) -> T {
    batch
        .confidence
        .iter()
        .chain(std::iter::once(&batch.full_confidence))
        .map(|&c| neg_log_clamped(c).0)
        .sum()
}

/// The `k` most confident regions, descending; ties go to the earlier region.
/// Takes everything when fewer than `k` are available.
pub fn select_top_k(regions: &[ScoredRegion], k: usize) -> Result<Vec<ScoredRegion>> {
    if k == 0 {
        return Err(DrnaError::config("top_k must be at least 1"));
    }
    let conf: Vec<f64> = regions
        .iter()
        .map(|r| {
            r.confidence
                .ok_or_else(|| DrnaError::Domain("region has no teacher confidence".into()))
        })
        .collect::<Result<_>>()?;
    Ok(confidence_order(&conf).into_iter().take(k).map(|i| regions[i]).collect())
}

/// Positions sorted by descending confidence, earlier position first on ties.
pub fn confidence_order<T: Scalar>(confidence: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| {
        confidence[b]
            .partial_cmp(&confidence[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxRegion;
    use proptest::prelude::*;

    fn batch(i: &[f64], c: &[f64], cx: f64) -> RankingBatch<f64> {
        RankingBatch::new(i.to_vec(), c.to_vec(), cx, 0).unwrap()
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(ranking_loss(&batch(&[0.3], &[0.5], 0.5)), 0.0);
        assert!((ranking_loss(&batch(&[0.5, 0.3], &[0.2, 0.8], 0.5)) - 1.2).abs() < 1e-15);
        // Margins of at least one saturate the hinge.
        assert_eq!(ranking_loss(&batch(&[0.0, 1.0, 2.5], &[0.1, 0.2, 0.3], 0.5)), 0.0);
        // Equal confidences contribute nothing.
        assert_eq!(ranking_loss(&batch(&[5.0, -5.0], &[0.4, 0.4], 0.5)), 0.0);
    }

    #[test]
    fn teacher_examples() {
        let l = teacher_loss(&batch(&[0.0, 0.0], &[0.5, 0.5], 0.25));
        assert!((l - (2.0 * 2f64.ln() + 4f64.ln())).abs() < 1e-12);
        assert!((l - 2.7726).abs() < 1e-4);
        // clamp bounds 1 to 1 - 1e-7
        assert!(teacher_loss(&batch(&[0.0, 0.0], &[1.0, 1.0], 1.0)) < 1e-6);
        assert!(teacher_loss(&batch(&[0.0], &[0.0], 0.0)).is_finite());
    }

    #[test]
    fn top_k_by_confidence() {
        let regions: Vec<ScoredRegion> = [0.3, 0.9, 0.1, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut r = ScoredRegion::new(BoxRegion::full(4.0, 4.0), 1.0 - i as f64, i);
                r.confidence = Some(c);
                r
            })
            .collect();
        let top = select_top_k(&regions, 2).unwrap();
        assert_eq!(top.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 3]);
        let all = select_top_k(&regions, 4).unwrap();
        assert_eq!(all.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 3, 0, 2]);
        assert_eq!(select_top_k(&regions, 9).unwrap().len(), 4);
        assert!(select_top_k(&regions, 0).is_err());
    }

    proptest! {
        #[test]
        fn select_top_k_matches_sort(conf in prop::collection::vec(0u8..6, 1..12), k in 1usize..12) {
            let regions: Vec<ScoredRegion> = conf.iter().enumerate().map(|(i, &c)| {
                let mut r = ScoredRegion::new(BoxRegion::full(1.0, 1.0), 0.0, i);
                r.confidence = Some(c as f64 / 5.0);
                r
            }).collect();
            let mut keyed: Vec<(i64, usize)> = conf.iter().enumerate().map(|(i, &c)| (-(c as i64), i)).collect();
            keyed.sort();
            let want: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
            let got: Vec<usize> = select_top_k(&regions, k).unwrap().iter().map(|r| r.index).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn ranking_depends_only_on_confidence_order(
            inf in prop::collection::vec(-3.0f64..3.0, 1..7),
            conf in prop::collection::vec(0.01f64..0.99, 7),
        ) {
            let c = &conf[..inf.len()];
            // A strictly increasing transform preserves every comparison.
            let squashed: Vec<f64> = c.iter().map(|v| v.powi(3) * 0.5 + 0.1).collect();
            prop_assert_eq!(ranking_loss_with_grad(&inf, c).0, ranking_loss_with_grad(&inf, &squashed).0);
        }

        #[test]
        fn ranking_subgradient_matches_finite_differences(
            inf in prop::collection::vec(-3.0f64..3.0, 2..6),
            conf in prop::collection::vec(0.01f64..0.99, 6),
        ) {
            let c = &conf[..inf.len()];
            let (_, g) = ranking_loss_with_grad(&inf, c);
            let h = 1e-7;
            // Skip points within h of a hinge kink.
            let near_kink = (0..inf.len()).any(|i| (0..inf.len()).any(|j| {
                c[i] < c[j] && (1.0 - (inf[j] - inf[i])).abs() < 1e-5
            }));
            prop_assume!(!near_kink);
            for k in 0..inf.len() {
                let mut p = inf.clone(); p[k] += h;
                let mut m = inf.clone(); m[k] -= h;
                let num = (ranking_loss_with_grad(&p, c).0 - ranking_loss_with_grad(&m, c).0) / (2.0 * h);
                prop_assert!((num - g[k]).abs() < 1e-6);
            }
        }
    }
}
