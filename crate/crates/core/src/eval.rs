//! Classification metrics: Top-k accuracy, micro-averaged ROC, per-class
//! tables and rank correlation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DrnaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: usize,
    pub name: String,
    pub samples: usize,
    pub correct: usize,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_class: String,
    pub predicted: String,
    pub count: usize,
}

/// Evaluation results of one model on one split.
///
/// Serialized as JSON with the field names below; `roc` is a list of
/// `[fpr, tpr]` pairs from `(0, 0)` to `(1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub auc: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub roc: Vec<(f64, f64)>,
    /// Most frequent off-diagonal (true, predicted) pairs.
    pub confusions: Vec<Confusion>,
    pub config_echo: String,
}

const CONFUSIONS_KEPT: usize = 10;

fn check_inputs(predictions: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if predictions.is_empty() {
        return Err(DrnaError::Domain("no predictions to evaluate".into()));
    }
    if predictions.len() != labels.len() {
        return Err(DrnaError::Domain(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = predictions[0].len();
    for (p, &y) in predictions.iter().zip(labels) {
        if p.len() != n || y >= n {
            return Err(DrnaError::Domain(format!(
                "prediction of {} classes inconsistent with {n} classes or label {y}",
                p.len()
            )));
        }
    }
    Ok(n)
}

/// Number of classes ranked ahead of `label` (higher score, or equal score
/// and lower index).
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

fn argmax(scores: &[f64]) -> usize {
    (0..scores.len())
        .find(|&j| rank_of(scores, j) == 0)
        .unwrap_or(0)
}

pub fn topk_accuracy(predictions: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    check_inputs(predictions, labels)?;
    if k == 0 {
        return Err(DrnaError::Domain("k must be at least 1".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| rank_of(p, y) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Micro-averaged one-vs-rest ROC: every (sample, class) score is a binary
/// decision, thresholds at every distinct score.
pub fn roc_curve(scores: &[Vec<f64>], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    let n = check_inputs(scores, labels)?;
    let mut entries: Vec<(f64, bool)> = Vec::with_capacity(scores.len() * n);
    for (s, &y) in scores.iter().zip(labels) {
        for (j, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                return Err(DrnaError::Domain("non-finite score".into()));
            }
            entries.push((v, j == y));
        }
    }
    let pos = entries.iter().filter(|e| e.1).count();
    let neg = entries.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DrnaError::Domain("ROC needs both positive and negative entries".into()));
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < entries.len() {
        let t = entries[i].0;
        while i < entries.len() && entries[i].0 == t {
            if entries[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a curve of `(x, y)` points sorted by `x`.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Kendall's τ-a; tied pairs count as neither concordant nor discordant.
/// `None` for fewer than two items.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let x = (a[i] - a[j]).partial_cmp(&0.0).unwrap_or(Ordering::Equal) as i64;
            let y = (b[i] - b[j]).partial_cmp(&0.0).unwrap_or(Ordering::Equal) as i64;
            s += x * y;
        }
    }
    Some(s as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestWorst {
    pub best: Vec<ClassAccuracy>,
    /// Lowest accuracy first.
    pub worst: Vec<ClassAccuracy>,
}

/// `n` best and `n` worst classes by Top-1; the order is accuracy descending
/// then name ascending, and the worst are read from its tail.
pub fn best_worst_classes(report: &MetricsReport, n: usize) -> BestWorst {
    let mut rows = report.per_class.clone();
    rows.sort_by(|a, b| {
        b.top1
            .partial_cmp(&a.top1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    let n = n.min(rows.len());
    let best = rows[..n].to_vec();
    let worst = rows[rows.len() - n..].iter().rev().cloned().collect();
    BestWorst { best, worst }
}

impl MetricsReport {
    pub fn build(
        method: &str,
        predictions: &[Vec<f64>],
        labels: &[usize],
        class_names: &[String],
        config_echo: &str,
    ) -> Result<Self> {
        let n = check_inputs(predictions, labels)?;
        if class_names.len() != n {
            return Err(DrnaError::Domain(format!(
                "{} class names for {n}-way predictions",
                class_names.len()
            )));
        }
        let top1 = topk_accuracy(predictions, labels, 1)?;
        let top5 = topk_accuracy(predictions, labels, 5)?;
        let roc = if n >= 2 { roc_curve(predictions, labels)? } else { vec![(0.0, 0.0), (1.0, 1.0)] };
        let mut samples = vec![0usize; n];
        let mut correct = vec![0usize; n];
        let mut confusion: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (p, &y) in predictions.iter().zip(labels) {
            samples[y] += 1;
            let guess = argmax(p);
            if guess == y {
                correct[y] += 1;
            } else {
                *confusion.entry((y, guess)).or_default() += 1;
            }
        }
        let per_class = (0..n)
            .filter(|&c| samples[c] > 0)
            .map(|c| ClassAccuracy {
                class_id: c,
                name: class_names[c].clone(),
                samples: samples[c],
                correct: correct[c],
                top1: correct[c] as f64 / samples[c] as f64,
            })
            .collect();
        let mut pairs: Vec<((usize, usize), usize)> = confusion.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let confusions = pairs
            .into_iter()
            .take(CONFUSIONS_KEPT)
            .map(|((t, p), count)| Confusion {
                true_class: class_names[t].clone(),
                predicted: class_names[p].clone(),
                count,
            })
            .collect();
        Ok(MetricsReport {
            method: method.to_string(),
            samples: labels.len(),
            top1,
            top5,
            auc: auc(&roc),
            per_class,
            roc,
            confusions,
            config_echo: config_echo.to_string(),
        })
    }

    /// ROC points as tab-separated `fpr<TAB>tpr` lines with a header.
    pub fn roc_tsv(&self) -> String {
        let mut out = String::from("fpr\ttpr\n");
        for (x, y) in &self.roc {
            out.push_str(&format!("{x}\t{y}\n"));
        }
        out
    }
}

/// Accuracy table with percentage columns.
pub fn accuracy_table(rows: &[(&str, f64, f64)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$} | Top-1 Acc. | Top-5 Acc.\n", "Method");
    out.push_str(&format!("{}-+------------+-----------\n", "-".repeat(width)));
    for (name, t1, t5) in rows {
        out.push_str(&format!("{name:<width$} | {:>10.2} | {:>10.2}\n", t1 * 100.0, t5 * 100.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Mann-Whitney style AUC: fraction of (positive, negative) pairs ordered
    /// correctly, ties counting half.
    fn pairwise_auc(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (s, &y) in scores.iter().zip(labels) {
            for (j, &v) in s.iter().enumerate() {
                if j == y {
                    pos.push(v)
                } else {
                    neg.push(v)
                }
            }
        }
        let mut acc = 0.0;
        for &p in &pos {
            for &q in &neg {
                acc += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    fn one_hot(n: usize, c: usize) -> Vec<f64> {
        (0..n).map(|j| if j == c { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn topk_examples() {
        let preds: Vec<Vec<f64>> = (0..4).map(|c| one_hot(4, c)).collect();
        let labels = vec![0, 1, 2, 3];
        for k in 1..=4 {
            assert_eq!(topk_accuracy(&preds, &labels, k).unwrap(), 1.0);
        }
        let preds = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6], vec![0.5, 0.4, 0.1]];
        let labels = vec![0, 2, 1];
        assert!((topk_accuracy(&preds, &labels, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(topk_accuracy(&preds, &labels, 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&preds, &labels, 3).unwrap(), 1.0);
        assert!(topk_accuracy(&[], &[], 1).is_err());
    }

    #[test]
    fn topk_ties_go_to_lower_index() {
        let preds = vec![vec![0.5, 0.5]];
        assert_eq!(topk_accuracy(&preds, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&preds, &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn perfect_classifier_roc() {
        let preds: Vec<Vec<f64>> = (0..6).map(|i| one_hot(3, i % 3)).collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let roc = roc_curve(&preds, &labels).unwrap();
        assert!(roc.contains(&(0.0, 1.0)));
        assert_eq!(auc(&roc), 1.0);
    }

    #[test]
    fn single_column_roc_is_error() {
        assert!(roc_curve(&[vec![1.0], vec![1.0]], &[0, 0]).is_err());
    }

    #[test]
    fn random_scores_auc_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scores: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let a: f64 = rng.gen();
                vec![a, 1.0 - a]
            })
            .collect();
        let labels: Vec<usize> = (0..10_000).map(|i| i % 2).collect();
        let a = auc(&roc_curve(&scores, &labels).unwrap());
        assert!((a - 0.5).abs() < 0.05, "{a}");
    }

    #[test]
    fn reversed_scores_complement_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
        let labels: Vec<usize> = (0..200).map(|i| (i * 7) % 4).collect();
        let rev: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|v| 1.0 - v).collect()).collect();
        let a = auc(&roc_curve(&scores, &labels).unwrap());
        let b = auc(&roc_curve(&rev, &labels).unwrap());
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3]), Some(1.0));
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[0.3, 0.2, 0.1]), Some(-1.0));
        assert_eq!(kendall_tau(&[1.0], &[1.0]), None);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]), Some(4.0 / 6.0));
    }

    fn report_with(acc: &[(&str, f64)]) -> MetricsReport {
        MetricsReport {
            method: "x".into(),
            samples: 0,
            top1: 0.0,
            top5: 0.0,
            auc: 0.0,
            per_class: acc
                .iter()
                .enumerate()
                .map(|(i, (n, a))| ClassAccuracy {
                    class_id: i,
                    name: n.to_string(),
                    samples: 10,
                    correct: (a * 10.0) as usize,
                    top1: *a,
                })
                .collect(),
            roc: vec![],
            confusions: vec![],
            config_echo: String::new(),
        }
    }

    #[test]
    fn best_worst_equal_accuracy_uses_names() {
        let names = ["d", "a", "c", "b", "e"];
        let r = report_with(&names.iter().map(|n| (*n, 0.5)).collect::<Vec<_>>());
        let bw = best_worst_classes(&r, 2);
        assert_eq!(bw.best.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(bw.worst.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), vec!["e", "d"]);
        assert_eq!(best_worst_classes(&r, 50).best.len(), 5);
    }

    #[test]
    fn best_worst_matches_sort_oracle() {
        let acc = [0.3, 0.9, 0.1, 0.9, 0.5, 0.7, 0.0, 0.3, 1.0, 0.6];
        let names: Vec<String> = (0..10).map(|i| format!("class{i}")).collect();
        let r = report_with(&names.iter().map(|n| n.as_str()).zip(acc).collect::<Vec<_>>());
        let bw = best_worst_classes(&r, 5);
        let mut idx: Vec<usize> = (0..10).collect();
        idx.sort_by(|&a, &b| acc[b].partial_cmp(&acc[a]).unwrap().then(names[a].cmp(&names[b])));
        let best: Vec<usize> = bw.best.iter().map(|c| c.class_id).collect();
        let worst: Vec<usize> = bw.worst.iter().map(|c| c.class_id).collect();
        assert_eq!(best, idx[..5].to_vec());
        assert_eq!(worst, idx[5..].iter().rev().copied().collect::<Vec<_>>());
    }

    #[test]
    fn report_build() {
        let preds = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6], vec![0.5, 0.4, 0.1]];
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = MetricsReport::build("drna", &preds, &[0, 2, 1], &names, "seed = 0\n").unwrap();
        assert!(r.top5 >= r.top1);
        assert_eq!(r.per_class.len(), 3);
        assert_eq!(r.confusions.len(), 1);
        assert_eq!(r.confusions[0].true_class, "b");
        assert!(r.roc_tsv().starts_with("fpr\ttpr\n0\t0\n"));
        let again = MetricsReport::build("drna", &preds, &[0, 2, 1], &names, "seed = 0\n").unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
        let table = accuracy_table(&[("DRNA-Net", r.top1, r.top5)]);
        assert!(table.contains("Top-1 Acc.") && table.contains("DRNA-Net"));
    }

    proptest! {
        #[test]
        fn trapezoid_matches_pairwise(
            raw in prop::collection::vec(prop::collection::vec(0u8..6, 3), 2..20),
            lab in prop::collection::vec(0usize..3, 20),
        ) {
            let scores: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|&v| v as f64 / 5.0).collect()).collect();
            let labels = &lab[..scores.len()];
            let roc = roc_curve(&scores, labels).unwrap();
            prop_assert!((auc(&roc) - pairwise_auc(&scores, labels)).abs() < 1e-6);
            prop_assert_eq!(roc[0], (0.0, 0.0));
            prop_assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
            for w in roc.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn topk_monotone_in_k(
            raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..30),
            lab in prop::collection::vec(0usize..6, 30),
        ) {
            let labels = &lab[..raw.len()];
            let mut prev = 0.0;
            for k in 1..=6 {
                let a = topk_accuracy(&raw, labels, k).unwrap();
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }
}
