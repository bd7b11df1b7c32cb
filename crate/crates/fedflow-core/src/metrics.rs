//! Confusion-matrix evaluation: accuracy, per-class and macro
//! precision/recall/F1.

use crate::flow::Subflow;
use crate::models::subflow_batch;
use crate::nn::Network;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{true_len} true labels vs {pred_len} predictions")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("confusion matrix is empty or malformed: {0}")]
    EmptyMatrix(String),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// Precision, recall, and F1 of one class (or their macro average).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Confusion matrix plus the derived scores. Rows are true classes, columns
/// predicted classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes.
    pub macro_avg: ClassMetrics,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Tallies `(true, predicted)` pairs into a `num_classes x num_classes`
/// count matrix.
pub fn confusion_matrix(
    true_labels: &[usize],
    predicted_labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>, MetricsError> {
    if true_labels.len() != predicted_labels.len() {
        return Err(MetricsError::LengthMismatch {
            true_len: true_labels.len(),
            pred_len: predicted_labels.len(),
        });
    }
    let mut matrix = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in true_labels.iter().zip(predicted_labels) {
        for label in [t, p] {
            if label >= num_classes {
                return Err(MetricsError::LabelOutOfRange { label, num_classes });
            }
        }
        matrix[t][p] += 1;
    }
    Ok(matrix)
}

/// Derives accuracy and per-class one-vs-rest precision/recall/F1 from a
/// confusion matrix. 0/0 ratios are defined as 0.
pub fn compute_metrics(confusion: &[Vec<usize>]) -> Result<Metrics, MetricsError> {
    let n = confusion.len();
    if n == 0 {
        return Err(MetricsError::EmptyMatrix("no classes".into()));
    }
    if confusion.iter().any(|row| row.len() != n) {
        return Err(MetricsError::EmptyMatrix("matrix is not square".into()));
    }
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix("no samples tallied".into()));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let trace: usize = (0..n).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(n);
    for (c, row) in confusion.iter().enumerate() {
        let tp = row[c];
        let fn_: usize = row.iter().enumerate().filter(|&(j, _)| j != c).map(|(_, v)| v).sum();
        let fp: usize = confusion.iter().enumerate().filter(|&(i, _)| i != c).map(|(_, r)| r[c]).sum();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 / (1.0 / precision + 1.0 / recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
    let macro_avg = ClassMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(Metrics {
        confusion: confusion.to_vec(),
        accuracy: trace as f64 / total as f64,
        per_class,
        macro_avg,
    })
}

/// Argmax class per row; ties resolve to the lowest index.
fn argmax_rows(data: &[f32], rows: usize, width: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let row = &data[r * width..(r + 1) * width];
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted class per subflow, batch-parallelized with a deterministic
/// final order.
pub fn predict_labels(
    classifier: &Network<f32>,
    subflows: &[&Subflow],
    num_classes: usize,
) -> Result<Vec<usize>, MetricsError> {
    const EVAL_BATCH: usize = 256;
    let batches: Vec<Result<Vec<usize>, MetricsError>> = subflows
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let out = classifier.forward(&subflow_batch(chunk))?;
            Ok(argmax_rows(out.data(), chunk.len(), num_classes))
        })
        .collect();
    let mut predictions = Vec::with_capacity(subflows.len());
    for b in batches {
        predictions.extend(b?);
    }
    Ok(predictions)
}

/// Evaluates a classifier on labeled subflows: argmax prediction per
/// subflow, tallied into a confusion matrix.
pub fn evaluate_model(
    classifier: &Network<f32>,
    test_set: &[(Subflow, usize)],
    num_classes: usize,
) -> Result<Metrics, MetricsError> {
    if test_set.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let subflows: Vec<&Subflow> = test_set.iter().map(|(s, _)| s).collect();
    let predictions = predict_labels(classifier, &subflows, num_classes)?;
    let true_labels: Vec<usize> = test_set.iter().map(|(_, l)| *l).collect();
    compute_metrics(&confusion_matrix(&true_labels, &predictions, num_classes)?)
}

/// Flow-level evaluation: subflow predictions are majority-voted per source
/// flow (ties to the lowest class index) and compared against the flow
/// label. Provided for reporting; the standard evaluation is per-subflow.
pub fn evaluate_flow_level(
    classifier: &Network<f32>,
    test_set: &[(Subflow, usize)],
    num_classes: usize,
) -> Result<Metrics, MetricsError> {
    if test_set.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let subflows: Vec<&Subflow> = test_set.iter().map(|(s, _)| s).collect();
    let predictions = predict_labels(classifier, &subflows, num_classes)?;
    let mut per_flow: std::collections::BTreeMap<&str, (usize, Vec<usize>)> =
        std::collections::BTreeMap::new();
    for ((subflow, label), pred) in test_set.iter().zip(&predictions) {
        let entry = per_flow
            .entry(subflow.source_flow_id.as_str())
            .or_insert_with(|| (*label, vec![0; num_classes]));
        entry.1[*pred] += 1;
    }
    let mut true_labels = Vec::with_capacity(per_flow.len());
    let mut voted = Vec::with_capacity(per_flow.len());
    for (_, (label, votes)) in per_flow {
        let mut best = 0usize;
        for (i, &v) in votes.iter().enumerate().skip(1) {
            if v > votes[best] {
                best = i;
            }
        }
        true_labels.push(label);
        voted.push(best);
    }
    compute_metrics(&confusion_matrix(&true_labels, &voted, num_classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{apply_params, build_retrain_model, ArchitectureId, ModelDims, ModelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = vec![0, 1, 2, 1, 0];
        let m = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(m, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let metrics = compute_metrics(&m).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
        for c in &metrics.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn empty_input_is_a_zero_matrix() {
        let m = confusion_matrix(&[], &[], 3).unwrap();
        assert_eq!(m, vec![vec![0; 3]; 3]);
        assert!(matches!(
            compute_metrics(&m),
            Err(MetricsError::EmptyMatrix(_))
        ));
    }

    #[test]
    fn hand_tallied_matrix() {
        let m = confusion_matrix(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2).unwrap();
        assert_eq!(m, vec![vec![1, 1], vec![1, 2]]);
    }

    #[test]
    fn worked_binary_example() {
        // TP=3, FP=1, FN=2, TN=4 with class 1 as positive.
        let confusion = vec![vec![4, 1], vec![2, 3]];
        let m = compute_metrics(&confusion).unwrap();
        assert!((m.accuracy - 0.7).abs() < 5e-5);
        assert!((m.per_class[1].precision - 0.75).abs() < 5e-5);
        assert!((m.per_class[1].recall - 0.6).abs() < 5e-5);
        assert!((m.per_class[1].f1 - 0.6667).abs() < 5e-5);
    }

    #[test]
    fn absent_class_has_zero_scores() {
        // Class 2 never occurs and is never predicted.
        let m = confusion_matrix(&[0, 1, 0], &[0, 1, 1], 3).unwrap();
        let metrics = compute_metrics(&m).unwrap();
        assert_eq!(metrics.per_class[2], ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0 });
    }

    #[test]
    fn length_mismatch_and_range_errors() {
        assert!(matches!(
            confusion_matrix(&[0, 1], &[0], 2),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion_matrix(&[0, 2], &[0, 1], 2),
            Err(MetricsError::LabelOutOfRange { label: 2, .. })
        ));
    }

    // Independent tally: per-class TP/FP/FN/TN counted pair-by-pair, metrics
    // from the four formulas directly.
    fn oracle(true_labels: &[usize], preds: &[usize], num_classes: usize) -> (f64, Vec<ClassMetrics>) {
        let total = true_labels.len();
        let mut correct = 0;
        for (t, p) in true_labels.iter().zip(preds) {
            if t == p {
                correct += 1;
            }
        }
        let mut per_class = Vec::new();
        for c in 0..num_classes {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (&t, &p) in true_labels.iter().zip(preds) {
                match (t == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            per_class.push(ClassMetrics { precision, recall, f1 });
        }
        (correct as f64 / total as f64, per_class)
    }

    #[test]
    fn matches_brute_force_tally_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let num_classes = 4;
        let true_labels: Vec<usize> =
            (0..1_000).map(|_| rng.random_range(0..num_classes)).collect();
        let preds: Vec<usize> =
            (0..1_000).map(|_| rng.random_range(0..num_classes)).collect();
        let metrics =
            compute_metrics(&confusion_matrix(&true_labels, &preds, num_classes).unwrap()).unwrap();
        let (acc, per_class) = oracle(&true_labels, &preds, num_classes);
        assert_eq!(metrics.accuracy, acc);
        for (a, b) in metrics.per_class.iter().zip(&per_class) {
            assert!((a.precision - b.precision).abs() < 1e-12);
            assert!((a.recall - b.recall).abs() < 1e-12);
            assert!((a.f1 - b.f1).abs() < 1e-12);
        }
        // Multi-class identity: accuracy equals the TP sum over the total.
        let tp_sum: usize = (0..num_classes).map(|c| metrics.confusion[c][c]).sum();
        assert_eq!(metrics.accuracy, tp_sum as f64 / 1_000.0);
        // F1 sits between precision and recall when both are positive.
        for c in &metrics.per_class {
            if c.precision > 0.0 && c.recall > 0.0 {
                assert!(c.f1 >= c.precision.min(c.recall) - 1e-12);
                assert!(c.f1 <= c.precision.max(c.recall) + 1e-12);
            }
        }
    }

    fn random_subflow(rng: &mut ChaCha8Rng, label: usize) -> Subflow {
        let len = 45;
        let mut values = Vec::with_capacity(len * 2);
        let mut t = 0.0f32;
        for _ in 0..len {
            values.push(rng.random::<f32>() * 2.0 - 1.0);
            t += rng.random::<f32>() * 0.01;
            values.push(t.min(1.0));
        }
        Subflow::new(values, len, format!("f{}", rng.random::<u32>()), Some(label))
    }

    #[test]
    fn zero_head_classifier_predicts_class_zero() {
        let dims = ModelDims {
            conv1_channels: 4,
            conv2_channels: 6,
            hidden: 16,
            retrain_hidden: 8,
            ..ModelDims::default()
        };
        let mut net = build_retrain_model(3, 4, &dims).unwrap();
        let mut params = ModelParams::from_network(ArchitectureId::Retrain, &net);
        for e in &mut params.entries {
            if e.name.starts_with("linear3") {
                for v in e.tensor.data_mut() {
                    *v = 0.0;
                }
            }
        }
        apply_params(&mut net, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let test: Vec<(Subflow, usize)> =
            (0..40).map(|i| (random_subflow(&mut rng, i % 4), i % 4)).collect();
        let metrics = evaluate_model(&net, &test, 4).unwrap();
        // Equal logits everywhere: every prediction ties to class 0, so
        // accuracy equals the prevalence of class 0.
        assert_eq!(metrics.accuracy, 0.25);
        for row in 0..4 {
            assert_eq!(metrics.confusion[row][0], 10);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let dims = ModelDims {
            conv1_channels: 4,
            conv2_channels: 6,
            hidden: 16,
            retrain_hidden: 8,
            ..ModelDims::default()
        };
        let net = build_retrain_model(5, 3, &dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let test: Vec<(Subflow, usize)> =
            (0..300).map(|i| (random_subflow(&mut rng, i % 3), i % 3)).collect();
        let a = evaluate_model(&net, &test, 3).unwrap();
        let b = evaluate_model(&net, &test, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total(), 300);
    }

    #[test]
    fn flow_level_majority_vote() {
        let dims = ModelDims {
            conv1_channels: 4,
            conv2_channels: 6,
            hidden: 16,
            retrain_hidden: 8,
            ..ModelDims::default()
        };
        let net = build_retrain_model(5, 2, &dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut test = Vec::new();
        for flow_idx in 0..6 {
            let label = flow_idx % 2;
            for _ in 0..5 {
                let mut s = random_subflow(&mut rng, label);
                s.source_flow_id = format!("flow-{flow_idx}");
                test.push((s, label));
            }
        }
        let flow_metrics = evaluate_flow_level(&net, &test, 2).unwrap();
        assert_eq!(flow_metrics.total(), 6, "one vote per source flow");
    }
}
