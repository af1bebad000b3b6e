//! Binary-classification evaluation: recall, precision, macro-F1, rank AUC,
//! confusion counts.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("labels and {0} have different lengths")]
    LengthMismatch(&'static str),
    #[error("AUC undefined: class {0} is absent")]
    ClassAbsent(u8),
}

/// Evaluation summary. `recall` is fraud-class (label 1) recall.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall: f64,
    pub precision: f64,
    pub macro_f1: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl EvalReport {
    /// Build from labels, hard predictions, and ranking scores.
    pub fn compute(labels: &[u8], predictions: &[u8], scores: &[f64]) -> Result<Self, MetricsError> {
        if predictions.len() != labels.len() {
            return Err(MetricsError::LengthMismatch("predictions"));
        }
        let (tp, fp, tn, fn_) = confusion(labels, predictions);
        Ok(Self {
            recall: recall_from_counts(tp, fn_),
            precision: if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 },
            macro_f1: macro_f1(labels, predictions)?,
            auc: auc(labels, scores)?,
            tp,
            fp,
            tn,
            fn_,
        })
    }

    /// Flat `key=value` block, one line per field, fixed key order.
    pub fn to_kv_block(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "recall={}", self.recall);
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "macro_f1={}", self.macro_f1);
        let _ = writeln!(s, "auc={}", self.auc);
        let _ = writeln!(s, "tp={}", self.tp);
        let _ = writeln!(s, "fp={}", self.fp);
        let _ = writeln!(s, "tn={}", self.tn);
        let _ = writeln!(s, "fn={}", self.fn_);
        s
    }

    pub const CSV_HEADER: &'static str = "recall,precision,macro_f1,auc,tp,fp,tn,fn";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.recall, self.precision, self.macro_f1, self.auc, self.tp, self.fp, self.tn, self.fn_
        )
    }
}

fn confusion(labels: &[u8], predictions: &[u8]) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fn_ += 1,
            _ => panic!("labels and predictions must be 0 or 1"),
        }
    }
    (tp, fp, tn, fn_)
}

fn recall_from_counts(tp: usize, fn_: usize) -> f64 {
    // No positive samples: recall reported as 0 by convention.
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

/// Fraud-class recall TP / (TP + FN).
pub fn recall(labels: &[u8], predictions: &[u8]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch("predictions"));
    }
    let (tp, _, _, fn_) = confusion(labels, predictions);
    Ok(recall_from_counts(tp, fn_))
}

/// Unweighted mean of the two per-class F1 scores. A class with zero
/// precision + recall contributes an F1 of 0.
pub fn macro_f1(labels: &[u8], predictions: &[u8]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch("predictions"));
    }
    let (tp, fp, tn, fn_) = confusion(labels, predictions);
    let f1 = |tp: usize, fp: usize, fn_: usize| -> f64 {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    // Class 0 swaps the roles: its true positives are the true negatives.
    Ok((f1(tp, fp, fn_) + f1(tn, fn_, fp)) / 2.0)
}

/// Rank AUC via the Mann-Whitney statistic: P(score_pos > score_neg) plus
/// half the tie probability, computed from midranks in O(n log n).
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch("scores"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(MetricsError::ClassAbsent(1));
    }
    if neg == 0 {
        return Err(MetricsError::ClassAbsent(0));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks for tied scores.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - pos as f64 * (pos as f64 + 1.0) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recall_definition() {
        // TP = 3, FN = 1.
        let labels = [1, 1, 1, 1, 0, 0];
        let preds = [1, 1, 1, 0, 0, 1];
        assert_eq!(recall(&labels, &preds).unwrap(), 0.75);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [1, 0, 1, 0];
        assert_eq!(recall(&labels, &labels).unwrap(), 1.0);
        assert_eq!(macro_f1(&labels, &labels).unwrap(), 1.0);
        let scores = [0.9, 0.1, 0.8, 0.2];
        assert_eq!(auc(&labels, &scores).unwrap(), 1.0);
    }

    #[test]
    fn recall_matches_counting_oracle_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let labels: Vec<u8> = (0..200).map(|_| rng.gen_range(0..2) as u8).collect();
            let preds: Vec<u8> = (0..200).map(|_| rng.gen_range(0..2) as u8).collect();
            let (mut tp, mut fn_) = (0.0, 0.0);
            for (&y, &p) in labels.iter().zip(&preds) {
                if y == 1 && p == 1 {
                    tp += 1.0;
                }
                if y == 1 && p == 0 {
                    fn_ += 1.0;
                }
            }
            let expect = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
            assert_eq!(recall(&labels, &preds).unwrap(), expect);
        }
    }

    #[test]
    fn all_ties_give_half_auc() {
        let labels = [1, 0, 1, 0, 0];
        let scores = [0.5; 5];
        assert_eq!(auc(&labels, &scores).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let labels: Vec<u8> = (0..100).map(|_| rng.gen_range(0..2) as u8).collect();
            if labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1) {
                continue;
            }
            // Coarse grid to force ties.
            let scores: Vec<f64> = (0..100).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let got = auc(&labels, &scores).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..100 {
                for j in 0..100 {
                    if labels[i] == 1 && labels[j] == 0 {
                        den += 1.0;
                        if scores[i] > scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            assert!((got - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_errors_when_a_class_is_absent() {
        assert_eq!(
            auc(&[1, 1], &[0.1, 0.2]).unwrap_err(),
            MetricsError::ClassAbsent(0)
        );
        assert_eq!(
            auc(&[0, 0], &[0.1, 0.2]).unwrap_err(),
            MetricsError::ClassAbsent(1)
        );
    }

    #[test]
    fn macro_f1_hand_example() {
        // 8 samples, 2 fraud, all predicted fraud: F1_pos = 0.4, F1_neg = 0.
        let labels = [1, 1, 0, 0, 0, 0, 0, 0];
        let preds = [1; 8];
        assert!((macro_f1(&labels, &preds).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let labels: Vec<u8> = (0..150).map(|_| rng.gen_range(0..2) as u8).collect();
            let preds: Vec<u8> = (0..150).map(|_| rng.gen_range(0..2) as u8).collect();
            let f1_for = |class: u8| -> f64 {
                let tp = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(&y, &p)| y == class && p == class)
                    .count() as f64;
                let pred_pos = preds.iter().filter(|&&p| p == class).count() as f64;
                let actual_pos = labels.iter().filter(|&&y| y == class).count() as f64;
                let precision = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
                let recall = if actual_pos > 0.0 { tp / actual_pos } else { 0.0 };
                if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                }
            };
            let expect = (f1_for(1) + f1_for(0)) / 2.0;
            assert!((macro_f1(&labels, &preds).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(recall(&[1, 0], &[1]).is_err());
        assert!(macro_f1(&[1, 0], &[1]).is_err());
        assert!(auc(&[1, 0], &[0.5]).is_err());
    }

    #[test]
    fn report_block_has_exact_keys() {
        let report = EvalReport::compute(&[1, 0, 1], &[1, 0, 0], &[0.8, 0.2, 0.4]).unwrap();
        let block = report.to_kv_block();
        let keys: Vec<&str> = block.lines().map(|l| l.split('=').next().unwrap()).collect();
        assert_eq!(keys, vec!["recall", "precision", "macro_f1", "auc", "tp", "fp", "tn", "fn"]);
    }
}
