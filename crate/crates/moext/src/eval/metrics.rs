//! Confusion-matrix metrics: UAR, UF1, and overall accuracy.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        if c < 2 {
            return Err(Error::Config(format!("need >= 2 classes, got {c}")));
        }
        Ok(Self {
            class_names,
            counts: Array2::zeros((c, c)),
        })
    }

    pub fn from_counts(class_names: Vec<String>, counts: Array2<u64>) -> Result<Self> {
        if counts.dim() != (class_names.len(), class_names.len()) {
            return Err(Error::Shape(format!(
                "{}x{} counts for {} classes",
                counts.dim().0,
                counts.dim().1,
                class_names.len()
            )));
        }
        Ok(Self {
            class_names,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn record(&mut self, true_idx: usize, pred_idx: usize) {
        self.counts[[true_idx, pred_idx]] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Sum another matrix into this one (fold aggregation).
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_names != other.class_names {
            return Err(Error::Shape("class name mismatch in matrix sum".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// Per-class one-vs-rest (TP, FP, FN) counts.
    pub fn class_counts(&self, i: usize) -> (u64, u64, u64) {
        let tp = self.counts[[i, i]];
        let fp = self.counts.column(i).sum() - tp;
        let fn_ = self.counts.row(i).sum() - tp;
        (tp, fp, fn_)
    }
}

/// Unweighted average recall. Classes with no true samples are excluded
/// from the average with a warning naming the effective class count.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    let mut acc = 0.0;
    let mut effective = 0usize;
    for i in 0..cm.num_classes() {
        let (tp, _, fn_) = cm.class_counts(i);
        if tp + fn_ == 0 {
            log::warn!("uar: class {:?} has no true samples, excluded", cm.class_names[i]);
            continue;
        }
        acc += tp as f64 / (tp + fn_) as f64;
        effective += 1;
    }
    if effective == 0 {
        return Err(Error::Empty("uar of an empty matrix".into()));
    }
    if effective < cm.num_classes() {
        log::warn!("uar averaged over {effective} of {} classes", cm.num_classes());
    }
    Ok(acc / effective as f64)
}

/// Unweighted (macro) F1. Classes absent from both truth and prediction
/// (TP = FP = FN = 0) are excluded from the average with a warning.
pub fn uf1(cm: &ConfusionMatrix) -> Result<f64> {
    let mut acc = 0.0;
    let mut effective = 0usize;
    for i in 0..cm.num_classes() {
        let (tp, fp, fn_) = cm.class_counts(i);
        if tp + fp + fn_ == 0 {
            log::warn!("uf1: class {:?} absent, excluded", cm.class_names[i]);
            continue;
        }
        acc += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        effective += 1;
    }
    if effective == 0 {
        return Err(Error::Empty("uf1 of an empty matrix".into()));
    }
    Ok(acc / effective as f64)
}

/// Overall accuracy: fraction of correctly classified samples.
pub fn acc(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Empty("acc of an empty matrix".into()));
    }
    let trace: u64 = (0..cm.num_classes()).map(|i| cm.counts[[i, i]]).sum();
    Ok(trace as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("class{i}")).collect()
    }

    fn cm(counts: Array2<u64>) -> ConfusionMatrix {
        let c = counts.dim().0;
        ConfusionMatrix::from_counts(names(c), counts).unwrap()
    }

    #[test]
    fn perfect_diagonal_scores_one() {
        let m = cm(array![[3, 0], [0, 4]]);
        assert_eq!(uar(&m).unwrap(), 1.0);
        assert_eq!(uf1(&m).unwrap(), 1.0);
        assert_eq!(acc(&m).unwrap(), 1.0);
    }

    #[test]
    fn balanced_confusion_gives_half_uar() {
        let m = cm(array![[1, 1], [1, 1]]);
        assert_eq!(uar(&m).unwrap(), 0.5);
    }

    #[test]
    fn hand_computed_uf1_and_acc() {
        let m = cm(array![[2, 0], [1, 1]]);
        let expected_uf1 = (0.8 + 2.0 / 3.0) / 2.0;
        assert!((uf1(&m).unwrap() - expected_uf1).abs() < 1e-15);
        assert_eq!(acc(&m).unwrap(), 0.75);
    }

    #[test]
    fn all_wrong_two_class_acc_is_zero() {
        let m = cm(array![[0, 3], [3, 0]]);
        assert_eq!(acc(&m).unwrap(), 0.0);
    }

    #[test]
    fn class_without_true_samples_is_excluded_from_uar() {
        let m = cm(array![[2, 0, 0], [1, 1, 0], [0, 0, 0]]);
        // Recall: class0 = 1.0, class1 = 0.5; class2 excluded.
        assert!((uar(&m).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_errors() {
        let m = cm(Array2::zeros((2, 2)));
        assert!(acc(&m).is_err());
        assert!(uar(&m).is_err());
        assert!(uf1(&m).is_err());
    }

    #[test]
    fn metrics_invariant_under_simultaneous_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = rng.gen_range(2..=5);
            let counts = Array2::from_shape_simple_fn((c, c), || rng.gen_range(0..20u64));
            let m = cm(counts.clone());
            // Reverse-order permutation of rows and columns together.
            let permuted =
                Array2::from_shape_fn((c, c), |(i, j)| counts[[c - 1 - i, c - 1 - j]]);
            let names_rev: Vec<String> = (0..c).rev().map(|i| format!("class{i}")).collect();
            let mp = ConfusionMatrix::from_counts(names_rev, permuted).unwrap();
            if m.total() == 0 {
                continue;
            }
            assert!((uar(&m).unwrap() - uar(&mp).unwrap()).abs() < 1e-12);
            assert!((uf1(&m).unwrap() - uf1(&mp).unwrap()).abs() < 1e-12);
            assert!((acc(&m).unwrap() - acc(&mp).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_sum_differs_from_mean_of_folds() {
        let a = cm(array![[5, 0], [0, 1]]);
        let b = cm(array![[0, 1], [1, 5]]);
        let mut total = a.clone();
        total.add(&b).unwrap();
        let summed = uf1(&total).unwrap();
        let mean = (uf1(&a).unwrap() + uf1(&b).unwrap()) / 2.0;
        assert!((summed - mean).abs() > 1e-6);
    }
}
