//! Evaluation arithmetic: confusion matrices, per-class precision / recall /
//! F1 with macro averages, and the manual-vs-automated efficiency gain.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("truth and prediction lists differ in length ({truths} vs {preds})")]
    LengthMismatch { truths: usize, preds: usize },
    #[error("label {label} is outside 0..{k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("confusion matrix is empty")]
    EmptyEvaluation,
    #[error("automated time {automated}s exceeds manual time {manual}s")]
    NegativeGain { manual: f64, automated: f64 },
    #[error("manual time must be positive and finite, got {0}")]
    InvalidManualTime(f64),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != k * k {
            return Err(MetricsError::LengthMismatch { truths: k * k, preds: counts.len() });
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<(), MetricsError> {
        for label in [truth, pred] {
            if label >= self.k {
                return Err(MetricsError::LabelOutOfRange { label, k: self.k });
            }
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.k.max(1))
    }
}

pub fn confusion_matrix(truths: &[usize], preds: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truths.len() != preds.len() {
        return Err(MetricsError::LengthMismatch { truths: truths.len(), preds: preds.len() });
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truths.iter().zip(preds) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when any of the three rates was a 0/0 defined as zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub total: u64,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall).0
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    let k = cm.k();
    let per_class: Vec<ClassScores> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let predicted: f64 = (0..k).map(|t| cm.get(t, c) as f64).sum();
            let support: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let (precision, dp) = ratio(tp, predicted);
            let (recall, dr) = ratio(tp, support as f64);
            let (f1, df) = ratio(2.0 * precision * recall, precision + recall);
            ClassScores { precision, recall, f1, support, degenerate: dp || dr || df }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(ClassificationReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        per_class,
        total,
    })
}

/// Rounds a rate to an integer percentage, halves rounding up
/// (0.90497 → 90, 0.905 → 91).
pub fn display_percent(rate: f64) -> u32 {
    // nudge by a few ulps so 90.5 stored as 90.49999999 still rounds up
    libm::floor(rate * 100.0 + 0.5 + 1e-9) as u32
}

/// Fraction of manual handling time saved: `(manual − automated) / manual`.
pub fn efficiency_gain(manual_seconds: f64, automated_seconds: f64) -> Result<f64, MetricsError> {
    if !(manual_seconds > 0.0) || !manual_seconds.is_finite() {
        return Err(MetricsError::InvalidManualTime(manual_seconds));
    }
    if automated_seconds > manual_seconds {
        return Err(MetricsError::NegativeGain { manual: manual_seconds, automated: automated_seconds });
    }
    Ok((manual_seconds - automated_seconds) / manual_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matrix() {
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p), u64::from(t == p));
            }
        }
        let r = classification_report(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|s| s.precision == 1.0 && s.recall == 1.0 && s.f1 == 1.0));
    }

    #[test]
    fn empty_inputs() {
        let cm = confusion_matrix(&[], &[], 3).unwrap();
        assert_eq!(cm, ConfusionMatrix::zeros(3));
        assert_eq!(classification_report(&cm), Err(MetricsError::EmptyEvaluation));
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(confusion_matrix(&[0], &[0, 1], 3), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(confusion_matrix(&[3], &[0], 3), Err(MetricsError::LabelOutOfRange { label: 3, k: 3 })));
    }

    #[test]
    fn per_class_table_rows() {
        let f = f1_score(0.94, 0.92);
        assert!((f - 0.929_892_473).abs() < 1e-9);
        assert_eq!(display_percent(f), 93);
        let f = f1_score(0.89, 0.85);
        assert!((f - 0.869_540_229).abs() < 1e-9);
        assert_eq!(display_percent(f), 87);
        assert_eq!(display_percent(0.90497), 90);
        assert_eq!(display_percent(0.905), 91);
    }

    #[test]
    fn degenerate_class_is_flagged() {
        // class 2 never appears and is never predicted
        let cm = confusion_matrix(&[0, 1], &[0, 1], 3).unwrap();
        let r = classification_report(&cm).unwrap();
        assert!(r.per_class[2].degenerate);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!(!r.per_class[0].degenerate);
    }

    #[test]
    fn efficiency_examples() {
        let g = efficiency_gain(480.0, 7.0).unwrap();
        assert!((g - 473.0 / 480.0).abs() < 1e-15);
        assert!((g - 0.98542).abs() < 1e-5);
        assert_eq!(efficiency_gain(480.0, 480.0).unwrap(), 0.0);
        assert_eq!(efficiency_gain(480.0, 0.0).unwrap(), 1.0);
        assert!(matches!(efficiency_gain(10.0, 11.0), Err(MetricsError::NegativeGain { .. })));
        assert!(efficiency_gain(0.0, 0.0).is_err());
    }

    #[test]
    fn matches_brute_force_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truths: Vec<usize> = (0..1000).map(|_| rng.random_range(0..3)).collect();
        let preds: Vec<usize> = (0..1000).map(|_| rng.random_range(0..3)).collect();
        let cm = confusion_matrix(&truths, &preds, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                let brute = truths.iter().zip(&preds).filter(|&(&a, &b)| a == t && b == p).count() as u64;
                assert_eq!(cm.get(t, p), brute);
            }
        }
    }

    fn arb_matrix() -> impl Strategy<Value = ConfusionMatrix> {
        prop::collection::vec(0u64..50, 9)
            .prop_filter("non-empty", |c| c.iter().sum::<u64>() > 0)
            .prop_map(|c| ConfusionMatrix::from_counts(3, c).unwrap())
    }

    proptest! {
        #[test]
        fn report_invariants(cm in arb_matrix()) {
            let r = classification_report(&cm).unwrap();
            let tp: u64 = (0..3).map(|c| cm.get(c, c)).sum();
            prop_assert_eq!(tp, cm.trace());
            let support: u64 = r.per_class.iter().map(|s| s.support).sum();
            prop_assert_eq!(support, cm.total());
            // micro recall equals accuracy for single-label data
            let micro_recall = tp as f64 / support as f64;
            prop_assert!((micro_recall - r.accuracy).abs() < 1e-15);
            for s in &r.per_class {
                for v in [s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if s.precision > 0.0 && s.recall > 0.0 {
                    prop_assert!(s.f1 >= s.precision.min(s.recall) - 1e-12);
                    prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-12);
                }
            }
        }

        #[test]
        fn report_follows_class_permutation(cm in arb_matrix(), perm_idx in 0usize..6) {
            const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = PERMS[perm_idx];
            let mut counts = vec![0; 9];
            for t in 0..3 {
                for p in 0..3 {
                    counts[perm[t] * 3 + perm[p]] = cm.get(t, p);
                }
            }
            let permuted = ConfusionMatrix::from_counts(3, counts).unwrap();
            let a = classification_report(&cm).unwrap();
            let b = classification_report(&permuted).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            for c in 0..3 {
                prop_assert_eq!(&a.per_class[c], &b.per_class[perm[c]]);
            }
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        }
    }
}
