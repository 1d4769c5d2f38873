//! Confusion counts and the four binary classification rates.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, flagged: bool, label: bool) {
        match (flagged, label) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

pub fn confusion_counts(flags: &[bool], labels: &[bool]) -> Result<Confusion> {
    if flags.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: flags.len(),
            right: labels.len(),
        });
    }
    if flags.is_empty() {
        return Err(Error::EmptyInput("flags"));
    }
    let mut c = Confusion::default();
    for (&f, &l) in flags.iter().zip(labels) {
        c.add(f, l);
    }
    Ok(c)
}

/// A ratio with an explicit flag for a zero denominator, in which case
/// `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub value: f64,
    pub defined: bool,
}

impl Rate {
    pub fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            Rate {
                value: 0.0,
                defined: false,
            }
        } else {
            Rate {
                value: num as f64 / den as f64,
                defined: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryMetrics {
    /// TP / (TP + FP)
    pub precision: Rate,
    /// TP / (TP + FN), also the true positive rate.
    pub recall: Rate,
    /// TN / (TN + FP)
    pub tnr: Rate,
    /// 2TP / (2TP + FP + FN)
    pub f1: Rate,
}

pub fn binary_metrics(c: &Confusion) -> BinaryMetrics {
    BinaryMetrics {
        precision: Rate::ratio(c.tp, c.tp + c.fp),
        recall: Rate::ratio(c.tp, c.tp + c.fn_),
        tnr: Rate::ratio(c.tn, c.tn + c.fp),
        f1: Rate::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts() {
        let c = confusion_counts(&[true, true, false, false], &[true, false, true, false]).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let c = confusion_counts(&[true, false], &[true, false]).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert!(confusion_counts(&[true], &[]).is_err());
        assert!(confusion_counts(&[], &[]).is_err());
    }

    #[test]
    fn symmetric_case() {
        let m = binary_metrics(&Confusion { tp: 2, fp: 1, tn: 0, fn_: 1 });
        for r in [m.precision, m.recall, m.f1] {
            assert!((r.value - 2.0 / 3.0).abs() < 1e-15);
            assert!(r.defined);
        }
        assert!(m.tnr.defined);
        assert_eq!(m.tnr.value, 0.0);
        assert!(!binary_metrics(&Confusion { tp: 1, fp: 0, tn: 0, fn_: 0 }).tnr.defined);
    }

    #[test]
    fn tnr_example() {
        let m = binary_metrics(&Confusion { tp: 0, fp: 1, tn: 9, fn_: 0 });
        assert!((m.tnr.value - 0.9).abs() < 1e-15);
        assert!(!m.recall.defined);
        assert_eq!(m.precision.value, 0.0);
    }

    proptest! {
        #[test]
        fn counts_sum_and_ranges(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..1000)) {
            let (f, l): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
            let c = confusion_counts(&f, &l).unwrap();
            prop_assert_eq!(c.total(), pairs.len());
            let m = binary_metrics(&c);
            for r in [m.precision, m.recall, m.tnr, m.f1] {
                prop_assert!((0.0..=1.0).contains(&r.value));
            }
            if m.precision.defined && m.recall.defined && m.precision.value + m.recall.value > 0.0 {
                let h = 2.0 * m.precision.value * m.recall.value / (m.precision.value + m.recall.value);
                prop_assert!((h - m.f1.value).abs() < 1e-12);
            }
            let mut rev_f = f.clone();
            let mut rev_l = l.clone();
            rev_f.reverse();
            rev_l.reverse();
            prop_assert_eq!(confusion_counts(&rev_f, &rev_l).unwrap(), c);
        }
    }
}
