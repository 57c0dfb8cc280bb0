//! Confusion-matrix accounting and the scores derived from it.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::IGNORE_LABEL;

/// Rows are ground-truth classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn check(&self, label: u8) -> Result<()> {
        if label != IGNORE_LABEL && label as usize >= self.classes {
            return Err(Error::Label {
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    /// Adds one count per pixel whose ground truth is not the ignore label.
    /// The matrix is left untouched if any id is invalid.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.check(t)?;
            if t != IGNORE_LABEL {
                self.check(p)?;
                if p == IGNORE_LABEL {
                    return Err(Error::Label {
                        label: p,
                        classes: self.classes,
                    });
                }
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != IGNORE_LABEL {
                self.counts[t as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Entrywise sum with a matrix accumulated elsewhere.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(format!(
                "merging {}-class matrix into {}-class matrix",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::DegenerateMetrics);
        }
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        let mut trace = 0;
        for i in 0..c {
            let tp = self.get(i, i);
            let fn_: u64 = (0..c).filter(|&j| j != i).map(|j| self.get(i, j)).sum();
            let fp: u64 = (0..c).filter(|&j| j != i).map(|j| self.get(j, i)).sum();
            trace += tp;
            let present = tp + fp + fn_ > 0;
            let (iou, f1) = if present {
                (
                    tp as f64 / (tp + fp + fn_) as f64,
                    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
                )
            } else {
                (0.0, 0.0)
            };
            per_class.push(ClassScore {
                class: i,
                iou,
                f1,
                present,
            });
        }
        let present: Vec<&ClassScore> = per_class.iter().filter(|s| s.present).collect();
        let mean = |f: fn(&ClassScore) -> f64| {
            present.iter().map(|s| f(s)).sum::<f64>() / present.len() as f64
        };
        Ok(Scores {
            miou: mean(|s| s.iou),
            mean_f1: mean(|s| s.f1),
            oa: trace as f64 / total as f64,
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: usize,
    pub iou: f64,
    pub f1: f64,
    /// False when the class never appears in ground truth or prediction; such
    /// classes are left out of the means.
    #[serde(skip)]
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub per_class: Vec<ClassScore>,
    pub miou: f64,
    pub oa: f64,
    pub mean_f1: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        let labels = [0, 1, 2, 2, 1, 0, 0];
        cm.accumulate(&labels, &labels).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.get(i, j) > 0, i == j);
            }
        }
        let s = cm.scores().unwrap();
        assert_eq!((s.miou, s.oa, s.mean_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_ignored_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1], &[IGNORE_LABEL, IGNORE_LABEL])
            .unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(matches!(cm.scores(), Err(Error::DegenerateMetrics)));
    }

    #[test]
    fn hand_counted_two_by_two() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(
            cm,
            ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap()
        );
        let s = cm.scores().unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(s.per_class[0].iou, 0.5));
        assert!(close(s.per_class[1].iou, 2.0 / 3.0));
        assert!(close(s.miou, 7.0 / 12.0));
        assert!(close(s.oa, 0.75));
        assert!(close(s.per_class[0].f1, 2.0 / 3.0));
        assert!(close(s.per_class[1].f1, 0.8));
    }

    #[test]
    fn invalid_label_is_rejected_atomically() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&[0, 0], &[0, 2]),
            Err(Error::Label { label: 2, .. })
        ));
        assert!(cm.accumulate(&[5, 0], &[0, 0]).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn absent_classes_are_excluded_from_means() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        let s = cm.scores().unwrap();
        assert!(!s.per_class[2].present);
        assert_eq!(s.miou, 1.0);
    }
}
