//! Class-wise accuracy and F1, overall accuracy, and weighted F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `confusion[true][predicted]` counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if counts.iter().any(|r| r.len() != n) {
            return Err(Error::Argument("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(num_classes: usize, labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Argument(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut cm = Self::new(num_classes);
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= num_classes || p >= num_classes {
                return Err(Error::Argument(format!("class index out of range: label {y}, prediction {p}")));
            }
            cm.counts[y][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub support: u64,
    /// Recall of the class, the per-class accuracy reported in tables.
    pub acc: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub acc: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(names: &[String], cm: ConfusionMatrix) -> Result<Self> {
        if names.len() != cm.num_classes() {
            return Err(Error::ClassMismatch {
                model: cm.num_classes(),
                data: names.len(),
            });
        }
        let total = cm.total();
        let classes: Vec<ClassMetrics> = (0..cm.num_classes())
            .map(|c| {
                let tp = cm.counts[c][c];
                let support = cm.support(c);
                let precision = ratio(tp, cm.predicted(c));
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    name: names[c].clone(),
                    support,
                    acc: recall,
                    precision,
                    f1,
                }
            })
            .collect();
        let weighted_f1 = if total == 0 {
            0.0
        } else {
            classes.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64
        };
        let macro_f1 = classes.iter().map(|c| c.f1).sum::<f64>() / classes.len().max(1) as f64;
        Ok(Self {
            acc: ratio(cm.trace(), total),
            weighted_f1,
            macro_f1,
            classes,
            confusion: cm,
        })
    }

    pub fn from_predictions(names: &[String], labels: &[usize], predictions: &[usize]) -> Result<Self> {
        let cm = ConfusionMatrix::from_predictions(names.len(), labels, predictions)?;
        Self::from_confusion(names, cm)
    }

    /// Plain-text table: one row per class, then overall ACC and w-F1.
    pub fn render_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(5).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}  {:>7}", "class", "support", "ACC", "F1");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7}  {:>7.2}  {:>7.2}",
                c.name,
                c.support,
                100.0 * c.acc,
                100.0 * c.f1
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>7.2}  {:>7.2}", "overall", self.confusion.total(), 100.0 * self.acc, 100.0 * self.weighted_f1);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_computed_two_class() {
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 1], vec![0, 3]]).unwrap();
        let r = MetricsReport::from_confusion(&names(2), cm).unwrap();
        assert!((r.classes[0].f1 - 0.8).abs() < 1e-12);
        assert!((r.classes[1].f1 - 6.0 / 7.0).abs() < 1e-12);
        assert!((r.weighted_f1 - 0.8286).abs() < 1e-3);
        assert!((r.acc - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.confusion.support(0), 3);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let r = MetricsReport::from_predictions(&names(3), &y, &y).unwrap();
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.weighted_f1, 1.0);
        assert!(r.classes.iter().all(|c| c.f1 == 1.0));
    }

    #[test]
    fn zero_division_gives_zero_f1() {
        let r = MetricsReport::from_predictions(&names(3), &[0, 0, 1], &[0, 0, 0]).unwrap();
        assert_eq!(r.classes[1].f1, 0.0);
        assert_eq!(r.classes[2].f1, 0.0);
        assert_eq!(r.classes[2].support, 0);
    }

    #[test]
    fn class_mismatch() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(
            MetricsReport::from_confusion(&names(2), cm),
            Err(Error::ClassMismatch { model: 3, data: 2 })
        ));
    }
}
