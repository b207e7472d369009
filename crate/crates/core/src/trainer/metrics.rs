//! Binary classification metrics; class 1 (cancerous) is positive.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[usize], actual: &[usize]) -> Self {
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == 1, a == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub confusion: Confusion,
    /// Metrics whose denominator was zero; each is reported as 0.
    pub undefined: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Self {
        let mut undefined = Vec::new();
        let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy", &mut undefined);
        let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut undefined);
        let recall = ratio(c.tp, c.tp + c.fn_, "recall", &mut undefined);
        let specificity = ratio(c.tn, c.tn + c.fp, "specificity", &mut undefined);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            undefined.push("f1".to_string());
            0.0
        };
        Self {
            accuracy,
            precision,
            recall,
            specificity,
            f1,
            confusion: c,
            undefined,
        }
    }

    pub fn from_predictions(predicted: &[usize], actual: &[usize]) -> Self {
        Self::from_confusion(Confusion::from_predictions(predicted, actual))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        let m = MetricsReport::from_predictions(&[1, 0, 1, 0], &[1, 0, 1, 0]);
        for v in [m.accuracy, m.precision, m.recall, m.specificity, m.f1] {
            assert_eq!(v, 1.0);
        }
        assert!(m.undefined.is_empty());
    }

    #[test]
    fn worked_confusion_example() {
        let m = MetricsReport::from_confusion(Confusion { tp: 5, fp: 1, fn_: 2, tn: 12 });
        assert!((m.accuracy - 0.85).abs() < 1e-12);
        assert!((m.precision - 0.8333).abs() < 1e-4);
        assert!((m.recall - 0.7143).abs() < 1e-4);
        assert!((m.specificity - 0.9231).abs() < 1e-4);
        assert!((m.f1 - 0.7692).abs() < 1e-4);
    }

    #[test]
    fn no_positives_is_flagged() {
        let m = MetricsReport::from_predictions(&[0, 0], &[0, 0]);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert!(m.undefined.contains(&"precision".to_string()));
        assert!(m.undefined.contains(&"recall".to_string()));
        assert!(m.undefined.contains(&"f1".to_string()));
        assert_eq!(m.specificity, 1.0);
    }

    #[test]
    fn json_has_confusion_fields() {
        let m = MetricsReport::from_confusion(Confusion { tp: 1, fp: 2, fn_: 3, tn: 4 });
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["fn"], 3);
        assert_eq!(v["tn"], 4);
    }
}
