use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts with absent (label 1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    pub confusion: Confusion,
    /// `None` when nothing was predicted absent.
    pub precision: Option<f64>,
    /// `None` when no absent example exists.
    pub recall: Option<f64>,
    pub accuracy: f64,
}

impl FitQuality {
    pub fn accuracy_percent(&self) -> f64 {
        self.accuracy * 100.0
    }

    /// One row in the `precision | recall | accuracy(x100)` layout.
    pub fn table_row(&self, name: &str) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.3}"));
        format!(
            "| {name} | {} | {} | {:.1} |",
            fmt(self.precision),
            fmt(self.recall),
            self.accuracy_percent()
        )
    }
}

pub fn fit_quality(preds: &[u8], labels: &[u8]) -> Result<FitQuality> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("fit quality of an empty set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(FitQuality {
        confusion: c,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        accuracy: (c.tp + c.tn) as f64 / preds.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_arithmetic() {
        // TP=9, FP=1, FN=1, TN=9
        let mut preds = vec![1u8; 9];
        let mut labels = vec![1u8; 9];
        preds.push(1);
        labels.push(0);
        preds.push(0);
        labels.push(1);
        preds.extend([0; 9]);
        labels.extend([0; 9]);
        let q = fit_quality(&preds, &labels).unwrap();
        assert_eq!(q.confusion, Confusion { tp: 9, fp: 1, tn: 9, fn_: 1 });
        assert_eq!(q.precision, Some(0.9));
        assert_eq!(q.recall, Some(0.9));
        assert_eq!(q.accuracy, 0.9);
    }

    #[test]
    fn all_correct_and_undefined() {
        let q = fit_quality(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((q.precision, q.recall, q.accuracy), (Some(1.0), Some(1.0), 1.0));
        let none = fit_quality(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(none.precision, None);
        assert_eq!(none.recall, None);
        assert!(fit_quality(&[], &[]).is_err());
        assert!(fit_quality(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn table_layout() {
        let q = FitQuality {
            confusion: Confusion::default(),
            precision: Some(0.965),
            recall: Some(0.943),
            accuracy: 0.976,
        };
        assert_eq!(q.table_row("model"), "| model | 0.965 | 0.943 | 97.6 |");
    }
}
