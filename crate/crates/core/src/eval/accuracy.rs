use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Gold;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaResult {
    pub record_id: String,
    pub gold: Gold,
    pub predicted: Gold,
}

/// Accuracy split by gold class. Figures are percentages; a class with no
/// records leaves its figure undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n_yes: usize,
    pub n_no: usize,
    pub correct_yes: usize,
    pub correct_no: usize,
    pub acc_yes: Option<f64>,
    pub acc_no: Option<f64>,
    pub acc: f64,
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn accuracy_report(results: &[QaResult]) -> Result<AccuracyReport> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no QA results".into()));
    }
    let count = |gold: Gold| {
        let of_class = results.iter().filter(|r| r.gold == gold);
        let n = of_class.clone().count();
        (n, of_class.filter(|r| r.predicted == gold).count())
    };
    let (n_yes, correct_yes) = count(Gold::Yes);
    let (n_no, correct_no) = count(Gold::No);
    Ok(AccuracyReport {
        n_yes,
        n_no,
        correct_yes,
        correct_no,
        acc_yes: percent(correct_yes, n_yes),
        acc_no: percent(correct_no, n_no),
        acc: 100.0 * (correct_yes + correct_no) as f64 / results.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub condition: String,
    pub report: AccuracyReport,
    pub delta_yes: Option<f64>,
    pub delta_no: Option<f64>,
    pub delta_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTable {
    pub rows: Vec<InterventionRow>,
}

fn keyed(results: &[QaResult]) -> Result<BTreeMap<&str, Gold>> {
    let mut map = BTreeMap::new();
    for r in results {
        if map.insert(r.record_id.as_str(), r.gold).is_some() {
            return Err(Error::RecordMismatch(format!("duplicate record {}", r.record_id)));
        }
    }
    Ok(map)
}

/// Baseline, zeroed and doubled runs side by side with deltas against the
/// baseline. All runs must cover the same records with the same gold labels.
pub fn intervention_report(
    baseline: &[QaResult],
    zero: &[QaResult],
    double: &[QaResult],
) -> Result<InterventionTable> {
    let base_keys = keyed(baseline)?;
    for (name, run) in [("zero", zero), ("double", double)] {
        if keyed(run)? != base_keys {
            return Err(Error::RecordMismatch(format!(
                "{name} run covers a different record set than the baseline"
            )));
        }
    }
    let base = accuracy_report(baseline)?;
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    let rows = [("baseline", baseline), ("zero", zero), ("double", double)]
        .into_iter()
        .map(|(name, run)| {
            let report = accuracy_report(run)?;
            Ok(InterventionRow {
                condition: name.to_string(),
                delta_yes: diff(report.acc_yes, base.acc_yes),
                delta_no: diff(report.acc_no, base.acc_no),
                delta_acc: report.acc - base.acc,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterventionTable { rows })
}
