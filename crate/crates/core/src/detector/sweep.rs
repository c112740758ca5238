use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::build_labeled_sets_curated;
use super::metrics::FitQuality;
use super::network::{train_detector, TrainConfig, VaDetector};
use super::split::split_train_val;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::scoring::{select_va_neurons, SensitivityMap};
use crate::trace::{ActivationTrace, Curation};

/// 0.30, 0.35, ..., 0.80.
pub fn default_beta_grid() -> Vec<f64> {
    (30..=80).step_by(5).map(|b| b as f64 / 100.0).collect()
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("bad grid {text:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let grid = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<f64>>>()?
    };
    validate_grid(&grid)?;
    Ok(grid)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty β grid".into()));
    }
    if let Some(b) = grid.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::InvalidArgument(format!("β {b} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    /// Training fraction of the stratified split.
    pub split_ratio: f64,
    pub train: TrainConfig,
    pub curation: Curation,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: default_beta_grid(),
            split_ratio: 0.9,
            train: TrainConfig::default(),
            curation: Curation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub n_neurons: usize,
    /// Validation fit; `None` when the β was skipped.
    pub quality: Option<FitQuality>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub best_beta: f64,
    pub rows: Vec<SweepRow>,
    pub best_detector: VaDetector,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        self.rows
            .iter()
            .find(|r| r.beta == self.best_beta)
            .expect("best β is in the table")
    }
}

fn run_point(
    map: &SensitivityMap,
    traces: &[ActivationTrace],
    beta: f64,
    cfg: &SweepConfig,
    seed: u64,
) -> Result<(SweepRow, Option<VaDetector>)> {
    let neurons = select_va_neurons(map, beta)?;
    if neurons.is_empty() {
        return Ok((
            SweepRow {
                beta,
                n_neurons: 0,
                quality: None,
                skipped: Some("no neurons above threshold".into()),
            },
            None,
        ));
    }
    let set = build_labeled_sets_curated(traces, &neurons, cfg.curation)?;
    let (train, val) = split_train_val(&set, cfg.split_ratio, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (det, _) = train_detector(&train, beta, &train_cfg)?;
    let quality = det.evaluate(&val)?;
    log::info!(
        "β={beta:.2}: {} neurons, validation accuracy {:.4}",
        neurons.len(),
        quality.accuracy
    );
    Ok((
        SweepRow {
            beta,
            n_neurons: neurons.len(),
            quality: Some(quality),
            skipped: None,
        },
        Some(det),
    ))
}

/// Trains and validates one detector per grid point and keeps the one with
/// the highest validation accuracy (smallest β on ties).
pub fn sweep_beta(
    map: &SensitivityMap,
    traces: &[ActivationTrace],
    cfg: &SweepConfig,
    seed: u64,
) -> Result<SweepResult> {
    validate_grid(&cfg.grid)?;
    let mut grid = cfg.grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let points = grid
        .par_iter()
        .map(|&beta| run_point(map, traces, beta, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, f64, VaDetector)> = None;
    let mut rows = Vec::with_capacity(points.len());
    for (row, det) in points {
        if let (Some(q), Some(det)) = (&row.quality, det) {
            if best.as_ref().is_none_or(|(_, acc, _)| q.accuracy > *acc) {
                best = Some((row.beta, q.accuracy, det));
            }
        }
        rows.push(row);
    }
    let (best_beta, _, best_detector) = best.ok_or_else(|| {
        Error::InvalidArgument("no β yields neurons".into())
    })?;
    Ok(SweepResult {
        best_beta,
        rows,
        best_detector,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("beta,n_neurons,precision,recall,accuracy\n");
    for r in rows {
        let (p, rc, a) = match &r.quality {
            Some(q) => (q.precision, q.recall, Some(q.accuracy)),
            None => (None, None, None),
        };
        let accuracy = if r.skipped.is_some() {
            "skipped".to_string()
        } else {
            fmt_opt(a)
        };
        out.push_str(&format!(
            "{:.2},{},{},{},{}\n",
            r.beta,
            r.n_neurons,
            fmt_opt(p),
            fmt_opt(rc),
            accuracy
        ));
    }
    out
}

pub fn write_sweep_csv(rows: &[SweepRow], destination: &Path) -> Result<()> {
    fsutil::write_file_atomic(destination, sweep_csv(rows).as_bytes())
}
