use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::histogram::{bhattacharyya_coefficient, bin_values};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::trace::{
    common_dims, decode_f32_le, encode_f32_le, ActivationSetPair, ActivationTrace, Curation,
    LabeledTokens, ModelDims, NeuronId, MANIFEST_FILE,
};

pub const DEFAULT_BINS: usize = 20;
pub const MAP_FORMAT: &str = "vaprobe-map/1";

/// How the shared bin range of a present/absent pair is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RangePolicy {
    /// `[min, max]` over the union of both sets.
    #[default]
    UnionMinMax,
    Fixed { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOptions {
    pub k_bins: usize,
    pub range_policy: RangePolicy,
    pub curation: Curation,
    pub provenance: String,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            k_bins: DEFAULT_BINS,
            range_policy: RangePolicy::UnionMinMax,
            curation: Curation::default(),
            provenance: String::new(),
        }
    }
}

/// `1 - BC(bin(a_pre), bin(a_abs))` over a shared range.
///
/// A degenerate range (every value in both sets equal) scores 0.
pub fn sensitivity_score(pair: &ActivationSetPair, k: usize, policy: RangePolicy) -> Result<f64> {
    if pair.a_pre.is_empty() || pair.a_abs.is_empty() {
        return Err(Error::EmptyLabelSet(format!("neuron {}", pair.neuron)));
    }
    let (lo, hi) = match policy {
        RangePolicy::UnionMinMax => pair
            .a_pre
            .iter()
            .chain(&pair.a_abs)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
        RangePolicy::Fixed { lo, hi } => (lo, hi),
    };
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite(format!("activation of neuron {}", pair.neuron)));
    }
    if lo == hi {
        return Ok(0.0);
    }
    let p = bin_values(&pair.a_pre, k, lo, hi)?;
    let q = bin_values(&pair.a_abs, k, lo, hi)?;
    Ok(1.0 - bhattacharyya_coefficient(&p, &q)?)
}

/// Sensitivity score of every neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    dims: ModelDims,
    /// Layer-major scores. Stored at single precision, the on-disk width.
    scores: Vec<f32>,
    pub k_bins: usize,
    pub range_policy: RangePolicy,
    pub provenance: String,
}

impl SensitivityMap {
    pub fn new(dims: ModelDims, scores: Vec<f64>, k_bins: usize, provenance: &str) -> Result<Self> {
        if scores.len() != dims.neurons() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores for {} neurons",
                scores.len(),
                dims.neurons()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
        }
        Ok(Self {
            dims,
            scores: scores.into_iter().map(|s| s as f32).collect(),
            k_bins,
            range_policy: RangePolicy::UnionMinMax,
            provenance: provenance.to_string(),
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn score(&self, n: NeuronId) -> f64 {
        self.scores[self.dims.flat_index(n)] as f64
    }

    pub fn layer_scores(&self, layer: usize) -> impl Iterator<Item = f64> + '_ {
        self.scores[layer * self.dims.d_ffn..(layer + 1) * self.dims.d_ffn]
            .iter()
            .map(|&s| s as f64)
    }

    /// `(neuron, score)` in layer-major order.
    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, f64)> + '_ {
        self.scores
            .iter()
            .enumerate()
            .map(|(f, &s)| (self.dims.neuron_at(f), s as f64))
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().fold(0.0f32, |m, &s| m.max(s)) as f64
    }

    /// The `k` highest-scoring neurons overall (ties to the smaller id).
    pub fn top_neurons(&self, k: usize) -> Vec<NeuronId> {
        let mut all: Vec<(NeuronId, f64)> = self.iter().collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(n, _)| n).collect()
    }
}

/// Score every neuron independently. Runs per neuron in parallel; results
/// are identical to sequential execution.
pub fn compute_sensitivity_map(
    traces: &[ActivationTrace],
    opts: &SensitivityOptions,
) -> Result<SensitivityMap> {
    let dims = common_dims(traces)?;
    let labeled = LabeledTokens::gather(traces, opts.curation)?;
    let scores = (0..dims.neurons())
        .into_par_iter()
        .map(|f| {
            let pair = labeled.pair(traces, dims.neuron_at(f));
            sensitivity_score(&pair, opts.k_bins, opts.range_policy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut map = SensitivityMap::new(dims, scores, opts.k_bins, &opts.provenance)?;
    map.range_policy = opts.range_policy;
    Ok(map)
}

/// Neurons scoring strictly above `beta`, in layer-major order.
pub fn select_va_neurons(map: &SensitivityMap, beta: f64) -> Result<Vec<NeuronId>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must be in [0, 1], got {beta}")));
    }
    Ok(map
        .iter()
        .filter(|&(_, s)| s > beta)
        .map(|(n, _)| n)
        .collect())
}

/// Per-layer top-k scores, descending, optionally clipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<NeuronId>>,
}

impl Heatmap {
    /// CSV with header `layer,rank,score`, rank 0 being the highest.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,rank,score\n");
        for (layer, row) in self.rows.iter().enumerate() {
            for (rank, score) in row.iter().enumerate() {
                out.push_str(&format!("{layer},{rank},{score}\n"));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_file_atomic(path, self.to_csv().as_bytes())
    }
}

pub fn top_k_per_layer(map: &SensitivityMap, k: usize, clip: Option<f64>) -> Result<Heatmap> {
    let dims = map.dims();
    if k > dims.d_ffn {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} neurons per layer",
            dims.d_ffn
        )));
    }
    let mut rows = Vec::with_capacity(dims.layers);
    let mut neurons = Vec::with_capacity(dims.layers);
    for layer in 0..dims.layers {
        let mut ranked: Vec<(usize, f64)> = map.layer_scores(layer).enumerate().collect();
        // stable sort keeps smaller indices first among equal scores
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        ranked.truncate(k);
        rows.push(
            ranked
                .iter()
                .map(|&(_, s)| clip.map_or(s, |c| s.min(c)))
                .collect(),
        );
        neurons.push(ranked.iter().map(|&(i, _)| NeuronId::new(layer, i)).collect());
    }
    Ok(Heatmap { rows, neurons })
}

#[derive(Debug, Serialize, Deserialize)]
struct MapManifest {
    format: String,
    model_dims: ModelDims,
    k_bins: usize,
    range_policy: RangePolicy,
    provenance: String,
}

/// Write a map as a manifest plus one `layer_<l>.f32` file per layer.
pub fn write_sensitivity_map(map: &SensitivityMap, destination: &Path) -> Result<()> {
    fsutil::write_dir_atomic(destination, |dir| {
        fsutil::write_json(
            &dir.join(MANIFEST_FILE),
            &MapManifest {
                format: MAP_FORMAT.to_string(),
                model_dims: map.dims,
                k_bins: map.k_bins,
                range_policy: map.range_policy,
                provenance: map.provenance.clone(),
            },
        )?;
        let d = map.dims.d_ffn;
        for layer in 0..map.dims.layers {
            let path = dir.join(format!("layer_{layer}.f32"));
            let bytes = encode_f32_le(map.scores[layer * d..(layer + 1) * d].iter().copied());
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })
}

pub fn read_sensitivity_map(source: &Path) -> Result<SensitivityMap> {
    let path = source.join(MANIFEST_FILE);
    let raw: serde_json::Value = fsutil::read_json(&path)?;
    match raw.get("format").and_then(|v| v.as_str()) {
        Some(MAP_FORMAT) => {}
        other => {
            return Err(Error::UnsupportedVersion(
                other.unwrap_or("<missing>").to_string(),
            ))
        }
    }
    let manifest: MapManifest = serde_json::from_value(raw).map_err(|e| Error::json(&path, e))?;
    let dims = manifest.model_dims;
    let mut scores = Vec::with_capacity(dims.neurons());
    for layer in 0..dims.layers {
        let p = source.join(format!("layer_{layer}.f32"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != 4 * dims.d_ffn {
            return Err(Error::LayerLength {
                layer,
                expected: 4 * dims.d_ffn,
                found: bytes.len(),
            });
        }
        scores.extend(decode_f32_le(&bytes));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite() || !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
    }
    Ok(SensitivityMap {
        dims,
        scores,
        k_bins: manifest.k_bins,
        range_policy: manifest.range_policy,
        provenance: manifest.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{GroundingLabel, TokenRecord};

    fn pair(pre: &[f64], abs: &[f64]) -> ActivationSetPair {
        ActivationSetPair {
            neuron: NeuronId::new(0, 0),
            a_pre: pre.to_vec(),
            a_abs: abs.to_vec(),
        }
    }

    fn map2x2(scores: [f64; 4]) -> SensitivityMap {
        SensitivityMap::new(ModelDims { layers: 2, d_ffn: 2 }, scores.to_vec(), 20, "t").unwrap()
    }

    #[test]
    fn identical_sets_score_zero() {
        let p = pair(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]);
        assert_eq!(sensitivity_score(&p, 20, RangePolicy::UnionMinMax).unwrap(), 0.0);
    }

    #[test]
    fn separated_sets_score_one() {
        let p = pair(&[-3.0, -2.0, -0.5], &[1.5, 2.0, 4.0]);
        assert_eq!(sensitivity_score(&p, 20, RangePolicy::UnionMinMax).unwrap(), 1.0);
    }

    #[test]
    fn hand_binned_fixed_range() {
        let p = pair(&[0.0, 0.4], &[0.6, 1.0]);
        let s = sensitivity_score(&p, 2, RangePolicy::Fixed { lo: 0.0, hi: 1.0 }).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn degenerate_range_scores_zero() {
        let p = pair(&[2.0, 2.0], &[2.0]);
        assert_eq!(sensitivity_score(&p, 20, RangePolicy::UnionMinMax).unwrap(), 0.0);
    }

    #[test]
    fn empty_set_is_error() {
        assert!(sensitivity_score(&pair(&[], &[1.0]), 20, RangePolicy::UnionMinMax).is_err());
    }

    #[test]
    fn selection_enumerates_layer_major() {
        let map = map2x2([0.9, 0.1, 0.5, 0.7]);
        assert_eq!(
            select_va_neurons(&map, 0.4).unwrap(),
            vec![NeuronId::new(0, 0), NeuronId::new(1, 0), NeuronId::new(1, 1)]
        );
        assert!(select_va_neurons(&map, map.max_score()).unwrap().is_empty());
        assert!(select_va_neurons(&map, -1.0).is_err());
        let zero = map2x2([0.0, 0.2, 0.0, 0.0]);
        assert_eq!(select_va_neurons(&zero, 0.0).unwrap(), vec![NeuronId::new(0, 1)]);
    }

    #[test]
    fn heatmap_clip_and_ties() {
        let map = SensitivityMap::new(ModelDims { layers: 1, d_ffn: 2 }, vec![0.9, 0.3], 20, "")
            .unwrap();
        let h = top_k_per_layer(&map, 2, Some(0.4)).unwrap();
        assert_eq!(h.rows, vec![vec![0.4, 0.3f32 as f64]]);

        let mut scores = vec![0.1; 10];
        scores[3] = 0.5;
        scores[7] = 0.5;
        let map = SensitivityMap::new(ModelDims { layers: 1, d_ffn: 10 }, scores, 20, "").unwrap();
        let h = top_k_per_layer(&map, 1, None).unwrap();
        assert_eq!(h.neurons, vec![vec![NeuronId::new(0, 3)]]);
        assert_eq!(h.rows[0][0], 0.5);
        assert!(top_k_per_layer(&map, 11, None).is_err());
        assert!(h.to_csv().starts_with("layer,rank,score\n0,0,0.5\n"));
    }

    #[test]
    fn k1_is_layer_max() {
        let map = map2x2([0.2, 0.6, 0.8, 0.1]);
        let h = top_k_per_layer(&map, 1, None).unwrap();
        assert_eq!(h.rows, vec![vec![0.6f32 as f64], vec![0.8f32 as f64]]);
    }

    #[test]
    fn map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = map2x2([0.9, 0.1, 0.5, 0.7]);
        write_sensitivity_map(&map, &dir.path().join("m")).unwrap();
        assert_eq!(read_sensitivity_map(&dir.path().join("m")).unwrap(), map);
    }

    fn constant_trace() -> ActivationTrace {
        let tokens = (0..4)
            .map(|p| TokenRecord {
                grounding_label: if p % 2 == 0 {
                    GroundingLabel::Present
                } else {
                    GroundingLabel::Absent
                },
                ..TokenRecord::new(p, "w", "s")
            })
            .collect();
        ActivationTrace::new(ModelDims { layers: 2, d_ffn: 3 }, tokens, vec![0.25; 24]).unwrap()
    }

    #[test]
    fn constant_activations_score_zero_everywhere() {
        let map = compute_sensitivity_map(&[constant_trace()], &SensitivityOptions::default())
            .unwrap();
        assert!(map.iter().all(|(_, s)| s == 0.0));
    }
}
