//! Per-neuron visual-absence sensitivity and the artifacts derived from it.
//!
//! The sensitivity of a neuron is one minus the Bhattacharyya coefficient
//! between the binned activation distributions of present and absent
//! tokens. Both sets are binned over one shared range so the two histograms
//! are comparable.

mod analysis;
mod histogram;
mod sensitivity;

pub use analysis::{
    activation_level_summary, context_similarity_analysis, cosine_similarity,
    normalize_activation_level, LevelRow, ScenarioStat, SimilarityOptions, SimilaritySummary,
    SimilarityTransform,
};
pub use histogram::{bhattacharyya_coefficient, bin_values, BinnedDistribution};
pub use sensitivity::{
    compute_sensitivity_map, read_sensitivity_map, select_va_neurons, sensitivity_score,
    top_k_per_layer, write_sensitivity_map, Heatmap, RangePolicy, SensitivityMap,
    SensitivityOptions, DEFAULT_BINS, MAP_FORMAT,
};
