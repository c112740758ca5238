use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ActivationTrace, Curation, GroundingLabel, ModelDims, NeuronId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRef {
    pub sample_id: String,
    pub position: usize,
}

/// Activations of the selected neurons for one token, in the order of the
/// owning set's `neuron_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub token_ref: TokenRef,
}

fn check_order(dims: ModelDims, neuron_order: &[NeuronId]) -> Result<()> {
    if neuron_order.is_empty() {
        return Err(Error::NoNeurons);
    }
    if let Some(n) = neuron_order.iter().find(|n| !dims.contains(**n)) {
        return Err(Error::NeuronOutOfRange {
            layer: n.layer,
            index: n.index,
        });
    }
    Ok(())
}

pub fn extract_feature_vector(
    trace: &ActivationTrace,
    position: usize,
    neuron_order: &[NeuronId],
) -> Result<FeatureVector> {
    check_order(trace.dims(), neuron_order)?;
    let tok = trace.tokens().get(position).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "position {position} outside trace of {} tokens",
            trace.len()
        ))
    })?;
    Ok(FeatureVector {
        values: neuron_order
            .iter()
            .map(|&n| trace.get(position, n) as f64)
            .collect(),
        token_ref: TokenRef {
            sample_id: tok.sample_id.clone(),
            position,
        },
    })
}

/// Features from a single layer-major activation row (`L * d_ffn` values).
pub fn features_from_row(row: &[f32], dims: ModelDims, neuron_order: &[NeuronId]) -> Result<Vec<f64>> {
    check_order(dims, neuron_order)?;
    if row.len() != dims.neurons() {
        return Err(Error::DimensionMismatch(format!(
            "activation row has {} values, model has {} neurons",
            row.len(),
            dims.neurons()
        )));
    }
    Ok(neuron_order
        .iter()
        .map(|&n| row[dims.flat_index(n)] as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub neuron_order: Vec<NeuronId>,
    pub features: Vec<FeatureVector>,
    /// 0 = present, 1 = absent.
    pub labels: Vec<u8>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.labels.len() - ones, ones]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            neuron_order: self.neuron_order.clone(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub(crate) fn rows(&self) -> Vec<&[f64]> {
        self.features.iter().map(|f| f.values.as_slice()).collect()
    }
}

/// One feature vector per labeled word-final token.
pub fn build_labeled_sets(traces: &[ActivationTrace], neuron_order: &[NeuronId]) -> Result<LabeledSet> {
    build_labeled_sets_curated(traces, neuron_order, Curation::default())
}

pub fn build_labeled_sets_curated(
    traces: &[ActivationTrace],
    neuron_order: &[NeuronId],
    curation: Curation,
) -> Result<LabeledSet> {
    let mut set = LabeledSet {
        neuron_order: neuron_order.to_vec(),
        features: Vec::new(),
        labels: Vec::new(),
    };
    for trace in traces {
        check_order(trace.dims(), neuron_order)?;
        for tok in trace.tokens().iter().filter(|t| t.is_word_final) {
            if curation.require_correct && tok.answered_correctly == Some(false) {
                continue;
            }
            let label = match tok.grounding_label {
                GroundingLabel::Present => 0,
                GroundingLabel::Absent => 1,
                GroundingLabel::Unlabeled => continue,
            };
            set.features
                .push(extract_feature_vector(trace, tok.position, neuron_order)?);
            set.labels.push(label);
        }
    }
    let [pre, abs] = set.class_counts();
    if pre == 0 || abs == 0 {
        return Err(Error::EmptyLabelSet(format!(
            "detector needs both classes, found {pre} present and {abs} absent"
        )));
    }
    Ok(set)
}
