//! Activation-level normalization and cross-context similarity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ActivationSetPair, ActivationTrace, GroundingLabel, NeuronId};

fn union_range(pair: &ActivationSetPair) -> (f64, f64) {
    pair.a_pre
        .iter()
        .chain(&pair.a_abs)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Position of `value` within the union range of the pair, clamped to
/// `[0, 1]`. A degenerate range maps everything to 0.5.
pub fn normalize_activation_level(value: f64, pair: &ActivationSetPair) -> f64 {
    let (lo, hi) = union_range(pair);
    if !(lo < hi) {
        return 0.5;
    }
    ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Mean normalized activation level of present and absent tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub layer: usize,
    pub index: usize,
    pub present_mean: f64,
    pub absent_mean: f64,
}

pub fn activation_level_summary(pairs: &[ActivationSetPair]) -> Vec<LevelRow> {
    let mean = |xs: &[f64], p: &ActivationSetPair| {
        xs.iter().map(|&v| normalize_activation_level(v, p)).sum::<f64>() / xs.len().max(1) as f64
    };
    pairs
        .iter()
        .map(|p| LevelRow {
            layer: p.neuron.layer,
            index: p.neuron.index,
            present_mean: mean(&p.a_pre, p),
            absent_mean: mean(&p.a_abs, p),
        })
        .collect()
}

/// Cosine of two vectors; 0 when either has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Preprocessing applied to VA-neuron vectors before the cosine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityTransform {
    Raw,
    /// Subtract each neuron's mean over all labeled tokens.
    #[default]
    Centered,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityOptions {
    pub transform: SimilarityTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStat {
    pub mean: f64,
    pub pairs: usize,
}

/// Mean pairwise cosine for the three comparison scenarios. A scenario with
/// no qualifying pair is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub absent_absent: Option<ScenarioStat>,
    pub present_present: Option<ScenarioStat>,
    pub same_word_cross: Option<ScenarioStat>,
    pub transform: SimilarityTransform,
}

struct Labeled {
    word: String,
    absent: bool,
    vector: Vec<f64>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    sums: [f64; 3],
    counts: [usize; 3],
}

pub fn context_similarity_analysis(
    traces: &[ActivationTrace],
    neurons: &[NeuronId],
    opts: SimilarityOptions,
) -> Result<SimilaritySummary> {
    if neurons.is_empty() {
        return Err(Error::NoNeurons);
    }
    let mut items = Vec::new();
    for trace in traces {
        if let Some(n) = neurons.iter().find(|n| !trace.dims().contains(**n)) {
            return Err(Error::NeuronOutOfRange {
                layer: n.layer,
                index: n.index,
            });
        }
        for tok in trace.tokens().iter().filter(|t| t.is_word_final) {
            let absent = match tok.grounding_label {
                GroundingLabel::Present => false,
                GroundingLabel::Absent => true,
                GroundingLabel::Unlabeled => continue,
            };
            items.push(Labeled {
                word: tok.text.to_lowercase(),
                absent,
                vector: neurons
                    .iter()
                    .map(|&n| trace.get(tok.position, n) as f64)
                    .collect(),
            });
        }
    }
    if opts.transform == SimilarityTransform::Centered && !items.is_empty() {
        let mut mean = vec![0.0; neurons.len()];
        for it in &items {
            mean.iter_mut().zip(&it.vector).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= items.len() as f64);
        for it in items.iter_mut() {
            it.vector.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
    }

    // Row partials are reduced in index order so the result does not depend
    // on scheduling.
    let partials: Vec<Acc> = (0..items.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = Acc::default();
            let a = &items[i];
            for b in &items[i + 1..] {
                let scenario = match (a.absent, b.absent) {
                    (true, true) => 0,
                    (false, false) => 1,
                    _ if a.word == b.word => 2,
                    _ => continue,
                };
                acc.sums[scenario] += cosine_similarity(&a.vector, &b.vector);
                acc.counts[scenario] += 1;
            }
            acc
        })
        .collect();
    let total = partials.iter().fold(Acc::default(), |mut t, p| {
        for s in 0..3 {
            t.sums[s] += p.sums[s];
            t.counts[s] += p.counts[s];
        }
        t
    });
    let stat = |s: usize| {
        (total.counts[s] > 0).then(|| ScenarioStat {
            mean: total.sums[s] / total.counts[s] as f64,
            pairs: total.counts[s],
        })
    };
    Ok(SimilaritySummary {
        absent_absent: stat(0),
        present_present: stat(1),
        same_word_cross: stat(2),
        transform: opts.transform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ModelDims, TokenRecord};

    fn pair(pre: &[f64], abs: &[f64]) -> ActivationSetPair {
        ActivationSetPair {
            neuron: NeuronId::new(0, 0),
            a_pre: pre.to_vec(),
            a_abs: abs.to_vec(),
        }
    }

    #[test]
    fn normalization() {
        let p = pair(&[2.0, 3.0], &[6.0]);
        assert_eq!(normalize_activation_level(6.0, &p), 1.0);
        assert_eq!(normalize_activation_level(2.0, &p), 0.0);
        assert_eq!(normalize_activation_level(3.0, &p), 0.25);
        assert_eq!(normalize_activation_level(100.0, &p), 1.0);
        assert_eq!(normalize_activation_level(1.0, &pair(&[1.0], &[1.0])), 0.5);
    }

    fn labeled(rows: &[(&str, GroundingLabel, [f32; 2])]) -> ActivationTrace {
        let tokens = rows
            .iter()
            .enumerate()
            .map(|(p, (w, l, _))| TokenRecord {
                grounding_label: *l,
                ..TokenRecord::new(p, *w, "s")
            })
            .collect();
        let acts = rows.iter().flat_map(|r| r.2).collect();
        ActivationTrace::new(ModelDims { layers: 1, d_ffn: 2 }, tokens, acts).unwrap()
    }

    #[test]
    fn raw_cosine_scenarios() {
        use GroundingLabel::*;
        let t = labeled(&[
            ("dog", Absent, [1.0, 0.0]),
            ("cat", Absent, [2.0, 0.0]),
            ("dog", Present, [0.0, 1.0]),
        ]);
        let n = [NeuronId::new(0, 0), NeuronId::new(0, 1)];
        let s = context_similarity_analysis(
            &[t],
            &n,
            SimilarityOptions {
                transform: SimilarityTransform::Raw,
            },
        )
        .unwrap();
        let aa = s.absent_absent.unwrap();
        assert_eq!((aa.mean, aa.pairs), (1.0, 1));
        assert!(s.present_present.is_none());
        let cross = s.same_word_cross.unwrap();
        assert_eq!((cross.mean, cross.pairs), (0.0, 1));
    }

    #[test]
    fn requires_neurons() {
        let t = labeled(&[("dog", GroundingLabel::Absent, [1.0, 0.0])]);
        assert!(matches!(
            context_similarity_analysis(&[t], &[], SimilarityOptions::default()),
            Err(Error::NoNeurons)
        ));
    }

    #[test]
    fn level_summary_orders_absent_above_present() {
        let rows = activation_level_summary(&[pair(&[0.0, 1.0], &[9.0, 10.0])]);
        assert_eq!(rows[0].present_mean, 0.05);
        assert_eq!(rows[0].absent_mean, 0.95);
    }
}
