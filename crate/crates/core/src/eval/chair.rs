use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEvalInput {
    pub sentences: Vec<Vec<String>>,
    /// `(object, sentence index)` for every object mention.
    #[serde(rename = "mentions")]
    pub mentioned_objects: Vec<(String, usize)>,
    #[serde(rename = "gt_objects")]
    pub ground_truth_objects: BTreeSet<String>,
}

/// Lowercase, then map through the synonym table.
pub fn canonicalize(word: &str, synonyms: &BTreeMap<String, String>) -> String {
    let w = word.trim().to_lowercase();
    synonyms.get(&w).cloned().unwrap_or(w)
}

/// Both ratios under each naming convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairLabels {
    pub c_s: f64,
    pub c_i: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub hallucinated_objects: usize,
    pub total_objects: usize,
    pub hallucinated_sentences: usize,
    pub total_sentences: usize,
    /// Hallucinated mentions over all mentions (0 when nothing is mentioned).
    pub object_ratio: f64,
    /// Sentences with a hallucinated mention over all sentences.
    pub sentence_ratio: f64,
    /// `c_s` = object ratio, `c_i` = sentence ratio.
    pub swapped_labels: ChairLabels,
    /// `c_s` = sentence ratio, `c_i` = object ratio.
    pub conventional_labels: ChairLabels,
}

pub fn chair_scores(
    input: &CaptionEvalInput,
    synonyms: &BTreeMap<String, String>,
) -> Result<ChairScores> {
    let total_sentences = input.sentences.len();
    if total_sentences == 0 {
        return Err(Error::InvalidArgument("empty caption".into()));
    }
    let truth: BTreeSet<String> = input
        .ground_truth_objects
        .iter()
        .map(|o| canonicalize(o, synonyms))
        .collect();
    let mut bad_sentences = BTreeSet::new();
    let mut hallucinated = 0;
    for (obj, s) in &input.mentioned_objects {
        if *s >= total_sentences {
            return Err(Error::InvalidArgument(format!(
                "mention {obj:?} refers to sentence {s} of {total_sentences}"
            )));
        }
        if !truth.contains(&canonicalize(obj, synonyms)) {
            hallucinated += 1;
            bad_sentences.insert(*s);
        }
    }
    let total_objects = input.mentioned_objects.len();
    let object_ratio = if total_objects == 0 {
        0.0
    } else {
        hallucinated as f64 / total_objects as f64
    };
    let sentence_ratio = bad_sentences.len() as f64 / total_sentences as f64;
    Ok(ChairScores {
        hallucinated_objects: hallucinated,
        total_objects,
        hallucinated_sentences: bad_sentences.len(),
        total_sentences,
        object_ratio,
        sentence_ratio,
        swapped_labels: ChairLabels {
            c_s: object_ratio,
            c_i: sentence_ratio,
        },
        conventional_labels: ChairLabels {
            c_s: sentence_ratio,
            c_i: object_ratio,
        },
    })
}

/// Splits a token stream after each terminator. A trailing unterminated
/// fragment forms its own sentence.
pub fn split_sentences(tokens: &[String], terminators: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        cur.push(t.clone());
        if terminators.contains(t) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Exact-match mention extractor against an object vocabulary.
pub fn extract_mentions(
    sentences: &[Vec<String>],
    vocabulary: &BTreeSet<String>,
    synonyms: &BTreeMap<String, String>,
) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        for w in s {
            let c = canonicalize(w, synonyms);
            if vocabulary.contains(&c) {
                out.push((c, i));
            }
        }
    }
    out
}
