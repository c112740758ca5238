use serde::{Deserialize, Serialize};

use super::filter::{select_check_tokens, ContentTokenFilter};
use crate::detector::{extract_feature_vector, predict, VaDetector};
use crate::error::Result;
use crate::synth::Gold;
use crate::trace::ActivationTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideOutcome {
    pub answer: Gold,
    /// Check-token positions the detector judged absent.
    pub flagged: Vec<usize>,
    pub checked: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Answers "No" iff the detector flags any content token of the question.
pub fn answer_override(
    question: &ActivationTrace,
    detector: &VaDetector,
    filter: &ContentTokenFilter,
) -> Result<OverrideOutcome> {
    let checked = select_check_tokens(question.tokens(), filter);
    if checked.is_empty() {
        let sample = question.tokens().first().map_or("", |t| t.sample_id.as_str());
        log::warn!("{sample}: no content tokens to check, answering yes");
        return Ok(OverrideOutcome {
            answer: Gold::Yes,
            flagged: Vec::new(),
            checked,
            warning: Some("no content tokens".into()),
        });
    }
    let mut flagged = Vec::new();
    for &p in &checked {
        let v = extract_feature_vector(question, p, &detector.neuron_order)?;
        if predict(detector, &v.values)?.label == 1 {
            flagged.push(p);
        }
    }
    Ok(OverrideOutcome {
        answer: if flagged.is_empty() { Gold::Yes } else { Gold::No },
        flagged,
        checked,
        warning: None,
    })
}
