//! Evaluation: per-class QA accuracy, CHAIR ratios, intervention tables and
//! report emission.

mod accuracy;
mod chair;
mod report;

pub use accuracy::{
    accuracy_report, intervention_report, AccuracyReport, InterventionRow, InterventionTable,
    QaResult,
};
pub use chair::{
    canonicalize, chair_scores, extract_mentions, split_sentences, CaptionEvalInput,
    ChairLabels, ChairScores,
};
pub use report::{emit_report, Report, ReportFormat};
