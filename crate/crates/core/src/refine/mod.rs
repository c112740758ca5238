//! Output refinement driven by the detector: yes/no answer override and
//! rollback decoding.

mod answer;
mod filter;
mod rollback;

pub use answer::{answer_override, OverrideOutcome};
pub use filter::{select_check_tokens, ContentTokenFilter};
pub use rollback::{
    ban_token, greedy_decode, rollback_decode, AbsenceJudge, BanStatus, DecodeLimits,
    DecodeOracle, DecodeSession, DetectorJudge, Emitted, JudgeInput, NeverAbsent, RefineOutcome,
    RollbackEvent,
};
