//! Toolkit for finding feed-forward neurons that react to visually absent
//! tokens, training a detector on their activations, and using that detector
//! to refine model outputs.
//!
//! The pipeline runs in stages, each consuming and producing plain files:
//!
//! 1. [`trace`]: activation traces (per token, per layer, per neuron) and
//!    their on-disk format.
//! 2. [`synth`]: a small gated-FFN harness with planted signal neurons that
//!    produces traces with a known ground truth.
//! 3. [`scoring`]: binned Bhattacharyya sensitivity per neuron, neuron
//!    selection and analysis artifacts.
//! 4. [`detector`]: feature extraction and the present/absent classifier.
//! 5. [`refine`]: binary-answer override and rollback decoding.
//! 6. [`eval`]: accuracy decomposition, CHAIR ratios and report emission.
//!
//! [`pipeline`] chains the stages end to end on synthetic data.

pub mod detector;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod pipeline;
pub mod refine;
pub mod scoring;
pub mod seed;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
