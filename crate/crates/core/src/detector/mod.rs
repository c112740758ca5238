//! Visual-absence detector: feature vectors built from selected neurons and
//! a small binary classifier over them (label 0 = present, 1 = absent).

mod features;
mod io;
mod metrics;
mod network;
mod split;
mod sweep;

pub use features::{
    build_labeled_sets, build_labeled_sets_curated, extract_feature_vector, features_from_row,
    FeatureVector, LabeledSet, TokenRef,
};
pub use io::{read_detector, write_detector, DETECTOR_FORMAT};
pub use metrics::{fit_quality, Confusion, FitQuality};
pub use network::{
    predict, train_detector, Architecture, MinMaxScaler, Network, Prediction, StepSchedule,
    TrainConfig, TrainReport, VaDetector,
};
pub use split::split_train_val;
pub use sweep::{
    sweep_csv,
    default_beta_grid, parse_grid, sweep_beta, write_sweep_csv, SweepConfig, SweepResult,
    SweepRow,
};
