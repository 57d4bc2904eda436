//! Recorded trajectories, the factored action space and preprocessing.

pub mod action;
pub mod augment;
pub mod binning;
pub mod keys;
pub mod quality;
pub mod trajectory;

pub use action::{discretize, slot_vocab, Action, RawAction, SlotKind, KEY_SLOTS, NUM_SLOTS, SLOT_KINDS};
pub use augment::{augment, AugmentConfig};
pub use binning::{bin_center, sample_mouse, sample_truncated_normal, Axis, AxisBinning, QuantileBinning, TruncatedNormalParams};
pub use keys::{Key, KEY_NAMES, KEY_VOCAB};
pub use quality::{quality_filter, quality_filter_scored, quality_filter_with, QualityReport, QualityThresholds};
pub use trajectory::{
    load_dataset, load_trajectory, save_dataset, save_trajectory, Frame, Provenance, TextSpan, Trajectory, FPS,
};
