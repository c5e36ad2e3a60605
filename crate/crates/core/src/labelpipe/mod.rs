//! Pseudo-label curation and per-tooth crop extraction.

mod crop;
mod filter;
mod stats;

pub use crop::{
    augment, augment_with, crop_and_resize, crop_window, flip_pair, spatial_realign, CropMapping, CONTEXT_MARGIN,
    CROP_SIZE, MAX_ROTATION_DEG,
};
pub use filter::{filter_pseudo_labels, merge_binary_mask, nms, nms_indices, FilterParams, FilterReport};
pub use stats::{
    box_features, chi2_4_critical, chi2_gate, fit_box_stats, mahalanobis_sq, BoxStats, ChiSquareGate, DEFAULT_REG,
    MIN_BOXES,
};
