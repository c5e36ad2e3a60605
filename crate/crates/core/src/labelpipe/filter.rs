use super::stats::{box_features, mahalanobis_sq, BoxStats, ChiSquareGate};
use crate::error::Result;
use crate::image::Mask;
use crate::losses::{iou, BBox};

/// Indices kept by greedy NMS, in keep order. Boxes are visited by
/// descending confidence with ties going to the lower index; a box is
/// dropped when its IoU with any kept box exceeds `iou_threshold`.
pub fn nms_indices(boxes: &[BBox], iou_threshold: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].conf.total_cmp(&boxes[a].conf).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(boxes: &[BBox], iou_threshold: f32) -> Vec<BBox> {
    nms_indices(boxes, iou_threshold).into_iter().map(|i| boxes[i]).collect()
}

/// Thresholds of the pseudo-label filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub conf_threshold: f32,
    pub iou_threshold: f32,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { conf_threshold: 0.25, iou_threshold: 0.5 }
    }
}

/// Curated boxes and how many each stage removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterReport {
    pub kept: Vec<BBox>,
    pub removed_conf: usize,
    pub removed_nms: usize,
    pub removed_chi2: usize,
}

impl FilterReport {
    pub fn absorb(&mut self, other: FilterReport) {
        self.kept.extend(other.kept);
        self.removed_conf += other.removed_conf;
        self.removed_nms += other.removed_nms;
        self.removed_chi2 += other.removed_chi2;
    }
}

/// Confidence cut, then NMS, then the Mahalanobis gate, for the candidate
/// boxes of one `width × height` image (pixel coordinates).
pub fn filter_pseudo_labels(
    candidates: &[BBox],
    width: f64,
    height: f64,
    params: &FilterParams,
    stats: &BoxStats,
    gate: &ChiSquareGate,
) -> Result<FilterReport> {
    let confident: Vec<BBox> = candidates.iter().copied().filter(|b| b.conf >= params.conf_threshold).collect();
    let after_nms = nms(&confident, params.iou_threshold);
    let mut kept = Vec::with_capacity(after_nms.len());
    for b in &after_nms {
        if gate.keep(mahalanobis_sq(&box_features(b, width, height)?, stats)?) {
            kept.push(*b);
        }
    }
    Ok(FilterReport {
        removed_conf: candidates.len() - confident.len(),
        removed_nms: confident.len() - after_nms.len(),
        removed_chi2: after_nms.len() - kept.len(),
        kept,
    })
}

/// Every nonzero class becomes 1.
pub fn merge_binary_mask(mask: &Mask) -> Mask {
    Mask { width: mask.width, height: mask.height, data: mask.data.iter().map(|&v| (v != 0) as u8).collect() }
}
