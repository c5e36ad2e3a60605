//! Box, segmentation and ordinal objectives and their domain types.

mod boxes;
mod dense;

pub use boxes::{
    dfl_graph, dfl_loss, l1_box_loss, l1_graph, mathe_loss, wiou_graph, wiou_loss, wiou_loss_with_mean, BoxTensors,
    LossWeights, MatheLoss, WiouState, DFL_BINS, WIOU_ALPHA, WIOU_DELTA,
};
pub use dense::{dice_loss, hena_loss, ordinal_graph, ordinal_loss, ordinal_targets, stage_decode, DICE_SMOOTH};

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::image::{GrayImage, Mask};

/// Axis-aligned box in center form with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub conf: f32,
    pub class_id: Option<u32>,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h, conf: 1.0, class_id: None }
    }

    pub fn with_conf(mut self, conf: f32) -> Self {
        self.conf = conf;
        self
    }

    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Input(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    /// Mirror about the vertical center line of a unit-width image.
    pub fn unflip(&self) -> Self {
        Self { cx: 1.0 - self.cx, ..*self }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) as f64 - ax1.max(bx1) as f64).max(0.0);
    let ih = (ay2.min(by2) as f64 - ay1.max(by1) as f64).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 as f64 - ax1 as f64) * (ay2 as f64 - ay1 as f64);
    let area_b = (bx2 as f64 - bx1 as f64) * (by2 as f64 - by1 as f64);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0) as f32
}

/// Ordinal development stage, `0..=7` ↔ `A..=H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageLabel(u8);

impl StageLabel {
    pub const COUNT: usize = 8;

    pub fn new(index: usize) -> Result<Self> {
        if index >= Self::COUNT {
            return Err(Error::Input(format!("stage index {index} outside 0..=7")));
        }
        Ok(Self(index as u8))
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c {
            'A'..='H' => Ok(Self(c as u8 - b'A')),
            _ => Err(Error::Input(format!("stage letter {c:?} outside A..=H"))),
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn letter(self) -> char {
        (b'A' + self.0) as char
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Per-tooth crop with aligned binary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub crop: GrayImage,
    pub carseg: Mask,
    pub ad: Mask,
    pub stage: Option<StageLabel>,
}

impl MaskPair {
    pub fn validate(&self) -> Result<()> {
        let dims = (self.crop.width, self.crop.height);
        if (self.carseg.width, self.carseg.height) != dims || (self.ad.width, self.ad.height) != dims {
            return Err(shape_err!("mask pair shapes differ from crop {dims:?}"));
        }
        if !self.carseg.is_binary() || !self.ad.is_binary() {
            return Err(Error::Input("mask pair masks must be binary".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(3.0, 0.5, 1.0, 1.0)), 0.0);
        let shifted = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn stage_letters_are_bijective() {
        for i in 0..8 {
            let s = StageLabel::new(i).unwrap();
            assert_eq!(StageLabel::from_letter(s.letter()).unwrap(), s);
        }
        assert_eq!(StageLabel::new(3).unwrap().to_string(), "D");
        assert!(StageLabel::new(8).is_err());
        assert!(StageLabel::from_letter('I').is_err());
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.2).validate().is_err());
        assert!(BBox::new(0.5, f32::NAN, 0.1, 0.2).validate().is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, 0.2).validate().is_ok());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f32..1.0, 0.0f32..1.0, 0.01f32..0.6, 0.01f32..0.6).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-6);
        }
    }
}
