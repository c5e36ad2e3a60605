//! Detection, segmentation and staging metrics.

use crate::error::{shape_err, Result};
use crate::image::Mask;
use crate::losses::{iou, BBox, StageLabel};

/// AP at one IoU threshold with 101-point interpolated precision.
///
/// Predictions from all images are visited by descending confidence (ties
/// by image order, then list order); each is matched to the unmatched
/// ground truth of its image with the highest IoU, if that IoU reaches the
/// threshold.
pub fn average_precision(preds: &[Vec<BBox>], gts: &[Vec<BBox>], threshold: f32) -> f64 {
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<(usize, usize)> =
        preds.iter().enumerate().flat_map(|(i, ps)| (0..ps.len()).map(move |j| (i, j))).collect();
    order.sort_by(|a, b| preds[b.0][b.1].conf.total_cmp(&preds[a.0][a.1].conf).then(a.cmp(b)));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    for (i, j) in order {
        let p = &preds[i][j];
        let best = gts
            .get(i)
            .into_iter()
            .flatten()
            .enumerate()
            .filter(|(k, _)| !taken[i][*k])
            .map(|(k, g)| (k, iou(p, g)))
            .filter(|&(_, v)| v >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((k, _)) => {
                taken[i][k] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    interpolated_ap(&curve)
}

/// Mean over recall points `0, 0.01, …, 1` of the best precision at recall
/// at least that point.
fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|c| c.1).fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// `(mAP₅₀, mAP₅₀:₉₅)`.
pub fn eval_map(preds: &[Vec<BBox>], gts: &[Vec<BBox>]) -> (f64, f64) {
    let map50 = average_precision(preds, gts, 0.5);
    let all: f64 = (0..10).map(|k| average_precision(preds, gts, 0.5 + 0.05 * k as f32)).sum();
    (map50, all / 10.0)
}

/// Pixel counts for pooled overlap metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegCounts {
    pub inter: usize,
    pub pred: usize,
    pub gt: usize,
}

impl SegCounts {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(shape_err!("{}×{} prediction for {}×{} mask", pred.width, pred.height, gt.width, gt.height));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (p != 0, g != 0);
            c.inter += (p && g) as usize;
            c.pred += p as usize;
            c.gt += g as usize;
        }
        Ok(c)
    }

    pub fn add(&mut self, o: SegCounts) {
        self.inter += o.inter;
        self.pred += o.pred;
        self.gt += o.gt;
    }

    /// Dice in `[0, 1]`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        if self.pred + self.gt == 0 {
            return 1.0;
        }
        2.0 * self.inter as f64 / (self.pred + self.gt) as f64
    }

    /// IoU in `[0, 1]`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.pred + self.gt - self.inter;
        if union == 0 {
            return 1.0;
        }
        self.inter as f64 / union as f64
    }
}

/// `(Dice %, IoU %)` of two binary masks.
pub fn eval_seg(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    let c = SegCounts::of(pred, gt)?;
    Ok((100.0 * c.dice(), 100.0 * c.iou()))
}

/// `(accuracy %, macro-F1 %)`. Classes absent from both predictions and
/// labels are left out of the macro mean.
pub fn eval_dds(preds: &[StageLabel], gts: &[StageLabel]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(shape_err!("{} stage predictions for {} labels", preds.len(), gts.len()));
    }
    if gts.is_empty() {
        return Ok((0.0, 0.0));
    }
    let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    let mut f1s = Vec::new();
    for c in 0..StageLabel::COUNT {
        let tp = preds.iter().zip(gts).filter(|(p, g)| p.index() == c && g.index() == c).count();
        let np = preds.iter().filter(|p| p.index() == c).count();
        let ng = gts.iter().filter(|g| g.index() == c).count();
        if np + ng == 0 {
            continue;
        }
        f1s.push(2.0 * tp as f64 / (np + ng) as f64);
    }
    let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    Ok((100.0 * correct as f64 / gts.len() as f64, 100.0 * macro_f1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f32, conf: f32) -> BBox {
        BBox::new(x, 0.5, 0.1, 0.1).with_conf(conf)
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = vec![vec![b(0.1, 1.0), b(0.5, 1.0)], vec![b(0.3, 1.0)]];
        let (m50, m) = eval_map(&gts, &gts);
        assert!((m50 - 1.0).abs() < 1e-12 && (m - 1.0).abs() < 1e-12);
        assert_eq!(eval_map(&[vec![], vec![]], &gts), (0.0, 0.0));
    }

    #[test]
    fn hand_built_scene() {
        // GT A, B, C; predictions: A (0.9), stray (0.8), B (0.7), duplicate A (0.6).
        // PR: (1/3, 1), (1/3, 1/2), (2/3, 2/3), (2/3, 1/2) → 34 points at 1, 33 at 2/3.
        let gts = vec![vec![b(0.1, 1.0), b(0.4, 1.0), b(0.7, 1.0)]];
        let preds = vec![vec![b(0.1, 0.9), BBox::new(0.9, 0.9, 0.05, 0.05).with_conf(0.8), b(0.4, 0.7), b(0.1, 0.6)]];
        let ap = average_precision(&preds, &gts, 0.5);
        assert!((ap - 56.0 / 101.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn seg_examples() {
        let a = Mask::new(4, 1, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(eval_seg(&a, &a).unwrap(), (100.0, 100.0));
        let d = Mask::new(4, 1, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(eval_seg(&a, &d).unwrap(), (0.0, 0.0));
        let half = Mask::new(4, 1, vec![0, 1, 1, 0]).unwrap();
        let (dice, iou) = eval_seg(&a, &half).unwrap();
        assert!((dice / 100.0 - 0.5).abs() < 1e-12);
        let dd = dice / 100.0;
        assert!((iou / 100.0 - dd / (2.0 - dd)).abs() < 1e-12);
        let e = Mask::zeros(4, 1);
        assert_eq!(eval_seg(&e, &e).unwrap(), (100.0, 100.0));
        assert!(eval_seg(&a, &Mask::zeros(2, 2)).is_err());
    }

    #[test]
    fn seg_two_thirds_identity() {
        let p = Mask::new(3, 1, vec![1, 1, 0]).unwrap();
        let g = Mask::new(3, 1, vec![0, 1, 0]).unwrap();
        let (dice, iou) = eval_seg(&p, &g).unwrap();
        assert!((dice / 100.0 - 2.0 / 3.0).abs() < 1e-12);
        assert!((iou / 100.0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dds_examples() {
        let s = |v: &[usize]| v.iter().map(|&i| StageLabel::new(i).unwrap()).collect::<Vec<_>>();
        assert_eq!(eval_dds(&s(&[0, 3, 7]), &s(&[0, 3, 7])).unwrap(), (100.0, 100.0));
        assert_eq!(eval_dds(&s(&[1, 4, 6]), &s(&[0, 3, 7])).unwrap().0, 0.0);
        // classes 0,1,2: confusion
        //   gt 0 → pred 0,0,1 ; gt 1 → pred 1,2 ; gt 2 → pred 2
        // F1_0 = 2·2/(2+3) = 0.8, F1_1 = 2·1/(2+2) = 0.5, F1_2 = 2·1/(2+1) = 2/3
        let (acc, f1) = eval_dds(&s(&[0, 0, 1, 1, 2, 2]), &s(&[0, 0, 0, 1, 1, 2])).unwrap();
        assert!((acc - 100.0 * 4.0 / 6.0).abs() < 1e-9);
        assert!((f1 - 100.0 * (0.8 + 0.5 + 2.0 / 3.0) / 3.0).abs() < 1e-9);
        assert!(eval_dds(&s(&[0]), &s(&[0, 1])).is_err());
    }
}
