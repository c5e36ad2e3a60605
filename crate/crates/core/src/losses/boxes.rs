use super::{iou, BBox};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{log_softmax, Tensor};

pub const WIOU_ALPHA: f64 = 1.9;
pub const WIOU_DELTA: f64 = 3.0;
/// Bins of the per-side distance distribution.
pub const DFL_BINS: usize = 16;

/// Running mean of the IoU loss used to grade box quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WiouState {
    pub mean: f64,
    pub momentum: f64,
}

impl Default for WiouState {
    fn default() -> Self {
        Self { mean: 1.0, momentum: 0.95 }
    }
}

impl WiouState {
    /// `mean ← m·mean + (1−m)·batch_mean`.
    pub fn update(&mut self, batch_mean: f64) {
        self.mean = self.momentum * self.mean + (1.0 - self.momentum) * batch_mean;
    }
}

fn focusing(l_iou: f64, mean: f64) -> f64 {
    if l_iou == 0.0 {
        return 0.0;
    }
    let beta = l_iou / mean.max(f64::MIN_POSITIVE);
    beta / (WIOU_DELTA * WIOU_ALPHA.powf(beta - WIOU_DELTA))
}

fn enclosing_diag_sq(p: &BBox, g: &BBox) -> f64 {
    let (px1, py1, px2, py2) = p.corners();
    let (gx1, gy1, gx2, gy2) = g.corners();
    let wg = px2.max(gx2) as f64 - px1.min(gx1) as f64;
    let hg = py2.max(gy2) as f64 - py1.min(gy1) as f64;
    wg * wg + hg * hg
}

/// Focused, distance-weighted IoU loss for a fixed running mean.
pub fn wiou_loss_with_mean(pred: &BBox, gt: &BBox, mean: f64) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let l_iou = 1.0 - iou(pred, gt) as f64;
    let d2 = (pred.cx as f64 - gt.cx as f64).powi(2) + (pred.cy as f64 - gt.cy as f64).powi(2);
    let r_dist = (d2 / enclosing_diag_sq(pred, gt)).exp();
    Ok(focusing(l_iou, mean) * r_dist * l_iou)
}

/// As [`wiou_loss_with_mean`], first folding this pair's IoU loss into the
/// running mean.
pub fn wiou_loss(pred: &BBox, gt: &BBox, state: &mut WiouState) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    state.update(1.0 - iou(pred, gt) as f64);
    wiou_loss_with_mean(pred, gt, state.mean)
}

/// Differentiable boxes in corner form, one entry per matched pair.
#[derive(Debug, Clone)]
pub struct BoxTensors {
    pub x1: Tensor,
    pub y1: Tensor,
    pub x2: Tensor,
    pub y2: Tensor,
}

impl BoxTensors {
    pub fn len(&self) -> usize {
        self.x1.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaves holding the given boxes.
    pub fn leaves(boxes: &[BBox]) -> Result<Self> {
        let col = |f: &dyn Fn(&BBox) -> f32| Tensor::param(&[boxes.len()], boxes.iter().map(f).collect());
        Ok(Self {
            x1: col(&|b| b.corners().0)?,
            y1: col(&|b| b.corners().1)?,
            x2: col(&|b| b.corners().2)?,
            y2: col(&|b| b.corners().3)?,
        })
    }

    /// Detached values as boxes.
    pub fn values(&self) -> Vec<BBox> {
        (0..self.len())
            .map(|i| BBox::from_corners(self.x1.data()[i], self.y1.data()[i], self.x2.data()[i], self.y2.data()[i]))
            .collect()
    }
}

fn gt_col(gt: &[BBox], f: impl Fn(&BBox) -> f32) -> Tensor {
    Tensor::vector(&gt.iter().map(f).collect::<Vec<_>>())
}

fn check_pairs(pred: &BoxTensors, gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(shape_err!("{} predicted boxes for {} targets", pred.len(), gt.len()));
    }
    for g in gt {
        g.validate()?;
    }
    Ok(())
}

/// Mean focused IoU loss over matched pairs. The enclosing-box diagonal and
/// the focusing coefficient are constants of the graph.
pub fn wiou_graph(pred: &BoxTensors, gt: &[BBox], mean: f64) -> Result<Tensor> {
    check_pairs(pred, gt)?;
    let (gx1, gy1) = (gt_col(gt, |b| b.corners().0), gt_col(gt, |b| b.corners().1));
    let (gx2, gy2) = (gt_col(gt, |b| b.corners().2), gt_col(gt, |b| b.corners().3));
    let iw = pred.x2.minimum(&gx2)?.sub(&pred.x1.maximum(&gx1)?)?.relu()?;
    let ih = pred.y2.minimum(&gy2)?.sub(&pred.y1.maximum(&gy1)?)?.relu()?;
    let inter = iw.mul(&ih)?;
    let pa = pred.x2.sub(&pred.x1)?.mul(&pred.y2.sub(&pred.y1)?)?;
    let ga = gt_col(gt, |b| b.area());
    let union = pa.add(&ga)?.sub(&inter)?;
    let l_iou = inter.div(&union)?.neg()?.add_scalar(1.0)?;

    let values = pred.values();
    let mut inv_diag = Vec::with_capacity(gt.len());
    let mut coef = Vec::with_capacity(gt.len());
    for (i, (p, g)) in values.iter().zip(gt).enumerate() {
        inv_diag.push((1.0 / enclosing_diag_sq(p, g)) as f32);
        coef.push(focusing(l_iou.data()[i] as f64, mean) as f32);
    }
    let pcx = pred.x1.add(&pred.x2)?.scale(0.5)?;
    let pcy = pred.y1.add(&pred.y2)?.scale(0.5)?;
    let dx = pcx.sub(&gt_col(gt, |b| b.cx))?;
    let dy = pcy.sub(&gt_col(gt, |b| b.cy))?;
    let d2 = dx.mul(&dx)?.add(&dy.mul(&dy)?)?;
    let r_dist = d2.mul(&Tensor::vector(&inv_diag))?.exp()?;
    l_iou.mul(&r_dist)?.mul(&Tensor::vector(&coef))?.mean()
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> f32 {
    ((pred.cx - gt.cx).abs() + (pred.cy - gt.cy).abs() + (pred.w - gt.w).abs() + (pred.h - gt.h).abs()) / 4.0
}

/// [`l1_box_loss`] averaged over matched pairs, differentiable in `pred`.
pub fn l1_graph(pred: &BoxTensors, gt: &[BBox]) -> Result<Tensor> {
    check_pairs(pred, gt)?;
    let cx = pred.x1.add(&pred.x2)?.scale(0.5)?;
    let cy = pred.y1.add(&pred.y2)?.scale(0.5)?;
    let w = pred.x2.sub(&pred.x1)?;
    let h = pred.y2.sub(&pred.y1)?;
    let terms = [
        cx.sub(&gt_col(gt, |b| b.cx))?.abs()?.sum()?,
        cy.sub(&gt_col(gt, |b| b.cy))?.abs()?.sum()?,
        w.sub(&gt_col(gt, |b| b.w))?.abs()?.sum()?,
        h.sub(&gt_col(gt, |b| b.h))?.abs()?.sum()?,
    ];
    let total = terms[0].add(&terms[1])?.add(&terms[2])?.add(&terms[3])?;
    total.scale(1.0 / (4.0 * gt.len() as f32))
}

/// Mean distribution focal loss over rows of `logits [K×n]`, each row a
/// distribution over bins `0..n` and `targets[k] ∈ [0, n−1]`.
pub fn dfl_graph(logits: &Tensor, targets: &[f32]) -> Result<Tensor> {
    let &[k, n] = logits.shape() else {
        return Err(shape_err!("DFL logits must be [K×bins], got {:?}", logits.shape()));
    };
    if targets.len() != k {
        return Err(shape_err!("{} DFL targets for {k} rows", targets.len()));
    }
    let mut weights = vec![0.0f32; k * n];
    for (r, &t) in targets.iter().enumerate() {
        if !(t >= 0.0 && t <= (n - 1) as f32) {
            return Err(Error::Input(format!("DFL target {t} outside [0, {}]", n - 1)));
        }
        let lo = t.floor() as usize;
        let frac = t - lo as f32;
        weights[r * n + lo] += 1.0 - frac;
        if frac > 0.0 {
            weights[r * n + lo + 1] += frac;
        }
    }
    let logp = log_softmax(logits)?;
    logp.mul(&Tensor::new(&[k, n], weights)?)?.sum()?.scale(-1.0 / k as f32)
}

/// Distribution focal loss of one distance distribution.
pub fn dfl_loss(logits: &Tensor, target: f32) -> Result<Tensor> {
    dfl_graph(&logits.reshape(&[1, logits.numel()])?, &[target])
}

/// Weights of the three box terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub wiou: f32,
    pub l1: f32,
    pub dfl: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { wiou: 7.5, l1: 1.0, dfl: 1.5 }
    }
}

/// Combined box loss and its component values.
#[derive(Debug, Clone)]
pub struct MatheLoss {
    pub total: Tensor,
    pub wiou: f32,
    pub l1: f32,
    pub dfl: f32,
    /// Set when there were no matched pairs; `total` is then a constant 0.
    pub empty: bool,
}

/// `λ_wiou·WIoU + λ_l1·L1 + λ_dfl·DFL` over matched pairs. `dfl_logits`
/// holds one row per box side (`4·M` rows) with matching `dfl_targets`.
/// The running IoU-loss mean is updated with this batch before use.
pub fn mathe_loss(
    pred: &BoxTensors,
    dfl_logits: &Tensor,
    dfl_targets: &[f32],
    gt: &[BBox],
    weights: &LossWeights,
    state: &mut WiouState,
) -> Result<MatheLoss> {
    if gt.is_empty() {
        return Ok(MatheLoss { total: Tensor::scalar(0.0), wiou: 0.0, l1: 0.0, dfl: 0.0, empty: true });
    }
    let values = pred.values();
    let batch_mean = values.iter().zip(gt).map(|(p, g)| 1.0 - iou(p, g) as f64).sum::<f64>() / gt.len() as f64;
    state.update(batch_mean);
    let wiou = wiou_graph(pred, gt, state.mean)?;
    let l1 = l1_graph(pred, gt)?;
    let dfl = dfl_graph(dfl_logits, dfl_targets)?;
    let total = wiou.scale(weights.wiou)?.add(&l1.scale(weights.l1)?)?.add(&dfl.scale(weights.dfl)?)?;
    Ok(MatheLoss { wiou: wiou.item()?, l1: l1.item()?, dfl: dfl.item()?, total, empty: false })
}
