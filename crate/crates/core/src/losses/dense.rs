use super::StageLabel;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{bce_with_logits, Tensor};

pub const DICE_SMOOTH: f32 = 1.0;
const THRESHOLDS: usize = StageLabel::COUNT - 1;

/// `1 − (2·Σpt + s)/(Σp + Σt + s)` of a soft mask against a binary target.
pub fn dice_loss(pred: &Tensor, target: &[f32]) -> Result<Tensor> {
    if pred.numel() != target.len() {
        return Err(shape_err!("dice: {} predictions for {} target pixels", pred.numel(), target.len()));
    }
    let t = Tensor::new(pred.shape(), target.to_vec())?;
    let inter = pred.mul(&t)?.sum()?.scale(2.0)?.add_scalar(DICE_SMOOTH)?;
    let denom = pred.sum()?.add_scalar(target.iter().sum::<f32>() + DICE_SMOOTH)?;
    inter.div(&denom)?.neg()?.add_scalar(1.0)
}

/// Cumulative-link targets `1[stage ≥ j]`, j = 1..=7.
pub fn ordinal_targets(stage: StageLabel) -> [f32; THRESHOLDS] {
    std::array::from_fn(|j| if stage.index() > j { 1.0 } else { 0.0 })
}

/// Summed threshold BCE of one logit vector.
pub fn ordinal_loss(logits: &Tensor, stage: StageLabel) -> Result<Tensor> {
    if logits.numel() != THRESHOLDS {
        return Err(shape_err!("ordinal head needs {THRESHOLDS} logits, got {}", logits.numel()));
    }
    bce_with_logits(logits, &ordinal_targets(stage))?.sum()
}

/// [`ordinal_loss`] averaged over the rows of `logits [K×7]`.
pub fn ordinal_graph(logits: &Tensor, stages: &[StageLabel]) -> Result<Tensor> {
    if logits.shape() != [stages.len(), THRESHOLDS] || stages.is_empty() {
        return Err(shape_err!("ordinal logits {:?} for {} stages", logits.shape(), stages.len()));
    }
    let targets: Vec<f32> = stages.iter().flat_map(|&s| ordinal_targets(s)).collect();
    bce_with_logits(logits, &targets)?.sum()?.scale(1.0 / stages.len() as f32)
}

/// Number of positive threshold logits, as a stage.
pub fn stage_decode(logits: &[f32]) -> StageLabel {
    let n = logits.iter().filter(|&&v| v > 0.0).count().min(THRESHOLDS);
    StageLabel::new(n).expect("count is at most 7")
}

/// Unweighted sum of the available per-tooth terms: Dice on the caries and
/// anomaly masks and the ordinal stage loss.
pub fn hena_loss(
    carseg: Option<(&Tensor, &[f32])>,
    ad: Option<(&Tensor, &[f32])>,
    stage: Option<(&Tensor, StageLabel)>,
) -> Result<Tensor> {
    let mut terms = Vec::new();
    if let Some((p, t)) = carseg {
        terms.push(dice_loss(p, t)?);
    }
    if let Some((p, t)) = ad {
        terms.push(dice_loss(p, t)?);
    }
    if let Some((l, s)) = stage {
        terms.push(ordinal_loss(l, s)?);
    }
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Input("no supervised term available".into()))?;
    it.try_fold(first, |acc, t| acc.add(&t))
}
