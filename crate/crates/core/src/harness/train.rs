//! Training loops for the detector and the three-stage multi-task network.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::params_hash;
use super::config::TrainConfig;
use super::detector::{detect, detection_loss, tta_detect, DetectParams, DetectorSpec, MiniMathe};
use super::hena::{MiniHena, BACKBONE_PREFIXES, ENC_WIDTHS, STAGE_LOGITS};
use super::metrics::{eval_dds, eval_map, SegCounts};
use super::optim::{AdamW, GradAccum, Schedule};
use super::synth::Scene;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::labelpipe::{augment, crop_and_resize, CONTEXT_MARGIN};
use crate::losses::{dice_loss, hena_loss, ordinal_graph, stage_decode, BBox, LossWeights, MaskPair, StageLabel, WiouState};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// One line of a training log. Metrics a stage does not produce are null.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub map50: Option<f64>,
    pub map5095: Option<f64>,
    pub dice_carseg: Option<f64>,
    pub dice_ad: Option<f64>,
    pub acc_dds: Option<f64>,
    pub f1_dds: Option<f64>,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Deterministic per-epoch generator derived from the run seed.
pub(crate) fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream + 1));
    rng.set_stream(epoch as u64);
    rng
}

pub fn detector_spec(cfg: &TrainConfig) -> DetectorSpec {
    DetectorSpec { ssm: cfg.ssm, bifpn: cfg.bifpn, ..DetectorSpec::default() }
}

pub fn build_detector(cfg: &TrainConfig) -> Result<(ParamStore, MiniMathe)> {
    let mut ps = ParamStore::new(cfg.seed);
    let model = MiniMathe::new(&mut ps, detector_spec(cfg))?;
    Ok((ps, model))
}

fn flip_boxes(boxes: &[BBox], width: usize) -> Vec<BBox> {
    boxes.iter().map(|b| BBox { cx: width as f32 - b.cx, ..*b }).collect()
}

/// `(mAP₅₀, mAP₅₀:₉₅)` over `scenes`.
pub fn evaluate_detector(model: &MiniMathe, p: &Binding, scenes: &[Scene], tta: bool) -> Result<(f64, f64)> {
    let dp = DetectParams::default();
    let preds: Vec<Vec<BBox>> = scenes
        .iter()
        .map(|s| if tta { tta_detect(model, p, &s.image, &dp) } else { detect(model, p, &s.image, &dp) })
        .collect::<Result<_>>()?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    Ok(eval_map(&preds, &gts))
}

/// Mini-batch AdamW on the detection objective with a warmup-cosine
/// schedule. Calls `on_epoch` after every epoch with validation mAP.
pub fn train_detector(
    cfg: &TrainConfig,
    train: &[Scene],
    val: &[Scene],
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(ParamStore, MiniMathe)> {
    let (mut ps, model) = build_detector(cfg)?;
    if train.is_empty() {
        return Err(Error::Config("detector training set is empty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.det_batch);
    let schedule = Schedule { peak: cfg.det_lr, warmup: cfg.det_warmup, total: (cfg.det_epochs * steps_per_epoch).max(1) };
    let mut opt = AdamW::new(&ps, cfg.weight_decay);
    let mut state = WiouState::default();
    let weights = LossWeights::default();
    let mut step = 0;
    for epoch in 0..cfg.det_epochs {
        let mut rng = epoch_rng(cfg.seed, 1, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut acc = GradAccum::new(ps.len());
        let mut lr = schedule.lr(step);
        for batch in order.chunks(cfg.det_batch) {
            acc.clear();
            for &i in batch {
                let s = &train[i];
                let flip = cfg.flip_augment && rng.random_bool(0.5);
                let (image, boxes) = if flip {
                    (s.image.flip_horizontal(), flip_boxes(&s.boxes, s.image.width))
                } else {
                    (s.image.clone(), s.boxes.clone())
                };
                let p = ps.bind(true);
                let levels = model.forward(&p, &image)?;
                let (loss, _) = detection_loss(&levels, &boxes, image.width, image.height, &weights, cfg.obj_weight, &mut state)?;
                let v = loss.item()? as f64;
                if !v.is_finite() {
                    return Err(Error::Numerics(format!("detector loss diverged at epoch {epoch}")));
                }
                loss_sum += v;
                loss.backward()?;
                acc.add(p.grads());
            }
            lr = schedule.lr(step);
            opt.step(&mut ps, &acc.sums, lr, 1.0 / acc.count as f64)?;
            step += 1;
        }
        let (map50, map5095) = evaluate_detector(&model, &ps.bind(false), val, false)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / train.len() as f64,
            map50: Some(map50),
            map5095: Some(map5095),
            lr,
            ..Default::default()
        };
        on_epoch(&m)?;
        if cfg.det_stop_map > 0.0 && map50 >= cfg.det_stop_map {
            break;
        }
    }
    Ok((ps, model))
}

/// Crops around `per_scene` seeded-random ground-truth teeth of every scene,
/// labelled with the tooth's stage.
pub fn tooth_crops(scenes: &[Scene], per_scene: usize, size: usize, seed: u64) -> Result<Vec<MaskPair>> {
    let mut out = Vec::with_capacity(scenes.len() * per_scene);
    for (i, s) in scenes.iter().enumerate() {
        let mut rng = epoch_rng(seed, 7, i);
        let mut idx: Vec<usize> = (0..s.boxes.len()).collect();
        idx.shuffle(&mut rng);
        for &t in idx.iter().take(per_scene) {
            let (mut pair, _) = crop_and_resize(&s.image, &s.carseg, &s.ad, &s.boxes[t], size, CONTEXT_MARGIN)?;
            pair.stage = Some(s.stages[t]);
            out.push(pair);
        }
    }
    Ok(out)
}

/// Crop sets for the three-stage protocol. The mask stages use
/// `crops_per_scene` teeth per scene; the stage probe, which only needs a
/// forward pass per crop, uses `probe_crops_per_scene`. With equal seeds the
/// probe sets are supersets of the mask sets.
#[derive(Debug, Clone)]
pub struct HenaCrops {
    pub train: Vec<MaskPair>,
    pub val: Vec<MaskPair>,
    pub probe_train: Vec<MaskPair>,
    pub probe_val: Vec<MaskPair>,
}

impl HenaCrops {
    pub fn new(cfg: &TrainConfig, train: &[Scene], val: &[Scene]) -> Result<Self> {
        let vseed = cfg.seed.wrapping_add(1);
        Ok(Self {
            train: tooth_crops(train, cfg.crops_per_scene, cfg.crop, cfg.seed)?,
            val: tooth_crops(val, cfg.crops_per_scene, cfg.crop, vseed)?,
            probe_train: tooth_crops(train, cfg.probe_crops_per_scene, cfg.crop, cfg.seed)?,
            probe_val: tooth_crops(val, cfg.probe_crops_per_scene, cfg.crop, vseed)?,
        })
    }
}

/// Per-column mean and standard deviation of `rows` (floored at 1e-6).
fn column_scaling(rows: &[Vec<f32>]) -> (Vec<f32>, Vec<f32>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v as f64 / n);
    }
    let mut var = vec![0.0f64; d];
    for r in rows {
        var.iter_mut().zip(r).zip(&mean).for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2) / n);
    }
    (mean.iter().map(|&m| m as f32).collect(), var.iter().map(|&v| (v.sqrt() as f32).max(1e-6)).collect())
}

/// Validation scores of the multi-task network, all as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HenaEval {
    pub dice_carseg: f64,
    pub dice_ad: f64,
    pub acc_dds: f64,
    pub f1_dds: f64,
}

/// Binary mask of logits above 0 (probability above ½).
pub fn threshold_logits(logits: &[f32], size: usize) -> Result<Mask> {
    Mask::new(size, size, logits.iter().map(|&v| (v > 0.0) as u8).collect())
}

pub fn evaluate_hena(model: &MiniHena, p: &Binding, crops: &[MaskPair]) -> Result<HenaEval> {
    let (mut cs, mut ad) = (SegCounts::default(), SegCounts::default());
    let mut preds = Vec::with_capacity(crops.len());
    let mut gts = Vec::with_capacity(crops.len());
    for c in crops {
        let out = model.forward(p, &c.crop)?;
        let n = c.crop.width;
        cs.add(SegCounts::of(&threshold_logits(out.carseg.data(), n)?, &c.carseg)?);
        ad.add(SegCounts::of(&threshold_logits(out.ad.data(), n)?, &c.ad)?);
        if let Some(s) = c.stage {
            preds.push(stage_decode(out.dds.data()));
            gts.push(s);
        }
    }
    let (acc, f1) = eval_dds(&preds, &gts)?;
    Ok(HenaEval { dice_carseg: cs.dice(), dice_ad: ad.dice(), acc_dds: acc / 100.0, f1_dds: f1 / 100.0 })
}

/// Stage accuracy and macro-F1 (fractions) over the crops that carry a
/// stage label.
pub fn evaluate_stages(model: &MiniHena, p: &Binding, crops: &[MaskPair]) -> Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(crops.len());
    let mut gts = Vec::with_capacity(crops.len());
    for c in crops {
        if let Some(s) = c.stage {
            preds.push(stage_decode(model.forward(p, &c.crop)?.dds.data()));
            gts.push(s);
        }
    }
    let (acc, f1) = eval_dds(&preds, &gts)?;
    Ok((acc / 100.0, f1 / 100.0))
}

/// Mean loss of the batch `idx` in epoch `epoch`.
type BatchLoss<'a> = dyn FnMut(&Binding, &[usize], usize) -> Result<Tensor> + 'a;

/// Shared mini-batch loop: shuffles `0..n` every epoch, asks `batch_loss`
/// for the mean loss of a batch, and steps AdamW on the non-frozen
/// parameters. Returns seconds spent outside `evaluate`.
#[allow(clippy::too_many_arguments)]
fn fit(
    ps: &mut ParamStore,
    lr: f64,
    warmup: usize,
    weight_decay: f64,
    epochs: usize,
    batch: usize,
    n: usize,
    rng_seed: (u64, u64),
    batch_loss: &mut BatchLoss,
    evaluate: &mut dyn FnMut(&ParamStore, usize, f64, f64) -> Result<()>,
) -> Result<f64> {
    let steps = n.div_ceil(batch);
    let schedule = Schedule { peak: lr, warmup, total: (epochs * steps).max(1) };
    let mut opt = AdamW::new(ps, weight_decay);
    let mut step = 0;
    let mut secs = 0.0;
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let mut rng = epoch_rng(rng_seed.0, rng_seed.1, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr_now = schedule.lr(step);
        for idx in order.chunks(batch) {
            let p = ps.bind(true);
            let loss = batch_loss(&p, idx, epoch)?;
            let v = loss.item()? as f64;
            if !v.is_finite() {
                return Err(Error::Numerics(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += v * idx.len() as f64;
            loss.backward()?;
            let grads: Vec<Option<Vec<f64>>> =
                p.grads().into_iter().map(|g| g.map(|g| g.into_iter().map(f64::from).collect())).collect();
            lr_now = schedule.lr(step);
            opt.step(ps, &grads, lr_now, 1.0)?;
            step += 1;
        }
        secs += t0.elapsed().as_secs_f64();
        evaluate(ps, epoch + 1, loss_sum / n as f64, lr_now)?;
    }
    Ok(secs)
}

fn mean_of(terms: Vec<Tensor>) -> Result<Tensor> {
    let k = terms.len() as f32;
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Input("empty batch".into()))?;
    it.try_fold(first, |a, t| a.add(&t))?.scale(1.0 / k)
}

/// Everything produced by the three-stage protocol.
#[derive(Debug, Clone)]
pub struct HenaRun {
    pub store: ParamStore,
    pub model: MiniHena,
    /// Parameter snapshots after each stage.
    pub stages: Vec<ParamStore>,
    /// SHA-256 of the shared backbone after each stage.
    pub backbone_hashes: Vec<String>,
    /// SHA-256 of the caries head after each stage.
    pub carseg_hashes: Vec<String>,
    pub stage3_trainable: usize,
    /// Training seconds per stage, excluding validation.
    pub train_secs: [f64; 3],
    pub eval: HenaEval,
}

pub fn build_hena(cfg: &TrainConfig) -> (ParamStore, MiniHena) {
    let mut ps = ParamStore::new(cfg.seed ^ 0x4845_4e41);
    let model = MiniHena::new(&mut ps, cfg.gcst);
    (ps, model)
}

fn train_sample(cfg: &TrainConfig, pair: &MaskPair, epoch: usize, i: usize) -> MaskPair {
    if cfg.rotate_augment {
        augment(pair, epoch_rng(cfg.seed, 11, epoch * 1_000_003 + i).random())
    } else {
        pair.clone()
    }
}

/// Stage 1 trains the whole network on caries masks; stage 2 freezes it
/// and fits the anomaly head on cached trunk features; stage 3 fits the
/// stage head as a linear probe on cached pooled bottleneck features.
/// The probe is trained on standardized features and the scaling is folded
/// into its weights afterwards, so the saved head reads raw features.
/// `on_epoch(stage, metrics)` receives every epoch's validation line.
pub fn train_hena_sequential(
    cfg: &TrainConfig,
    crops: &HenaCrops,
    on_epoch: &mut dyn FnMut(usize, &EpochMetrics) -> Result<()>,
) -> Result<HenaRun> {
    let (train, val) = (&crops.train[..], &crops.val[..]);
    let (probe_train, probe_val) = (&crops.probe_train[..], &crops.probe_val[..]);
    if train.is_empty() || val.is_empty() || probe_train.is_empty() || probe_val.is_empty() {
        return Err(Error::Config("multi-task training needs non-empty crop sets".into()));
    }
    let (mut ps, model) = build_hena(cfg);
    let mut stages = Vec::new();
    let mut backbone_hashes = Vec::new();
    let mut carseg_hashes = Vec::new();
    let mut train_secs = [0.0; 3];

    // Stage 1: shared backbone and caries head.
    ps.set_all_frozen(false);
    ps.set_frozen_prefix("hena.ad", true);
    ps.set_frozen_prefix("hena.dds", true);
    train_secs[0] = fit(
        &mut ps,
        cfg.hena_lr,
        cfg.hena_warmup,
        cfg.weight_decay,
        cfg.carseg_epochs,
        cfg.hena_batch,
        train.len(),
        (cfg.seed, 21),
        &mut |p, idx, epoch| {
            let terms = idx
                .iter()
                .map(|&i| {
                    let s = train_sample(cfg, &train[i], epoch, i);
                    let f = model.features(p, &s.crop)?;
                    hena_loss(Some((&model.carseg_logits(p, &f.trunk)?.sigmoid()?, &s.carseg.to_f32())), None, None)
                })
                .collect::<Result<Vec<_>>>()?;
            mean_of(terms)
        },
        &mut |ps, epoch, loss, lr| {
            let e = evaluate_hena(&model, &ps.bind(false), val)?;
            on_epoch(1, &EpochMetrics { epoch, loss, dice_carseg: Some(e.dice_carseg), lr, ..Default::default() })
        },
    )?;
    stages.push(ps.clone());
    backbone_hashes.push(params_hash(&ps, &BACKBONE_PREFIXES)?);
    carseg_hashes.push(params_hash(&ps, &["hena.carseg"])?);

    // Frozen trunk features for the anomaly stage.
    let t_cache = Instant::now();
    let trunks = |set: &[MaskPair]| -> Result<Vec<Tensor>> {
        let p = ps.bind(false);
        set.iter().map(|c| Ok(model.features(&p, &c.crop)?.trunk.detach())).collect()
    };
    let (train_f, val_f) = (trunks(train)?, trunks(val)?);
    let cache_secs = t_cache.elapsed().as_secs_f64();

    // Stage 2: anomaly head on the frozen trunk.
    ps.set_all_frozen(true);
    ps.set_frozen_prefix("hena.ad", false);
    train_secs[1] = cache_secs
        + fit(
            &mut ps,
            cfg.hena_lr,
            cfg.hena_warmup,
            cfg.weight_decay,
            cfg.ad_epochs,
            cfg.hena_batch,
            train.len(),
            (cfg.seed, 22),
            // Dice pooled over the batch: a third of the crops carry no
            // anomaly, and per-crop smoothed Dice on those rewards an empty
            // mask strongly enough to collapse the head.
            &mut |p, idx, _| {
                let preds = idx.iter().map(|&i| model.ad_logits(p, &train_f[i])?.sigmoid()).collect::<Result<Vec<_>>>()?;
                let targets: Vec<f32> = idx.iter().flat_map(|&i| train[i].ad.to_f32()).collect();
                dice_loss(&Tensor::concat(&preds)?, &targets)
            },
            &mut |ps, epoch, loss, lr| {
                let p = ps.bind(false);
                let mut c = SegCounts::default();
                for (pair, trunk) in val.iter().zip(&val_f) {
                    let m = threshold_logits(model.ad_logits(&p, trunk)?.data(), pair.crop.width)?;
                    c.add(SegCounts::of(&m, &pair.ad)?);
                }
                on_epoch(2, &EpochMetrics { epoch, loss, dice_ad: Some(c.dice()), lr, ..Default::default() })
            },
        )?;
    drop((train_f, val_f));
    stages.push(ps.clone());
    backbone_hashes.push(params_hash(&ps, &BACKBONE_PREFIXES)?);
    carseg_hashes.push(params_hash(&ps, &["hena.carseg"])?);

    // Stage 3: linear probe for the ordinal stage on standardized pooled
    // bottleneck features.
    let t_cache = Instant::now();
    let pooled = |set: &[MaskPair]| -> Result<Vec<Vec<f32>>> {
        let p = ps.bind(false);
        set.iter().map(|c| Ok(MiniHena::pooled(&model.features(&p, &c.crop)?.bottleneck)?.data().to_vec())).collect()
    };
    let (mut train_rows, mut val_rows) = (pooled(probe_train)?, pooled(probe_val)?);
    let (mean, sd) = column_scaling(&train_rows);
    for r in train_rows.iter_mut().chain(val_rows.iter_mut()) {
        r.iter_mut().zip(mean.iter().zip(&sd)).for_each(|(v, (m, s))| *v = (*v - m) / s);
    }
    let cache_secs = t_cache.elapsed().as_secs_f64();
    ps.set_all_frozen(true);
    ps.set_frozen_prefix("hena.dds", false);
    let stage3_trainable = ps.trainable_count();
    let stage_of = |c: &MaskPair| c.stage.ok_or_else(|| Error::Input("crop without a stage label".into()));
    let train_stages: Vec<StageLabel> = probe_train.iter().map(stage_of).collect::<Result<_>>()?;
    let val_stages: Vec<StageLabel> = probe_val.iter().map(stage_of).collect::<Result<_>>()?;
    let d = ENC_WIDTHS[3];
    let batch_rows = |idx: &[usize]| Tensor::new(&[idx.len(), d], idx.iter().flat_map(|&i| train_rows[i].iter().copied()).collect());
    let val_x = Tensor::new(&[val_rows.len(), d], val_rows.concat())?;
    train_secs[2] = cache_secs
        + fit(
            &mut ps,
            cfg.dds_lr,
            cfg.hena_warmup,
            cfg.weight_decay,
            cfg.dds_epochs,
            cfg.hena_batch,
            probe_train.len(),
            (cfg.seed, 23),
            &mut |p, idx, _| {
                let stages: Vec<StageLabel> = idx.iter().map(|&i| train_stages[i]).collect();
                ordinal_graph(&model.dds_logits(p, &batch_rows(idx)?)?, &stages)
            },
            &mut |ps, epoch, loss, lr| {
                let logits = model.dds_logits(&ps.bind(false), &val_x)?;
                let preds: Vec<StageLabel> = logits.data().chunks(STAGE_LOGITS).map(stage_decode).collect();
                let (acc, f1) = eval_dds(&preds, &val_stages)?;
                on_epoch(
                    3,
                    &EpochMetrics { epoch, loss, acc_dds: Some(acc / 100.0), f1_dds: Some(f1 / 100.0), lr, ..Default::default() },
                )
            },
        )?;
    model.fold_dds_scaling(&mut ps, &mean, &sd)?;
    stages.push(ps.clone());
    backbone_hashes.push(params_hash(&ps, &BACKBONE_PREFIXES)?);
    carseg_hashes.push(params_hash(&ps, &["hena.carseg"])?);

    let p = ps.bind(false);
    let mut eval = evaluate_hena(&model, &p, val)?;
    (eval.acc_dds, eval.f1_dds) = evaluate_stages(&model, &p, probe_val)?;
    drop(p);
    Ok(HenaRun { store: ps, model, stages, backbone_hashes, carseg_hashes, stage3_trainable, train_secs, eval })
}

/// Train every parameter jointly on all three terms for `epochs` epochs,
/// starting from `ps`. Returns training seconds; used as the cost baseline
/// for the sequential protocol.
pub fn train_hena_joint(cfg: &TrainConfig, ps: &mut ParamStore, model: &MiniHena, train: &[MaskPair], epochs: usize) -> Result<f64> {
    ps.set_all_frozen(false);
    fit(
        ps,
        cfg.hena_lr,
        cfg.hena_warmup,
        cfg.weight_decay,
        epochs,
        cfg.hena_batch,
        train.len(),
        (cfg.seed, 24),
        &mut |p, idx, epoch| {
            let terms = idx
                .iter()
                .map(|&i| {
                    let s = train_sample(cfg, &train[i], epoch, i);
                    let out = model.forward(p, &s.crop)?;
                    let stage = s.stage.ok_or_else(|| Error::Input("crop without a stage label".into()))?;
                    hena_loss(
                        Some((&out.carseg.sigmoid()?, &s.carseg.to_f32())),
                        Some((&out.ad.sigmoid()?, &s.ad.to_f32())),
                        Some((&out.dds, stage)),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            mean_of(terms)
        },
        &mut |_, _, _, _| Ok(()),
    )
}
