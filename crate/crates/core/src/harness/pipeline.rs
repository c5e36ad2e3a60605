//! File-level commands behind the CLI. Every command writes its artifacts
//! under an output path and reports metrics as JSON lines through `emit`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::TrainConfig;
use super::detector::{detect, DetectParams};
use super::metrics::eval_map;
use super::synth::{boxes_by_image, read_boxes, read_dataset, synth_dataset, write_boxes, write_dataset, BoxRecord, Scene};
use super::train::{build_detector, build_hena, threshold_logits, train_detector, train_hena_sequential, HenaCrops};
use crate::error::{Error, Result};
use crate::image::{read_pgm, write_pgm, GrayImage, Mask};
use crate::labelpipe::{crop_and_resize, filter_pseudo_labels, fit_box_stats, spatial_realign, ChiSquareGate, FilterParams, FilterReport, CONTEXT_MARGIN, DEFAULT_REG};
use crate::losses::{stage_decode, BBox};

/// Sink for JSON metric lines.
pub type Emit<'a> = &'a mut dyn FnMut(&str) -> Result<()>;

/// Append-only `metrics.jsonl` that also forwards every line to `emit`.
struct MetricLog<'a> {
    file: BufWriter<fs::File>,
    emit: Emit<'a>,
}

impl<'a> MetricLog<'a> {
    fn create(path: &Path, emit: Emit<'a>) -> Result<Self> {
        Ok(Self { file: BufWriter::new(fs::File::create(path)?), emit })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}")?;
        (self.emit)(s)
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// `train_scenes + val_scenes` scenes, written in the dataset layout.
pub fn cmd_synth(cfg: &TrainConfig, out: &Path, emit: Emit) -> Result<()> {
    let scenes = synth_dataset(cfg.seed, cfg.train_scenes + cfg.val_scenes, cfg.width, cfg.height)?;
    write_dataset(out, &scenes)?;
    let boxes: usize = scenes.iter().map(|s| s.boxes.len()).sum();
    emit(&json!({"scenes": scenes.len(), "boxes": boxes}).to_string())
}

/// The first `train_scenes` scenes train, the rest validate.
fn split(cfg: &TrainConfig, mut scenes: Vec<Scene>) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if scenes.len() <= cfg.train_scenes {
        return Err(Error::Config(format!("dataset has {} scenes, need more than train_scenes = {}", scenes.len(), cfg.train_scenes)));
    }
    let val = scenes.split_off(cfg.train_scenes);
    Ok((scenes, val))
}

/// Curate candidate boxes against the box statistics of a reference
/// dataset. Writes the kept boxes to `out`.
pub fn cmd_filter_labels(data: &Path, candidates: &Path, out: &Path, p_threshold: f64, emit: Emit) -> Result<()> {
    let scenes = read_dataset(data)?;
    let (w, h) = scenes.first().map(|s| (s.image.width, s.image.height)).ok_or_else(|| Error::Input("empty reference dataset".into()))?;
    let reference: Vec<BBox> = scenes.iter().flat_map(|s| s.boxes.iter().copied()).collect();
    let stats = fit_box_stats(&reference, w as f64, h as f64, DEFAULT_REG)?;
    let gate = ChiSquareGate::new(p_threshold)?;
    let records = read_boxes(candidates)?;
    let n_images = records.iter().map(|r| r.image_id + 1).max().unwrap_or(0);
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for (id, cands) in boxes_by_image(&records, n_images)?.iter().enumerate() {
        let r = filter_pseudo_labels(cands, w as f64, h as f64, &FilterParams::default(), &stats, &gate)?;
        kept.extend(r.kept.iter().map(|b| BoxRecord::from_bbox(id, None, b)));
        report.absorb(r);
    }
    write_boxes(out, &kept)?;
    emit(
        &json!({
            "candidates": records.len(),
            "kept": kept.len(),
            "removed_conf": report.removed_conf,
            "removed_nms": report.removed_nms,
            "removed_chi2": report.removed_chi2,
        })
        .to_string(),
    )
}

/// Train the detector on a dataset directory. Writes `checkpoint/` and
/// `metrics.jsonl` under `out`.
pub fn cmd_train_detect(cfg: &TrainConfig, data: &Path, out: &Path, emit: Emit) -> Result<()> {
    let (train, val) = split(cfg, read_dataset(data)?)?;
    fs::create_dir_all(out)?;
    let mut log = MetricLog::create(&out.join("metrics.jsonl"), emit)?;
    let (ps, _) = train_detector(cfg, &train, &val, &mut |m| log.line(&m.to_json()))?;
    log.finish()?;
    save_checkpoint(&ps, &out.join("checkpoint"))
}

/// Three-stage multi-task training on ground-truth tooth crops. Writes
/// `stage1/`, `stage2/`, `stage3/` checkpoints and `metrics.jsonl`.
pub fn cmd_train_hena(cfg: &TrainConfig, data: &Path, out: &Path, emit: Emit) -> Result<()> {
    let (train, val) = split(cfg, read_dataset(data)?)?;
    let crops = HenaCrops::new(cfg, &train, &val)?;
    fs::create_dir_all(out)?;
    let mut log = MetricLog::create(&out.join("metrics.jsonl"), emit)?;
    let run = train_hena_sequential(cfg, &crops, &mut |_, m| log.line(&m.to_json()))?;
    log.finish()?;
    for (i, ps) in run.stages.iter().enumerate() {
        save_checkpoint(ps, &out.join(format!("stage{}", i + 1)))?;
    }
    Ok(())
}

/// mAP of predicted against ground-truth box files.
pub fn cmd_eval(pred: &Path, gt: &Path, emit: Emit) -> Result<()> {
    let (p, g) = (read_boxes(pred)?, read_boxes(gt)?);
    let n = p.iter().chain(&g).map(|r| r.image_id + 1).max().unwrap_or(0);
    let (map50, map5095) = eval_map(&boxes_by_image(&p, n)?, &boxes_by_image(&g, n)?);
    emit(&json!({"images": n, "map50": map50, "map5095": map5095}).to_string())
}

fn read_image(path: &Path) -> Result<GrayImage> {
    let (w, h, bytes) = read_pgm(&mut BufReader::new(fs::File::open(path)?))?;
    GrayImage::from_bytes(w, h, &bytes)
}

fn save_mask(path: &Path, m: &Mask) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    write_pgm(&mut f, m.width, m.height, &m.data)?;
    f.flush()?;
    Ok(())
}

fn or_into(acc: &mut Mask, m: &Mask) {
    acc.data.iter_mut().zip(&m.data).for_each(|(a, &b)| *a |= b);
}

/// Detect teeth, crop each, run the multi-task network, and paste both
/// masks back into image coordinates. Writes `boxes.jsonl`, `stages.csv`,
/// `carseg.pgm` and `ad.pgm` under `out`.
pub fn cmd_infer(cfg: &TrainConfig, detector: &Path, hena: &Path, image: &Path, out: &Path, emit: Emit) -> Result<()> {
    let img = read_image(image)?;
    let (mut dps, det) = build_detector(cfg)?;
    load_checkpoint(&mut dps, detector)?;
    let (mut hps, net) = build_hena(cfg);
    load_checkpoint(&mut hps, hena)?;
    let boxes = detect(&det, &dps.bind(false), &img, &DetectParams::default())?;
    let (w, h) = (img.width, img.height);
    let (mut carseg, mut ad) = (Mask::zeros(w, h), Mask::zeros(w, h));
    let empty = Mask::zeros(w, h);
    let hp = hps.bind(false);
    let mut records = Vec::with_capacity(boxes.len());
    let mut stages = String::from("tooth_id,stage_letter\n");
    for (t, b) in boxes.iter().enumerate() {
        let (pair, mapping) = crop_and_resize(&img, &empty, &empty, b, cfg.crop, CONTEXT_MARGIN)?;
        let o = net.forward(&hp, &pair.crop)?;
        or_into(&mut carseg, &spatial_realign(&threshold_logits(o.carseg.data(), cfg.crop)?, &mapping, w, h)?);
        or_into(&mut ad, &spatial_realign(&threshold_logits(o.ad.data(), cfg.crop)?, &mapping, w, h)?);
        records.push(BoxRecord::from_bbox(0, Some(t), b));
        stages.push_str(&format!("{t},{}\n", stage_decode(o.dds.data()).letter()));
    }
    fs::create_dir_all(out)?;
    write_boxes(&out.join("boxes.jsonl"), &records)?;
    fs::write(out.join("stages.csv"), stages)?;
    save_mask(&out.join("carseg.pgm"), &carseg)?;
    save_mask(&out.join("ad.pgm"), &ad)?;
    emit(
        &json!({
            "teeth": boxes.len(),
            "width": w,
            "height": h,
            "carseg_pixels": carseg.count(),
            "ad_pixels": ad.count(),
        })
        .to_string(),
    )
}
