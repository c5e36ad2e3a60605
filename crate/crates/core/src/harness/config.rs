//! Flat `key = value` training configuration.

use std::path::Path;

use crate::error::{Error, Result};

/// Every knob of the synthetic pipeline. Defaults are the desk-scale
/// settings used by the acceptance run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub width: usize,
    pub height: usize,

    pub det_epochs: usize,
    pub det_batch: usize,
    pub det_lr: f64,
    pub det_warmup: usize,
    /// Stop detector training once validation mAP₅₀ reaches this value
    /// (`0` disables the check).
    pub det_stop_map: f64,
    pub obj_weight: f32,
    pub ssm: bool,
    pub bifpn: bool,
    pub flip_augment: bool,

    pub weight_decay: f64,

    pub crop: usize,
    pub crops_per_scene: usize,
    /// Teeth per scene for the stage probe.
    pub probe_crops_per_scene: usize,
    pub hena_batch: usize,
    pub hena_lr: f64,
    pub hena_warmup: usize,
    pub carseg_epochs: usize,
    pub ad_epochs: usize,
    pub dds_epochs: usize,
    pub dds_lr: f64,
    pub gcst: bool,
    pub rotate_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            train_scenes: 256,
            val_scenes: 64,
            width: 256,
            height: 128,
            det_epochs: 15,
            det_batch: 8,
            det_lr: 3e-3,
            det_warmup: 32,
            det_stop_map: 0.0,
            obj_weight: 1.0,
            ssm: true,
            bifpn: true,
            flip_augment: true,
            weight_decay: 5e-2,
            crop: 64,
            crops_per_scene: 2,
            probe_crops_per_scene: 8,
            hena_batch: 16,
            hena_lr: 3e-3,
            hena_warmup: 16,
            carseg_epochs: 25,
            ad_epochs: 50,
            dds_epochs: 100,
            dds_lr: 3e-2,
            gcst: true,
            rotate_augment: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Apply one setting. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "val_scenes" => self.val_scenes = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "det_epochs" => self.det_epochs = parse(key, v)?,
            "det_batch" => self.det_batch = parse(key, v)?,
            "det_lr" => self.det_lr = parse(key, v)?,
            "det_warmup" => self.det_warmup = parse(key, v)?,
            "det_stop_map" => self.det_stop_map = parse(key, v)?,
            "obj_weight" => self.obj_weight = parse(key, v)?,
            "ssm" => self.ssm = parse_bool(key, v)?,
            "bifpn" => self.bifpn = parse_bool(key, v)?,
            "flip_augment" => self.flip_augment = parse_bool(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "crops_per_scene" => self.crops_per_scene = parse(key, v)?,
            "probe_crops_per_scene" => self.probe_crops_per_scene = parse(key, v)?,
            "hena_batch" => self.hena_batch = parse(key, v)?,
            "hena_lr" => self.hena_lr = parse(key, v)?,
            "hena_warmup" => self.hena_warmup = parse(key, v)?,
            "carseg_epochs" => self.carseg_epochs = parse(key, v)?,
            "ad_epochs" => self.ad_epochs = parse(key, v)?,
            "dds_epochs" => self.dds_epochs = parse(key, v)?,
            "dds_lr" => self.dds_lr = parse(key, v)?,
            "gcst" => self.gcst = parse_bool(key, v)?,
            "rotate_augment" => self.rotate_augment = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.width.is_multiple_of(32) || !self.height.is_multiple_of(32) || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("scene size {}×{} must be a positive multiple of 32", self.width, self.height)));
        }
        if !self.crop.is_multiple_of(8) || self.crop == 0 {
            return Err(Error::Config(format!("crop size {} must be a positive multiple of 8", self.crop)));
        }
        if self.det_batch == 0 || self.hena_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Config("scene counts must be positive".into()));
        }
        if self.crops_per_scene == 0 || self.probe_crops_per_scene == 0 {
            return Err(Error::Config("crops per scene must be positive".into()));
        }
        Ok(())
    }
}
