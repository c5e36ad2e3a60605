//! Deterministic synthetic panoramic scenes: two arches of bright rounded
//! teeth on textured noise, with dark elliptical lesions and bright wedges.

use std::f32::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_pgm, write_pgm, GrayImage, Mask};
use crate::losses::{BBox, StageLabel};

pub const SCENE_WIDTH: usize = 256;
pub const SCENE_HEIGHT: usize = 128;
/// Tooth slots per arch.
pub const SLOTS_PER_ARCH: usize = 10;
pub const MAX_TEETH: usize = 2 * SLOTS_PER_ARCH;

/// One rendered scene. Boxes are in pixels, aligned with `stages`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
    pub carseg: Mask,
    pub ad: Mask,
    pub stages: Vec<StageLabel>,
}

struct Geometry {
    slot: f32,
    tooth_w: f32,
    h_min: f32,
    h_max: f32,
}

fn geometry(width: usize, height: usize) -> Result<Geometry> {
    let slot = 0.8 * width as f32 / SLOTS_PER_ARCH as f32;
    let tooth_w = (0.7 * slot).min(16.0);
    if tooth_w < 6.0 || height < 32 {
        return Err(Error::Config(format!("{width}×{height} image is too small for {MAX_TEETH} tooth slots")));
    }
    let h = height as f32;
    Ok(Geometry { slot, tooth_w, h_min: 0.14 * h, h_max: 0.39 * h })
}

/// Stage bucket of a tooth height: octiles of `[h_min, h_max)`.
fn stage_of_height(height: f32, g: &Geometry) -> usize {
    let t = (height - g.h_min) / (g.h_max - g.h_min);
    ((t * 8.0).floor() as isize).clamp(0, 7) as usize
}

fn inside_rounded(px: f32, py: f32, x1: f32, y1: f32, x2: f32, y2: f32, r: f32) -> bool {
    if px < x1 || px > x2 || py < y1 || py > y2 {
        return false;
    }
    let cx = px.clamp(x1 + r, x2 - r);
    let cy = py.clamp(y1 + r, y2 - r);
    (px - cx).powi(2) + (py - cy).powi(2) <= r * r
}

/// Render one scene. `n_teeth` of the 20 slots are occupied.
pub fn synth_opg(seed: u64, width: usize, height: usize, n_teeth: usize) -> Result<Scene> {
    if n_teeth == 0 || n_teeth > MAX_TEETH {
        return Err(Error::Config(format!("n_teeth must be in 1..={MAX_TEETH}, got {n_teeth}")));
    }
    let g = geometry(width, height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f32, height as f32);

    // smooth background texture plus grain
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| (rng.random_range(0.01..0.06), rng.random_range(0.01..0.08), rng.random_range(0.0..2.0 * PI), rng.random_range(3.0..8.0)))
        .collect();
    let mut pix = vec![0.0f32; width * height];
    for y in 0..height {
        for x in 0..width {
            let tex: f32 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x as f32 + fy * y as f32 + ph).sin()).sum();
            pix[y * width + x] = 40.0 + tex;
        }
    }
    let mut carseg = Mask::zeros(width, height);
    let mut ad = Mask::zeros(width, height);
    let mut boxes = Vec::with_capacity(n_teeth);
    let mut stages = Vec::with_capacity(n_teeth);

    let mut slots = sample(&mut rng, MAX_TEETH, n_teeth).into_vec();
    slots.sort_unstable();
    for slot in slots {
        let upper = slot < SLOTS_PER_ARCH;
        let k = slot % SLOTS_PER_ARCH;
        let cx = 0.1 * wf + (k as f32 + 0.5) * g.slot + rng.random_range(-1.5..1.5);
        let stage = rng.random_range(0..8usize);
        let th = g.h_min + (stage as f32 + rng.random_range(0.15..0.85)) * (g.h_max - g.h_min) / 8.0;
        let tw = g.tooth_w * rng.random_range(0.9..1.05);
        let curve = 0.05 * hf * ((cx - wf / 2.0) / (wf / 2.0)).powi(2);
        let (y1, y2) = if upper {
            let top = 0.03 * hf + curve;
            (top, top + th)
        } else {
            let bottom = 0.97 * hf - curve;
            (bottom - th, bottom)
        };
        let (x1, x2) = (cx - tw / 2.0, cx + tw / 2.0);
        let shade = 120.0 + 12.0 * stage as f32 + rng.random_range(-3.0..3.0);
        let radius = 0.3 * tw;

        // lesion geometry: caries near the biting edge, wedge near the root
        let caries = rng.random_bool(0.5).then(|| {
            let rx = tw * rng.random_range(0.22..0.32);
            let ry = rx * rng.random_range(1.0..1.4);
            let ex = cx + rng.random_range(-0.1..0.1) * tw;
            let edge = if upper { y2 - ry - 0.12 * th } else { y1 + ry + 0.12 * th };
            (ex, edge, rx, ry)
        });
        let wedge = rng.random_bool(0.4).then(|| {
            let half = tw * rng.random_range(0.25..0.35);
            let depth = th * rng.random_range(0.25..0.35);
            let wx = cx + rng.random_range(-0.1..0.1) * tw;
            let base = if upper { y1 + 0.08 * th } else { y2 - 0.08 * th };
            let apex = if upper { base + depth } else { base - depth };
            (wx, base, apex, half)
        });

        let (xa, xb) = (x1.floor().max(0.0) as usize, (x2.ceil() as usize).min(width));
        let (ya, yb) = (y1.floor().max(0.0) as usize, (y2.ceil() as usize).min(height));
        for y in ya..yb {
            for x in xa..xb {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                if !inside_rounded(px, py, x1, y1, x2, y2, radius) {
                    continue;
                }
                let i = y * width + x;
                pix[i] = shade;
                if let Some((wx, base, apex, half)) = wedge {
                    let t = (py - base) / (apex - base);
                    if (0.0..=1.0).contains(&t) && (px - wx).abs() <= half * (1.0 - t) {
                        pix[i] = 250.0;
                        ad.data[i] = 1;
                    }
                }
                if let Some((ex, ey, rx, ry)) = caries {
                    if ((px - ex) / rx).powi(2) + ((py - ey) / ry).powi(2) <= 1.0 {
                        pix[i] = 55.0;
                        carseg.data[i] = 1;
                        ad.data[i] = 0;
                    }
                }
            }
        }
        boxes.push(BBox::new(cx, (y1 + y2) / 2.0, tw, th));
        stages.push(StageLabel::new(stage_of_height(th, &g))?);
    }
    for v in pix.iter_mut() {
        *v = (*v + rng.random_range(-6.0..6.0)).round().clamp(0.0, 255.0);
    }
    Ok(Scene { image: GrayImage::new(width, height, pix)?, boxes, carseg, ad, stages })
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// `count` scenes of 12–20 teeth each.
pub fn synth_dataset(seed: u64, count: usize, width: usize, height: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let s = scene_seed(seed, i);
            let n = 12 + (s % 9) as usize;
            synth_opg(s, width, height, n)
        })
        .collect()
}

/// One box line of `boxes.jsonl`, in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tooth_id: Option<usize>,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub conf: f32,
}

impl BoxRecord {
    pub fn to_bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h).with_conf(self.conf)
    }

    pub fn from_bbox(image_id: usize, tooth_id: Option<usize>, b: &BBox) -> Self {
        Self { image_id, tooth_id, cx: b.cx, cy: b.cy, w: b.w, h: b.h, conf: b.conf }
    }
}

pub fn write_boxes(path: &Path, records: &[BoxRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Group records by image id into `count` per-image box lists.
pub fn boxes_by_image(records: &[BoxRecord], count: usize) -> Result<Vec<Vec<BBox>>> {
    let mut out = vec![Vec::new(); count];
    for r in records {
        out.get_mut(r.image_id)
            .ok_or_else(|| Error::Input(format!("box for image {} outside 0..{count}", r.image_id)))?
            .push(r.to_bbox());
    }
    Ok(out)
}

fn image_name(id: usize) -> String {
    format!("{id:05}.pgm")
}

/// Write scenes in the dataset directory layout.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    for sub in ["images", "masks_carseg", "masks_ad"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut records = Vec::new();
    let mut stages = String::from("image_id,tooth_id,stage_letter\n");
    for (id, s) in scenes.iter().enumerate() {
        let (w, h) = (s.image.width, s.image.height);
        let put = |sub: &str, bytes: &[u8]| -> Result<()> {
            let mut f = BufWriter::new(fs::File::create(dir.join(sub).join(image_name(id)))?);
            write_pgm(&mut f, w, h, bytes)?;
            f.flush()?;
            Ok(())
        };
        put("images", &s.image.to_bytes())?;
        put("masks_carseg", &s.carseg.data)?;
        put("masks_ad", &s.ad.data)?;
        for (t, (b, st)) in s.boxes.iter().zip(&s.stages).enumerate() {
            records.push(BoxRecord::from_bbox(id, Some(t), b));
            stages.push_str(&format!("{id},{t},{}\n", st.letter()));
        }
    }
    write_boxes(&dir.join("boxes.jsonl"), &records)?;
    fs::write(dir.join("stages.csv"), stages)?;
    Ok(())
}

fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pgm(&mut BufReader::new(fs::File::open(path)?))
}

/// Read a dataset directory back into scenes.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let mut ids: Vec<usize> = fs::read_dir(dir.join("images"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".pgm")).and_then(|n| n.parse().ok()))
        .collect();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, &id)| i != id) {
        return Err(Error::Input(format!("{}: image ids are not contiguous from 0", dir.display())));
    }
    let records = read_boxes(&dir.join("boxes.jsonl"))?;
    let stage_text = fs::read_to_string(dir.join("stages.csv"))?;
    let mut stage_of = std::collections::HashMap::new();
    for line in stage_text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse(format!("bad stages.csv line {line:?}"));
        if f.len() != 3 {
            return Err(bad());
        }
        let key: (usize, usize) = (f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?);
        let letter = f[2].chars().next().ok_or_else(bad)?;
        stage_of.insert(key, StageLabel::from_letter(letter)?);
    }
    let mut scenes = Vec::with_capacity(ids.len());
    for &id in &ids {
        let (w, h, img) = load_pgm(&dir.join("images").join(image_name(id)))?;
        let (_, _, cs) = load_pgm(&dir.join("masks_carseg").join(image_name(id)))?;
        let (_, _, adm) = load_pgm(&dir.join("masks_ad").join(image_name(id)))?;
        let mut boxes = Vec::new();
        let mut stages = Vec::new();
        for r in records.iter().filter(|r| r.image_id == id) {
            let t = r.tooth_id.ok_or_else(|| Error::Parse(format!("ground-truth box of image {id} has no tooth_id")))?;
            boxes.push(r.to_bbox());
            stages.push(*stage_of.get(&(id, t)).ok_or_else(|| Error::Parse(format!("no stage for image {id} tooth {t}")))?);
        }
        scenes.push(Scene {
            image: GrayImage::from_bytes(w, h, &img)?,
            boxes,
            carseg: Mask::new(w, h, cs)?,
            ad: Mask::new(w, h, adm)?,
            stages,
        });
    }
    Ok(scenes)
}
