//! Miniature single-class tooth detector: convolutional early stages,
//! scan-mixing late stages, a weighted bidirectional pyramid and a shared
//! anchor-free head with distance distributions and objectness.

use crate::blocks::{BiFpn, C2fSsm, Conv, DwSep};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::labelpipe::nms;
use crate::losses::{iou, mathe_loss, BBox, BoxTensors, LossWeights, WiouState, DFL_BINS};
use crate::params::{Binding, ParamStore};
use crate::tensor::{bce_with_logits, log_softmax, Tensor};

/// Strides of the pyramid levels fed to the head, finest first.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Positive cells per ground-truth box.
pub const TOPK: usize = 3;
/// Side of the square prior at a cell, in strides.
pub const PRIOR_SCALE: f32 = 4.0;

/// Architecture switches and widths.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSpec {
    /// Output channels of the stem and of the four stages.
    pub widths: [usize; 5],
    pub neck: usize,
    /// Scan mixers in the two deepest stages.
    pub ssm: bool,
    /// Weighted bidirectional fusion; without it the lateral maps go
    /// straight to the head.
    pub bifpn: bool,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self { widths: [8, 16, 24, 32, 32], neck: 16, ssm: true, bifpn: true }
    }
}

#[derive(Debug, Clone)]
struct Head {
    box_tower: [DwSep; 2],
    obj_tower: [DwSep; 2],
    box_out: Conv,
    obj_out: Conv,
}

#[derive(Debug, Clone)]
pub struct MiniMathe {
    pub spec: DetectorSpec,
    stem: Conv,
    stage_convs: [Conv; 4],
    mixers: [Option<C2fSsm>; 2],
    laterals: [Conv; 4],
    neck: Option<BiFpn>,
    head: Head,
}

/// Head output of one level with `cells = h·w`.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// `[cells × 4·bins]`, sides ordered left, top, right, bottom.
    pub dfl: Tensor,
    /// `[cells]` objectness logits.
    pub obj: Tensor,
}

/// Cell grid of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl GridSpec {
    pub fn center(&self, cell: usize) -> (f32, f32) {
        let s = self.stride as f32;
        (((cell % self.w) as f32 + 0.5) * s, ((cell / self.w) as f32 + 0.5) * s)
    }
}

pub fn grids(width: usize, height: usize) -> Vec<GridSpec> {
    STRIDES.iter().map(|&s| GridSpec { stride: s, h: height / s, w: width / s }).collect()
}

/// Image intensities to network input `[1×H×W]`.
pub fn normalize(image: &GrayImage) -> Result<Tensor> {
    Tensor::new(&[1, image.height, image.width], image.data.iter().map(|v| (v - 100.0) / 60.0).collect())
}

impl MiniMathe {
    pub fn new(ps: &mut ParamStore, spec: DetectorSpec) -> Result<Self> {
        let [c0, c1, c2, c3, c4] = spec.widths;
        let stem = Conv::new(ps, "det.stem", 1, c0, 3, 2);
        let stage_convs = [
            Conv::new(ps, "det.s1.conv", c0, c1, 3, 2),
            Conv::new(ps, "det.s2.conv", c1, c2, 3, 2),
            Conv::new(ps, "det.s3.conv", c2, c3, 3, 2),
            Conv::new(ps, "det.s4.conv", c3, c4, 3, 2),
        ];
        let blocks = usize::from(spec.ssm);
        let mixers = [
            Some(C2fSsm::new(ps, "det.s3.c2f", c3, c3, blocks)?),
            Some(C2fSsm::new(ps, "det.s4.c2f", c4, c4, blocks)?),
        ];
        let n = spec.neck;
        let mut lat = [c1, c2, c3, c4].into_iter().enumerate().map(|(i, c)| Conv::new(ps, &format!("det.lat{i}"), c, n, 1, 1));
        let laterals = std::array::from_fn(|_| lat.next().expect("four levels"));
        let neck = spec.bifpn.then(|| BiFpn::new(ps, "det.neck", STRIDES.len(), n, true));
        let head = Head {
            box_tower: [DwSep::new(ps, "det.head.box0", n, n, 1), DwSep::new(ps, "det.head.box1", n, n, 1)],
            obj_tower: [DwSep::new(ps, "det.head.obj0", n, n, 1), DwSep::new(ps, "det.head.obj1", n, n, 1)],
            box_out: Conv::new(ps, "det.head.box_out", n, 4 * DFL_BINS, 1, 1),
            obj_out: Conv::new(ps, "det.head.obj_out", n, 1, 1, 1),
        };
        // start with a low objectness prior
        ps.set_value(head.obj_out.b, vec![-4.0])?;
        Ok(Self { spec, stem, stage_convs, mixers, laterals, neck, head })
    }

    /// Backbone pyramid at strides 4, 8, 16, 32.
    pub fn backbone(&self, p: &Binding, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut f = self.stem.forward(p, x)?.silu()?;
        let mut out = Vec::with_capacity(4);
        for (i, conv) in self.stage_convs.iter().enumerate() {
            f = conv.forward(p, &f)?.silu()?;
            if i >= 2 {
                if let Some(m) = &self.mixers[i - 2] {
                    f = m.forward(p, &f)?;
                }
            }
            out.push(f.clone());
        }
        Ok(out)
    }

    pub fn forward(&self, p: &Binding, image: &GrayImage) -> Result<Vec<LevelOutput>> {
        if !image.width.is_multiple_of(32) || !image.height.is_multiple_of(32) {
            return Err(Error::Input(format!("detector input {}×{} must be a multiple of 32", image.width, image.height)));
        }
        let feats = self.backbone(p, &normalize(image)?)?;
        let lat: Vec<Tensor> = feats.iter().zip(&self.laterals).map(|(f, l)| l.forward(p, f)).collect::<Result<_>>()?;
        let pyramid = match &self.neck {
            Some(neck) => neck.forward(p, &lat.into_iter().map(Some).collect::<Vec<_>>())?,
            None => lat,
        };
        pyramid.iter().zip(STRIDES).map(|(f, stride)| self.head_level(p, f, stride)).collect()
    }

    fn head_level(&self, p: &Binding, f: &Tensor, stride: usize) -> Result<LevelOutput> {
        let (h, w) = (f.shape()[1], f.shape()[2]);
        let mut b = f.clone();
        for t in &self.head.box_tower {
            b = t.forward(p, &b)?.silu()?;
        }
        let mut o = f.clone();
        for t in &self.head.obj_tower {
            o = t.forward(p, &o)?.silu()?;
        }
        let dfl = self.head.box_out.forward(p, &b)?.reshape(&[4 * DFL_BINS, h * w])?.transpose()?;
        let obj = self.head.obj_out.forward(p, &o)?.reshape(&[h * w])?;
        Ok(LevelOutput { stride, h, w, dfl, obj })
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Expected bin index of each row of `logits [R×bins]`.
fn expected_bins(logits: &[f32]) -> Vec<f32> {
    logits
        .chunks(DFL_BINS)
        .map(|row| {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f64> = row.iter().map(|&v| ((v - m) as f64).exp()).collect();
            let z: f64 = e.iter().sum();
            (e.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>() / z) as f32
        })
        .collect()
}

/// Pixel-space boxes of all cells scoring above `conf_threshold`, before NMS.
pub fn decode(levels: &[LevelOutput], conf_threshold: f32) -> Vec<BBox> {
    let mut out = Vec::new();
    for lv in levels {
        let g = GridSpec { stride: lv.stride, h: lv.h, w: lv.w };
        let s = lv.stride as f32;
        for cell in 0..lv.h * lv.w {
            let conf = sigmoid(lv.obj.data()[cell]);
            if conf < conf_threshold {
                continue;
            }
            let d = expected_bins(&lv.dfl.data()[cell * 4 * DFL_BINS..(cell + 1) * 4 * DFL_BINS]);
            let (ax, ay) = g.center(cell);
            let (x1, y1, x2, y2) = (ax - d[0] * s, ay - d[1] * s, ax + d[2] * s, ay + d[3] * s);
            if x2 > x1 && y2 > y1 {
                out.push(BBox::from_corners(x1, y1, x2, y2).with_conf(conf));
            }
        }
    }
    out
}

/// Inference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub conf_threshold: f32,
    pub nms_iou: f32,
    pub max_det: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self { conf_threshold: 0.05, nms_iou: 0.5, max_det: 100 }
    }
}

fn finish(mut boxes: Vec<BBox>, dp: &DetectParams) -> Vec<BBox> {
    boxes = nms(&boxes, dp.nms_iou);
    boxes.truncate(dp.max_det);
    boxes
}

/// Class-agnostic detection of one image.
pub fn detect(model: &MiniMathe, p: &Binding, image: &GrayImage, dp: &DetectParams) -> Result<Vec<BBox>> {
    Ok(finish(decode(&model.forward(p, image)?, dp.conf_threshold), dp))
}

/// Mirror a pixel-space box about the vertical center line of a
/// `width`-pixel image.
pub fn unflip_px(b: &BBox, width: usize) -> BBox {
    BBox { cx: width as f32 - b.cx, ..*b }
}

/// Predict on the image and its mirror, map the mirrored boxes back, and
/// merge the union with NMS at `dp.nms_iou`.
pub fn tta_detect(model: &MiniMathe, p: &Binding, image: &GrayImage, dp: &DetectParams) -> Result<Vec<BBox>> {
    let mut boxes = decode(&model.forward(p, image)?, dp.conf_threshold);
    let mirrored = decode(&model.forward(p, &image.flip_horizontal())?, dp.conf_threshold);
    boxes.extend(mirrored.iter().map(|b| unflip_px(b, image.width)));
    Ok(finish(boxes, dp))
}

/// One positive cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Match {
    pub level: usize,
    pub cell: usize,
    pub gt: usize,
}

fn prior(g: &GridSpec, cell: usize) -> BBox {
    let (cx, cy) = g.center(cell);
    let side = PRIOR_SCALE * g.stride as f32;
    BBox::new(cx, cy, side, side)
}

/// Center-inside, top-k-by-prior-IoU assignment across all levels.
///
/// For each ground truth, the cells whose centers lie inside it are ranked
/// by IoU between the cell's square prior and the box (ties by level, then
/// cell) and the best `k` are kept; a box containing no cell center takes
/// the finest-level cell under its center. A cell claimed by several boxes
/// goes to the one with the higher IoU (ties to the lower box index).
/// Output is sorted by `(level, cell)`.
pub fn assign_targets(grids: &[GridSpec], gts: &[BBox], k: usize) -> Vec<Match> {
    let mut claims: std::collections::BTreeMap<(usize, usize), (f32, usize)> = Default::default();
    for (gi, g) in gts.iter().enumerate() {
        let (x1, y1, x2, y2) = g.corners();
        let mut cands: Vec<(f32, usize, usize)> = Vec::new();
        for (li, grid) in grids.iter().enumerate() {
            let s = grid.stride as f32;
            // index range of cell centers inside [x1, x2] × [y1, y2]
            let range = |lo: f32, hi: f32, n: usize| {
                let a = (lo / s - 0.5).ceil().max(0.0) as usize;
                let b = ((hi / s - 0.5).floor() + 1.0).clamp(0.0, n as f32) as usize;
                a..b.max(a)
            };
            for i in range(y1, y2, grid.h) {
                for j in range(x1, x2, grid.w) {
                    let cell = i * grid.w + j;
                    cands.push((iou(&prior(grid, cell), g), li, cell));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        cands.truncate(k);
        if cands.is_empty() {
            if let Some(grid) = grids.first() {
                let s = grid.stride as f32;
                let j = ((g.cx / s) as usize).min(grid.w - 1);
                let i = ((g.cy / s) as usize).min(grid.h - 1);
                let cell = i * grid.w + j;
                cands.push((iou(&prior(grid, cell), g), 0, cell));
            }
        }
        for (score, li, cell) in cands {
            let e = claims.entry((li, cell)).or_insert((score, gi));
            if score > e.0 {
                *e = (score, gi);
            }
        }
    }
    claims.into_iter().map(|((level, cell), (_, gt))| Match { level, cell, gt }).collect()
}

/// Loss terms of one image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetLossParts {
    pub wiou: f32,
    pub l1: f32,
    pub dfl: f32,
    pub obj: f32,
    pub positives: usize,
}

/// Box loss over assigned cells plus objectness BCE over all cells.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    levels: &[LevelOutput],
    gts: &[BBox],
    width: usize,
    height: usize,
    weights: &LossWeights,
    obj_weight: f32,
    state: &mut WiouState,
) -> Result<(Tensor, DetLossParts)> {
    let gspecs: Vec<GridSpec> = levels.iter().map(|l| GridSpec { stride: l.stride, h: l.h, w: l.w }).collect();
    let matches = assign_targets(&gspecs, gts, TOPK);
    let offsets: Vec<usize> = gspecs.iter().scan(0, |acc, g| { let o = *acc; *acc += g.h * g.w; Some(o) }).collect();
    let total_cells: usize = gspecs.iter().map(|g| g.h * g.w).sum();
    let mut obj_targets = vec![0.0f32; total_cells];
    for m in &matches {
        obj_targets[offsets[m.level] + m.cell] = 1.0;
    }
    let obj_all = Tensor::concat(&levels.iter().map(|l| l.obj.clone()).collect::<Vec<_>>())?;
    let obj = bce_with_logits(&obj_all, &obj_targets)?.mean()?;
    let mut parts = DetLossParts { obj: obj.item()?, positives: matches.len(), ..Default::default() };
    let mut total = obj.scale(obj_weight)?;
    if matches.is_empty() {
        return Ok((total, parts));
    }

    let (wf, hf) = (width as f32, height as f32);
    let mut rows = Vec::new();
    let mut ax = Vec::new();
    let mut ay = Vec::new();
    let mut sx = Vec::new();
    let mut sy = Vec::new();
    let mut dfl_targets = Vec::new();
    let mut gt_norm = Vec::new();
    for (li, lv) in levels.iter().enumerate() {
        let idx: Vec<usize> = matches.iter().filter(|m| m.level == li).map(|m| m.cell).collect();
        if idx.is_empty() {
            continue;
        }
        rows.push(lv.dfl.gather_rows(&idx)?);
        let s = lv.stride as f32;
        for m in matches.iter().filter(|m| m.level == li) {
            let (cx, cy) = gspecs[li].center(m.cell);
            let g = &gts[m.gt];
            let (x1, y1, x2, y2) = g.corners();
            let hi = (DFL_BINS - 1) as f32 - 0.01;
            for d in [(cx - x1) / s, (cy - y1) / s, (x2 - cx) / s, (y2 - cy) / s] {
                dfl_targets.push(d.clamp(0.0, hi));
            }
            ax.push(cx / wf);
            ay.push(cy / hf);
            sx.push(s / wf);
            sy.push(s / hf);
            gt_norm.push(BBox::new(g.cx / wf, g.cy / hf, g.w / wf, g.h / hf));
        }
    }
    let n = gt_norm.len();
    let logits = Tensor::concat(&rows)?.reshape(&[4 * n, DFL_BINS])?;
    let bins = Tensor::new(&[DFL_BINS, 1], (0..DFL_BINS).map(|k| k as f32).collect())?;
    let dist = log_softmax(&logits)?.exp()?.matmul(&bins)?.reshape(&[n, 4])?.transpose()?;
    let side = |k: usize| dist.slice(k, k + 1).and_then(|t| t.reshape(&[n]));
    let (sxv, syv) = (Tensor::vector(&sx), Tensor::vector(&sy));
    let boxes = BoxTensors {
        x1: Tensor::vector(&ax).sub(&side(0)?.mul(&sxv)?)?,
        y1: Tensor::vector(&ay).sub(&side(1)?.mul(&syv)?)?,
        x2: Tensor::vector(&ax).add(&side(2)?.mul(&sxv)?)?,
        y2: Tensor::vector(&ay).add(&side(3)?.mul(&syv)?)?,
    };
    let ml = mathe_loss(&boxes, &logits, &dfl_targets, &gt_norm, weights, state)?;
    parts.wiou = ml.wiou;
    parts.l1 = ml.l1;
    parts.dfl = ml.dfl;
    total = total.add(&ml.total)?;
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(grids: &[GridSpec], gts: &[BBox], k: usize) -> Vec<Match> {
        let mut best: std::collections::BTreeMap<(usize, usize), (f32, usize)> = Default::default();
        for (gi, g) in gts.iter().enumerate() {
            let (x1, y1, x2, y2) = g.corners();
            let mut all = Vec::new();
            for (li, grid) in grids.iter().enumerate() {
                for cell in 0..grid.h * grid.w {
                    let (cx, cy) = grid.center(cell);
                    if cx >= x1 && cx <= x2 && cy >= y1 && cy <= y2 {
                        all.push((iou(&prior(grid, cell), g), li, cell));
                    }
                }
            }
            // rank by counting strictly better candidates
            let chosen: Vec<_> = all
                .iter()
                .filter(|a| {
                    all.iter().filter(|b| b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2))).count() < k
                })
                .cloned()
                .collect();
            for (s, li, cell) in chosen {
                match best.get(&(li, cell)) {
                    Some(&(bs, _)) if bs >= s => {}
                    _ => {
                        best.insert((li, cell), (s, gi));
                    }
                }
            }
        }
        best.into_iter().map(|((level, cell), (_, gt))| Match { level, cell, gt }).collect()
    }

    #[test]
    fn assignment_examples() {
        let g = grids(64, 32);
        // a box around exactly one stride-4 cell center at (6, 6)
        let one = BBox::new(6.0, 6.0, 1.0, 1.0);
        assert_eq!(assign_targets(&g, &[one], 3), vec![Match { level: 0, cell: 16 + 1, gt: 0 }]);
        // a box with several equally good cells: exactly k
        let wide = BBox::new(32.0, 16.0, 24.0, 24.0);
        assert_eq!(assign_targets(&g, &[wide], 3).len(), 3);
    }

    #[test]
    fn assignment_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = grids(256, 128);
        for _ in 0..30 {
            let gts: Vec<BBox> = (0..rng.random_range(1..15))
                .map(|_| BBox::new(rng.random_range(10.0..246.0), rng.random_range(10.0..118.0), rng.random_range(6.0..40.0), rng.random_range(10.0..60.0)))
                .collect();
            assert_eq!(assign_targets(&g, &gts, 3), brute_force(&g, &gts, 3));
        }
    }

    #[test]
    fn unflip_is_an_involution() {
        let b = BBox::new(30.5, 20.0, 10.0, 12.0).with_conf(0.7);
        assert_eq!(unflip_px(&unflip_px(&b, 256), 256), b);
        let n = BBox::new(0.3, 0.5, 0.1, 0.1);
        assert_eq!(n.unflip().unflip(), n);
    }
}
