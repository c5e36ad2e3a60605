use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::image::{GrayImage, Mask};
use crate::losses::{BBox, MaskPair};

pub const CROP_SIZE: usize = 224;
pub const CONTEXT_MARGIN: f32 = 0.1;
pub const MAX_ROTATION_DEG: f32 = 15.0;

/// Source rectangle `[x0, x1) × [y0, y1)` of a crop, kept so that a crop-space
/// mask can be pasted back into the full image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropMapping {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub src_width: usize,
    pub src_height: usize,
    pub out_size: usize,
}

impl CropMapping {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// Continuous source coordinate of output pixel center `j` along one axis.
    fn source_coord(&self, j: usize, start: usize, extent: usize) -> f32 {
        start as f32 + (j as f32 + 0.5) * extent as f32 / self.out_size as f32 - 0.5
    }

    fn nearest(&self, j: usize, start: usize, extent: usize) -> usize {
        let t = (j as f32 + 0.5) * extent as f32 / self.out_size as f32;
        start + (t.floor() as usize).min(extent - 1)
    }
}

/// Square source window around a pixel-space box: the larger side grown by
/// `margin` on each end, clamped to the image.
pub fn crop_window(b: &BBox, width: usize, height: usize, margin: f32, out_size: usize) -> Result<CropMapping> {
    b.validate()?;
    let side = b.w.max(b.h) * (1.0 + 2.0 * margin);
    let x0 = (b.cx - side / 2.0).floor().max(0.0);
    let y0 = (b.cy - side / 2.0).floor().max(0.0);
    let x1 = (b.cx + side / 2.0).ceil().min(width as f32);
    let y1 = (b.cy + side / 2.0).ceil().min(height as f32);
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::Input(format!("box {b:?} does not intersect the {width}×{height} image")));
    }
    Ok(CropMapping {
        x0: x0 as usize,
        y0: y0 as usize,
        x1: x1 as usize,
        y1: y1 as usize,
        src_width: width,
        src_height: height,
        out_size,
    })
}

fn bilinear(img: &GrayImage, x: f32, y: f32, x_range: (usize, usize), y_range: (usize, usize)) -> f32 {
    let x = x.clamp(x_range.0 as f32, (x_range.1 - 1) as f32);
    let y = y.clamp(y_range.0 as f32, (y_range.1 - 1) as f32);
    let (xf, yf) = (x.floor() as usize, y.floor() as usize);
    let (xc, yc) = ((xf + 1).min(x_range.1 - 1), (yf + 1).min(y_range.1 - 1));
    let (tx, ty) = (x - xf as f32, y - yf as f32);
    let top = img.get(xf, yf) * (1.0 - tx) + img.get(xc, yf) * tx;
    let bottom = img.get(xf, yc) * (1.0 - tx) + img.get(xc, yc) * tx;
    top * (1.0 - ty) + bottom * ty
}

fn resize_mask(mask: &Mask, m: &CropMapping) -> Mask {
    let n = m.out_size;
    let mut out = Mask::zeros(n, n);
    for i in 0..n {
        let sy = m.nearest(i, m.y0, m.height());
        for j in 0..n {
            out.set(j, i, mask.get(m.nearest(j, m.x0, m.width()), sy));
        }
    }
    out
}

/// Crop the window around `b` (pixels) and resize to `out_size²`: bilinear
/// for the image, nearest for both masks.
pub fn crop_and_resize(
    image: &GrayImage,
    carseg: &Mask,
    ad: &Mask,
    b: &BBox,
    out_size: usize,
    margin: f32,
) -> Result<(MaskPair, CropMapping)> {
    let dims = (image.width, image.height);
    if (carseg.width, carseg.height) != dims || (ad.width, ad.height) != dims {
        return Err(shape_err!("masks do not match the {}×{} image", dims.0, dims.1));
    }
    let m = crop_window(b, image.width, image.height, margin, out_size)?;
    let mut data = Vec::with_capacity(out_size * out_size);
    for i in 0..out_size {
        let sy = m.source_coord(i, m.y0, m.height());
        for j in 0..out_size {
            let sx = m.source_coord(j, m.x0, m.width());
            data.push(bilinear(image, sx, sy, (m.x0, m.x1), (m.y0, m.y1)));
        }
    }
    let pair = MaskPair {
        crop: GrayImage::new(out_size, out_size, data)?,
        carseg: resize_mask(carseg, &m),
        ad: resize_mask(ad, &m),
        stage: None,
    };
    Ok((pair, m))
}

/// Paste a crop-space mask back into a zero mask of the source image size.
pub fn spatial_realign(mask: &Mask, m: &CropMapping, src_width: usize, src_height: usize) -> Result<Mask> {
    if mask.width != m.out_size || mask.height != m.out_size {
        return Err(shape_err!("{}×{} mask for a {} crop", mask.width, mask.height, m.out_size));
    }
    if (src_width, src_height) != (m.src_width, m.src_height) {
        return Err(shape_err!("mapping recorded for {}×{}, asked for {src_width}×{src_height}", m.src_width, m.src_height));
    }
    let mut out = Mask::zeros(src_width, src_height);
    let to_crop = |v: usize, start: usize, extent: usize| {
        (((v - start) as f32 + 0.5) * m.out_size as f32 / extent as f32).floor().min((m.out_size - 1) as f32) as usize
    };
    for y in m.y0..m.y1 {
        let i = to_crop(y, m.y0, m.height());
        for x in m.x0..m.x1 {
            out.set(x, y, mask.get(to_crop(x, m.x0, m.width()), i));
        }
    }
    Ok(out)
}

/// Rotate by `angle_deg` about the center (zero fill), then optionally
/// mirror horizontally. The same geometry is applied to the crop and both
/// masks.
pub fn augment_with(pair: &MaskPair, angle_deg: f32, flip: bool) -> MaskPair {
    let (w, h) = (pair.crop.width, pair.crop.height);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut crop = GrayImage::filled(w, h, 0.0);
    let mut carseg = Mask::zeros(w, h);
    let mut ad = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let inside = sx > -0.5 && sy > -0.5 && sx < w as f32 - 0.5 && sy < h as f32 - 0.5;
            if !inside {
                continue;
            }
            crop.data[y * w + x] = bilinear(&pair.crop, sx, sy, (0, w), (0, h));
            let (nx, ny) = ((sx.round() as usize).min(w - 1), (sy.round() as usize).min(h - 1));
            carseg.set(x, y, pair.carseg.get(nx, ny));
            ad.set(x, y, pair.ad.get(nx, ny));
        }
    }
    let mut out = MaskPair { crop, carseg, ad, stage: pair.stage };
    if flip {
        out = flip_pair(&out);
    }
    out
}

pub fn flip_pair(pair: &MaskPair) -> MaskPair {
    MaskPair {
        crop: pair.crop.flip_horizontal(),
        carseg: pair.carseg.flip_horizontal(),
        ad: pair.ad.flip_horizontal(),
        stage: pair.stage,
    }
}

/// Seeded random rotation in `±15°` and horizontal flip with probability ½.
pub fn augment(pair: &MaskPair, seed: u64) -> MaskPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let flip = rng.random_bool(0.5);
    augment_with(pair, angle, flip)
}
