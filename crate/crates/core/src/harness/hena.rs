//! Miniature per-tooth multi-task network: a depthwise-separable encoder,
//! a token-conditioned scan bottleneck, a decoder whose skips are
//! token-modulated, and three heads (caries mask, anomaly mask, ordinal
//! stage logits).

use crate::blocks::{Conv, DwSep, GcstBottleneck, Linear, SkipFusion, UpConv, VssBlock};
use crate::error::{shape_err, Result};
use crate::image::GrayImage;
use crate::params::{Binding, ParamStore};
use crate::tensor::{global_avg_pool, Tensor};

/// Encoder widths at full, ½, ¼ and ⅛ resolution.
pub const ENC_WIDTHS: [usize; 4] = [8, 16, 24, 32];
/// Channels of the shared decoder trunk.
pub const TRUNK: usize = 16;
/// Ordinal thresholds of the stage head.
pub const STAGE_LOGITS: usize = 7;

/// Hidden layers of the caries and anomaly heads. The anomaly head only
/// ever sees a frozen trunk, so it gets the extra layer.
pub const CARSEG_DEPTH: usize = 1;
pub const AD_DEPTH: usize = 2;

/// Name prefixes of the shared backbone (frozen after the first stage).
pub const BACKBONE_PREFIXES: [&str; 3] = ["hena.enc", "hena.bot", "hena.dec"];

#[derive(Debug, Clone)]
enum Bottleneck {
    Token(GcstBottleneck),
    Plain(VssBlock),
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: UpConv,
    fuse: Option<SkipFusion>,
    conv: DwSep,
}

/// Per-pixel head: `depth` 3×3 conv + SiLU layers, then a 1×1 conv to one
/// logit.
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub hidden: Vec<Conv>,
    pub out: Conv,
}

impl MaskHead {
    fn new(ps: &mut ParamStore, name: &str, depth: usize) -> Self {
        let hidden = (0..depth).map(|i| Conv::new(ps, &format!("{name}.hidden{i}"), TRUNK, TRUNK, 3, 1)).collect();
        Self { hidden, out: Conv::new(ps, &format!("{name}.out"), TRUNK, 1, 1, 1) }
    }

    /// Logits `[S·S]` for a trunk `[TRUNK × S × S]`.
    pub fn forward(&self, p: &Binding, trunk: &Tensor) -> Result<Tensor> {
        let mut x = trunk.clone();
        for c in &self.hidden {
            x = c.forward(p, &x)?.silu()?;
        }
        let o = self.out.forward(p, &x)?;
        let n = o.numel();
        o.reshape(&[n])
    }
}

#[derive(Debug, Clone)]
pub struct MiniHena {
    pub gcst: bool,
    stem: Conv,
    down: [DwSep; 3],
    bottleneck: Bottleneck,
    decoder: [DecoderStage; 3],
    pub carseg: MaskHead,
    pub ad: MaskHead,
    dds: Linear,
}

/// Intermediate maps shared by the heads.
#[derive(Debug, Clone)]
pub struct HenaFeatures {
    /// Decoder output `[TRUNK × S × S]`.
    pub trunk: Tensor,
    /// Bottleneck output `[32 × S/8 × S/8]`.
    pub bottleneck: Tensor,
}

/// Raw head outputs for one crop.
#[derive(Debug, Clone)]
pub struct HenaOutput {
    /// Caries logits, `[S·S]`.
    pub carseg: Tensor,
    /// Anomaly logits, `[S·S]`.
    pub ad: Tensor,
    /// Ordinal stage logits, `[7]`.
    pub dds: Tensor,
}

pub fn normalize_crop(image: &GrayImage) -> Result<Tensor> {
    Tensor::new(&[1, image.height, image.width], image.data.iter().map(|&v| (v - 100.0) / 60.0).collect())
}

impl MiniHena {
    /// With `gcst` off the bottleneck is a plain scan block and skips are
    /// added unmodulated.
    pub fn new(ps: &mut ParamStore, gcst: bool) -> Self {
        let [c0, c1, c2, c3] = ENC_WIDTHS;
        let stem = Conv::new(ps, "hena.enc.stem", 1, c0, 3, 1);
        let down = [
            DwSep::new(ps, "hena.enc.down1", c0, c1, 2),
            DwSep::new(ps, "hena.enc.down2", c1, c2, 2),
            DwSep::new(ps, "hena.enc.down3", c2, c3, 2),
        ];
        let bottleneck = if gcst {
            Bottleneck::Token(GcstBottleneck::new(ps, "hena.bot", c3))
        } else {
            Bottleneck::Plain(VssBlock::new(ps, "hena.bot.vss", c3))
        };
        let stage = |ps: &mut ParamStore, i: usize, c_in: usize, c_skip: usize, c_out: usize| DecoderStage {
            up: UpConv::new(ps, &format!("hena.dec{i}.up"), c_in, c_skip),
            fuse: gcst.then(|| SkipFusion::new(ps, &format!("hena.dec{i}.skip"), c_skip)),
            conv: DwSep::new(ps, &format!("hena.dec{i}.conv"), c_skip, c_out, 1),
        };
        let decoder = [stage(ps, 1, c3, c2, c2), stage(ps, 2, c2, c1, c1), stage(ps, 3, c1, c0, TRUNK)];
        let carseg = MaskHead::new(ps, "hena.carseg", CARSEG_DEPTH);
        let ad = MaskHead::new(ps, "hena.ad", AD_DEPTH);
        let dds = Linear::new(ps, "hena.dds", c3, STAGE_LOGITS);
        Self { gcst, stem, down, bottleneck, decoder, carseg, ad, dds }
    }

    pub fn features(&self, p: &Binding, crop: &GrayImage) -> Result<HenaFeatures> {
        if crop.width != crop.height || !crop.width.is_multiple_of(8) {
            return Err(shape_err!("crop must be square with a side divisible by 8, got {}×{}", crop.width, crop.height));
        }
        let x = self.stem.forward(p, &normalize_crop(crop)?)?.silu()?;
        let mut skips = vec![x.clone()];
        let mut x = x;
        for d in &self.down {
            x = d.forward(p, &x)?.silu()?;
            skips.push(x.clone());
        }
        skips.pop();
        let bottleneck = match &self.bottleneck {
            Bottleneck::Token(g) => g.forward(p, &x)?,
            Bottleneck::Plain(v) => v.forward(p, &x)?,
        };
        let mut y = bottleneck.clone();
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let s = match &stage.fuse {
                Some(f) => f.forward(p, skip)?,
                None => skip.clone(),
            };
            y = stage.conv.forward(p, &stage.up.forward(p, &y)?.add(&s)?)?.silu()?;
        }
        Ok(HenaFeatures { trunk: y, bottleneck })
    }

    pub fn carseg_logits(&self, p: &Binding, trunk: &Tensor) -> Result<Tensor> {
        self.carseg.forward(p, trunk)
    }

    pub fn ad_logits(&self, p: &Binding, trunk: &Tensor) -> Result<Tensor> {
        self.ad.forward(p, trunk)
    }

    /// Pooled bottleneck descriptor `[32]` read by the stage head.
    pub fn pooled(bottleneck: &Tensor) -> Result<Tensor> {
        global_avg_pool(bottleneck)
    }

    /// Stage logits for pooled rows `[B × 32]`, giving `[B × 7]`.
    pub fn dds_logits(&self, p: &Binding, pooled: &Tensor) -> Result<Tensor> {
        self.dds.forward(p, pooled)
    }

    /// Rewrite the stage head in place so that it reads raw pooled rows,
    /// given that it was trained on `(x - mean) / sd`.
    pub fn fold_dds_scaling(&self, ps: &mut ParamStore, mean: &[f32], sd: &[f32]) -> Result<()> {
        let d = ENC_WIDTHS[3];
        if mean.len() != d || sd.len() != d {
            return Err(shape_err!("scaling of length {}/{} for a {d}-wide probe", mean.len(), sd.len()));
        }
        let mut w = ps.value(self.dds.w).to_vec();
        let mut b = ps.value(self.dds.b).to_vec();
        for j in 0..d {
            for k in 0..STAGE_LOGITS {
                w[j * STAGE_LOGITS + k] /= sd[j];
                b[k] -= w[j * STAGE_LOGITS + k] * mean[j];
            }
        }
        ps.set_value(self.dds.w, w)?;
        ps.set_value(self.dds.b, b)
    }

    pub fn forward(&self, p: &Binding, crop: &GrayImage) -> Result<HenaOutput> {
        let f = self.features(p, crop)?;
        let pooled = Self::pooled(&f.bottleneck)?.reshape(&[1, ENC_WIDTHS[3]])?;
        Ok(HenaOutput {
            carseg: self.carseg_logits(p, &f.trunk)?,
            ad: self.ad_logits(p, &f.trunk)?,
            dds: self.dds_logits(p, &pooled)?.reshape(&[STAGE_LOGITS])?,
        })
    }
}
