use super::ops::sigmoid;
use super::Tensor;
use crate::error::{shape_err, Result};

/// Normalize over the trailing axis, then apply `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| shape_err!("layer_norm on rank-0 tensor"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "layer_norm affine shapes {:?}/{:?} do not match channel count {c}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let rows = x.numel() / c;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0f32; x.numel()];
    let mut inv_std = vec![0.0f32; rows];
    let mut out = vec![0.0f32; x.numel()];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std[r] = is as f32;
        for j in 0..c {
            let h = ((row[j] as f64 - mean) * is) as f32;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gd[j] + bd[j];
        }
    }
    let tg = gamma.clone();
    let backward = Box::new(move |g: &[f32], need: &[bool]| {
        let gd = tg.data();
        let mut gx = need[0].then(|| vec![0.0f32; rows * c]);
        let mut ggam = need[1].then(|| vec![0.0f64; c]);
        let mut gbet = need[2].then(|| vec![0.0f64; c]);
        for r in 0..rows {
            let gr = &g[r * c..(r + 1) * c];
            let hr = &xhat[r * c..(r + 1) * c];
            if let Some(gg) = ggam.as_mut() {
                for j in 0..c {
                    gg[j] += (gr[j] * hr[j]) as f64;
                }
            }
            if let Some(gb) = gbet.as_mut() {
                for j in 0..c {
                    gb[j] += gr[j] as f64;
                }
            }
            if let Some(gx) = gx.as_mut() {
                // dx = inv_std · (dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
                let mut m1 = 0.0f64;
                let mut m2 = 0.0f64;
                for j in 0..c {
                    let dh = (gr[j] * gd[j]) as f64;
                    m1 += dh;
                    m2 += dh * hr[j] as f64;
                }
                m1 /= c as f64;
                m2 /= c as f64;
                for j in 0..c {
                    let dh = (gr[j] * gd[j]) as f64;
                    gx[r * c + j] = (inv_std[r] as f64 * (dh - m1 - hr[j] as f64 * m2)) as f32;
                }
            }
        }
        let to32 = |v: Option<Vec<f64>>| v.map(|v| v.into_iter().map(|x| x as f32).collect());
        vec![gx, to32(ggam), to32(gbet)]
    });
    Tensor::from_op("layer_norm", x.shape().to_vec(), out, vec![x.clone(), gamma.clone(), beta.clone()], backward)
}

/// Per-channel spatial mean of `[C×H×W]`, giving `[C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(shape_err!("global_avg_pool expects [C×H×W], got {:?}", x.shape()));
    };
    let hw = h * w;
    let data: Vec<f32> = (0..c)
        .map(|ch| (x.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    let backward = Box::new(move |g: &[f32], _: &[bool]| {
        let mut gx = vec![0.0f32; c * hw];
        for ch in 0..c {
            gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = g[ch] / hw as f32);
        }
        vec![Some(gx)]
    });
    Tensor::from_op("global_avg_pool", vec![c], data, vec![x.clone()], backward)
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(shape_err!("max_pool2 expects [C×H×W], got {:?}", x.shape()));
    };
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(shape_err!("max_pool2 input {:?} too small", x.shape()));
    }
    let xd = x.data();
    let mut data = vec![0.0f32; c * ho * wo];
    let mut arg = vec![0usize; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if xd[i] > best {
                            best = xd[i];
                            bi = i;
                        }
                    }
                }
                let o = (ch * ho + oy) * wo + ox;
                data[o] = best;
                arg[o] = bi;
            }
        }
    }
    let n = x.numel();
    let backward = Box::new(move |g: &[f32], _: &[bool]| {
        let mut gx = vec![0.0f32; n];
        for (o, &i) in arg.iter().enumerate() {
            gx[i] += g[o];
        }
        vec![Some(gx)]
    });
    Tensor::from_op("max_pool2", vec![c, ho, wo], data, vec![x.clone()], backward)
}

/// Nearest-neighbour 2× upsampling of `[C×H×W]`.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(shape_err!("upsample_nearest2 expects [C×H×W], got {:?}", x.shape()));
    };
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut data = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                data[(ch * ho + y) * wo + xx] = xd[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    let backward = Box::new(move |g: &[f32], _: &[bool]| {
        let mut gx = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * ho + y) * wo + xx];
                }
            }
        }
        vec![Some(gx)]
    });
    Tensor::from_op("upsample_nearest2", vec![c, ho, wo], data, vec![x.clone()], backward)
}

/// Log-softmax over the trailing axis.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| shape_err!("log_softmax on rank-0 tensor"))?;
    let rows = x.numel() / c;
    let xd = x.data();
    let mut out = vec![0.0f32; x.numel()];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[r * c + j] = (row[j] as f64 - lse) as f32;
        }
    }
    let probs: Vec<f32> = out.iter().map(|v| v.exp()).collect();
    let backward = Box::new(move |g: &[f32], _: &[bool]| {
        let mut gx = vec![0.0f32; rows * c];
        for r in 0..rows {
            let s: f64 = g[r * c..(r + 1) * c].iter().map(|&v| v as f64).sum();
            for j in 0..c {
                gx[r * c + j] = (g[r * c + j] as f64 - probs[r * c + j] as f64 * s) as f32;
            }
        }
        vec![Some(gx)]
    });
    Tensor::from_op("log_softmax", x.shape().to_vec(), out, vec![x.clone()], backward)
}

/// Elementwise binary cross-entropy on logits against constant targets,
/// evaluated in the overflow-free form `max(x,0) − x·t + ln(1 + e^{−|x|})`.
pub fn bce_with_logits(logits: &Tensor, targets: &[f32]) -> Result<Tensor> {
    if targets.len() != logits.numel() {
        return Err(shape_err!(
            "bce_with_logits: {} targets for {} logits",
            targets.len(),
            logits.numel()
        ));
    }
    let data: Vec<f32> = logits
        .data()
        .iter()
        .zip(targets)
        .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
        .collect();
    let t = targets.to_vec();
    let tl = logits.clone();
    let backward = Box::new(move |g: &[f32], _: &[bool]| {
        let gx = tl.data().iter().zip(&t).zip(g).map(|((&x, &t), &g)| g * (sigmoid(x) - t)).collect();
        vec![Some(gx)]
    });
    Tensor::from_op("bce_with_logits", logits.shape().to_vec(), data, vec![logits.clone()], backward)
}
