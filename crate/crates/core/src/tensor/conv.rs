//! 2-D convolutions over single `[C×H×W]` feature maps.

use super::kernels::{col2im, im2col, matmul_nn, matmul_nt, matmul_tn, out_dim, valid_range};
use super::Tensor;
use crate::error::{shape_err, Result};

fn dims3(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err!("{what} expects a [C×H×W] input, got {:?}", x.shape())),
    }
}

/// Cross-correlation of `x [C_in×H×W]` with `weight [C_out×C_in×k×k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "conv2d")?;
    let &[co, ci, k, k2] = weight.shape() else {
        return Err(shape_err!("conv2d weight must be 4-D, got {:?}", weight.shape()));
    };
    if ci != c || k != k2 || k % 2 == 0 || stride == 0 {
        return Err(shape_err!(
            "conv2d weight {:?} incompatible with input {:?} (odd square kernel, stride ≥ 1)",
            weight.shape(),
            x.shape()
        ));
    }
    let (Some(ho), Some(wo)) = (out_dim(h, k, stride, padding), out_dim(w, k, stride, padding)) else {
        return Err(shape_err!("conv2d output would be empty for input {:?}, k={k}, pad={padding}", x.shape()));
    };
    let kk = c * k * k;
    let p = ho * wo;
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.data().to_vec()
    } else {
        im2col(x.data(), c, h, w, k, stride, padding, ho, wo)
    };
    let data = matmul_nn(weight.data(), &cols, co, kk, p);
    let wt = weight.clone();
    let backward = Box::new(move |g: &[f32], need: &[bool]| {
        let gx = need[0].then(|| {
            let dcols = matmul_tn(wt.data(), g, kk, co, p);
            if k == 1 && stride == 1 && padding == 0 {
                dcols
            } else {
                col2im(&dcols, c, h, w, k, stride, padding, ho, wo)
            }
        });
        let gw = need[1].then(|| matmul_nt(g, &cols, co, p, kk));
        vec![gx, gw]
    });
    Tensor::from_op("conv2d", vec![co, ho, wo], data, vec![x.clone(), weight.clone()], backward)
}

/// Per-channel convolution: `weight [C×1×k×k]`, one kernel per channel.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "depthwise_conv2d")?;
    let &[cw, one, k, k2] = weight.shape() else {
        return Err(shape_err!("depthwise weight must be 4-D, got {:?}", weight.shape()));
    };
    if cw != c || one != 1 || k != k2 || k % 2 == 0 || stride == 0 {
        return Err(shape_err!(
            "depthwise weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        ));
    }
    let (Some(ho), Some(wo)) = (out_dim(h, k, stride, padding), out_dim(w, k, stride, padding)) else {
        return Err(shape_err!("depthwise output would be empty for {:?}", x.shape()));
    };
    let xd = x.data();
    let wd = weight.data();
    let ranges: Vec<((usize, usize), (usize, usize))> = (0..k)
        .flat_map(|ky| (0..k).map(move |kx| (ky, kx)))
        .map(|(ky, kx)| (valid_range(h, ho, stride, padding, ky), valid_range(w, wo, stride, padding, kx)))
        .collect();
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        let xc = &xd[ch * h * w..(ch + 1) * h * w];
        let kc = &wd[ch * k * k..(ch + 1) * k * k];
        let oc = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (t, &((y_lo, y_hi), (x_lo, x_hi))) in ranges.iter().enumerate() {
            let (ky, kx) = (t / k, t % k);
            let wv = kc[t];
            for oy in y_lo..y_hi {
                let iy = oy * stride + ky - padding;
                let row = &xc[iy * w..(iy + 1) * w];
                let o = &mut oc[oy * wo..(oy + 1) * wo];
                if stride == 1 {
                    let src = &row[x_lo + kx - padding..x_hi + kx - padding];
                    for (d, &v) in o[x_lo..x_hi].iter_mut().zip(src) {
                        *d += wv * v;
                    }
                } else {
                    for ox in x_lo..x_hi {
                        o[ox] += wv * row[ox * stride + kx - padding];
                    }
                }
            }
        }
    }
    let (tx, tw) = (x.clone(), weight.clone());
    let backward = Box::new(move |g: &[f32], need: &[bool]| {
        let xd = tx.data();
        let wd = tw.data();
        let mut gx = need[0].then(|| vec![0.0f32; c * h * w]);
        let mut gw = need[1].then(|| vec![0.0f32; c * k * k]);
        for ch in 0..c {
            let gc = &g[ch * ho * wo..(ch + 1) * ho * wo];
            for (t, &((y_lo, y_hi), (x_lo, x_hi))) in ranges.iter().enumerate() {
                let (ky, kx) = (t / k, t % k);
                let wv = wd[ch * k * k + t];
                let mut acc = 0.0f64;
                for oy in y_lo..y_hi {
                    let iy = oy * stride + ky - padding;
                    let base = (ch * h + iy) * w;
                    let go = &gc[oy * wo..(oy + 1) * wo];
                    let mut row_acc = 0.0f32;
                    if stride == 1 {
                        let (start, end) = (base + x_lo + kx - padding, base + x_hi + kx - padding);
                        let xs = &xd[start..end];
                        for (&gv, &xv) in go[x_lo..x_hi].iter().zip(xs) {
                            row_acc += gv * xv;
                        }
                        if let Some(gx) = gx.as_mut() {
                            for (d, &gv) in gx[start..end].iter_mut().zip(&go[x_lo..x_hi]) {
                                *d += gv * wv;
                            }
                        }
                    } else {
                        for (ox, &gv) in go.iter().enumerate().take(x_hi).skip(x_lo) {
                            let ix = base + ox * stride + kx - padding;
                            row_acc += gv * xd[ix];
                            if let Some(gx) = gx.as_mut() {
                                gx[ix] += gv * wv;
                            }
                        }
                    }
                    acc += row_acc as f64;
                }
                if let Some(gw) = gw.as_mut() {
                    gw[ch * k * k + t] = acc as f32;
                }
            }
        }
        vec![gx, gw]
    });
    Tensor::from_op("depthwise_conv2d", vec![c, ho, wo], out, vec![x.clone(), weight.clone()], backward)
}

/// Depthwise `k×k` convolution (padding `k/2`) followed by a pointwise
/// `pw_weight [C_out×C_in×1×1]` channel mix.
pub fn depthwise_separable_conv(x: &Tensor, dw_weight: &Tensor, pw_weight: &Tensor, stride: usize) -> Result<Tensor> {
    let k = *dw_weight.shape().get(2).ok_or_else(|| shape_err!("depthwise weight must be 4-D"))?;
    if pw_weight.shape().len() != 4 || pw_weight.shape()[2] != 1 || pw_weight.shape()[3] != 1 {
        return Err(shape_err!("pointwise weight must be [C_out×C_in×1×1], got {:?}", pw_weight.shape()));
    }
    let dw = depthwise_conv2d(x, dw_weight, stride, k / 2)?;
    conv2d(&dw, pw_weight, 1, 0)
}

/// Transposed convolution (no padding): `weight [C_in×C_out×k×k]`, output
/// size `(H−1)·stride + k`. Adjoint of [`conv2d`] with the same weight
/// buffer read as `[C_out×C_in×k×k]`.
pub fn transposed_conv2d(x: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "transposed_conv2d")?;
    let &[ci, co, k, k2] = weight.shape() else {
        return Err(shape_err!("transposed conv weight must be 4-D, got {:?}", weight.shape()));
    };
    if ci != c || k != k2 || stride == 0 {
        return Err(shape_err!(
            "transposed conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        ));
    }
    let ho = (h - 1) * stride + k;
    let wo = (w - 1) * stride + k;
    let kk = co * k * k;
    let p = h * w;
    // cols[(co·k·k) × (h·w)] = Wᵀ · X, then fold onto the larger grid.
    let cols = matmul_tn(weight.data(), x.data(), kk, c, p);
    let data = col2im(&cols, co, ho, wo, k, stride, 0, h, w);
    let (tx, tw) = (x.clone(), weight.clone());
    let backward = Box::new(move |g: &[f32], need: &[bool]| {
        let gcols = im2col(g, co, ho, wo, k, stride, 0, h, w);
        let gx = need[0].then(|| matmul_nn(tw.data(), &gcols, c, kk, p));
        let gw = need[1].then(|| matmul_nt(tx.data(), &gcols, c, p, kk));
        vec![gx, gw]
    });
    Tensor::from_op("transposed_conv2d", vec![co, ho, wo], data, vec![x.clone(), weight.clone()], backward)
}
