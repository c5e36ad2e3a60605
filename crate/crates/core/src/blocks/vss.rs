use super::layers::{from_tokens, to_tokens, Linear, Norm, SsmLayer};
use crate::error::{shape_err, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::ssm::{ss2d_sequence, SsmParams};
use crate::tensor::{depthwise_conv2d, Tensor};

/// Gated four-directional scan block:
/// `x + out(ss2d(silu(dwconv(in_x(LN x)))) ⊙ silu(in_z(LN x)))`.
///
/// The block works on token rows so that a prefix of non-spatial tokens can
/// ride along with the grid; the depthwise convolution only touches grid rows.
#[derive(Debug, Clone)]
pub struct VssBlock {
    pub channels: usize,
    pub inner: usize,
    pub norm: Norm,
    pub in_x: Linear,
    pub in_z: Linear,
    pub dw: ParamId,
    pub dw_b: ParamId,
    pub scans: [SsmLayer; 4],
    pub out: Linear,
    pub residual: bool,
}

impl VssBlock {
    pub const EXPAND: usize = 2;
    pub const STATE_DIM: usize = 8;

    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self::with_dims(ps, name, channels, Self::EXPAND, Self::STATE_DIM)
    }

    /// Block with the out-projection zero-initialized, so that with the
    /// residual on it starts as the identity map.
    pub fn with_dims(ps: &mut ParamStore, name: &str, channels: usize, expand: usize, state_dim: usize) -> Self {
        let inner = expand * channels;
        let norm = Norm::new(ps, &format!("{name}.norm"), channels);
        let in_x = Linear::new(ps, &format!("{name}.in_x"), channels, inner);
        let in_z = Linear::new(ps, &format!("{name}.in_z"), channels, inner);
        let dw = ps.add(&format!("{name}.dw"), &[inner, 1, 3, 3], Init::Uniform((6.0f32 / 9.0).sqrt()));
        let dw_b = ps.add(&format!("{name}.dw_b"), &[inner, 1, 1], Init::Zeros);
        let scans = ["lr", "rl", "tb", "bt"].map(|d| SsmLayer::new(ps, &format!("{name}.scan_{d}"), inner, state_dim));
        let out = Linear::zeroed(ps, &format!("{name}.out"), inner, channels);
        Self { channels, inner, norm, in_x, in_z, dw, dw_b, scans, out, residual: true }
    }

    pub fn bind_scans(&self, p: &Binding) -> Result<[SsmParams; 4]> {
        let [a, b, c, d] = &self.scans;
        Ok([a.bind(p)?, b.bind(p)?, c.bind(p)?, d.bind(p)?])
    }

    /// Forward on `[prefix + H·W × C]` rows.
    pub fn forward_tokens(&self, p: &Binding, seq: &Tensor, h: usize, w: usize, prefix: usize) -> Result<Tensor> {
        if seq.shape() != [prefix + h * w, self.channels] {
            return Err(shape_err!(
                "VSS block over {} channels got rows {:?} for {prefix} tokens + {h}×{w}",
                self.channels,
                seq.shape()
            ));
        }
        let xn = self.norm.forward(p, seq)?;
        let u = self.in_x.forward(p, &xn)?;
        let z = self.in_z.forward(p, &xn)?;

        let grid = if prefix > 0 { u.slice(prefix, prefix + h * w)? } else { u.clone() };
        let conv = depthwise_conv2d(&from_tokens(&grid, h, w)?, p.get(self.dw), 1, 1)?.add(p.get(self.dw_b))?;
        let conv = to_tokens(&conv)?;
        let u = if prefix > 0 { Tensor::concat(&[u.slice(0, prefix)?, conv])? } else { conv };
        let u = u.silu()?;

        let y = ss2d_sequence(&self.bind_scans(p)?, &u, h, w, prefix)?;
        let o = self.out.forward(p, &y.mul(&z.silu()?)?)?;
        if self.residual {
            seq.add(&o)
        } else {
            Ok(o)
        }
    }

    /// Forward on a `[C×H×W]` map.
    pub fn forward(&self, p: &Binding, f: &Tensor) -> Result<Tensor> {
        let &[_, h, w] = f.shape() else {
            return Err(shape_err!("VSS block expects [C×H×W], got {:?}", f.shape()));
        };
        from_tokens(&self.forward_tokens(p, &to_tokens(f)?, h, w, 0)?, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{direction_permutation, ScanDirection};
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(ps: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in ps.params_mut() {
            if p.name.ends_with("a_log") {
                continue;
            }
            for v in &mut p.value {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    fn oracle_scan(p: &SsmParams, x: &[f64], l: usize) -> Vec<f64> {
        let (d, n) = (p.channels(), p.state_dim());
        let (a, wb, wc, wd, bd, ds) =
            (p.a.data(), p.w_b.data(), p.w_c.data(), p.w_delta.data(), p.b_delta.data(), p.d_skip.data());
        let mut h = vec![0.0; d * n];
        let mut y = vec![0.0; l * d];
        for t in 0..l {
            let xt = &x[t * d..(t + 1) * d];
            let proj = |w: &[f32], k: usize, m: usize| (0..d).map(|i| xt[i] * w[i * m + k] as f64).sum::<f64>();
            for j in 0..d {
                let delta = (1.0 + (proj(wd, j, d) + bd[j] as f64).exp()).ln();
                let mut acc = 0.0;
                for k in 0..n {
                    h[j * n + k] = (delta * a[j * n + k] as f64).exp() * h[j * n + k] + delta * proj(wb, k, n) * xt[j];
                    acc += proj(wc, k, n) * h[j * n + k];
                }
                y[t * d + j] = acc + ds[j] as f64 * xt[j];
            }
        }
        y
    }

    /// Stage-by-stage reimplementation in f64 on `[L×C]` rows.
    fn oracle_block(b: &VssBlock, ps: &ParamStore, x: &[f32], h: usize, w: usize) -> Vec<f64> {
        let (c, e, l) = (b.channels, b.inner, h * w);
        let val = |id: ParamId| ps.value(id).iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let (gamma, beta) = (val(b.norm.gamma), val(b.norm.beta));
        let mut xn = vec![0.0; l * c];
        for r in 0..l {
            let row: Vec<f64> = x[r * c..(r + 1) * c].iter().map(|&v| v as f64).collect();
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            for j in 0..c {
                xn[r * c + j] = (row[j] - mu) / (var + Norm::EPS as f64).sqrt() * gamma[j] + beta[j];
            }
        }
        let linear = |lin: &Linear, input: &[f64], din: usize, dout: usize| {
            let (wv, bv) = (val(lin.w), val(lin.b));
            let mut out = vec![0.0; l * dout];
            for r in 0..l {
                for o in 0..dout {
                    out[r * dout + o] = bv[o] + (0..din).map(|i| input[r * din + i] * wv[i * dout + o]).sum::<f64>();
                }
            }
            out
        };
        let u = linear(&b.in_x, &xn, c, e);
        let z = linear(&b.in_z, &xn, c, e);
        let (dw, dwb) = (val(b.dw), val(b.dw_b));
        let mut uc = vec![0.0; l * e];
        for ch in 0..e {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = dwb[ch];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += dw[ch * 9 + ky * 3 + kx] * u[(sy as usize * w + sx as usize) * e + ch];
                            }
                        }
                    }
                    uc[(y * w + xx) * e + ch] = silu(acc);
                }
            }
        }
        let scans = b.bind_scans(&ps.bind(false)).unwrap();
        let mut ys = vec![0.0; l * e];
        for (sp, dir) in scans.iter().zip(ScanDirection::ALL) {
            let perm = direction_permutation(h, w, dir);
            let seq: Vec<f64> = perm.iter().flat_map(|&g| uc[g * e..(g + 1) * e].to_vec()).collect();
            let yd = oracle_scan(sp, &seq, l);
            for (pos, &g) in perm.iter().enumerate() {
                for ch in 0..e {
                    ys[g * e + ch] += yd[pos * e + ch];
                }
            }
        }
        let gated: Vec<f64> = ys.iter().zip(&z).map(|(a, zz)| a * silu(*zz)).collect();
        let o = linear(&b.out, &gated, e, c);
        o.iter().zip(x).map(|(a, xv)| a + *xv as f64).collect()
    }

    #[test]
    fn identity_at_init() {
        let mut ps = ParamStore::new(1);
        let b = VssBlock::new(&mut ps, "v", 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::new(&[4, 3, 5], (0..60).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let y = b.forward(&ps.bind(false), &f).unwrap();
        assert_eq!(y.data(), f.data());
    }

    #[test]
    fn zero_input_zero_output() {
        let mut ps = ParamStore::new(1);
        let b = VssBlock::new(&mut ps, "v", 3);
        randomize(&mut ps, 4);
        for p in ps.params_mut() {
            if p.name.ends_with(".b") || p.name.ends_with("dw_b") || p.name.ends_with("beta") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let y = b.forward(&ps.bind(false), &Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_stage_oracle() {
        let mut ps = ParamStore::new(3);
        let b = VssBlock::with_dims(&mut ps, "v", 3, 2, 4);
        randomize(&mut ps, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w) = (3, 4);
        let tokens: Vec<f32> = (0..h * w * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let seq = Tensor::new(&[h * w, 3], tokens.clone()).unwrap();
        let y = b.forward_tokens(&ps.bind(false), &seq, h, w, 0).unwrap();
        let o = oracle_block(&b, &ps, &tokens, h, w);
        let dev = y.data().iter().zip(&o).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-4, "max deviation {dev}");
    }

    #[test]
    fn prefix_tokens_skip_the_convolution() {
        // A prefixed token changes the scan outputs but its own row never
        // enters the depthwise convolution; the grid part still has H·W rows.
        let mut ps = ParamStore::new(3);
        let b = VssBlock::with_dims(&mut ps, "v", 2, 2, 2);
        randomize(&mut ps, 8);
        let seq = Tensor::new(&[5, 2], vec![9.0, -9.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let y = b.forward_tokens(&ps.bind(false), &seq, 2, 2, 1).unwrap();
        assert_eq!(y.shape(), &[5, 2]);
        assert!(b.forward_tokens(&ps.bind(false), &seq, 2, 2, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut ps = ParamStore::new(7);
        let b = VssBlock::with_dims(&mut ps, "v", 2, 2, 3);
        randomize(&mut ps, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let out_w: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        ps.set_value(b.out.w, out_w).unwrap();
        let f = Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let wgt = Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bind = ps.bind(false);
        // Objectives are centred on the base output, and parameters use a
        // wider step: f32 rounding of a deep block output divided by 2h
        // otherwise dominates the smaller sensitivities.
        let base = b.forward(&bind, &f).unwrap();
        let r = grad_check(|t| b.forward(&bind, t)?.sub(&base)?.mul(&wgt)?.sum(), &f, 1e-3, 1e-3).unwrap();
        assert!(r.passed, "input: {r:?}");
        for id in [b.in_x.w, b.in_z.w, b.dw, b.scans[2].w_b, b.out.w] {
            let obj = |t: &Tensor| b.forward(&bind.with(id, t.clone()), &f)?.sub(&base)?.mul(&wgt)?.sum();
            let r = grad_check(obj, bind.get(id), 1e-2, 1e-3).unwrap();
            assert!(r.passed, "{}: {r:?}", ps.get(id).name);
        }
    }
}
