//! Selective state-space scan and its four-directional 2-D extension.
//!
//! Per channel `d` and state index `n` the recurrence is
//!
//! ```text
//! Δ_t      = softplus(x_t · W_Δ + b_Δ)            (one step size per channel)
//! Ā_t      = exp(Δ_t · A)
//! h_t      = Ā_t ⊙ h_{t−1} + Δ_t · B(x_t) · x_t   (h_0 = 0)
//! y_t      = C(x_t) · h_t + D ⊙ x_t
//! ```
//!
//! with `B(x) = x·W_B` and `C(x) = x·W_C` shared across channels. `Ā` uses the
//! exact zero-order hold; the input matrix uses the first-order form `Δ·B`.
//! The scan itself is a single fused graph node with a hand-written reverse
//! recurrence, so its cost is linear in the sequence length.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Parameters of one selective scan over `D` channels with `N` states.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// Diagonal state matrix, `[D×N]`, negative at initialization.
    pub a: Tensor,
    /// Input projection to the state, `[D×N]`.
    pub w_b: Tensor,
    /// Readout projection, `[D×N]`.
    pub w_c: Tensor,
    /// Step-size projection, `[D×D]`.
    pub w_delta: Tensor,
    /// Step-size bias, `[D]`.
    pub b_delta: Tensor,
    /// Skip connection, `[D]`.
    pub d_skip: Tensor,
}

impl SsmParams {
    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[1]
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let &[d, n] = self.a.shape() else {
            return Err(shape_err!("A must be [D×N], got {:?}", self.a.shape()));
        };
        let ok = self.w_b.shape() == [d, n]
            && self.w_c.shape() == [d, n]
            && self.w_delta.shape() == [d, d]
            && self.b_delta.shape() == [d]
            && self.d_skip.shape() == [d];
        if !ok {
            return Err(shape_err!("inconsistent SSM parameter shapes for D={d}, N={n}"));
        }
        Ok((d, n))
    }

    /// Step sizes `Δ(x_t)` for a single input vector.
    pub fn step_sizes(&self, x_t: &[f32]) -> Result<Vec<f64>> {
        let (d, _) = self.validate()?;
        if x_t.len() != d {
            return Err(shape_err!("input has {} channels, parameters expect {d}", x_t.len()));
        }
        let w = self.w_delta.data();
        let b = self.b_delta.data();
        let out: Vec<f64> = (0..d)
            .map(|j| {
                let pre = b[j] as f64 + (0..d).map(|i| x_t[i] as f64 * w[i * d + j] as f64).sum::<f64>();
                softplus64(pre)
            })
            .collect();
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("non-finite step size {bad}")));
        }
        Ok(out)
    }
}

fn softplus64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Discretized `(Ā, B̄·x)` for one time step, each `[D×N]` row-major.
pub fn discretize(params: &SsmParams, x_t: &[f32]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(bad) = x_t.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerics(format!("non-finite input {bad}")));
    }
    let (d, n) = params.validate()?;
    let delta = params.step_sizes(x_t)?;
    let a = params.a.data();
    let wb = params.w_b.data();
    let bvec: Vec<f64> = (0..n).map(|k| (0..d).map(|i| x_t[i] as f64 * wb[i * n + k] as f64).sum()).collect();
    let mut a_bar = vec![0.0; d * n];
    let mut bx = vec![0.0; d * n];
    for j in 0..d {
        for k in 0..n {
            a_bar[j * n + k] = (delta[j] * a[j * n + k] as f64).exp();
            bx[j * n + k] = delta[j] * bvec[k] * x_t[j] as f64;
        }
    }
    Ok((a_bar, bx))
}

/// Zero out magnitudes below the normal f32 range. Decayed states otherwise
/// drift into subnormals, which are an order of magnitude slower on x86.
#[inline(always)]
fn flush(v: f32) -> f32 {
    if v.abs() < f32::MIN_POSITIVE { 0.0 } else { v }
}

/// Fused selective scan on explicit per-step tensors.
///
/// `x, delta: [L×D]`, `a: [D×N]`, `b, c: [L×N]`, `d_skip: [D]`.
pub fn scan_with_steps(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d_skip: &Tensor) -> Result<Tensor> {
    let &[l, d] = x.shape() else {
        return Err(shape_err!("scan input must be [L×D], got {:?}", x.shape()));
    };
    let n = *a.shape().get(1).ok_or_else(|| shape_err!("A must be [D×N]"))?;
    if delta.shape() != [l, d] || a.shape() != [d, n] || b.shape() != [l, n] || c.shape() != [l, n] || d_skip.shape() != [d] {
        return Err(shape_err!(
            "scan shapes inconsistent: x {:?}, Δ {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
            x.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d_skip.shape()
        ));
    }
    let (xd, dd, ad, bd, cd, sd) = (x.data(), delta.data(), a.data(), b.data(), c.data(), d_skip.data());
    let mut states = vec![0.0f32; l * d * n];
    let mut a_bar = vec![0.0f32; l * d * n];
    let mut y = vec![0.0f32; l * d];
    for t in 0..l {
        let (bt, ct) = (&bd[t * n..(t + 1) * n], &cd[t * n..(t + 1) * n]);
        for j in 0..d {
            let dt = dd[t * d + j];
            let xv = xd[t * d + j];
            let base = (t * d + j) * n;
            let mut acc = 0.0f64;
            for k in 0..n {
                let ab = flush((dt * ad[j * n + k]).exp());
                let prev = if t == 0 { 0.0 } else { states[base - d * n + k] };
                let h = flush(ab * prev + dt * bt[k] * xv);
                a_bar[base + k] = ab;
                states[base + k] = h;
                acc += (ct[k] * h) as f64;
            }
            y[t * d + j] = (acc + (sd[j] * xv) as f64) as f32;
        }
    }

    let parents = vec![x.clone(), delta.clone(), a.clone(), b.clone(), c.clone(), d_skip.clone()];
    let (tx, tdl, ta, tb, tc, ts) = (x.clone(), delta.clone(), a.clone(), b.clone(), c.clone(), d_skip.clone());
    let backward = Box::new(move |gy: &[f32], _: &[bool]| {
        let (xd, dd, ad, bd, cd, sd) = (tx.data(), tdl.data(), ta.data(), tb.data(), tc.data(), ts.data());
        let mut gx = vec![0.0f32; l * d];
        let mut gdelta = vec![0.0f32; l * d];
        let mut ga = vec![0.0f64; d * n];
        let mut gb = vec![0.0f64; l * n];
        let mut gc = vec![0.0f64; l * n];
        let mut gs = vec![0.0f64; d];
        // carry[j,k] = Ā_{t+1} ⊙ ∂L/∂h_{t+1}, the gradient reaching h_t through the recurrence.
        let mut carry = vec![0.0f32; d * n];
        for t in (0..l).rev() {
            let (bt, ct) = (&bd[t * n..(t + 1) * n], &cd[t * n..(t + 1) * n]);
            for j in 0..d {
                let g = gy[t * d + j];
                let dt = dd[t * d + j];
                let xv = xd[t * d + j];
                let base = (t * d + j) * n;
                let mut gdt = 0.0f64;
                let mut gxv = (g * sd[j]) as f64;
                gs[j] += (g * xv) as f64;
                for k in 0..n {
                    let h = states[base + k];
                    let gh = g * ct[k] + carry[j * n + k];
                    gc[t * n + k] += (g * h) as f64;
                    let prev = if t == 0 { 0.0 } else { states[base - d * n + k] };
                    let ab = a_bar[base + k];
                    let g_ab = gh * prev * ab;
                    gdt += (g_ab * ad[j * n + k] + gh * bt[k] * xv) as f64;
                    ga[j * n + k] += (g_ab * dt) as f64;
                    gb[t * n + k] += (gh * dt * xv) as f64;
                    gxv += (gh * dt * bt[k]) as f64;
                    carry[j * n + k] = flush(ab * gh);
                }
                gdelta[t * d + j] = gdt as f32;
                gx[t * d + j] = gxv as f32;
            }
        }
        let f = |v: Vec<f64>| Some(v.into_iter().map(|x| x as f32).collect::<Vec<f32>>());
        vec![Some(gx), Some(gdelta), f(ga), f(gb), f(gc), f(gs)]
    });
    Tensor::from_op("selective_scan", vec![l, d], y, parents, backward)
}

/// Selective scan of a `[L×D]` sequence with input-dependent `Δ`, `B`, `C`.
pub fn selective_scan(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    params.validate()?;
    let &[l, d] = x.shape() else {
        return Err(shape_err!("selective_scan input must be [L×D], got {:?}", x.shape()));
    };
    if l == 0 {
        return Err(shape_err!("selective_scan on an empty sequence"));
    }
    if d != params.channels() {
        return Err(shape_err!("input has {d} channels, parameters expect {}", params.channels()));
    }
    let delta = x.matmul(&params.w_delta)?.add(&params.b_delta)?.softplus()?;
    let b = x.matmul(&params.w_b)?;
    let c = x.matmul(&params.w_c)?;
    scan_with_steps(x, &delta, &params.a, &b, &c, &params.d_skip)
}

/// Grid traversal orders of the four-directional scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// Row-major.
    LeftRight,
    /// Row-major, reversed.
    RightLeft,
    /// Column-major.
    TopBottom,
    /// Column-major, reversed.
    BottomTop,
}

impl ScanDirection {
    /// Fixed merge order.
    pub const ALL: [ScanDirection; 4] =
        [ScanDirection::LeftRight, ScanDirection::RightLeft, ScanDirection::TopBottom, ScanDirection::BottomTop];

    fn is_reversed(self) -> bool {
        matches!(self, ScanDirection::RightLeft | ScanDirection::BottomTop)
    }
}

/// Grid index visited at each sequence position for an `H×W` grid.
pub fn direction_permutation(h: usize, w: usize, dir: ScanDirection) -> Vec<usize> {
    let row_major: Vec<usize> = (0..h * w).collect();
    let col_major: Vec<usize> = (0..h * w).map(|p| (p % h) * w + p / h).collect();
    match dir {
        ScanDirection::LeftRight => row_major,
        ScanDirection::RightLeft => row_major.into_iter().rev().collect(),
        ScanDirection::TopBottom => col_major,
        ScanDirection::BottomTop => col_major.into_iter().rev().collect(),
    }
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &v) in p.iter().enumerate() {
        inv[v] = i;
    }
    inv
}

/// Visiting order over a sequence of `prefix` tokens followed by an `H×W`
/// grid. Forward directions start with the tokens; reversed directions are
/// the exact reversal, so they visit the tokens last.
pub fn sequence_order(h: usize, w: usize, prefix: usize, dir: ScanDirection) -> Vec<usize> {
    let base = match dir {
        ScanDirection::LeftRight | ScanDirection::RightLeft => ScanDirection::LeftRight,
        ScanDirection::TopBottom | ScanDirection::BottomTop => ScanDirection::TopBottom,
    };
    let mut order: Vec<usize> = (0..prefix).collect();
    order.extend(direction_permutation(h, w, base).into_iter().map(|i| i + prefix));
    if dir.is_reversed() {
        order.reverse();
    }
    order
}

/// Four-directional scan of a token-prefixed sequence `[(P+H·W)×C]`; the
/// four directional outputs are mapped back to sequence order and summed in
/// [`ScanDirection::ALL`] order.
pub fn ss2d_sequence(params: &[SsmParams; 4], seq: &Tensor, h: usize, w: usize, prefix: usize) -> Result<Tensor> {
    if seq.shape().len() != 2 || seq.shape()[0] != prefix + h * w {
        return Err(shape_err!("sequence {:?} does not hold {prefix} tokens plus a {h}×{w} grid", seq.shape()));
    }
    let mut total: Option<Tensor> = None;
    for (p, dir) in params.iter().zip(ScanDirection::ALL) {
        let order = sequence_order(h, w, prefix, dir);
        let y = selective_scan(p, &seq.gather_rows(&order)?)?;
        let back = y.gather_rows(&invert_permutation(&order))?;
        total = Some(match total {
            None => back,
            Some(t) => t.add(&back)?,
        });
    }
    Ok(total.expect("four directions"))
}

/// Four-directional selective scan of a `[C×H×W]` feature map.
pub fn ss2d(params: &[SsmParams; 4], f: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = f.shape() else {
        return Err(shape_err!("ss2d expects [C×H×W], got {:?}", f.shape()));
    };
    let tokens = f.reshape(&[c, h * w])?.transpose()?;
    let out = ss2d_sequence(params, &tokens, h, w, 0)?;
    out.transpose()?.reshape(&[c, h, w])
}

#[cfg(test)]
mod tests;
