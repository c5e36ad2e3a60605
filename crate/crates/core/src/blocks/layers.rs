//! Parameterized primitive layers.

use crate::error::Result;
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::ssm::SsmParams;
use crate::tensor::{conv2d, depthwise_conv2d, layer_norm, transposed_conv2d, Tensor};

fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

/// `y = x·W + b` on `[L×d_in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), &[d_in, d_out], Init::Uniform((1.0 / d_in as f32).sqrt()));
        let b = ps.add(&format!("{name}.b"), &[d_out], Init::Zeros);
        Self { w, b }
    }

    pub fn zeroed(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), &[d_in, d_out], Init::Zeros);
        let b = ps.add(&format!("{name}.b"), &[d_out], Init::Zeros);
        Self { w, b }
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}

/// Dense convolution with bias and `k/2` padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub k: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), &[c_out, c_in, k, k], Init::Uniform(he_bound(c_in * k * k)));
        let b = ps.add(&format!("{name}.b"), &[c_out, 1, 1], Init::Zeros);
        Self { w, b, stride, k }
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        conv2d(x, p.get(self.w), self.stride, self.k / 2)?.add(p.get(self.b))
    }
}

/// Depthwise 3×3 then pointwise 1×1, with bias.
#[derive(Debug, Clone)]
pub struct DwSep {
    pub dw: ParamId,
    pub pw: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl DwSep {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let dw = ps.add(&format!("{name}.dw"), &[c_in, 1, 3, 3], Init::Uniform(he_bound(9)));
        let pw = ps.add(&format!("{name}.pw"), &[c_out, c_in, 1, 1], Init::Uniform(he_bound(c_in)));
        let b = ps.add(&format!("{name}.b"), &[c_out, 1, 1], Init::Zeros);
        Self { dw, pw, b, stride }
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        let d = depthwise_conv2d(x, p.get(self.dw), self.stride, 1)?;
        conv2d(&d, p.get(self.pw), 1, 0)?.add(p.get(self.b))
    }
}

/// Stride-2, 2×2 transposed convolution with bias (doubles H and W).
#[derive(Debug, Clone)]
pub struct UpConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl UpConv {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), &[c_in, c_out, 2, 2], Init::Uniform(he_bound(c_in)));
        let b = ps.add(&format!("{name}.b"), &[c_out, 1, 1], Init::Zeros);
        Self { w, b }
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        transposed_conv2d(x, p.get(self.w), 2)?.add(p.get(self.b))
    }
}

/// Layer normalization over the trailing (channel) axis.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub const EPS: f32 = 1e-5;

    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = ps.add(&format!("{name}.gamma"), &[c], Init::Const(1.0));
        let beta = ps.add(&format!("{name}.beta"), &[c], Init::Zeros);
        Self { gamma, beta }
    }

    pub fn forward(&self, p: &Binding, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, p.get(self.gamma), p.get(self.beta), Self::EPS)
    }
}

/// Trainable selective-scan parameters. `A = −exp(a_log)` keeps the state
/// matrix negative throughout training.
#[derive(Debug, Clone)]
pub struct SsmLayer {
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub d_skip: ParamId,
}

impl SsmLayer {
    /// Initial step size `softplus(b_Δ)`.
    pub const INIT_STEP: f32 = 0.1;

    pub fn new(ps: &mut ParamStore, name: &str, d: usize, n: usize) -> Self {
        let ramp: Vec<f32> = (0..d).flat_map(|_| (1..=n).map(|k| (k as f32).ln())).collect();
        let a_log = ps.add(&format!("{name}.a_log"), &[d, n], Init::Values(ramp));
        ps.set_decay(a_log, false);
        let bound = (1.0 / d as f32).sqrt();
        let w_b = ps.add(&format!("{name}.w_b"), &[d, n], Init::Uniform(bound));
        let w_c = ps.add(&format!("{name}.w_c"), &[d, n], Init::Uniform(bound));
        let w_delta = ps.add(&format!("{name}.w_delta"), &[d, d], Init::Uniform(0.1 * bound));
        let bias = Self::INIT_STEP.exp_m1().ln();
        let b_delta = ps.add(&format!("{name}.b_delta"), &[d], Init::Const(bias));
        let d_skip = ps.add(&format!("{name}.d_skip"), &[d], Init::Const(1.0));
        Self { a_log, w_b, w_c, w_delta, b_delta, d_skip }
    }

    pub fn bind(&self, p: &Binding) -> Result<SsmParams> {
        Ok(SsmParams {
            a: p.get(self.a_log).exp()?.neg()?,
            w_b: p.get(self.w_b).clone(),
            w_c: p.get(self.w_c).clone(),
            w_delta: p.get(self.w_delta).clone(),
            b_delta: p.get(self.b_delta).clone(),
            d_skip: p.get(self.d_skip).clone(),
        })
    }
}

/// `[C×H×W]` map to `[H·W×C]` token rows.
pub fn to_tokens(f: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = f.shape() else {
        return Err(crate::error::shape_err!("expected [C×H×W], got {:?}", f.shape()));
    };
    f.reshape(&[c, h * w])?.transpose()
}

/// `[H·W×C]` token rows back to a `[C×H×W]` map.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let c = x.shape()[1];
    x.transpose()?.reshape(&[c, h, w])
}
