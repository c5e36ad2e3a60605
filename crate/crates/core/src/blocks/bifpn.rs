use super::layers::DwSep;
use crate::error::{shape_err, Error, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{max_pool2, upsample_nearest2, Tensor};

/// Effective fusion coefficients `relu(w_j) / (Σ_k relu(w_k) + ε)`.
pub fn fusion_coefficients(weights: &[f64], eps: f64) -> Vec<f64> {
    let clamped: Vec<f64> = weights.iter().map(|w| w.max(0.0)).collect();
    let denom = clamped.iter().sum::<f64>() + eps;
    clamped.iter().map(|w| w / denom).collect()
}

/// Weighted fusion of same-shape maps with one learnable scalar per input.
#[derive(Debug, Clone)]
pub struct FusionNode {
    pub weights: ParamId,
    pub inputs: usize,
    pub eps: f32,
    /// Applied after fusion (depthwise-separable conv + SiLU); `None` leaves
    /// the fused map as is.
    pub post: Option<DwSep>,
}

impl FusionNode {
    pub const EPS: f32 = 1e-4;

    pub fn new(ps: &mut ParamStore, name: &str, inputs: usize, channels: usize, with_conv: bool) -> Self {
        let weights = ps.add(&format!("{name}.w"), &[inputs], Init::Const(1.0));
        let post = with_conv.then(|| DwSep::new(ps, &format!("{name}.conv"), channels, channels, 1));
        Self { weights, inputs, eps: Self::EPS, post }
    }

    pub fn forward(&self, p: &Binding, inputs: &[Tensor]) -> Result<Tensor> {
        let first = inputs.first().ok_or_else(|| shape_err!("fusion node with no inputs"))?;
        if inputs.len() != self.inputs {
            return Err(shape_err!("fusion node expects {} inputs, got {}", self.inputs, inputs.len()));
        }
        if let Some(bad) = inputs.iter().find(|t| t.shape() != first.shape()) {
            return Err(shape_err!("fusion inputs differ in shape: {:?} vs {:?}", first.shape(), bad.shape()));
        }
        let w = p.get(self.weights).relu()?;
        let mut num: Option<Tensor> = None;
        for (j, x) in inputs.iter().enumerate() {
            let term = x.mul(&w.slice(j, j + 1)?)?;
            num = Some(match num {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
        let denom = w.sum()?.add_scalar(self.eps)?;
        let fused = num.expect("non-empty").div(&denom)?;
        match &self.post {
            Some(conv) => conv.forward(p, &fused)?.silu(),
            None => Ok(fused),
        }
    }
}

/// Bidirectional pyramid over levels ordered finest first (stride doubling
/// per level): one top-down pass, then one bottom-up pass.
///
/// ```text
/// td[L−1] = P[L−1]
/// td[i]   = node(P[i], up(td[i+1]))                 i = L−2 … 0
/// out[0]  = td[0]
/// out[i]  = node(P[i], td[i], down(out[i−1]))       0 < i < L−1
/// out[L−1]= node(P[L−1], down(out[L−2]))
/// ```
#[derive(Debug, Clone)]
pub struct BiFpn {
    pub levels: usize,
    pub top_down: Vec<FusionNode>,
    pub bottom_up: Vec<FusionNode>,
}

impl BiFpn {
    pub fn new(ps: &mut ParamStore, name: &str, levels: usize, channels: usize, with_conv: bool) -> Self {
        let top_down = (0..levels.saturating_sub(1))
            .map(|i| FusionNode::new(ps, &format!("{name}.td{i}"), 2, channels, with_conv))
            .collect();
        let bottom_up = (1..levels)
            .map(|i| {
                let n = if i + 1 == levels { 2 } else { 3 };
                FusionNode::new(ps, &format!("{name}.bu{i}"), n, channels, with_conv)
            })
            .collect();
        Self { levels, top_down, bottom_up }
    }

    pub fn forward(&self, p: &Binding, features: &[Option<Tensor>]) -> Result<Vec<Tensor>> {
        if features.len() != self.levels {
            return Err(Error::Config(format!("pyramid expects {} levels, got {}", self.levels, features.len())));
        }
        let mut levels = Vec::with_capacity(self.levels);
        for (i, f) in features.iter().enumerate() {
            levels.push(f.clone().ok_or_else(|| Error::Config(format!("pyramid level {i} is missing")))?);
        }
        let n = self.levels;
        if n == 1 {
            return Ok(levels);
        }
        let mut td: Vec<Option<Tensor>> = vec![None; n];
        td[n - 1] = Some(levels[n - 1].clone());
        for i in (0..n - 1).rev() {
            let up = upsample_nearest2(td[i + 1].as_ref().expect("filled"))?;
            td[i] = Some(self.top_down[i].forward(p, &[levels[i].clone(), up])?);
        }
        let mut out: Vec<Tensor> = vec![td[0].clone().expect("filled")];
        for i in 1..n {
            let down = max_pool2(&out[i - 1])?;
            let ins = if i + 1 == n {
                vec![levels[i].clone(), down]
            } else {
                vec![levels[i].clone(), td[i].clone().expect("filled"), down]
            };
            out.push(self.bottom_up[i - 1].forward(p, &ins)?);
        }
        Ok(out)
    }
}
