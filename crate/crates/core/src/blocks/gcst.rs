use super::layers::{from_tokens, to_tokens, Linear, Norm, SsmLayer};
use super::vss::VssBlock;
use crate::error::{shape_err, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::ssm::{selective_scan, sequence_order, ScanDirection};
use crate::tensor::Tensor;

/// Sequence mixer run over the token-prefixed bottleneck sequence.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Mixer {
    Vss(VssBlock),
    /// Pass-through, for isolating the token arithmetic.
    Identity,
}

/// Bottleneck with a learnable global-context token: the token is prepended
/// to the flattened map, the sequence is mixed, and the token's output row
/// is added to every spatial row.
#[derive(Debug, Clone)]
pub struct GcstBottleneck {
    pub token: ParamId,
    pub mixer: Mixer,
    pub channels: usize,
}

impl GcstBottleneck {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let mixer = Mixer::Vss(VssBlock::new(ps, &format!("{name}.vss"), channels));
        Self::with_mixer(ps, name, channels, mixer)
    }

    pub fn with_mixer(ps: &mut ParamStore, name: &str, channels: usize, mixer: Mixer) -> Self {
        let token = ps.add(&format!("{name}.token"), &[1, channels], Init::Zeros);
        ps.set_decay(token, false);
        Self { token, mixer, channels }
    }

    /// `(Y, Z, h_g)`: `Z` is the mixer's spatial output as a `[C×H×W]` map,
    /// `h_g` the token's output row `[1×C]`, and `Y = Z + h_g` at every
    /// position.
    pub fn forward_parts(&self, p: &Binding, f: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let &[c, h, w] = f.shape() else {
            return Err(shape_err!("bottleneck expects [C×H×W], got {:?}", f.shape()));
        };
        if c != self.channels {
            return Err(shape_err!("bottleneck built for {} channels, got {c}", self.channels));
        }
        let l = h * w;
        let seq = Tensor::concat(&[p.get(self.token).clone(), to_tokens(f)?])?;
        let mixed = match &self.mixer {
            Mixer::Vss(b) => b.forward_tokens(p, &seq, h, w, 1)?,
            Mixer::Identity => seq,
        };
        let h_g = mixed.slice(0, 1)?;
        let z = mixed.slice(1, l + 1)?;
        let y = z.add(&h_g)?;
        Ok((from_tokens(&y, h, w)?, from_tokens(&z, h, w)?, h_g))
    }

    pub fn forward(&self, p: &Binding, f: &Tensor) -> Result<Tensor> {
        Ok(self.forward_parts(p, f)?.0)
    }
}

/// Token-conditioned FiLM on a skip connection.
///
/// A scale token is prepended to the flattened skip map and the sequence is
/// scanned once, end to start, so that the token position (visited last)
/// summarizes the whole map. The token's output row is projected to a
/// per-channel `(γ, β)` that modulates the skip map. The projection starts
/// at `γ = 1, β = 0`.
#[derive(Debug, Clone)]
pub struct SkipFusion {
    pub token: ParamId,
    pub norm: Norm,
    pub scan: SsmLayer,
    pub psi: Linear,
    pub channels: usize,
}

impl SkipFusion {
    pub const STATE_DIM: usize = 8;

    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let token = ps.add(&format!("{name}.token"), &[1, channels], Init::Normal(0.1));
        ps.set_decay(token, false);
        let norm = Norm::new(ps, &format!("{name}.norm"), channels);
        let scan = SsmLayer::new(ps, &format!("{name}.scan"), channels, Self::STATE_DIM);
        let psi_w = ps.add(&format!("{name}.psi.w"), &[channels, 2 * channels], Init::Zeros);
        let bias: Vec<f32> = (0..2 * channels).map(|i| if i < channels { 1.0 } else { 0.0 }).collect();
        let psi_b = ps.add(&format!("{name}.psi.b"), &[2 * channels], Init::Values(bias));
        Self { token, norm, scan, psi: Linear { w: psi_w, b: psi_b }, channels }
    }

    /// Scan output at the token position, `[1×C]`.
    pub fn token_state(&self, p: &Binding, s: &Tensor) -> Result<Tensor> {
        let &[c, h, w] = s.shape() else {
            return Err(shape_err!("skip fusion expects [C×H×W], got {:?}", s.shape()));
        };
        if c != self.channels {
            return Err(shape_err!("skip fusion built for {} channels, got {c}", self.channels));
        }
        let seq = Tensor::concat(&[p.get(self.token).clone(), to_tokens(s)?])?;
        let seq = self.norm.forward(p, &seq)?;
        let order = sequence_order(h, w, 1, ScanDirection::RightLeft);
        let y = selective_scan(&self.scan.bind(p)?, &seq.gather_rows(&order)?)?;
        y.slice(h * w, h * w + 1)
    }

    /// `(γ, β)`, each `[C]`.
    pub fn modulation(&self, p: &Binding, s: &Tensor) -> Result<(Tensor, Tensor)> {
        let gb = self.psi.forward(p, &self.token_state(p, s)?)?;
        let gb = gb.reshape(&[2 * self.channels])?;
        Ok((gb.slice(0, self.channels)?, gb.slice(self.channels, 2 * self.channels)?))
    }

    pub fn forward(&self, p: &Binding, s: &Tensor) -> Result<Tensor> {
        let (gamma, beta) = self.modulation(p, s)?;
        film(s, &gamma, &beta)
    }
}

/// `γ ⊙ S + β` with `γ, β: [C]` broadcast over the spatial axes of `S`.
pub fn film(s: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = s.shape()[0];
    if gamma.numel() != c || beta.numel() != c {
        return Err(shape_err!("FiLM parameters {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()));
    }
    s.mul(&gamma.reshape(&[c, 1, 1])?)?.add(&beta.reshape(&[c, 1, 1])?)
}
