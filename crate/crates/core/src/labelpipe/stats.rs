use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::losses::BBox;

/// Minimum number of boxes for a covariance estimate.
pub const MIN_BOXES: usize = 5;
pub const DEFAULT_REG: f64 = 1e-6;

/// `[cx/W, cy/H, ln(w/W), ln(h/H)]` of a pixel-space box.
pub fn box_features(b: &BBox, width: f64, height: f64) -> Result<[f64; 4]> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::Input(format!("box with non-positive size {}×{}", b.w, b.h)));
    }
    Ok([b.cx as f64 / width, b.cy as f64 / height, (b.w as f64 / width).ln(), (b.h as f64 / height).ln()])
}

/// Mean and regularized covariance of box features.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub mean: [f64; 4],
    pub cov: [[f64; 4]; 4],
}

/// Sample mean and Bessel-corrected covariance plus `reg·I`.
pub fn fit_box_stats(boxes: &[BBox], width: f64, height: f64, reg: f64) -> Result<BoxStats> {
    if boxes.len() < MIN_BOXES {
        return Err(Error::Config(format!("need at least {MIN_BOXES} boxes to fit statistics, got {}", boxes.len())));
    }
    let feats = boxes.iter().map(|b| box_features(b, width, height)).collect::<Result<Vec<_>>>()?;
    let n = feats.len() as f64;
    let mut mean = [0.0; 4];
    for f in &feats {
        for k in 0..4 {
            mean[k] += f[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = [[0.0; 4]; 4];
    for f in &feats {
        for i in 0..4 {
            for j in 0..4 {
                cov[i][j] += (f[i] - mean[i]) * (f[j] - mean[j]);
            }
        }
    }
    for (i, row) in cov.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
        row[i] += reg;
    }
    Ok(BoxStats { mean, cov })
}

/// `(v−μ)ᵀ Σ⁻¹ (v−μ)` by Cholesky solve.
pub fn mahalanobis_sq(v: &[f64; 4], stats: &BoxStats) -> Result<f64> {
    let sigma = Matrix4::from_fn(|i, j| stats.cov[i][j]);
    if (sigma - sigma.transpose()).abs().max() > 1e-12 * sigma.abs().max().max(1.0) {
        return Err(Error::Numerics("box covariance is not symmetric".into()));
    }
    let chol = sigma.cholesky().ok_or_else(|| Error::Numerics("box covariance is not positive definite".into()))?;
    let d = Vector4::from_fn(|i, _| v[i] - stats.mean[i]);
    let x = chol.solve(&d);
    Ok(d.dot(&x).max(0.0))
}

/// Density of χ² with 4 degrees of freedom.
fn chi2_4_density(x: f64) -> f64 {
    x * (-x / 2.0).exp() / 4.0
}

/// Upper-tail cutoff of χ²₄ at tail mass `p`, by Simpson integration of the
/// density in steps of `1e-4` with linear interpolation inside the last step.
pub fn chi2_4_critical(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("tail probability {p} outside (0, 1)")));
    }
    const STEP: f64 = 1e-4;
    let target = 1.0 - p;
    let mut mass = 0.0;
    let mut x = 0.0;
    loop {
        let piece = STEP / 6.0 * (chi2_4_density(x) + 4.0 * chi2_4_density(x + STEP / 2.0) + chi2_4_density(x + STEP));
        if mass + piece >= target {
            return Ok(x + STEP * (target - mass) / piece);
        }
        mass += piece;
        x += STEP;
        if x > 1e4 {
            return Err(Error::Numerics(format!("χ² integration did not reach mass {target}")));
        }
    }
}

/// Squared-distance cutoff for 4-dimensional box features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareGate {
    pub dof: usize,
    pub p_threshold: f64,
    pub critical: f64,
}

impl ChiSquareGate {
    pub fn new(p_threshold: f64) -> Result<Self> {
        Ok(Self { dof: 4, p_threshold, critical: chi2_4_critical(p_threshold)? })
    }

    /// Whether a squared distance survives the gate.
    pub fn keep(&self, d2: f64) -> bool {
        d2 <= self.critical
    }
}

/// Keep/reject decision for one squared distance.
pub fn chi2_gate(d2: f64, gate: &ChiSquareGate) -> bool {
    gate.keep(d2)
}
