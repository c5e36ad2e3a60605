//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub max_rel_dev: f64,
    /// Coordinate where the deviation peaks.
    pub worst_index: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Compare the backward pass of a scalar function `f` at `x` with central
/// differences of step `h`.
///
/// Coordinates closer than `h` to zero are first moved `2h` further from
/// zero, so that piecewise-smooth functions with a kink at the origin (relu,
/// abs) are always differenced on one side of it.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(h > 0.0 && h <= 0.1) {
        return Err(Error::Input(format!("grad_check step {h} outside (0, 0.1]")));
    }
    let base: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| if v.abs() < h { v + 2.0 * h * if v < 0.0 { -1.0 } else { 1.0 } } else { v })
        .collect();

    let xp = Tensor::param(x.shape(), base.clone())?;
    let y = f(&xp)?;
    if y.numel() != 1 {
        return Err(Error::Shape(format!("grad_check function must be scalar, got {:?}", y.shape())));
    }
    y.backward()?;
    let analytic = xp.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |vals: Vec<f32>, i: usize| -> Result<f64> {
        let v = f(&Tensor::new(x.shape(), vals)?).map_err(|e| match e {
            Error::Numerics(m) => Error::Numerics(format!("at coordinate {i}: {m}")),
            other => other,
        })?;
        let s = v.item()?;
        if !s.is_finite() {
            return Err(Error::Numerics(format!("non-finite objective at coordinate {i}")));
        }
        Ok(s as f64)
    };

    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let step = plus[i] as f64 - minus[i] as f64;
        let (fp, fm) = (eval(plus, i)?, eval(minus, i)?);
        numeric.push((fp - fm) / step);
    }

    let scale = analytic
        .iter()
        .map(|v| v.abs() as f64)
        .chain(numeric.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let mut max_rel_dev = 0.0;
    let mut worst_index = 0;
    if scale > 0.0 {
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let d = (*a as f64 - n).abs() / scale;
            if d > max_rel_dev {
                max_rel_dev = d;
                worst_index = i;
            }
        }
    }
    Ok(GradCheckReport { max_rel_dev, worst_index, analytic, numeric, passed: max_rel_dev <= tol })
}
