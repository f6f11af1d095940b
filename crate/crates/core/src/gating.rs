//! Measurement validation gates.
//!
//! [`gate_gaussian`] is the classic chi-square test on the normalized
//! innovation squared. [`gate_gm`] handles mixture-valued measurement and
//! prediction distributions: both are marginalized along the innovation
//! direction and the innovation length is compared with the sum of their
//! one-sided tail thresholds.

use crate::error::{Error, Result};
use crate::gm::{Direction, GaussMix2, Gaussian2, Mat2, Vec2};

/// Innovations shorter than this are accepted without a direction.
pub const ZERO_INNOVATION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub accepted: bool,
    /// NIS for the Gaussian gate, innovation length (m) for the mixture gate.
    pub statistic: f64,
    pub threshold: f64,
    pub alpha: f64,
}

impl GateDecision {
    fn decide(statistic: f64, threshold: f64, alpha: f64) -> Self {
        Self { accepted: statistic <= threshold, statistic, threshold, alpha }
    }
}

/// Normalized innovation squared `nu^T S^-1 nu`.
pub fn nis(innovation: &Vec2, s: &Mat2) -> Result<f64> {
    Gaussian2::new(Vec2::zeros(), *s)
        .map_err(|e| Error::Singular(format!("innovation covariance: {e}")))?
        .mahalanobis_sq(innovation)
}

/// Inverse chi-square CDF at `alpha`; only two degrees of freedom.
pub fn chi2_threshold(alpha: f64, nu: u32) -> Result<f64> {
    if nu != 2 {
        return Err(Error::Unsupported(format!("chi-square with {nu} degrees of freedom")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(-2.0 * (-alpha).ln_1p())
}

pub fn gate_gaussian(innovation: &Vec2, s: &Mat2, alpha: f64) -> Result<GateDecision> {
    let threshold = chi2_threshold(alpha, 2)?;
    Ok(GateDecision::decide(nis(innovation, s)?, threshold, alpha))
}

/// Mixture gate.
///
/// `pred_meas` is the predicted-measurement distribution (one component per
/// filter hypothesis); `meas` is the inertial-frame measurement mixture whose
/// weighted mean is the measured location `z`. Rejects when
/// `|z - h| > beta_m + beta_p`, each beta being the `alpha` tail threshold of
/// the respective mixture projected on `(z - h) / |z - h|`.
pub fn gate_gm(z: &Vec2, pred_meas: &GaussMix2, meas: &GaussMix2, alpha: f64) -> Result<GateDecision> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    let predicted = pred_meas.mean();
    let innovation = z - predicted;
    let dist = innovation.norm();
    if dist < ZERO_INNOVATION {
        return Ok(GateDecision { accepted: true, statistic: dist, threshold: 0.0, alpha });
    }
    let d = Direction::from_vector(&innovation)?;
    let beta_m = meas.marginalize(&d, z)?.tail_threshold(alpha)?;
    let beta_p = pred_meas.marginalize(&d, &predicted)?.tail_threshold(alpha)?;
    Ok(GateDecision::decide(dist, beta_m + beta_p, alpha))
}
