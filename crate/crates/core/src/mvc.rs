//! Mean-variance utility `2 tau h'M - h'Sigma h` over long-only two-asset
//! portfolios, and its closed-form maximiser.

use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::moments::MomentSet;

/// Condition number above which the covariance is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Default risk tolerance.
pub const DEFAULT_TAU: f64 = 0.5;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MvcWeights {
    pub h1: f64,
    pub h2: f64,
    /// The unconstrained optimum had a negative leg and was projected.
    pub clipped: bool,
}

impl MvcWeights {
    pub fn as_array(&self) -> [f64; 2] {
        [self.h1, self.h2]
    }
}

/// `[[var_rx, cov], [cov, var_ry]]`; refuses flagged moment sets.
pub fn covariance_matrix(m: &MomentSet) -> Result<Mat2> {
    if m.flagged {
        return Err(Error::FlaggedMoments);
    }
    Ok([[m.var_rx, m.cov_rxy], [m.cov_rxy, m.var_ry]])
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn eigenvalues(s: &Mat2) -> [f64; 2] {
    let tr = s[0][0] + s[1][1];
    let half_diff = 0.5 * (s[0][0] - s[1][1]);
    let r = half_diff.hypot(s[0][1]);
    [0.5 * tr - r, 0.5 * tr + r]
}

fn inverse(s: &Mat2) -> Result<Mat2> {
    ensure(s.iter().flatten().all(|v| v.is_finite()), || "non-finite covariance".into())?;
    ensure((s[0][1] - s[1][0]).abs() <= 1e-12 * s[0][1].abs().max(1e-300), || {
        "covariance must be symmetric".into()
    })?;
    let [lo, hi] = eigenvalues(s);
    let cond = if lo.abs() == 0.0 { f64::INFINITY } else { hi.abs().max(lo.abs()) / lo.abs().min(hi.abs()) };
    if !(cond < MAX_CONDITION) {
        return Err(Error::SingularCovariance(cond));
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    Ok([[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]])
}

fn mul(a: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Unconstrained optimum of the utility on `h1 + h2 = 1`:
///
/// ```text
/// h = S^-1 e / (e'S^-1 e) + tau [S^-1 M - (e'S^-1 M)/(e'S^-1 e) S^-1 e],  e = (1, 1)
/// ```
pub fn mvc_weights_unconstrained(mean: [f64; 2], cov: &Mat2, tau: f64) -> Result<[f64; 2]> {
    ensure(tau.is_finite() && tau >= 0.0, || format!("tau must be >= 0, got {tau}"))?;
    ensure(mean.iter().all(|m| m.is_finite()), || "non-finite mean vector".into())?;
    let inv = inverse(cov)?;
    let e = [1.0, 1.0];
    let inv_e = mul(&inv, e);
    let inv_m = mul(&inv, mean);
    let e_inv_e = dot(e, inv_e);
    let e_inv_m = dot(e, inv_m);
    let h = [0, 1].map(|i| inv_e[i] / e_inv_e + tau * (inv_m[i] - e_inv_m / e_inv_e * inv_e[i]));
    Ok(h)
}

/// Closed-form optimum projected onto the long-only simplex.
///
/// The unconstrained point already sums to one, so the Euclidean projection
/// just moves a negative leg to the nearest vertex.
pub fn mvc_weights(mean: [f64; 2], cov: &Mat2, tau: f64) -> Result<MvcWeights> {
    let [h1, h2] = mvc_weights_unconstrained(mean, cov, tau)?;
    Ok(if h1 < 0.0 {
        MvcWeights { h1: 0.0, h2: 1.0, clipped: true }
    } else if h2 < 0.0 {
        MvcWeights { h1: 1.0, h2: 0.0, clipped: true }
    } else {
        MvcWeights { h1, h2: 1.0 - h1, clipped: false }
    })
}

/// Weights from a one-step moment set.
pub fn mvc_weights_from_moments(m: &MomentSet, tau: f64) -> Result<MvcWeights> {
    mvc_weights(m.mean_vector(), &covariance_matrix(m)?, tau)
}

/// `2 tau h'M - h'Sigma h`.
pub fn mvc_utility(h: [f64; 2], mean: [f64; 2], cov: &Mat2, tau: f64) -> f64 {
    2.0 * tau * dot(h, mean) - dot(h, mul(cov, h))
}
