//! Positivity bijection `θ = softplus(u) + ε` between unconstrained and
//! physical parameters.

use crate::error::{Error, Result};
use crate::sim::{ParamVector, ResidualKind};

pub const EPS_SOFTPLUS: f64 = 1e-3;

#[inline]
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// `log σ(u)` with σ the logistic function.
#[inline]
pub fn log_sigmoid(u: f64) -> f64 {
    -softplus(-u)
}

#[inline]
pub fn to_physical_scalar(u: f64, eps: f64) -> f64 {
    softplus(u) + eps
}

/// Inverse of [`to_physical_scalar`], `log(exp(θ - ε) - 1)` evaluated as
/// `y + log(-expm1(-y))`.
#[inline]
pub fn from_physical_scalar(theta: f64, eps: f64) -> Result<f64> {
    let y = theta - eps;
    if !(y > 0.0) {
        return Err(Error::Domain(format!(
            "parameter {theta} is not above the softplus floor {eps}"
        )));
    }
    Ok(y + (-(-y).exp_m1()).ln())
}

/// `Σ log σ(u_i)`, the log-determinant of `∂θ/∂u`.
pub fn log_det_jacobian(u: &[f64]) -> f64 {
    u.iter().map(|x| log_sigmoid(*x)).sum()
}

pub fn to_physical(u: &[f64], kind: ResidualKind, eps: f64) -> Result<ParamVector> {
    let theta: Vec<f64> = u.iter().map(|x| to_physical_scalar(*x, eps)).collect();
    ParamVector::from_slice(kind, &theta)
}

pub fn from_physical(p: &ParamVector, eps: f64) -> Result<Vec<f64>> {
    p.to_vec().iter().map(|t| from_physical_scalar(*t, eps)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero() {
        assert!((to_physical_scalar(0.0, 1e-3) - 0.694_147_180_559_945_3).abs() < 1e-15);
    }

    #[test]
    fn round_trip_over_range() {
        let lo = EPS_SOFTPLUS + 1e-6;
        for k in 0..=10_000 {
            let theta = lo + (50.0 - lo) * k as f64 / 10_000.0;
            let u = from_physical_scalar(theta, EPS_SOFTPLUS).unwrap();
            let back = to_physical_scalar(u, EPS_SOFTPLUS);
            assert!((back - theta).abs() <= 1e-9, "{theta}: {back}");
        }
        assert!(from_physical_scalar(EPS_SOFTPLUS, EPS_SOFTPLUS).is_err());
        assert!(from_physical_scalar(1e4, EPS_SOFTPLUS).unwrap().is_finite());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for &u in &[-8.0, -2.0, -0.3, 0.0, 0.7, 3.0, 12.0] {
            let h = 1e-5;
            let fd = (to_physical_scalar(u + h, 0.0) - to_physical_scalar(u - h, 0.0)) / (2.0 * h);
            let an = log_sigmoid(u).exp();
            assert!(((fd - an) / an).abs() < 1e-6, "{u}: {fd} vs {an}");
        }
    }
}
