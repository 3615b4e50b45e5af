//! Truncated log-normal priors over the physical parameters.
//!
//! IDM parameters are log-normal around the recommended values with unit
//! log-scale, truncated to a feasible box by rejection. Residual
//! hyperparameters are untruncated log-normals.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{IdmParams, ParamVector, ResidualKind};

/// Recommended IDM values `[v0, s0, T, a_max, b]`.
pub const THETA_REC: [f64; 5] = [33.3, 2.0, 1.6, 1.5, 1.67];

/// Feasible ranges of `[v0, s0, T, a_max, b]`.
pub const IDM_BOUNDS: [(f64, f64); 5] = [(20.0, 40.0), (1.0, 6.0), (0.6, 4.5), (0.2, 3.5), (0.4, 4.0)];

pub const IDM_LOG_SCALE: f64 = 1.0;

/// `(location, scale)` of the log-normal prior on each component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub kind: ResidualKind,
    pub log_loc: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl Prior {
    pub fn new(kind: ResidualKind) -> Self {
        let mut log_loc: Vec<f64> = THETA_REC.iter().map(|x| x.ln()).collect();
        let mut log_scale = vec![IDM_LOG_SCALE; 5];
        match kind {
            ResidualKind::IidGaussian => {
                log_loc.push(-1.0);
                log_scale.push(0.3);
            }
            ResidualKind::Matern52 => {
                log_loc.push(0.3f64.ln());
                log_scale.push(0.5);
                log_loc.push(3.0f64.ln());
                log_scale.push(0.5);
            }
        }
        Self {
            kind,
            log_loc,
            log_scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    /// Whether the IDM components lie in the feasible box.
    pub fn in_support(&self, p: &ParamVector) -> bool {
        let idm = p.idm.as_array();
        idm.iter()
            .zip(IDM_BOUNDS.iter())
            .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
            && p.sigma > 0.0
            && p.ell.is_none_or(|l| l > 0.0)
            && (p.ell.is_some() == (self.kind == ResidualKind::Matern52))
    }

    /// Draws until the IDM components fall inside the feasible box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_retries: usize) -> Result<ParamVector> {
        if max_retries == 0 {
            return Err(Error::Config("max_retries must be at least 1".into()));
        }
        for _ in 0..max_retries {
            let x: Vec<f64> = self
                .log_loc
                .iter()
                .zip(&self.log_scale)
                .map(|(m, s)| (m + s * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let p = ParamVector::from_slice(self.kind, &x)?;
            if self.in_support(&p) {
                return Ok(p);
            }
        }
        Err(Error::PriorRejection(max_retries))
    }

    /// Log-space prior density `Σ log N(log θ_i; μ_i, s_i²)`, unnormalized
    /// with respect to the truncation; `-inf` outside the support.
    pub fn log_prob(&self, p: &ParamVector) -> f64 {
        if !self.in_support(p) {
            return f64::NEG_INFINITY;
        }
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        p.to_vec()
            .iter()
            .zip(self.log_loc.iter().zip(&self.log_scale))
            .map(|(x, (m, s))| {
                let z = (x.ln() - m) / s;
                -0.5 * z * z - s.ln() - half_log_2pi
            })
            .sum()
    }

    /// Gradient of [`Prior::log_prob`] with respect to `log θ`.
    pub fn log_prob_grad_log(&self, p: &ParamVector) -> Vec<f64> {
        p.to_vec()
            .iter()
            .zip(self.log_loc.iter().zip(&self.log_scale))
            .map(|(x, (m, s))| -(x.ln() - m) / (s * s))
            .collect()
    }

    /// Per-component prior medians `exp(μ_i)`.
    pub fn median(&self) -> ParamVector {
        let x: Vec<f64> = self.log_loc.iter().map(|m| m.exp()).collect();
        ParamVector::from_slice(self.kind, &x).expect("prior dimension is consistent")
    }
}

/// Shorthand for [`Prior::sample`].
pub fn sample_prior<R: Rng + ?Sized>(kind: ResidualKind, rng: &mut R, max_retries: usize) -> Result<ParamVector> {
    Prior::new(kind).sample(rng, max_retries)
}

/// Shorthand for [`Prior::log_prob`].
pub fn log_prior(p: &ParamVector, kind: ResidualKind) -> f64 {
    Prior::new(kind).log_prob(p)
}

pub fn recommended_idm() -> IdmParams {
    IdmParams::new(THETA_REC[0], THETA_REC[1], THETA_REC[2], THETA_REC[3], THETA_REC[4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn draws_stay_in_the_box() {
        for kind in [ResidualKind::IidGaussian, ResidualKind::Matern52] {
            let prior = Prior::new(kind);
            let mut r = rng::from_seed(3);
            for _ in 0..100_000 {
                let p = prior.sample(&mut r, 10_000).unwrap();
                for (x, (lo, hi)) in p.idm.as_array().iter().zip(IDM_BOUNDS) {
                    assert!(*x >= lo && *x <= hi);
                }
                assert_eq!(p.idm.delta, 4.0);
                assert_eq!(p.ell.is_some(), kind == ResidualKind::Matern52);
            }
        }
    }

    #[test]
    fn gaussian_sigma_median() {
        let prior = Prior::new(ResidualKind::IidGaussian);
        let mut r = rng::from_seed(11);
        let mut s: Vec<f64> = (0..100_000)
            .map(|_| prior.sample(&mut r, 10_000).unwrap().sigma)
            .collect();
        s.sort_by(f64::total_cmp);
        let median = s[s.len() / 2];
        assert!((median - (-1.0f64).exp()).abs() < 0.005, "median {median}");
    }

    #[test]
    fn rejection_exhaustion_is_reported() {
        let mut prior = Prior::new(ResidualKind::IidGaussian);
        prior.log_loc[0] = 100.0; // v0 far outside the box
        prior.log_scale[0] = 1e-6;
        let mut r = rng::from_seed(1);
        assert!(matches!(prior.sample(&mut r, 5), Err(Error::PriorRejection(5))));
        assert!(prior.sample(&mut r, 0).is_err());
    }

    #[test]
    fn log_prior_support_and_mode() {
        let prior = Prior::new(ResidualKind::Matern52);
        let mut p = prior.median();
        assert!(prior.log_prob(&p).is_finite());
        assert!(prior.log_prob_grad_log(&p).iter().all(|g| g.abs() < 1e-12));
        p.idm.v0 = 45.0;
        assert_eq!(prior.log_prob(&p), f64::NEG_INFINITY);
    }

    #[test]
    fn log_prior_gradient_matches_central_differences() {
        let prior = Prior::new(ResidualKind::Matern52);
        let p = ParamVector::from_slice(ResidualKind::Matern52, &[28.0, 2.5, 1.2, 1.1, 2.0, 0.4, 2.2]).unwrap();
        let g = prior.log_prob_grad_log(&p);
        let h = 1e-5;
        for i in 0..7 {
            let eval = |d: f64| {
                let mut x = p.to_vec();
                x[i] = (x[i].ln() + d).exp();
                prior.log_prob(&ParamVector::from_slice(ResidualKind::Matern52, &x).unwrap())
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }
}
