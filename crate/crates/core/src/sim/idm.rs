use crate::error::{Error, Result};

use super::params::IdmParams;

/// Desired dynamic gap `s*(v, dv) = s0 + v T + v dv / (2 sqrt(a_max b))`.
#[inline]
pub fn desired_gap(p: &IdmParams, v: f64, dv: f64) -> f64 {
    p.s0 + v * p.t_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt())
}

/// Deterministic IDM acceleration for gap `s`, speed `v`, relative speed `dv = v - v_lead`.
pub fn idm_accel(p: &IdmParams, s: f64, v: f64, dv: f64) -> Result<f64> {
    if s <= 0.0 || s.is_nan() {
        return Err(Error::Domain(format!("IDM gap must be positive, got {s}")));
    }
    let ratio = v / p.v0;
    let free = if p.delta == 4.0 {
        ratio.powi(4)
    } else {
        ratio.powf(p.delta)
    };
    let interaction = desired_gap(p, v, dv) / s;
    Ok(p.a_max * (1.0 - free - interaction * interaction))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> IdmParams {
        IdmParams::new(33.3, 2.0, 1.6, 1.5, 1.67)
    }

    #[test]
    fn golden_value_at_recommended_parameters() {
        // independent scalar evaluation: -3.0301795478948144
        let a = idm_accel(&rec(), 20.0, 20.0, 0.0).unwrap();
        assert!((a - (-3.030_179_547_894_814)).abs() < 1e-12);
    }

    #[test]
    fn standstill_desired_gap_is_jam_distance() {
        assert_eq!(desired_gap(&rec(), 0.0, 0.0), 2.0);
    }

    #[test]
    fn free_road_at_desired_speed_is_neutral() {
        let a = idm_accel(&rec(), 1e9, 33.3, 0.0).unwrap();
        assert!(a.abs() < 1e-9);
    }

    #[test]
    fn non_positive_gap_is_rejected() {
        assert!(matches!(idm_accel(&rec(), 0.0, 10.0, 0.0), Err(Error::Domain(_))));
        assert!(idm_accel(&rec(), -1.0, 10.0, 0.0).is_err());
    }
}
