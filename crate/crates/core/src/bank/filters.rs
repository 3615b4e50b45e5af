use serde::{Deserialize, Serialize};

use super::BankConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    NonNegativity,
    AccelerationBound,
    JerkBound,
    KinematicConsistency,
    Envelope,
}

/// Scalar percentile bounds of speed and acceleration over the real bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v_lo: f64,
    pub v_hi: f64,
    pub a_lo: f64,
    pub a_hi: f64,
}

impl Envelope {
    pub fn unbounded() -> Self {
        Self {
            v_lo: f64::NEG_INFINITY,
            v_hi: f64::INFINITY,
            a_lo: f64::NEG_INFINITY,
            a_hi: f64::INFINITY,
        }
    }

    pub fn from_samples(v: &[f64], a: &[f64], lo_pct: f64, hi_pct: f64) -> Self {
        Self {
            v_lo: percentile(v, lo_pct),
            v_hi: percentile(v, hi_pct),
            a_lo: percentile(a, lo_pct),
            a_hi: percentile(a, hi_pct),
        }
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(x: &[f64], pct: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * pct.clamp(0.0, 100.0) / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// All plausibility violations of a window; empty means it passes.
pub fn check_window(v: &[f64], a: &[f64], dt: f64, cfg: &BankConfig, env: &Envelope) -> Vec<Violation> {
    let mut out = Vec::new();
    if v.iter().any(|x| *x < 0.0) {
        out.push(Violation::NonNegativity);
    }
    if a.iter().any(|x| x.abs() > cfg.a_phys_max) {
        out.push(Violation::AccelerationBound);
    }
    if a.windows(2).any(|w| ((w[1] - w[0]) / dt).abs() > cfg.j_max) {
        out.push(Violation::JerkBound);
    }
    if (1..v.len()).any(|t| (v[t] - v[t - 1] - a[t] * dt).abs() > cfg.eps_kin) {
        out.push(Violation::KinematicConsistency);
    }
    let outside = v.iter().any(|x| *x < env.v_lo || *x > env.v_hi) || a.iter().any(|x| *x < env.a_lo || *x > env.a_hi);
    if outside {
        out.push(Violation::Envelope);
    }
    out
}
