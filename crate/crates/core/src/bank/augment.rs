use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::trajectory::finite_difference_accel;

use super::BankConfig;

const SMOOTHING_TAPS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Perturb,
    Rescale,
    TimeWarp,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 3] = [AugmentKind::Perturb, AugmentKind::Rescale, AugmentKind::TimeWarp];
}

/// A fully parameterized augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Augmentation {
    /// Adds `noise`, already filtered and scaled.
    Perturb {
        noise: Vec<f64>,
    },
    Rescale {
        kappa: f64,
    },
    /// Duration factors of three equal subsegments.
    TimeWarp {
        factors: [f64; 3],
    },
}

impl Augmentation {
    /// Draws the parameters of an augmentation of `kind` for a window of
    /// `len` steps.
    pub fn sample<R: Rng + ?Sized>(kind: AugmentKind, len: usize, cfg: &BankConfig, rng: &mut R) -> Self {
        match kind {
            AugmentKind::Perturb => Augmentation::Perturb {
                noise: band_limited_noise(len, cfg.vel_jitter, rng),
            },
            AugmentKind::Rescale => Augmentation::Rescale {
                kappa: rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]),
            },
            AugmentKind::TimeWarp => {
                let [lo, hi] = cfg.time_scale_range;
                Augmentation::TimeWarp {
                    factors: [0; 3].map(|_| rng.random_range(lo..=hi)),
                }
            }
        }
    }

    pub fn kind(&self) -> AugmentKind {
        match self {
            Augmentation::Perturb { .. } => AugmentKind::Perturb,
            Augmentation::Rescale { .. } => AugmentKind::Rescale,
            Augmentation::TimeWarp { .. } => AugmentKind::TimeWarp,
        }
    }

    /// Transformed speed profile and its recomputed accelerations.
    pub fn apply(&self, v: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
        let out: Vec<f64> = match self {
            Augmentation::Perturb { noise } => v
                .iter()
                .zip(noise.iter().chain(std::iter::repeat(&0.0)))
                .map(|(a, b)| a + b)
                .collect(),
            Augmentation::Rescale { kappa } => v.iter().map(|x| x * kappa).collect(),
            Augmentation::TimeWarp { factors } => time_warp(v, factors),
        };
        let a = finite_difference_accel(&out, dt);
        (out, a)
    }
}

/// White noise smoothed by a normalized moving average and scaled so its
/// peak magnitude equals `amplitude`.
pub fn band_limited_noise<R: Rng + ?Sized>(len: usize, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..len + SMOOTHING_TAPS - 1)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let smooth: Vec<f64> = raw
        .windows(SMOOTHING_TAPS)
        .map(|w| w.iter().sum::<f64>() / SMOOTHING_TAPS as f64)
        .collect();
    let peak = smooth.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if peak == 0.0 || amplitude == 0.0 {
        return vec![0.0; len];
    }
    smooth.iter().map(|x| x * amplitude / peak).collect()
}

/// Monotone piecewise-affine reparameterization of the index axis with the
/// total duration held fixed; values are linearly interpolated.
pub fn time_warp(v: &[f64], factors: &[f64; 3]) -> Vec<f64> {
    let n = v.len();
    if n < 2 {
        return v.to_vec();
    }
    let span = (n - 1) as f64;
    let src = [0.0, span / 3.0, 2.0 * span / 3.0, span];
    let mut dst = [0.0; 4];
    for i in 0..3 {
        dst[i + 1] = dst[i] + (src[i + 1] - src[i]) * factors[i];
    }
    let norm = span / dst[3];
    for d in &mut dst {
        *d *= norm;
    }
    (0..n)
        .map(|k| {
            let tau = k as f64;
            let i = (0..3).find(|&i| tau <= dst[i + 1]).unwrap_or(2);
            let frac = if dst[i + 1] > dst[i] {
                (tau - dst[i]) / (dst[i + 1] - dst[i])
            } else {
                0.0
            };
            let s = (src[i] + frac * (src[i + 1] - src[i])).clamp(0.0, span);
            let j = (s.floor() as usize).min(n - 2);
            let w = s - j as f64;
            v[j] * (1.0 - w) + v[j + 1] * w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn identities() {
        let v: Vec<f64> = (0..75).map(|t| 20.0 + (t as f64 * 0.1).sin()).collect();
        let a = finite_difference_accel(&v, 0.2);
        assert_eq!(
            Augmentation::Rescale { kappa: 1.0 }.apply(&v, 0.2),
            (v.clone(), a.clone())
        );
        assert_eq!(
            Augmentation::Perturb { noise: vec![0.0; 75] }.apply(&v, 0.2),
            (v.clone(), a.clone())
        );
        let (w, _) = Augmentation::TimeWarp { factors: [1.05; 3] }.apply(&v, 0.2);
        assert!(w.iter().zip(&v).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn noise_peak_is_amplitude() {
        let mut r = rng::from_seed(2);
        let n = band_limited_noise(75, 0.2, &mut r);
        assert_eq!(n.len(), 75);
        let peak = n.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!((peak - 0.2).abs() < 1e-12);
        assert!(band_limited_noise(75, 0.0, &mut r).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn time_warp_is_monotone_on_ramps() {
        let v: Vec<f64> = (0..75).map(f64::from).collect();
        let w = time_warp(&v, &[0.9, 1.1, 1.0]);
        assert_eq!(w.len(), 75);
        assert_eq!(w[0], 0.0);
        assert!((w[74] - 74.0).abs() < 1e-9);
        assert!(w.windows(2).all(|p| p[1] > p[0]));
    }
}
