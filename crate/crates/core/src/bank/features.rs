use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 8;
pub const FEATURE_VERSION: u32 = 1;

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// `[mean v, std v, min v, max v, mean a, std a, max |a|, mean |Δv|]` with
/// population standard deviations.
pub fn features(v: &[f64], a: &[f64]) -> [f64; FEATURE_DIM] {
    if v.is_empty() {
        return [0.0; FEATURE_DIM];
    }
    let (mv, sv) = mean_std(v);
    let (ma, sa) = mean_std(a);
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let amax = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let dv = if v.len() > 1 {
        v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (v.len() - 1) as f64
    } else {
        0.0
    };
    [mv, sv, vmin, vmax, ma, sa, amax, dv]
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `1 / (eps + mean distance to the k nearest points)`, skipping `exclude`.
pub fn representativeness<P: AsRef<[f64]>>(
    query: &[f64],
    points: &[P],
    exclude: Option<usize>,
    k: usize,
    eps: f64,
) -> Result<f64> {
    let available = points.len() - usize::from(exclude.is_some_and(|i| i < points.len()));
    if k == 0 || available < k {
        return Err(Error::Config(format!(
            "representativeness needs k in 1..={available}, got {k}"
        )));
    }
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, p)| dist(query, p.as_ref()))
        .collect();
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    let mean = d[..k].iter().sum::<f64>() / k as f64;
    Ok(1.0 / (eps + mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_window() {
        assert_eq!(
            features(&[30.0; 75], &[0.0; 75]),
            [30.0, 0.0, 30.0, 30.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn linear_ramp() {
        let v: Vec<f64> = (0..75).map(|t| 20.0 + 5.0 * t as f64 / 74.0).collect();
        let a = crate::trajectory::finite_difference_accel(&v, 0.2);
        let f = features(&v, &a);
        assert!((f[0] - 22.5).abs() < 1e-12);
        assert_eq!(f[2], 20.0);
        assert!((f[3] - 25.0).abs() < 1e-12);
        assert!((f[7] - 5.0 / 74.0).abs() < 1e-12);
        assert_eq!(f, features(&v, &a));
    }

    #[test]
    fn toy_bank() {
        let bank = [[0.0], [1.0], [2.0], [10.0]];
        let rho = representativeness(&[0.0], &bank, Some(0), 2, 1e-3).unwrap();
        assert_eq!(rho, 1.0 / (1e-3 + 1.5));
        let dup = [[3.0]; 6];
        assert!((representativeness(&[3.0], &dup, Some(0), 5, 1e-3).unwrap() - 1000.0).abs() < 1e-9);
        assert!(representativeness(&[1e9], &bank, None, 2, 1e-3).unwrap() < 1e-8);
        assert!(matches!(
            representativeness(&[0.0], &bank, Some(0), 4, 1e-3),
            Err(Error::Config(_))
        ));
    }
}
