//! Residual acceleration processes: i.i.d. Gaussian and Matérn-5/2 GP paths.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::params::{ParamVector, ResidualKind};

/// Matérn-5/2 covariance between times `t1` and `t2`.
pub fn matern52_kernel(t1: f64, t2: f64, sigma: f64, ell: f64) -> f64 {
    let r = 5f64.sqrt() * (t1 - t2).abs() / ell;
    sigma * sigma * (1.0 + r + r * r / 3.0) * (-r).exp()
}

/// In-place lower Cholesky factor of a symmetric positive-definite matrix.
/// Returns `false` when a pivot is not strictly positive.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of the unit-variance Matérn Gram matrix on the grid
/// `0, dt, ..., (n-1) dt`, escalating diagonal jitter by decades from
/// `1e-10` up to `1e-4` on failure.
pub fn unit_matern_factor(n: usize, dt: f64, ell: f64) -> Result<Vec<f64>> {
    let mut jitter = JITTER_START;
    loop {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = matern52_kernel(i as f64 * dt, j as f64 * dt, 1.0, ell);
            }
            k[i * n + i] += jitter;
        }
        if cholesky_in_place(&mut k, n) {
            return Ok(k);
        }
        jitter *= 10.0;
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "Matérn Gram matrix not positive definite (n={n}, dt={dt}, ell={ell}) after jitter {JITTER_MAX}"
            )));
        }
    }
}

/// Length scales are quantized to this resolution for cache keys.
pub const ELL_RESOLUTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct FactorKey {
    n: usize,
    dt_bits: u64,
    ell_q: i64,
}

struct CacheEntry {
    factor: Arc<Vec<f64>>,
    last_used: AtomicU64,
}

/// LRU cache of unit-variance Matérn factors keyed by `(n, dt, ell)`.
///
/// Readers share a read lock; insertion takes the write lock.
pub struct FactorCache {
    capacity: usize,
    clock: AtomicU64,
    entries: RwLock<HashMap<FactorKey, CacheEntry>>,
}

impl FactorCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            clock: AtomicU64::new(0),
            entries: RwLock::new(HashMap::new()),
        }
    }

    /// Process-wide cache shared by all samplers.
    pub fn global() -> &'static FactorCache {
        static CACHE: OnceLock<FactorCache> = OnceLock::new();
        CACHE.get_or_init(|| FactorCache::new(256))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("factor cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Factor for `(n, dt, ell)`; `ell` is rounded to [`ELL_RESOLUTION`].
    pub fn get(&self, n: usize, dt: f64, ell: f64) -> Result<Arc<Vec<f64>>> {
        let ell_q = (ell / ELL_RESOLUTION).round() as i64;
        let key = FactorKey {
            n,
            dt_bits: dt.to_bits(),
            ell_q,
        };
        let tick = self.clock.fetch_add(1, Ordering::Relaxed);
        if let Some(e) = self.entries.read().expect("factor cache poisoned").get(&key) {
            e.last_used.store(tick, Ordering::Relaxed);
            return Ok(e.factor.clone());
        }
        let ell_used = (ell_q.max(1)) as f64 * ELL_RESOLUTION;
        let factor = Arc::new(unit_matern_factor(n, dt, ell_used)?);
        let mut map = self.entries.write().expect("factor cache poisoned");
        if map.len() >= self.capacity && !map.contains_key(&key) {
            if let Some(oldest) = map
                .iter()
                .min_by_key(|(_, e)| e.last_used.load(Ordering::Relaxed))
                .map(|(k, _)| *k)
            {
                map.remove(&oldest);
            }
        }
        map.entry(key).or_insert(CacheEntry {
            factor: factor.clone(),
            last_used: AtomicU64::new(tick),
        });
        Ok(factor)
    }
}

/// Draw an `n`-step residual path at spacing `dt`.
pub fn sample_residual<R: Rng + ?Sized>(
    kind: ResidualKind,
    p: &ParamVector,
    n: usize,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sample_residual_with(kind, p, n, dt, rng, FactorCache::global())
}

pub fn sample_residual_with<R: Rng + ?Sized>(
    kind: ResidualKind,
    p: &ParamVector,
    n: usize,
    dt: f64,
    rng: &mut R,
    cache: &FactorCache,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let sigma = p.sigma;
    match kind {
        ResidualKind::IidGaussian => Ok(z.into_iter().map(|x| sigma * x).collect()),
        ResidualKind::Matern52 => {
            let ell = p
                .ell
                .ok_or_else(|| Error::Config("Matérn residuals need a length scale in the parameter vector".into()))?;
            if sigma == 0.0 {
                return Ok(vec![0.0; n]);
            }
            if n == 1 {
                return Ok(vec![sigma * z[0]]);
            }
            let l = cache.get(n, dt, ell)?;
            let mut out = vec![0.0; n];
            for i in 0..n {
                let row = &l[i * n..i * n + i + 1];
                out[i] = sigma * row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::sim::params::IdmParams;

    fn matern(sigma: f64, ell: f64) -> ParamVector {
        ParamVector {
            idm: IdmParams::new(33.3, 2.0, 1.6, 1.5, 1.67),
            sigma,
            ell: Some(ell),
        }
    }

    #[test]
    fn kernel_values() {
        assert!((matern52_kernel(1.0, 1.0, 0.7, 3.0) - 0.49).abs() < 1e-15);
        // (1 + sqrt5 + 5/3) exp(-sqrt5), evaluated independently
        assert!((matern52_kernel(0.0, 2.0, 1.0, 2.0) - 0.523_994_108_831_820_3).abs() < 1e-12);
        assert!(matern52_kernel(0.0, 1e6, 1.0, 3.0) < 1e-300);
    }

    #[test]
    fn cholesky_reconstructs_matrix() {
        let n = 40;
        let l = unit_matern_factor(n, 0.2, 3.0).unwrap();
        for i in 0..n {
            for j in 0..=i {
                let rec: f64 = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum();
                let k = matern52_kernel(i as f64 * 0.2, j as f64 * 0.2, 1.0, 3.0);
                let jitter = if i == j { 1e-4 } else { 0.0 };
                assert!((rec - k).abs() <= jitter + 1e-9, "({i},{j}) {rec} vs {k}");
            }
        }
    }

    #[test]
    fn long_windows_factor_with_jitter() {
        assert!(unit_matern_factor(200, 0.2, 3.0).is_ok());
        assert!(unit_matern_factor(200, 0.2, 9.0).is_ok());
    }

    #[test]
    fn single_step_and_zero_scale() {
        let mut r = rng::from_seed(1);
        let p = matern(0.0, 3.0);
        assert_eq!(
            sample_residual(ResidualKind::Matern52, &p, 50, 0.2, &mut r).unwrap(),
            vec![0.0; 50]
        );
        let p = matern(0.3, 3.0);
        let mut r1 = rng::from_seed(9);
        let mut r2 = rng::from_seed(9);
        let a = sample_residual(ResidualKind::Matern52, &p, 1, 0.2, &mut r1).unwrap();
        let b = sample_residual(ResidualKind::IidGaussian, &p, 1, 0.2, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_length_scale_is_a_config_error() {
        let mut p = matern(0.3, 3.0);
        p.ell = None;
        let mut r = rng::from_seed(1);
        assert!(sample_residual(ResidualKind::Matern52, &p, 5, 0.2, &mut r).is_err());
    }

    #[test]
    fn cache_evicts_least_recently_used() {
        let cache = FactorCache::new(2);
        cache.get(5, 0.2, 1.0).unwrap();
        cache.get(5, 0.2, 2.0).unwrap();
        cache.get(5, 0.2, 1.0).unwrap();
        cache.get(5, 0.2, 3.0).unwrap();
        assert_eq!(cache.len(), 2);
        let map = cache.entries.read().unwrap();
        assert!(map.keys().any(|k| k.ell_q == 1000));
        assert!(!map.keys().any(|k| k.ell_q == 2000));
    }

    #[test]
    fn lag_one_covariance_matches_kernel() {
        // Monte-Carlo oracle: 20,000 paths, n = 200, dt = 0.2, sigma = 0.3, ell = 3
        let p = matern(0.3, 3.0);
        let n = 200;
        let draws = 20_000;
        let mut r = rng::from_seed(42);
        let mut lag1 = 0.0;
        let mut var = 0.0;
        for _ in 0..draws {
            let x = sample_residual(ResidualKind::Matern52, &p, n, 0.2, &mut r).unwrap();
            lag1 += x[100] * x[101];
            var += x[100] * x[100];
        }
        lag1 /= draws as f64;
        var /= draws as f64;
        let k1 = matern52_kernel(0.0, 0.2, 0.3, 3.0);
        assert!(((lag1 - k1) / k1).abs() < 0.05, "lag1 {lag1} vs {k1}");
        assert!(((var - 0.09) / 0.09).abs() < 0.05, "var {var}");
    }

    #[test]
    fn marginals_pass_kolmogorov_smirnov() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let p = matern(0.4, 2.0);
        let mut r = rng::from_seed(9);
        let n = 10_000;
        let mut x: Vec<f64> = (0..n)
            .map(|_| sample_residual(ResidualKind::Matern52, &p, 30, 0.2, &mut r).unwrap()[17])
            .collect();
        x.sort_by(f64::total_cmp);
        let norm = Normal::new(0.0, 0.4).unwrap();
        let d = x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = norm.cdf(*v);
                (f - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // asymptotic 1% critical value
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }
}
