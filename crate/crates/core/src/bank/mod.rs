//! Leader-window bank: real windows cut from observed leaders, a synthetic
//! pool grown by plausibility-filtered augmentations, window features, and
//! the round-dependent real/synthetic mixture.

mod augment;
mod features;
mod filters;

pub use augment::{band_limited_noise, time_warp, AugmentKind, Augmentation};
pub use features::{features, representativeness, FEATURE_DIM, FEATURE_VERSION};
pub use filters::{check_window, percentile, Envelope, Violation};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{finite_difference_accel, Segment};

const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub window: usize,
    pub stride: usize,
    pub syn_cap: usize,
    pub time_scale_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub vel_jitter: f64,
    pub a_phys_max: f64,
    pub j_max: f64,
    pub eps_kin: f64,
    pub envelope_pct: [f64; 2],
    pub k_rho: usize,
    pub eps_rho: f64,
    /// Augmentation attempts allowed per synthetic slot.
    pub max_attempts_per_window: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            window: 75,
            stride: 50,
            syn_cap: 10_000,
            time_scale_range: [0.9, 1.1],
            scale_range: [0.9, 1.1],
            vel_jitter: 0.20,
            a_phys_max: 10.0,
            j_max: 20.0,
            eps_kin: 0.5,
            envelope_pct: [1.0, 99.0],
            k_rho: 5,
            eps_rho: 1e-3,
            max_attempts_per_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderWindow {
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub source: Source,
    /// Source segment index for real windows; parent real-window index for
    /// synthetic ones.
    pub origin_id: u64,
}

impl LeaderWindow {
    pub fn real(v: Vec<f64>, dt: f64, origin_id: u64) -> Self {
        let a = finite_difference_accel(&v, dt);
        Self {
            v,
            a,
            source: Source::Real,
            origin_id,
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn features(&self) -> [f64; FEATURE_DIM] {
        features(&self.v, &self.a)
    }
}

/// Result of augmenting a real window.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOutcome {
    Accepted(LeaderWindow),
    Rejected(Vec<Violation>),
}

/// Windows of every segment's leader profile at the configured length and
/// stride, with per-window finite-difference accelerations.
pub fn build_real_bank(segments: &[Segment], cfg: &BankConfig) -> Vec<LeaderWindow> {
    let mut out = Vec::new();
    if cfg.window == 0 || cfg.stride == 0 {
        return out;
    }
    for (i, seg) in segments.iter().enumerate() {
        if seg.len() < cfg.window {
            continue;
        }
        let v = seg.leader_speeds();
        for o in (0..=seg.len() - cfg.window).step_by(cfg.stride) {
            out.push(LeaderWindow::real(v[o..o + cfg.window].to_vec(), seg.dt, i as u64));
        }
    }
    out
}

pub fn envelope_of(real: &[LeaderWindow], cfg: &BankConfig) -> Envelope {
    let v: Vec<f64> = real.iter().flat_map(|w| w.v.iter().copied()).collect();
    let a: Vec<f64> = real.iter().flat_map(|w| w.a.iter().copied()).collect();
    Envelope::from_samples(&v, &a, cfg.envelope_pct[0], cfg.envelope_pct[1])
}

pub fn passes_filters(w: &LeaderWindow, dt: f64, cfg: &BankConfig, env: &Envelope) -> (bool, Vec<Violation>) {
    let v = check_window(&w.v, &w.a, dt, cfg, env);
    (v.is_empty(), v)
}

/// Applies `aug` to a real window and filters the result.
pub fn augment(
    window: &LeaderWindow,
    parent_index: u64,
    aug: &Augmentation,
    dt: f64,
    cfg: &BankConfig,
    env: &Envelope,
) -> Result<AugmentOutcome> {
    if window.source != Source::Real {
        return Err(Error::Config("only real windows can be augmented".into()));
    }
    let (v, a) = aug.apply(&window.v, dt);
    let violations = check_window(&v, &a, dt, cfg, env);
    if !violations.is_empty() {
        return Ok(AugmentOutcome::Rejected(violations));
    }
    Ok(AugmentOutcome::Accepted(LeaderWindow {
        v,
        a,
        source: Source::Synthetic,
        origin_id: parent_index,
    }))
}

/// Mixture weight of the synthetic pool in round `r`: `0, 0.1, 0.2, …`
/// capped at 0.5.
pub fn alpha_schedule(round: usize) -> f64 {
    (0.1 * round as f64).min(0.5)
}

/// Index into one of the bank's pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowRef {
    pub source: Source,
    pub index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeaderBank {
    pub format_version: u32,
    pub feature_version: u32,
    pub dt: f64,
    pub config: BankConfig,
    pub envelope: Envelope,
    pub real: Vec<LeaderWindow>,
    pub synthetic: Vec<LeaderWindow>,
    #[serde(skip)]
    real_features: Vec<[f64; FEATURE_DIM]>,
    #[serde(skip)]
    synthetic_features: Vec<[f64; FEATURE_DIM]>,
    #[serde(skip)]
    real_rho: Vec<f64>,
    #[serde(skip)]
    synthetic_rho: Vec<f64>,
}

impl LeaderBank {
    /// Cuts the real bank from `segments` and grows the synthetic pool.
    pub fn build<R: Rng + ?Sized>(segments: &[Segment], cfg: &BankConfig, rng: &mut R) -> Result<Self> {
        let dt = segments
            .first()
            .map(|s| s.dt)
            .ok_or_else(|| Error::EmptyInput("no segments for the leader bank".into()))?;
        let real = build_real_bank(segments, cfg);
        if real.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no segment is at least {} steps long",
                cfg.window
            )));
        }
        let envelope = envelope_of(&real, cfg);
        let mut synthetic = Vec::new();
        let max_attempts = cfg.syn_cap.saturating_mul(cfg.max_attempts_per_window);
        let mut attempts = 0;
        while synthetic.len() < cfg.syn_cap && attempts < max_attempts {
            attempts += 1;
            let parent = rng.random_range(0..real.len());
            let kind = AugmentKind::ALL[rng.random_range(0..3)];
            let aug = Augmentation::sample(kind, cfg.window, cfg, rng);
            if let AugmentOutcome::Accepted(w) = augment(&real[parent], parent as u64, &aug, dt, cfg, &envelope)? {
                synthetic.push(w);
            }
        }
        if synthetic.len() < cfg.syn_cap {
            log::warn!(
                "synthetic pool holds {} of {} windows after {attempts} attempts",
                synthetic.len(),
                cfg.syn_cap
            );
        }
        Self::from_parts(dt, cfg.clone(), envelope, real, synthetic)
    }

    pub fn from_parts(
        dt: f64,
        config: BankConfig,
        envelope: Envelope,
        real: Vec<LeaderWindow>,
        synthetic: Vec<LeaderWindow>,
    ) -> Result<Self> {
        let mut bank = Self {
            format_version: BANK_FORMAT_VERSION,
            feature_version: FEATURE_VERSION,
            dt,
            config,
            envelope,
            real,
            synthetic,
            real_features: Vec::new(),
            synthetic_features: Vec::new(),
            real_rho: Vec::new(),
            synthetic_rho: Vec::new(),
        };
        bank.refresh()?;
        Ok(bank)
    }

    /// Recomputes features and representativeness against the real pool.
    fn refresh(&mut self) -> Result<()> {
        self.real_features = self.real.iter().map(LeaderWindow::features).collect();
        self.synthetic_features = self.synthetic.iter().map(LeaderWindow::features).collect();
        let k = self.config.k_rho.min(self.real.len().saturating_sub(1)).max(1);
        if k < self.config.k_rho {
            log::warn!("real bank too small for k_rho={}; using k={k}", self.config.k_rho);
        }
        let eps = self.config.eps_rho;
        if self.real.len() < 2 {
            self.real_rho = vec![1.0; self.real.len()];
            self.synthetic_rho = vec![1.0; self.synthetic.len()];
            return Ok(());
        }
        self.real_rho = self
            .real_features
            .iter()
            .enumerate()
            .map(|(i, f)| representativeness(f, &self.real_features, Some(i), k, eps))
            .collect::<Result<_>>()?;
        self.synthetic_rho = self
            .synthetic_features
            .iter()
            .map(|f| representativeness(f, &self.real_features, None, k, eps))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn get(&self, r: WindowRef) -> &LeaderWindow {
        match r.source {
            Source::Real => &self.real[r.index],
            Source::Synthetic => &self.synthetic[r.index],
        }
    }

    pub fn features_of(&self, r: WindowRef) -> &[f64; FEATURE_DIM] {
        match r.source {
            Source::Real => &self.real_features[r.index],
            Source::Synthetic => &self.synthetic_features[r.index],
        }
    }

    pub fn rho(&self, r: WindowRef) -> f64 {
        match r.source {
            Source::Real => self.real_rho[r.index],
            Source::Synthetic => self.synthetic_rho[r.index],
        }
    }

    /// Every synthetic window that fails a re-check of the filters.
    pub fn recheck_synthetic(&self) -> Vec<(usize, Vec<Violation>)> {
        self.synthetic
            .iter()
            .enumerate()
            .filter_map(|(i, w)| {
                let (ok, v) = passes_filters(w, self.dt, &self.config, &self.envelope);
                (!ok).then_some((i, v))
            })
            .collect()
    }

    /// `n` independent draws, synthetic with probability `alpha`.
    pub fn sample_round<R: Rng + ?Sized>(&self, alpha: f64, n: usize, rng: &mut R) -> Result<Vec<WindowRef>> {
        sample_round_bank(self.real.len(), self.synthetic.len(), alpha, n, rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut bank: Self = serde_json::from_reader(f)?;
        if bank.format_version != BANK_FORMAT_VERSION || bank.feature_version != FEATURE_VERSION {
            return Err(Error::Format(format!(
                "bank file version {}/{} is not supported",
                bank.format_version, bank.feature_version
            )));
        }
        bank.refresh()?;
        Ok(bank)
    }
}

/// Mixture draws over pools of the given sizes.
pub fn sample_round_bank<R: Rng + ?Sized>(
    n_real: usize,
    n_syn: usize,
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<WindowRef>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("mixture weight {alpha} outside [0, 1]")));
    }
    if n_real == 0 && alpha < 1.0 {
        return Err(Error::Config("real pool is empty".into()));
    }
    if n_syn == 0 && alpha > 0.0 {
        return Err(Error::Config("synthetic pool is empty but alpha > 0".into()));
    }
    Ok((0..n)
        .map(|_| {
            if alpha > 0.0 && rng.random::<f64>() < alpha {
                WindowRef {
                    source: Source::Synthetic,
                    index: rng.random_range(0..n_syn),
                }
            } else {
                WindowRef {
                    source: Source::Real,
                    index: rng.random_range(0..n_real),
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::trajectory::{FollowerState, LeaderSample};

    fn seg(n: usize, f: impl Fn(usize) -> f64) -> Segment {
        let v: Vec<f64> = (0..n).map(f).collect();
        let a = finite_difference_accel(&v, 0.2);
        Segment {
            follower_id: 1,
            leader_id: 2,
            dt: 0.2,
            states: vec![FollowerState::new(20.0, 20.0, 0.0); n],
            leader: v.iter().zip(&a).map(|(&v, &a)| LeaderSample { v, a }).collect(),
        }
    }

    #[test]
    fn real_bank_windows() {
        let cfg = BankConfig::default();
        assert_eq!(build_real_bank(&[seg(175, |t| 20.0 + t as f64 * 0.01)], &cfg).len(), 3);
        assert!(build_real_bank(&[seg(74, |_| 20.0)], &cfg).is_empty());
        let b = build_real_bank(&[seg(200, |_| 25.0)], &cfg);
        assert!(b.iter().all(|w| w.a.iter().all(|a| *a == 0.0) && w.len() == 75));
    }

    #[test]
    fn rescale_constant_window() {
        let cfg = BankConfig::default();
        let w = LeaderWindow::real(vec![30.0; 75], 0.2, 0);
        let env = Envelope {
            v_lo: 0.0,
            v_hi: 40.0,
            a_lo: -5.0,
            a_hi: 5.0,
        };
        match augment(&w, 0, &Augmentation::Rescale { kappa: 1.1 }, 0.2, &cfg, &env).unwrap() {
            AugmentOutcome::Accepted(s) => {
                assert!(s.v.iter().all(|v| (v - 33.0).abs() < 1e-12));
                assert!(s.a.iter().all(|a| *a == 0.0));
                assert_eq!(s.source, Source::Synthetic);
            }
            AugmentOutcome::Rejected(v) => panic!("rejected: {v:?}"),
        }
    }

    #[test]
    fn built_bank_synthetic_pool_passes_recheck() {
        let segs: Vec<Segment> = (0..4)
            .map(|k| seg(400, move |t| 22.0 + 3.0 * ((t as f64) * 0.03 + k as f64).sin()))
            .collect();
        let cfg = BankConfig {
            syn_cap: 200,
            ..BankConfig::default()
        };
        let bank = LeaderBank::build(&segs, &cfg, &mut rng::from_seed(1)).unwrap();
        assert_eq!(bank.real.len(), 4 * 7);
        assert!(!bank.synthetic.is_empty());
        assert!(bank.recheck_synthetic().is_empty());
        assert!(bank.synthetic.iter().all(|w| w.len() == cfg.window));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.json");
        bank.save(&p).unwrap();
        let back = LeaderBank::load(&p).unwrap();
        assert_eq!(back.real, bank.real);
        let r = WindowRef {
            source: Source::Synthetic,
            index: 3,
        };
        assert_eq!(back.rho(r), bank.rho(r));
    }

    #[test]
    fn mixture_endpoints_and_fraction() {
        let mut r = rng::from_seed(4);
        assert!(sample_round_bank(10, 10, 0.0, 1000, &mut r)
            .unwrap()
            .iter()
            .all(|w| w.source == Source::Real));
        assert!(sample_round_bank(10, 10, 1.0, 1000, &mut r)
            .unwrap()
            .iter()
            .all(|w| w.source == Source::Synthetic));
        assert!(sample_round_bank(10, 0, 0.3, 1, &mut r).is_err());
        assert_eq!(alpha_schedule(0), 0.0);
        assert!((alpha_schedule(3) - 0.3).abs() < 1e-12);
        assert_eq!(alpha_schedule(9), 0.5);
    }
}
