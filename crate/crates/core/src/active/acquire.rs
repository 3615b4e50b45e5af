//! Joint parameter and leader-window acquisition: uncertainty times
//! representativeness, minus a kernel diversity penalty, maximized greedily.

use rand::Rng;

use crate::bank::{LeaderBank, WindowRef, FEATURE_DIM};
use crate::encoder::ObsBatch;
use crate::error::{Error, Result};
use crate::model::PosteriorModel;
use crate::sim::ParamVector;

/// Kernel temperatures and the diagonal parameter whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct DivPenParams {
    pub tau_l: f64,
    pub tau_theta: f64,
    /// Per-component scale `sqrt(diag Σ_θ)`.
    pub theta_scale: Vec<f64>,
}

impl DivPenParams {
    /// Scales from componentwise standard deviations, floored at `1e-6`.
    pub fn from_thetas<'a>(tau_l: f64, tau_theta: f64, thetas: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0.0;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for t in thetas {
            if sum.is_empty() {
                sum = vec![0.0; t.len()];
                sq = vec![0.0; t.len()];
            }
            n += 1.0;
            for (i, x) in t.iter().enumerate() {
                sum[i] += x;
                sq[i] += x * x;
            }
        }
        let theta_scale = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                (q / n - m * m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Self {
            tau_l,
            tau_theta,
            theta_scale,
        }
    }
}

/// One `(θ, L)` pair in the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub theta: ParamVector,
    pub leader: WindowRef,
    pub features: [f64; FEATURE_DIM],
    pub alpha: f64,
    pub rho: f64,
}

/// `exp(−d_L²/τ_L² − d_θ²/τ_θ²)` between two pairs.
pub fn pair_kernel(theta_a: &[f64], feat_a: &[f64], theta_b: &[f64], feat_b: &[f64], p: &DivPenParams) -> f64 {
    let dl2: f64 = feat_a.iter().zip(feat_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let dt2: f64 = theta_a
        .iter()
        .zip(theta_b)
        .zip(&p.theta_scale)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum();
    (-dl2 / (p.tau_l * p.tau_l) - dt2 / (p.tau_theta * p.tau_theta)).exp()
}

/// Mean kernel similarity of a candidate to the selected set; 0 when the set
/// is empty.
pub fn divpen(selected: &[(&[f64], &[f64])], candidate: (&[f64], &[f64]), p: &DivPenParams) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    selected
        .iter()
        .map(|(t, f)| pair_kernel(candidate.0, candidate.1, t, f, p))
        .sum::<f64>()
        / selected.len() as f64
}

/// Greedy maximization of `α·ρ − γ·DivPen`, returning candidate indices in
/// selection order. Ties go to the lowest index.
pub fn greedy_select(cands: &[Candidate], b: usize, gamma: f64, p: &DivPenParams) -> Result<Vec<usize>> {
    if cands.len() < b {
        return Err(Error::Config(format!(
            "candidate pool of {} is smaller than the batch of {b}",
            cands.len()
        )));
    }
    let thetas: Vec<Vec<f64>> = cands.iter().map(|c| c.theta.to_vec()).collect();
    let base: Vec<f64> = cands.iter().map(|c| c.alpha * c.rho).collect();
    let mut ksum = vec![0.0; cands.len()];
    let mut taken = vec![false; cands.len()];
    let mut order = Vec::with_capacity(b);
    for step in 0..b {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..cands.len() {
            if taken[i] {
                continue;
            }
            let pen = if step == 0 { 0.0 } else { ksum[i] / step as f64 };
            let s = base[i] - gamma * pen;
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        let (pick, _) = best.expect("pool has unselected candidates");
        taken[pick] = true;
        order.push(pick);
        if gamma != 0.0 && step + 1 < b {
            for i in 0..cands.len() {
                if !taken[i] {
                    ksum[i] += pair_kernel(&thetas[i], &cands[i].features, &thetas[pick], &cands[pick].features, p);
                }
            }
        }
    }
    Ok(order)
}

/// Acquisition knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquireConfig {
    pub k_candidates: usize,
    pub pairs_per_theta: usize,
    pub batch: usize,
    pub gamma: f64,
    pub mc_passes: usize,
    pub eps_alpha: f64,
    /// Round mixture weight for synthetic leader windows.
    pub alpha_mix: f64,
    /// Score θ and pair with uniform real windows, without ρ or DivPen.
    pub theta_only: bool,
}

/// Scores parameter candidates with MC dropout against the observed
/// contexts, keeps the top `k_candidates`, pairs each with leader windows
/// from the round mixture and selects `batch` pairs.
pub fn acquire_pairs<R: Rng + ?Sized>(
    model: &PosteriorModel,
    thetas: &[ParamVector],
    contexts: &ObsBatch,
    bank: &LeaderBank,
    cfg: &AcquireConfig,
    divpen: &DivPenParams,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    if thetas.is_empty() {
        return Err(Error::EmptyInput("parameter candidates".into()));
    }
    let u = model.to_u(thetas)?;
    let alpha = model.mc_dropout_alpha(&u, contexts, cfg.mc_passes, cfg.eps_alpha, rng)?;
    let mut rank: Vec<usize> = (0..thetas.len()).collect();
    rank.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    rank.truncate(cfg.k_candidates.min(thetas.len()));

    if cfg.theta_only {
        if rank.len() < cfg.batch {
            return Err(Error::Config(format!(
                "{} parameter candidates for a batch of {}",
                rank.len(),
                cfg.batch
            )));
        }
        let leaders = bank.sample_round(0.0, cfg.batch, rng)?;
        return Ok(rank[..cfg.batch]
            .iter()
            .zip(leaders)
            .map(|(&i, l)| Candidate {
                theta: thetas[i],
                leader: l,
                features: *bank.features_of(l),
                alpha: alpha[i],
                rho: 1.0,
            })
            .collect());
    }

    let mut pool = Vec::with_capacity(rank.len() * cfg.pairs_per_theta);
    for &i in &rank {
        for l in bank.sample_round(cfg.alpha_mix, cfg.pairs_per_theta, rng)? {
            pool.push(Candidate {
                theta: thetas[i],
                leader: l,
                features: *bank.features_of(l),
                alpha: alpha[i],
                rho: bank.rho(l),
            });
        }
    }
    let order = greedy_select(&pool, cfg.batch, cfg.gamma, divpen)?;
    Ok(order.into_iter().map(|i| pool[i].clone()).collect())
}
