//! Windowed short-horizon evaluation: posterior-predictive rollouts reset to
//! the observed state at each window start, RMSE of the predictive mean,
//! Energy Score, prediction intervals, and rank-based calibration checks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::PosteriorModel;
use crate::nn::Tensor;
use crate::parallel::par_map;
use crate::rng;
use crate::sim::{rollout, states_to_tensor, ParamVector, Prior};
use crate::trajectory::Segment;

/// Names of the evaluated variables, in column order.
pub const VARIABLES: [&str; 3] = ["s", "v", "a"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Window horizon in steps.
    #[serde(rename = "H")]
    pub horizon: usize,
    /// Window stride in steps.
    #[serde(rename = "S")]
    pub stride: usize,
    /// Maximum windows per pair.
    #[serde(rename = "m")]
    pub max_windows: usize,
    #[serde(rename = "eval_n_samples")]
    pub n_samples: usize,
    pub pi_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            stride: 20,
            max_windows: 20,
            n_samples: 500,
            pi_level: 0.95,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 || self.stride == 0 || self.max_windows == 0 {
            return Err(Error::Config("H ≥ 2, S ≥ 1 and m ≥ 1 are required".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("eval_n_samples must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.pi_level) {
            return Err(Error::Config(format!("pi_level {} outside [0, 1)", self.pi_level)));
        }
        Ok(())
    }
}

fn check_shapes(truth: &[f64], samples: &[Vec<f64>]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("sample ensemble".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != truth.len()) {
        return Err(Error::Shape(format!(
            "sample of length {} for truth of length {}",
            s.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// RMSE between the truth and the per-step sample mean.
pub fn rmse(truth: &[f64], samples: &[Vec<f64>]) -> Result<f64> {
    check_shapes(truth, samples)?;
    if truth.is_empty() {
        return Err(Error::EmptyInput("truth series".into()));
    }
    let n = samples.len() as f64;
    let mse = truth
        .iter()
        .enumerate()
        .map(|(t, y)| {
            let m = samples.iter().map(|s| s[t]).sum::<f64>() / n;
            (m - y) * (m - y)
        })
        .sum::<f64>()
        / truth.len() as f64;
    Ok(mse.sqrt())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `ES = (1/n) Σ‖y⁽ⁱ⁾ − y‖ − (1/2n²) ΣΣ‖y⁽ⁱ⁾ − y⁽ʲ⁾‖`.
pub fn energy_score(truth: &[f64], samples: &[Vec<f64>]) -> Result<f64> {
    check_shapes(truth, samples)?;
    let n = samples.len();
    let first = samples.iter().map(|s| dist(s, truth)).sum::<f64>() / n as f64;
    let mut pair = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            pair += dist(&samples[i], &samples[j]);
        }
    }
    // each unordered pair appears twice in the double sum
    Ok(first - pair / (n * n) as f64)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(x: &[f64], q: f64) -> f64 {
    let h = (x.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

/// Per-step central interval at `level`.
pub fn prediction_interval(samples: &[Vec<f64>], level: f64) -> Result<Vec<(f64, f64)>> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::Config(format!("level {level} outside [0, 1)")));
    }
    let needed = (1.0 / (1.0 - level) - 1e-9).ceil() as usize;
    if samples.len() < needed.max(1) {
        return Err(Error::Config(format!(
            "{} samples are too few for a {level} interval (need {needed})",
            samples.len()
        )));
    }
    let h = samples[0].len();
    if samples.iter().any(|s| s.len() != h) {
        return Err(Error::Shape("samples differ in length".into()));
    }
    let tail = (1.0 - level) / 2.0;
    let mut col = vec![0.0; samples.len()];
    Ok((0..h)
        .map(|t| {
            for (c, s) in col.iter_mut().zip(samples) {
                *c = s[t];
            }
            col.sort_by(f64::total_cmp);
            (quantile_sorted(&col, tail), quantile_sorted(&col, 1.0 - tail))
        })
        .collect())
}

/// Metrics for one evaluation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub pair_id: u64,
    pub offset: usize,
    pub rmse: [f64; 3],
    pub es: [f64; 3],
    /// Mean of the per-variable Energy Scores.
    pub es_mean: f64,
    /// Fraction of truth steps inside the prediction interval, per variable.
    pub pi_coverage: [f64; 3],
    /// Per-step interval bounds, per variable.
    #[serde(skip)]
    pub pi: [Vec<(f64, f64)>; 3],
    pub n_samples: usize,
    /// Rollouts with a gap or speed clamp.
    pub degenerate: usize,
    /// The conditioning window overlaps the evaluation windows.
    pub context_flag: bool,
}

/// Conditioning window and evaluation offsets for a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub context: Tensor,
    pub offsets: Vec<usize>,
    pub context_flag: bool,
}

/// The `t_e`-step window immediately preceding the first evaluation window,
/// followed by up to `m` windows of `H` steps at stride `S`. When the segment
/// is too short for that, the earliest `t_e` steps condition and evaluation
/// starts at offset 0, flagged.
pub fn plan_windows(seg: &Segment, t_e: usize, cfg: &EvalConfig) -> Result<EvalPlan> {
    let n = seg.len();
    if n < cfg.horizon {
        return Err(Error::InsufficientLength {
            needed: cfg.horizon,
            available: n,
        });
    }
    let (start, flag) = if n >= t_e + cfg.horizon {
        (t_e, false)
    } else {
        (0, true)
    };
    let offsets: Vec<usize> = (start..=n - cfg.horizon)
        .step_by(cfg.stride)
        .take(cfg.max_windows)
        .collect();
    let ctx_start = start.saturating_sub(t_e);
    let ctx_end = (ctx_start + t_e).min(n);
    Ok(EvalPlan {
        context: states_to_tensor(&seg.states[ctx_start..ctx_end]),
        offsets,
        context_flag: flag,
    })
}

/// Observed follower acceleration `(v[t+1] − v[t]) / dt`, the last step
/// repeating the previous value.
pub fn observed_accel(seg: &Segment) -> Vec<f64> {
    let n = seg.len();
    let mut a: Vec<f64> = (0..n.saturating_sub(1))
        .map(|t| (seg.states[t + 1].v - seg.states[t].v) / seg.dt)
        .collect();
    a.push(a.last().copied().unwrap_or(0.0));
    a
}

/// Rolls every parameter sample out over every planned window. Sample `i`
/// of window `w` uses stream `("eval", w·n + i)` of `seed`.
pub fn evaluate_with_samples(
    seg: &Segment,
    thetas: &[ParamVector],
    plan: &EvalPlan,
    cfg: &EvalConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<WindowResult>> {
    if thetas.is_empty() {
        return Err(Error::EmptyInput("parameter samples".into()));
    }
    let accel = observed_accel(seg);
    let h = cfg.horizon;
    let n = thetas.len();
    plan.offsets
        .iter()
        .enumerate()
        .map(|(w, &off)| {
            let leader: Vec<f64> = seg.leader[off..off + h].iter().map(|l| l.v).collect();
            let init = seg.states[off];
            let rolls = par_map(n, threads, |i| {
                let mut r = rng::stream(seed, "eval", (w * n + i) as u64);
                rollout(&thetas[i], thetas[i].kind(), init, &leader, seg.dt, &mut r)
            });
            let mut series: [Vec<Vec<f64>>; 3] = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
            let mut degenerate = 0;
            for roll in rolls {
                let roll = roll?;
                degenerate += usize::from(roll.degenerate());
                series[0].push(roll.states.iter().map(|s| s.s).collect());
                series[1].push(roll.states.iter().map(|s| s.v).collect());
                series[2].push(roll.accel);
            }
            let truth: [Vec<f64>; 3] = [
                seg.states[off..off + h].iter().map(|s| s.s).collect(),
                seg.states[off..off + h].iter().map(|s| s.v).collect(),
                accel[off..off + h].to_vec(),
            ];
            let mut res = WindowResult {
                pair_id: seg.follower_id,
                offset: off,
                rmse: [0.0; 3],
                es: [0.0; 3],
                es_mean: 0.0,
                pi_coverage: [f64::NAN; 3],
                pi: Default::default(),
                n_samples: n,
                degenerate,
                context_flag: plan.context_flag,
            };
            for k in 0..3 {
                res.rmse[k] = rmse(&truth[k], &series[k])?;
                res.es[k] = energy_score(&truth[k], &series[k])?;
                if let Ok(pi) = prediction_interval(&series[k], cfg.pi_level) {
                    let inside = truth[k]
                        .iter()
                        .zip(&pi)
                        .filter(|(&y, &(lo, hi))| lo <= y && y <= hi)
                        .count();
                    res.pi_coverage[k] = inside as f64 / h as f64;
                    res.pi[k] = pi;
                }
            }
            res.es_mean = res.es.iter().sum::<f64>() / 3.0;
            Ok(res)
        })
        .collect()
}

/// Posterior-predictive evaluation of one pair: one encoder pass on the
/// conditioning window, `n_samples` draws, then windowed rollouts.
pub fn evaluate_pair(
    model: &PosteriorModel,
    seg: &Segment,
    cfg: &EvalConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<WindowResult>> {
    let plan = plan_windows(seg, model.encoder.cfg.target_len, cfg)?;
    let thetas = posterior_samples(
        model,
        &plan.context,
        cfg.n_samples,
        rng::derive_seed(seed, "posterior", 0),
    )?;
    evaluate_with_samples(seg, &thetas, &plan, cfg, seed, threads)
}

/// Prior-predictive baseline under the same protocol.
pub fn evaluate_pair_prior(
    prior: &Prior,
    t_e: usize,
    seg: &Segment,
    cfg: &EvalConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<WindowResult>> {
    let plan = plan_windows(seg, t_e, cfg)?;
    let mut r = rng::stream(seed, "prior_predictive", 0);
    let thetas = (0..cfg.n_samples)
        .map(|_| prior.sample(&mut r, 10_000))
        .collect::<Result<Vec<_>>>()?;
    evaluate_with_samples(seg, &thetas, &plan, cfg, seed, threads)
}

/// `n` posterior draws for one observation window.
pub fn posterior_samples(model: &PosteriorModel, window: &Tensor, n: usize, seed: u64) -> Result<Vec<ParamVector>> {
    let obs = model.obs_batch(&[window])?;
    let ctx = model.encode(&obs, &mut crate::nn::Dropout::Off)?;
    model.sample_theta(ctx.row(0), n, &mut rng::from_seed(seed))
}

/// Number of samples strictly below the true value, per parameter.
pub fn rank_of(truth: &ParamVector, samples: &[ParamVector]) -> Vec<usize> {
    let t = truth.to_vec();
    let s: Vec<Vec<f64>> = samples.iter().map(|p| p.to_vec()).collect();
    (0..t.len()).map(|k| s.iter().filter(|x| x[k] < t[k]).count()).collect()
}

/// SBC ranks: `ranks[k][j]` is the rank of parameter `k` of pair `j` among
/// `n_samples` posterior draws, in `0..=n_samples`.
pub fn sbc_ranks(
    model: &PosteriorModel,
    truths: &[ParamVector],
    windows: &[Tensor],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if truths.len() != windows.len() {
        return Err(Error::Shape(format!(
            "{} truths for {} windows",
            truths.len(),
            windows.len()
        )));
    }
    let mut ranks = vec![Vec::with_capacity(truths.len()); model.dim()];
    let refs: Vec<&Tensor> = windows.iter().collect();
    let ctx = model.encode(&model.obs_batch(&refs)?, &mut crate::nn::Dropout::Off)?;
    for (j, t) in truths.iter().enumerate() {
        let mut r = rng::stream(seed, "sbc", j as u64);
        let samples = model.sample_theta(ctx.row(j), n_samples, &mut r)?;
        for (k, rank) in rank_of(t, &samples).into_iter().enumerate() {
            ranks[k].push(rank);
        }
    }
    Ok(ranks)
}

/// Chi-square uniformity test of ranks in `0..=n_samples` over `bins`
/// equal-width bins. Returns the statistic and its p-value.
pub fn rank_uniformity(ranks: &[usize], n_samples: usize, bins: usize) -> Result<(f64, f64)> {
    if bins < 2 || ranks.is_empty() {
        return Err(Error::Config("rank test needs at least 2 bins and one rank".into()));
    }
    let levels = n_samples + 1;
    let mut counts = vec![0usize; bins];
    for &r in ranks {
        if r > n_samples {
            return Err(Error::Domain(format!("rank {r} exceeds {n_samples}")));
        }
        counts[r * bins / levels] += 1;
    }
    // expected share of each bin: the number of rank levels it covers
    let total = ranks.len() as f64;
    let mut stat = 0.0;
    for (b, &c) in counts.iter().enumerate() {
        let lo = (b * levels).div_ceil(bins);
        let hi = ((b + 1) * levels).div_ceil(bins);
        let e = total * (hi - lo) as f64 / levels as f64;
        if e > 0.0 {
            stat += (c as f64 - e).powi(2) / e;
        }
    }
    let chi = ChiSquared::new((bins - 1) as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((stat, 1.0 - chi.cdf(stat)))
}

/// Fraction of truths inside the central `level` interval of their samples,
/// per parameter.
pub fn interval_coverage(truths: &[ParamVector], samples: &[Vec<ParamVector>], level: f64) -> Result<Vec<f64>> {
    if truths.is_empty() || truths.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} truths for {} sample sets",
            truths.len(),
            samples.len()
        )));
    }
    let d = truths[0].to_vec().len();
    let tail = (1.0 - level) / 2.0;
    let mut hits = vec![0usize; d];
    for (t, s) in truths.iter().zip(samples) {
        let t = t.to_vec();
        for k in 0..d {
            let mut col: Vec<f64> = s.iter().map(|p| p.to_vec()[k]).collect();
            col.sort_by(f64::total_cmp);
            let (lo, hi) = (quantile_sorted(&col, tail), quantile_sorted(&col, 1.0 - tail));
            hits[k] += usize::from(lo <= t[k] && t[k] <= hi);
        }
    }
    Ok(hits.iter().map(|h| *h as f64 / truths.len() as f64).collect())
}

/// `(ES_abl − ES_full) / ES_abl × 100`.
pub fn relative_change(es_ablation: f64, es_full: f64) -> f64 {
    (es_ablation - es_full) / es_ablation * 100.0
}

/// Mean and population standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

/// Window-level means of every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub windows: usize,
    pub pairs: usize,
    pub rmse_mean: [f64; 3],
    pub rmse_std: [f64; 3],
    pub es_mean: [f64; 3],
    pub es_std: [f64; 3],
    pub es_avg_mean: f64,
    pub es_avg_std: f64,
    pub degenerate_rollouts: usize,
    pub flagged_windows: usize,
}

pub fn summarize(results: &[WindowResult]) -> MetricSummary {
    let col = |f: &dyn Fn(&WindowResult) -> f64| results.iter().map(f).collect::<Vec<f64>>();
    let mut s = MetricSummary {
        windows: results.len(),
        pairs: {
            let mut ids: Vec<u64> = results.iter().map(|r| r.pair_id).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        },
        rmse_mean: [0.0; 3],
        rmse_std: [0.0; 3],
        es_mean: [0.0; 3],
        es_std: [0.0; 3],
        es_avg_mean: 0.0,
        es_avg_std: 0.0,
        degenerate_rollouts: results.iter().map(|r| r.degenerate).sum(),
        flagged_windows: results.iter().filter(|r| r.context_flag).count(),
    };
    for k in 0..3 {
        (s.rmse_mean[k], s.rmse_std[k]) = mean_std(&col(&|r| r.rmse[k]));
        (s.es_mean[k], s.es_std[k]) = mean_std(&col(&|r| r.es[k]));
    }
    (s.es_avg_mean, s.es_avg_std) = mean_std(&col(&|r| r.es_mean));
    s
}

/// Per-window CSV rows.
pub fn write_window_csv<W: std::io::Write>(w: W, results: &[WindowResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "pair_id",
        "offset",
        "rmse_s",
        "rmse_v",
        "rmse_a",
        "es_s",
        "es_v",
        "es_a",
        "es_mean",
        "pi_cov_s",
        "pi_cov_v",
        "pi_cov_a",
        "n_samples",
        "degenerate",
        "context_flag",
    ])?;
    for r in results {
        let mut row = vec![r.pair_id.to_string(), r.offset.to_string()];
        row.extend(r.rmse.iter().chain(&r.es).map(|x| format!("{x:.10e}")));
        row.push(format!("{:.10e}", r.es_mean));
        row.extend(r.pi_coverage.iter().map(|x| format!("{x:.6}")));
        row.push(r.n_samples.to_string());
        row.push(r.degenerate.to_string());
        row.push(u8::from(r.context_flag).to_string());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Draws `n` standard normal values; shared by the statistical tests.
pub fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_from_equilibrium, ResidualKind};
    use crate::trajectory::LeaderSample;
    use proptest::prelude::*;

    #[test]
    fn rmse_cases() {
        let y = vec![1.0, 2.0, 3.0];
        assert_eq!(rmse(&y, &[y.clone(), y.clone()]).unwrap(), 0.0);
        let off: Vec<f64> = y.iter().map(|v| v - 2.5).collect();
        assert!((rmse(&y, &[off]).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(rmse(&[0.0, 0.0], &[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap(), 0.0);
        assert!(matches!(rmse(&y, &[vec![1.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn energy_score_cases() {
        let y = vec![0.5, -1.0];
        assert_eq!(energy_score(&y, &[y.clone(), y.clone(), y.clone()]).unwrap(), 0.0);
        let s = vec![3.5, 3.0];
        assert_eq!(energy_score(&y, &[s]).unwrap(), 5.0);
        assert_eq!(energy_score(&[0.0], &[vec![1.0], vec![-1.0]]).unwrap(), 0.5);
        assert!(matches!(energy_score(&y, &[vec![0.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn energy_score_is_minimized_at_the_true_location() {
        // truth ~ N(0, 1); ensembles of 10 draws from N(μ, 1)
        let grid: Vec<f64> = (-4..=4).map(|k| k as f64 * 0.25).collect();
        let mut r = rng::from_seed(17);
        let reps = 10_000;
        let mut score = vec![0.0; grid.len()];
        for _ in 0..reps {
            let y = standard_normals(1, &mut r)[0];
            let z = standard_normals(10, &mut r);
            for (g, mu) in grid.iter().enumerate() {
                let ens: Vec<Vec<f64>> = z.iter().map(|e| vec![mu + e]).collect();
                score[g] += energy_score(&[y], &ens).unwrap();
            }
        }
        let best = (0..grid.len()).min_by(|&a, &b| score[a].total_cmp(&score[b])).unwrap();
        assert_eq!(grid[best], 0.0, "scores {score:?}");
    }

    #[test]
    fn prediction_interval_cases() {
        let c = vec![vec![2.0; 4]; 40];
        assert!(prediction_interval(&c, 0.95)
            .unwrap()
            .iter()
            .all(|&(lo, hi)| lo == 2.0 && hi == 2.0));
        assert!(prediction_interval(&c[..10], 0.95).is_err());
        let odd: Vec<Vec<f64>> = [3.0, 1.0, 2.0].iter().map(|x| vec![*x]).collect();
        assert_eq!(prediction_interval(&odd, 0.0).unwrap(), vec![(2.0, 2.0)]);
        let mut r = rng::from_seed(8);
        let z: Vec<Vec<f64>> = standard_normals(100_000, &mut r).into_iter().map(|x| vec![x]).collect();
        let (lo, hi) = prediction_interval(&z, 0.95).unwrap()[0];
        assert!(
            (lo + 1.959964).abs() < 0.02 && (hi - 1.959964).abs() < 0.02,
            "({lo}, {hi})"
        );
    }

    #[test]
    fn calibrated_sampler_passes_and_collapsed_sampler_fails() {
        // posterior equal to the generator: θ and samples drawn from the same law
        let mut r = rng::from_seed(23);
        let n = 199;
        let ranks: Vec<usize> = (0..200)
            .map(|_| {
                let t = standard_normals(1, &mut r)[0];
                standard_normals(n, &mut r).iter().filter(|x| **x < t).count()
            })
            .collect();
        let (_, p) = rank_uniformity(&ranks, n, 20).unwrap();
        assert!(p > 0.01, "p = {p}");
        let truth = ParamVector::from_slice(ResidualKind::IidGaussian, &[30.0, 2.0, 1.5, 1.0, 1.5, 0.3]).unwrap();
        let below = ParamVector::from_slice(ResidualKind::IidGaussian, &[20.0, 1.0, 1.0, 0.5, 1.0, 0.1]).unwrap();
        assert_eq!(rank_of(&truth, &vec![below; 50]), vec![50; 6]);
        let (_, p) = rank_uniformity(&vec![n; 200], n, 20).unwrap();
        assert!(p < 1e-6);
        let one = rank_of(&truth, &[truth]);
        assert!(one.iter().all(|r| *r <= 1));
    }

    #[test]
    fn relative_change_formula() {
        assert_eq!(relative_change(2.0, 1.5), 25.0);
        assert_eq!(relative_change(1.3, 1.3), 0.0);
    }

    fn segment(theta: &ParamVector, n: usize, seed: u64) -> Segment {
        let lead: Vec<f64> = (0..n).map(|t| 20.0 + 3.0 * (t as f64 * 0.05).sin()).collect();
        let roll = simulate_from_equilibrium(theta, &lead, 0.2, &mut rng::from_seed(seed)).unwrap();
        Segment {
            follower_id: 9,
            leader_id: 8,
            dt: 0.2,
            states: roll.states,
            leader: lead.iter().map(|&v| LeaderSample { v, a: 0.0 }).collect(),
        }
    }

    #[test]
    fn window_plan_follows_the_protocol() {
        let theta = ParamVector::from_slice(ResidualKind::IidGaussian, &[30.0, 2.0, 1.5, 1.0, 1.5, 0.0]).unwrap();
        let cfg = EvalConfig::default();
        let seg = segment(&theta, 75 + 50 + 20 * 30, 1);
        let plan = plan_windows(&seg, 75, &cfg).unwrap();
        assert_eq!(plan.offsets.len(), 20);
        assert_eq!(plan.offsets[0], 75);
        assert_eq!(plan.offsets[1], 95);
        assert_eq!(plan.context.rows, 75);
        assert!(!plan.context_flag);
        let short = segment(&theta, 100, 1);
        let plan = plan_windows(&short, 75, &cfg).unwrap();
        assert!(plan.context_flag);
        assert_eq!(plan.offsets, vec![0, 20, 40]);
    }

    #[test]
    fn true_parameters_without_noise_reproduce_the_truth() {
        let theta = ParamVector::from_slice(ResidualKind::IidGaussian, &[30.0, 2.0, 1.5, 1.0, 1.5, 0.0]).unwrap();
        let seg = segment(&theta, 200, 1);
        let cfg = EvalConfig {
            n_samples: 20,
            ..EvalConfig::default()
        };
        let plan = plan_windows(&seg, 75, &cfg).unwrap();
        let res = evaluate_with_samples(&seg, &vec![theta; 20], &plan, &cfg, 3, 2).unwrap();
        assert!(!res.is_empty());
        for w in &res {
            assert!(w.rmse.iter().chain(&w.es).all(|x| *x < 1e-9), "{w:?}");
            assert_eq!(w.degenerate, 0);
        }
        let noisy = ParamVector { sigma: 0.3, ..theta };
        let res2 = evaluate_with_samples(&seg, &vec![noisy; 20], &plan, &cfg, 3, 1).unwrap();
        assert!(res2.iter().all(|w| w.es_mean > 0.0));
        assert_eq!(
            res2,
            evaluate_with_samples(&seg, &vec![noisy; 20], &plan, &cfg, 3, 4).unwrap()
        );
    }

    proptest! {
        #[test]
        fn mean_prediction_beats_average_sample_error(
            data in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 1..12),
            truth in prop::collection::vec(-5.0..5.0f64, 6),
        ) {
            let r = rmse(&truth, &data).unwrap();
            let avg = data.iter().map(|s| rmse(&truth, std::slice::from_ref(s)).unwrap()).sum::<f64>() / data.len() as f64;
            prop_assert!(r <= avg + 1e-12);
            prop_assert!(energy_score(&truth, &data).unwrap() >= -1e-12);
        }
    }
}
