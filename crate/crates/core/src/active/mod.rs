//! Active amortized training loop: a prior warm-up followed by rounds of
//! soft-shrink proposals, joint `(θ, L)` acquisition, simulation into a FIFO
//! replay buffer and warm-started fine-tuning, stopped early on a frozen
//! synthetic hold-out set.

pub mod acquire;
pub mod buffer;
pub mod proposal;
pub mod stop;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{LeaderBank, Source, WindowRef};
use crate::encoder::ObsBatch;
use crate::error::{Error, Result};
use crate::model::PosteriorModel;
use crate::nn::{Adam, Tensor};
use crate::parallel::par_map;
use crate::rng;
use crate::sim::{simulate_from_equilibrium, ParamVector, Prior};

pub use acquire::{acquire_pairs, divpen, greedy_select, pair_kernel, AcquireConfig, Candidate, DivPenParams};
pub use buffer::ReplayBuffer;
pub use proposal::{build_proposal_state, lambda_at, propose_params, propose_with_sources, ProposalState};
pub use stop::{should_stop, stop_round};

/// Which parts of the acquisition are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Proposal fixed to the prior in every round.
    PriorOnly,
    /// Uncertainty-ranked θ paired with uniform real leader windows.
    ThetaOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::PriorOnly, Variant::ThetaOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PriorOnly => "prior_only",
            Variant::ThetaOnly => "theta_only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Loop hyperparameters under their configuration-file names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Maximum number of active rounds after the warm-up.
    pub rounds: usize,
    /// Warm-up prior simulations.
    pub samples_initial: usize,
    /// Parameter candidates proposed per round.
    pub samples_per_round: usize,
    /// Pairs selected and simulated per round.
    #[serde(rename = "B")]
    pub b: usize,
    pub train_buffer_size: usize,
    /// Maximum epochs per training phase.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip for Adam.
    pub clip_norm: f64,
    pub min_rounds: usize,
    pub patience_round: usize,
    pub min_delta_round: f64,
    /// Proposal prior weight per round, round 0 being the warm-up.
    pub lambda_schedule: Vec<f64>,
    /// Synthetic leader-window weight per round.
    pub alpha_schedule: Vec<f64>,
    #[serde(rename = "K_candidates")]
    pub k_candidates: usize,
    pub pairs_per_theta: usize,
    pub gamma: f64,
    #[serde(rename = "tau_L")]
    pub tau_l: f64,
    pub tau_theta: f64,
    /// MC-dropout passes.
    #[serde(rename = "M")]
    pub mc_passes: usize,
    pub eps_alpha: f64,
    /// Size of the fixed observed subset used for the proposal and for α.
    pub eval_val_size: usize,
    /// Posterior samples per observed window in the pooled proposal.
    pub proposal_samples_per_obs: usize,
    /// Fraction of the buffer held out for within-round early stopping.
    pub val_fraction: f64,
    pub patience_epochs: usize,
    /// Frozen synthetic hold-out pairs for cross-round monitoring.
    pub holdout_size: usize,
    /// Largest tolerated fraction of failed simulations in a batch.
    pub max_sim_failure_rate: f64,
    pub prior_max_retries: usize,
    pub variant: Variant,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            samples_initial: 4000,
            samples_per_round: 5000,
            b: 2000,
            train_buffer_size: 4000,
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            clip_norm: 5.0,
            min_rounds: 3,
            patience_round: 1,
            min_delta_round: 1e-3,
            lambda_schedule: (0..=10).map(|i| f64::from(10 - i) / 10.0).collect(),
            alpha_schedule: (0..=5).map(|i| f64::from(i) / 10.0).collect(),
            k_candidates: 5000,
            pairs_per_theta: 10,
            gamma: 0.1,
            tau_l: 1.0,
            tau_theta: 1.0,
            mc_passes: 20,
            eps_alpha: 1e-6,
            eval_val_size: 200,
            proposal_samples_per_obs: 25,
            val_fraction: 0.1,
            patience_epochs: 10,
            holdout_size: 500,
            max_sim_failure_rate: 0.5,
            prior_max_retries: 10_000,
            variant: Variant::Full,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("samples_initial", self.samples_initial),
            ("samples_per_round", self.samples_per_round),
            ("B", self.b),
            ("train_buffer_size", self.train_buffer_size),
            ("batch_size", self.batch_size),
            ("K_candidates", self.k_candidates),
            ("pairs_per_theta", self.pairs_per_theta),
            ("eval_val_size", self.eval_val_size),
            ("proposal_samples_per_obs", self.proposal_samples_per_obs),
            ("holdout_size", self.holdout_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.mc_passes < 2 {
            return fail("M must be at least 2".into());
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.tau_l > 0.0 && self.tau_theta > 0.0) {
            return fail("lr, clip_norm, tau_L and tau_theta must be positive".into());
        }
        if !(self.gamma >= 0.0 && self.eps_alpha > 0.0 && self.min_delta_round >= 0.0) {
            return fail("gamma and min_delta_round must be non-negative, eps_alpha positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.max_sim_failure_rate) {
            return fail("max_sim_failure_rate outside [0, 1]".into());
        }
        for (name, s) in [
            ("lambda_schedule", &self.lambda_schedule),
            ("alpha_schedule", &self.alpha_schedule),
        ] {
            if s.is_empty() || s.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return fail(format!("{name} must be a non-empty list of values in [0, 1]"));
            }
        }
        let candidates = self.samples_per_round.min(self.k_candidates);
        let pool = match self.variant {
            Variant::ThetaOnly => candidates,
            _ => candidates * self.pairs_per_theta,
        };
        if pool < self.b {
            return fail(format!("candidate pool of {pool} cannot supply B = {}", self.b));
        }
        Ok(())
    }

    /// Simulator calls after `r` completed rounds.
    pub fn budget(&self, r: usize) -> usize {
        self.samples_initial + r * self.b
    }

    pub fn lambda(&self, round: usize) -> f64 {
        if self.variant == Variant::PriorOnly {
            1.0
        } else {
            lambda_at(&self.lambda_schedule, round)
        }
    }

    pub fn alpha_mix(&self, round: usize) -> f64 {
        lambda_at(&self.alpha_schedule, round)
    }
}

/// One simulated training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub theta: ParamVector,
    pub x: Tensor,
}

/// Frozen synthetic `(θ, x)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Holdout {
    pub thetas: Vec<ParamVector>,
    pub windows: Vec<Tensor>,
    pub leaders: Vec<WindowRef>,
}

impl Holdout {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn nll(&self, model: &PosteriorModel) -> Result<f64> {
        let refs: Vec<&Tensor> = self.windows.iter().collect();
        model.nll(&model.to_u(&self.thetas)?, &model.obs_batch(&refs)?)
    }
}

/// Simulates `x = Sim(θ, L)` from the leader's equilibrium state.
pub fn simulate_pair<R: Rng + ?Sized>(theta: &ParamVector, leader_v: &[f64], dt: f64, rng: &mut R) -> Result<Tensor> {
    let x = simulate_from_equilibrium(theta, leader_v, dt, rng)?.observation();
    if !x.is_finite() {
        return Err(Error::Numerical("simulated trajectory is not finite".into()));
    }
    Ok(x)
}

/// Draws `θ ~ prior` and a uniform real leader window for item `i` of a
/// stage, all from the item's own stream.
fn prior_pair(prior: &Prior, bank: &LeaderBank, retries: usize, r: &mut rng::Rng) -> Result<(ParamVector, WindowRef)> {
    let theta = prior.sample(r, retries)?;
    let leader = bank.sample_round(0.0, 1, r)?[0];
    Ok((theta, leader))
}

/// `n` pairs built like the warm-up batch, generated once from `seed`.
pub fn make_synthetic_holdout(
    prior: &Prior,
    bank: &LeaderBank,
    n: usize,
    seed: u64,
    retries: usize,
) -> Result<Holdout> {
    let mut h = Holdout {
        thetas: Vec::with_capacity(n),
        windows: Vec::with_capacity(n),
        leaders: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut r = rng::stream(seed, "holdout", i as u64);
        let mut attempt = 0;
        loop {
            let (theta, leader) = prior_pair(prior, bank, retries, &mut r)?;
            match simulate_pair(&theta, &bank.get(leader).v, bank.dt, &mut r) {
                Ok(x) => {
                    h.thetas.push(theta);
                    h.windows.push(x);
                    h.leaders.push(leader);
                    break;
                }
                Err(e) if attempt >= 10 => return Err(Error::Pipeline(format!("hold-out pair {i}: {e}"))),
                Err(_) => attempt += 1,
            }
        }
    }
    Ok(h)
}

/// Outcome of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub last_train_nll: f64,
    pub skipped_batches: usize,
}

/// Minibatch Adam on the buffer with a shuffled validation slice, stopping
/// after `patience_epochs` epochs without improvement and restoring the best
/// parameters.
pub fn train_on_buffer(
    model: &mut PosteriorModel,
    buffer: &ReplayBuffer<Sample>,
    cfg: &LoopConfig,
    rng: &mut rng::Rng,
) -> Result<TrainReport> {
    let n = buffer.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} buffered pairs")));
    }
    let thetas: Vec<ParamVector> = buffer.iter().map(|s| s.theta).collect();
    let windows: Vec<&Tensor> = buffer.iter().map(|s| &s.x).collect();
    let u = model.to_u(&thetas)?;
    let obs = model.obs_batch(&windows)?;

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    let (u_val, obs_val) = (u.select_rows(&val), obs.select(&val));

    let mut adam = Adam::new(cfg.lr).with_clip_norm(cfg.clip_norm);
    let mut best = model.nll(&u_val, &obs_val)?;
    if !best.is_finite() {
        best = f64::INFINITY;
    }
    let mut best_params = model.params.clone();
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_val_nll: best,
        last_train_nll: f64::NAN,
        skipped_batches: 0,
    };
    let mut since = 0;
    for epoch in 1..=cfg.epochs {
        train.shuffle(rng);
        let mut total = 0.0;
        let mut used = 0usize;
        for batch in train.chunks(cfg.batch_size) {
            match model.train_loss_and_grad(&u.select_rows(batch), &obs.select(batch), rng) {
                Ok((loss, grads)) => {
                    adam.step(&mut model.params, &grads);
                    total += loss * batch.len() as f64;
                    used += batch.len();
                }
                Err(Error::Numerical(m)) => {
                    log::debug!("skipping batch: {m}");
                    report.skipped_batches += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if used == 0 || !model.params.is_finite() {
            model.params = best_params;
            return Err(Error::Numerical(format!("training diverged in epoch {epoch}")));
        }
        report.epochs_run = epoch;
        report.last_train_nll = total / used as f64;
        let v = model.nll(&u_val, &obs_val).unwrap_or(f64::INFINITY);
        if v < report.best_val_nll {
            report.best_val_nll = v;
            report.best_epoch = epoch;
            best_params = model.params.clone();
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience_epochs {
                break;
            }
        }
    }
    model.params = best_params;
    Ok(report)
}

/// Record appended to the run log after the warm-up (round 0) and after each
/// active round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub variant: Variant,
    pub lambda: f64,
    pub alpha_mix: f64,
    pub holdout_nll: f64,
    /// Cumulative simulator calls, hold-out excluded.
    pub simulations: usize,
    pub failed_simulations: usize,
    pub buffer_len: usize,
    pub prior_draws: usize,
    /// Distinct parameter vectors among the acquired pairs.
    pub distinct_thetas: usize,
    pub synthetic_leaders: usize,
    pub train: TrainReport,
    pub stop: bool,
    pub seed: u64,
    pub seconds: f64,
}

/// Mutable loop state between rounds.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub model: PosteriorModel,
    pub buffer: ReplayBuffer<Sample>,
    pub round: usize,
    pub simulations: usize,
    /// Hold-out NLL of each active round.
    pub history: Vec<f64>,
    pub reports: Vec<RoundReport>,
}

/// Everything a run reads but never mutates.
pub struct ActiveLoop<'a> {
    pub cfg: &'a LoopConfig,
    pub prior: Prior,
    pub bank: &'a LeaderBank,
    /// Fixed observed subset for the proposal and the α contexts.
    pub observed: Vec<Tensor>,
    pub holdout: &'a Holdout,
    pub seed: u64,
    pub threads: usize,
}

impl<'a> ActiveLoop<'a> {
    /// Validates the configuration and draws the fixed observed subset.
    pub fn new(
        cfg: &'a LoopConfig,
        prior: Prior,
        bank: &'a LeaderBank,
        observed: &[Tensor],
        holdout: &'a Holdout,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if bank.real.is_empty() {
            return Err(Error::EmptyInput("leader bank has no real windows".into()));
        }
        if observed.is_empty() {
            return Err(Error::EmptyInput("observed trajectories".into()));
        }
        let mut r = rng::stream(seed, "observed_subset", 0);
        let k = cfg.eval_val_size.min(observed.len());
        let mut pick = rand::seq::index::sample(&mut r, observed.len(), k).into_vec();
        pick.sort_unstable();
        Ok(Self {
            cfg,
            prior,
            bank,
            observed: pick.into_iter().map(|i| observed[i].clone()).collect(),
            holdout,
            seed,
            threads: 1,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    /// Simulates pairs, each from stream `("simulate", first_call + i)`.
    /// Returns the successes and the number of failures.
    fn simulate(&self, pairs: &[(ParamVector, WindowRef)], first_call: usize) -> Result<(Vec<Sample>, usize)> {
        let out = par_map(pairs.len(), self.threads, |i| {
            let (theta, leader) = pairs[i];
            let mut r = rng::stream(self.seed, "simulate", (first_call + i) as u64);
            simulate_pair(&theta, &self.bank.get(leader).v, self.bank.dt, &mut r).map(|x| Sample { theta, x })
        });
        let mut ok = Vec::with_capacity(out.len());
        let mut failed = 0;
        for s in out {
            match s {
                Ok(s) => ok.push(s),
                Err(e) => {
                    log::debug!("simulation failed: {e}");
                    failed += 1;
                }
            }
        }
        if pairs.is_empty() || failed as f64 > self.cfg.max_sim_failure_rate * pairs.len() as f64 {
            return Err(Error::Pipeline(format!(
                "{failed} of {} simulations failed",
                pairs.len()
            )));
        }
        Ok((ok, failed))
    }

    /// Warm-up: `B0` prior pairs on real leader windows, normalization fit,
    /// and a first training phase.
    pub fn warmup(&self, mut model: PosteriorModel) -> Result<LoopState> {
        let start = Instant::now();
        let cfg = self.cfg;
        let pairs = (0..cfg.samples_initial)
            .map(|i| {
                prior_pair(
                    &self.prior,
                    self.bank,
                    cfg.prior_max_retries,
                    &mut rng::stream(self.seed, "warmup", i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (samples, failed) = self.simulate(&pairs, 0)?;
        let windows: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
        let thetas: Vec<ParamVector> = samples.iter().map(|s| s.theta).collect();
        let u = model.to_u(&thetas)?;
        model.fit_normalization(&windows, &u);
        let mut buffer = ReplayBuffer::new(cfg.train_buffer_size);
        buffer.extend(samples);
        let train = train_on_buffer(&mut model, &buffer, cfg, &mut rng::stream(self.seed, "train", 0))?;
        model.provenance.root_seed = self.seed;
        model.provenance.round = 0;
        model.provenance.simulations = cfg.samples_initial;
        let report = RoundReport {
            round: 0,
            variant: cfg.variant,
            lambda: 1.0,
            alpha_mix: 0.0,
            holdout_nll: self.holdout.nll(&model)?,
            simulations: cfg.samples_initial,
            failed_simulations: failed,
            buffer_len: buffer.len(),
            prior_draws: pairs.len(),
            distinct_thetas: pairs.len(),
            synthetic_leaders: 0,
            train,
            stop: false,
            seed: self.seed,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "warm-up: {} simulations, hold-out NLL {:.4}, {} epochs",
            report.simulations,
            report.holdout_nll,
            train.epochs_run
        );
        Ok(LoopState {
            model,
            buffer,
            round: 0,
            simulations: cfg.samples_initial,
            history: Vec::new(),
            reports: vec![report],
        })
    }

    /// One active round: proposal, acquisition, simulation, buffering and
    /// fine-tuning.
    pub fn run_round(&self, state: &mut LoopState) -> Result<RoundReport> {
        let start = Instant::now();
        let cfg = self.cfg;
        let r = state.round + 1;
        let lambda = cfg.lambda(r);
        let alpha_mix = if self.bank.synthetic.is_empty() {
            0.0
        } else {
            cfg.alpha_mix(r)
        };
        let observed: Vec<&Tensor> = self.observed.iter().collect();

        let proposal = if lambda < 1.0 {
            let seed = rng::derive_seed(self.seed, "proposal", r as u64);
            Some(build_proposal_state(
                &state.model,
                &observed,
                cfg.proposal_samples_per_obs,
                seed,
            )?)
        } else {
            None
        };
        let drawn = propose_with_sources(
            lambda,
            &self.prior,
            proposal.as_ref(),
            cfg.samples_per_round,
            cfg.prior_max_retries,
            &mut rng::stream(self.seed, "propose", r as u64),
        )?;
        let prior_draws = drawn.iter().filter(|(_, p)| *p).count();
        let thetas: Vec<ParamVector> = drawn.into_iter().map(|(t, _)| t).collect();

        let contexts: ObsBatch = state.model.obs_batch(&observed)?;
        let buffered: Vec<Vec<f64>> = state.buffer.iter().map(|s| s.theta.to_vec()).collect();
        let dp = DivPenParams::from_thetas(cfg.tau_l, cfg.tau_theta, buffered.iter().map(|t| t.as_slice()));
        let acfg = AcquireConfig {
            k_candidates: cfg.k_candidates,
            pairs_per_theta: cfg.pairs_per_theta,
            batch: cfg.b,
            gamma: cfg.gamma,
            mc_passes: cfg.mc_passes,
            eps_alpha: cfg.eps_alpha,
            alpha_mix,
            theta_only: cfg.variant == Variant::ThetaOnly,
        };
        let chosen = acquire_pairs(
            &state.model,
            &thetas,
            &contexts,
            self.bank,
            &acfg,
            &dp,
            &mut rng::stream(self.seed, "acquire", r as u64),
        )?;
        let synthetic_leaders = chosen.iter().filter(|c| c.leader.source == Source::Synthetic).count();
        let pairs: Vec<(ParamVector, WindowRef)> = chosen.iter().map(|c| (c.theta, c.leader)).collect();
        let mut keys: Vec<Vec<u64>> = pairs
            .iter()
            .map(|(t, _)| t.to_vec().iter().map(|x| x.to_bits()).collect())
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let distinct_thetas = keys.len();

        let (samples, failed) = self.simulate(&pairs, state.simulations)?;
        state.simulations += pairs.len();
        state.buffer.extend(samples);
        let train = train_on_buffer(
            &mut state.model,
            &state.buffer,
            cfg,
            &mut rng::stream(self.seed, "train", r as u64),
        )?;
        state.round = r;
        state.model.provenance.round = r;
        state.model.provenance.simulations = state.simulations;
        let nll = self.holdout.nll(&state.model)?;
        state.history.push(nll);
        let stop = should_stop(&state.history, cfg.min_rounds, cfg.patience_round, cfg.min_delta_round);
        let report = RoundReport {
            round: r,
            variant: cfg.variant,
            lambda,
            alpha_mix,
            holdout_nll: nll,
            simulations: state.simulations,
            failed_simulations: failed,
            buffer_len: state.buffer.len(),
            prior_draws,
            distinct_thetas,
            synthetic_leaders,
            train,
            stop,
            seed: self.seed,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {r}: lambda {lambda:.2}, hold-out NLL {nll:.4}, {} simulations, {} epochs",
            state.simulations,
            train.epochs_run
        );
        state.reports.push(report.clone());
        Ok(report)
    }

    /// Warm-up plus rounds until `rounds` or the stopping rule. `on_round`
    /// sees the state after the warm-up and after every round. On return the
    /// model holds the checkpoint with the lowest hold-out NLL.
    pub fn run(
        &self,
        model: PosteriorModel,
        mut on_round: impl FnMut(&LoopState, &RoundReport) -> Result<()>,
    ) -> Result<LoopState> {
        let mut state = self.warmup(model)?;
        on_round(&state, &state.reports[0])?;
        let mut best = (state.reports[0].holdout_nll, state.model.clone());
        while state.round < self.cfg.rounds {
            let report = self.run_round(&mut state)?;
            on_round(&state, &report)?;
            if report.holdout_nll < best.0 {
                best = (report.holdout_nll, state.model.clone());
            }
            if report.stop {
                break;
            }
        }
        state.model = best.1;
        Ok(state)
    }
}
