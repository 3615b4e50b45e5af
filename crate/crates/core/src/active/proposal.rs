//! Soft-shrink proposal: a sample-level mixture of the prior and a pooled
//! set of posterior samples over a fixed observed subset.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::PosteriorModel;
use crate::nn::{Dropout, Tensor};
use crate::rng;
use crate::sim::{ParamVector, Prior};

/// Pooled posterior samples from the previous round's model.
#[derive(Debug, Clone, Default)]
pub struct ProposalState {
    pub pool: Vec<ParamVector>,
    pub lambda: f64,
}

impl ProposalState {
    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }
}

/// λ for round `r`, with round 0 the warm-up; rounds past the end of the
/// schedule use its last entry, or 0 if it is empty.
pub fn lambda_at(schedule: &[f64], round: usize) -> f64 {
    schedule.get(round).or(schedule.last()).copied().unwrap_or(0.0)
}

/// Draws `samples_per_obs` posterior samples (dropout off) for every observed
/// window and pools them. Sampling for observation `i` uses its own stream.
pub fn build_proposal_state(
    model: &PosteriorModel,
    observed: &[&Tensor],
    samples_per_obs: usize,
    seed: u64,
) -> Result<ProposalState> {
    if observed.is_empty() {
        return Err(Error::EmptyInput("observed subset for the proposal".into()));
    }
    let obs = model.obs_batch(observed)?;
    let ctx = model.encode(&obs, &mut Dropout::Off)?;
    let mut pool = Vec::with_capacity(observed.len() * samples_per_obs);
    for i in 0..ctx.rows {
        let mut r = rng::stream(seed, "proposal", i as u64);
        pool.extend(model.sample_theta(ctx.row(i), samples_per_obs, &mut r)?);
    }
    Ok(ProposalState { pool, lambda: 1.0 })
}

/// Each draw comes from the prior with probability `lambda`, otherwise it is
/// a uniform resample of the pool.
pub fn propose_params<R: Rng + ?Sized>(
    lambda: f64,
    prior: &Prior,
    state: Option<&ProposalState>,
    n: usize,
    max_retries: usize,
    rng: &mut R,
) -> Result<Vec<ParamVector>> {
    Ok(propose_with_sources(lambda, prior, state, n, max_retries, rng)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

/// As [`propose_params`], flagging which draws came from the prior.
pub fn propose_with_sources<R: Rng + ?Sized>(
    lambda: f64,
    prior: &Prior,
    state: Option<&ProposalState>,
    n: usize,
    max_retries: usize,
    rng: &mut R,
) -> Result<Vec<(ParamVector, bool)>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let pool = state.map(|s| s.pool.as_slice()).unwrap_or(&[]);
    if lambda < 1.0 && pool.is_empty() {
        return Err(Error::Config("lambda < 1 needs a non-empty pooled proposal".into()));
    }
    (0..n)
        .map(|_| {
            if lambda >= 1.0 || rng.random::<f64>() < lambda {
                prior.sample(rng, max_retries).map(|p| (p, true))
            } else {
                Ok((pool[rng.random_range(0..pool.len())], false))
            }
        })
        .collect()
}
