//! Residual-augmented IDM forward simulator.
//!
//! At each step the follower acceleration is the deterministic IDM term
//! plus a residual `r_t`, and the state advances by
//!
//! ```text
//! v[t+1] = v[t] + a[t] dt
//! s[t+1] = s[t] + (v_lead[t] - v[t]) dt - a[t] dt² / 2
//! ```
//!
//! Gaps are clamped at [`MIN_GAP`] and speeds at zero; either clamp flags
//! the rollout as degenerate.

mod idm;
mod params;
mod prior;
mod residual;
mod rollout;

pub use idm::{desired_gap, idm_accel};
pub use params::{IdmParams, ParamVector, ResidualKind, IDM_DELTA};
pub use prior::{log_prior, recommended_idm, sample_prior, Prior, IDM_BOUNDS, THETA_REC};
pub use residual::{
    cholesky_in_place, matern52_kernel, sample_residual, sample_residual_with, unit_matern_factor, FactorCache,
    ELL_RESOLUTION,
};
pub use rollout::{
    equilibrium_state, integrate, rollout, simulate_from_equilibrium, states_to_tensor, Rollout,
    EQUILIBRIUM_FREE_FLOOR, MIN_GAP,
};
