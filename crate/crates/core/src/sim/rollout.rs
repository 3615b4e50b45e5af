use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::trajectory::FollowerState;

use super::idm::{desired_gap, idm_accel};
use super::params::IdmParams;
use super::params::{ParamVector, ResidualKind};
use super::residual::sample_residual;

/// Gaps at or below this value are clamped and the rollout flagged.
pub const MIN_GAP: f64 = 0.1;

/// One simulated follower trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<FollowerState>,
    /// Total acceleration `a_t = a_idm + r_t` applied at each step.
    pub accel: Vec<f64>,
    pub residual: Vec<f64>,
    /// A gap clamp happened.
    pub collided: bool,
    /// A negative speed was clamped to zero.
    pub speed_clamped: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn degenerate(&self) -> bool {
        self.collided || self.speed_clamped
    }

    /// `n × 3` observation matrix of `(s, v, dv)`.
    pub fn observation(&self) -> Tensor {
        states_to_tensor(&self.states)
    }
}

pub fn states_to_tensor(states: &[FollowerState]) -> Tensor {
    let mut data = Vec::with_capacity(states.len() * 3);
    for s in states {
        data.extend_from_slice(&s.as_array());
    }
    Tensor::from_vec(states.len(), 3, data)
}

/// Simulates the residual-augmented IDM from `init` under the leader speed
/// profile `leader_v`, producing as many steps as the leader profile.
pub fn rollout<R: Rng + ?Sized>(
    p: &ParamVector,
    kind: ResidualKind,
    init: FollowerState,
    leader_v: &[f64],
    dt: f64,
    rng: &mut R,
) -> Result<Rollout> {
    if leader_v.is_empty() {
        return Err(Error::EmptyInput("leader window".into()));
    }
    if init.s <= 0.0 {
        return Err(Error::Domain(format!("initial gap must be positive, got {}", init.s)));
    }
    let n = leader_v.len();
    let residual = sample_residual(kind, p, n, dt, rng)?;
    Ok(integrate(p, init, leader_v, dt, residual))
}

/// Explicit kinematic integration given a residual path.
pub fn integrate(p: &ParamVector, init: FollowerState, leader_v: &[f64], dt: f64, residual: Vec<f64>) -> Rollout {
    let n = leader_v.len();
    let mut states = Vec::with_capacity(n);
    let mut accel = Vec::with_capacity(n);
    let mut collided = false;
    let mut speed_clamped = false;
    let mut st = init;
    for t in 0..n {
        states.push(st);
        let a = idm_accel(&p.idm, st.s, st.v, st.dv).expect("gap kept positive by clamping") + residual[t];
        accel.push(a);
        if t + 1 == n {
            break;
        }
        let mut v = st.v + a * dt;
        let mut s = st.s + (leader_v[t] - st.v) * dt - 0.5 * a * dt * dt;
        if v < 0.0 {
            v = 0.0;
            speed_clamped = true;
        }
        if s <= MIN_GAP {
            s = MIN_GAP;
            collided = true;
        }
        st = FollowerState::new(s, v, v - leader_v[t + 1]);
    }
    Rollout {
        states,
        accel,
        residual,
        collided,
        speed_clamped,
    }
}

/// Steady-state car-following state at speed `v` behind a leader at the same
/// speed: the gap where the IDM acceleration vanishes. Near the desired speed
/// the free-road term is floored so the gap stays finite.
pub fn equilibrium_state(p: &IdmParams, v: f64) -> FollowerState {
    let v = v.max(0.0);
    let free = 1.0 - (v / p.v0).powf(p.delta);
    let s = desired_gap(p, v, 0.0) / free.max(EQUILIBRIUM_FREE_FLOOR).sqrt();
    FollowerState::new(s, v, 0.0)
}

/// Lower bound on `1 − (v/v0)^δ` in [`equilibrium_state`].
pub const EQUILIBRIUM_FREE_FLOOR: f64 = 0.05;

/// Rollout started in equilibrium with the first leader speed.
pub fn simulate_from_equilibrium<R: Rng + ?Sized>(
    p: &ParamVector,
    leader_v: &[f64],
    dt: f64,
    rng: &mut R,
) -> Result<Rollout> {
    let v = *leader_v
        .first()
        .ok_or_else(|| Error::EmptyInput("leader window".into()))?;
    rollout(p, p.kind(), equilibrium_state(&p.idm, v), leader_v, dt, rng)
}
