//! Shared trajectory primitives.

use serde::{Deserialize, Serialize};

/// Follower state at one step: gap, speed, and relative speed `v - v_lead`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowerState {
    pub s: f64,
    pub v: f64,
    pub dv: f64,
}

impl FollowerState {
    pub fn new(s: f64, v: f64, dv: f64) -> Self {
        Self { s, v, dv }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.s, self.v, self.dv]
    }
}

/// Leader input at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderSample {
    pub v: f64,
    pub a: f64,
}

/// One leader–follower pair tracked continuously at a fixed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub follower_id: u64,
    pub leader_id: u64,
    pub dt: f64,
    pub states: Vec<FollowerState>,
    pub leader: Vec<LeaderSample>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    pub fn leader_speeds(&self) -> Vec<f64> {
        self.leader.iter().map(|l| l.v).collect()
    }

    /// Largest violation of `s[t+1] - s[t] = (v_lead[t] - v[t]) dt`.
    pub fn kinematic_residual(&self) -> f64 {
        (0..self.len().saturating_sub(1))
            .map(|t| {
                let ds = self.states[t + 1].s - self.states[t].s;
                (ds - (self.leader[t].v - self.states[t].v) * self.dt).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// A fixed-length slice of a segment with its aligned leader profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub offset: usize,
    pub states: Vec<FollowerState>,
    pub leader: Vec<LeaderSample>,
}

impl Window {
    pub fn init(&self) -> FollowerState {
        self.states[0]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn leader_speeds(&self) -> Vec<f64> {
        self.leader.iter().map(|l| l.v).collect()
    }
}

/// Backward finite differences `a(t) = (v(t) - v(t-1)) / dt` with the first
/// entry copied from the second. A single sample yields zero acceleration.
pub fn finite_difference_accel(v: &[f64], dt: f64) -> Vec<f64> {
    match v.len() {
        0 => Vec::new(),
        1 => vec![0.0],
        n => {
            let mut a = Vec::with_capacity(n);
            a.push(0.0);
            for t in 1..n {
                a.push((v[t] - v[t - 1]) / dt);
            }
            a[0] = a[1];
            a
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_difference_is_copied() {
        let a = finite_difference_accel(&[10.0, 10.2, 10.6], 0.2);
        assert!((a[0] - 1.0).abs() < 1e-12);
        assert!((a[1] - 1.0).abs() < 1e-12);
        assert!((a[2] - 2.0).abs() < 1e-12);
        assert_eq!(finite_difference_accel(&[3.0], 0.2), vec![0.0]);
    }
}
