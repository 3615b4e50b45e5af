//! Synthetic leader–follower data with known parameters.
//!
//! Leader speed profiles relax toward piecewise-constant target speeds that
//! change at random times, with bounded acceleration and smooth jitter, which
//! gives stop-and-go and cruising phases similar to highway traffic. Each
//! follower draws its parameters from the prior and is simulated from
//! equilibrium behind its leader.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sim::{simulate_from_equilibrium, ParamVector, Prior, ResidualKind};
use crate::trajectory::{finite_difference_accel, LeaderSample, Segment};

/// Shape of generated leader speed profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeaderProfileConfig {
    /// Range of target speeds (m/s).
    pub v_min: f64,
    pub v_max: f64,
    /// Mean time between target changes (s).
    pub mean_hold: f64,
    /// Relaxation rate toward the target (1/s).
    pub gain: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Standard deviation of the acceleration jitter (m/s²).
    pub jitter: f64,
}

impl Default for LeaderProfileConfig {
    fn default() -> Self {
        Self {
            v_min: 8.0,
            v_max: 32.0,
            mean_hold: 15.0,
            gain: 0.3,
            a_min: -3.0,
            a_max: 2.0,
            jitter: 0.3,
        }
    }
}

/// Leader speeds for `n` steps of `dt`.
pub fn leader_profile<R: Rng + ?Sized>(n: usize, dt: f64, cfg: &LeaderProfileConfig, rng: &mut R) -> Vec<f64> {
    let mut v = rng.random_range(cfg.v_min..cfg.v_max);
    let mut target = rng.random_range(cfg.v_min..cfg.v_max);
    let switch = dt / cfg.mean_hold;
    let noise = Normal::new(0.0, cfg.jitter).expect("finite jitter");
    let mut jitter = 0.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(v);
        if rng.random::<f64>() < switch {
            target = rng.random_range(cfg.v_min..cfg.v_max);
        }
        // first-order smoothing keeps the jerk bounded
        jitter = 0.8 * jitter + 0.2 * noise.sample(rng);
        let a = (cfg.gain * (target - v) + jitter).clamp(cfg.a_min, cfg.a_max);
        v = (v + a * dt).max(0.0);
    }
    out
}

/// A simulated pair and the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub theta: ParamVector,
    pub segment: Segment,
    pub degenerate: bool,
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_pairs: usize,
    /// Steps per pair.
    pub steps: usize,
    pub dt: f64,
    pub residual: ResidualKind,
    pub leader: LeaderProfileConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            steps: 300,
            dt: 0.2,
            residual: ResidualKind::IidGaussian,
            leader: LeaderProfileConfig::default(),
        }
    }
}

/// Pair `i` uses stream `("synth", i)` of `seed`: leader profile, then
/// `θ ~ prior`, then the residual path. Follower IDs are `2i + 2` and leader
/// IDs `2i + 1`.
pub fn synth_pairs(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthPair>> {
    if cfg.steps < 2 || !(cfg.dt > 0.0) {
        return Err(Error::Config(
            "synthetic pairs need at least 2 steps and a positive dt".into(),
        ));
    }
    let prior = Prior::new(cfg.residual);
    (0..cfg.n_pairs)
        .map(|i| {
            let mut r = rng::stream(seed, "synth", i as u64);
            let v_lead = leader_profile(cfg.steps, cfg.dt, &cfg.leader, &mut r);
            let theta = prior.sample(&mut r, 10_000)?;
            let roll = simulate_from_equilibrium(&theta, &v_lead, cfg.dt, &mut r)?;
            let a_lead = finite_difference_accel(&v_lead, cfg.dt);
            Ok(SynthPair {
                theta,
                degenerate: roll.degenerate(),
                segment: Segment {
                    follower_id: 2 * i as u64 + 2,
                    leader_id: 2 * i as u64 + 1,
                    dt: cfg.dt,
                    states: roll.states,
                    leader: v_lead
                        .iter()
                        .zip(&a_lead)
                        .map(|(&v, &a)| LeaderSample { v, a })
                        .collect(),
                },
            })
        })
        .collect()
}

/// Vehicle length written to track files (m).
pub const VEHICLE_LENGTH: f64 = 4.5;

/// Writes pairs as a track CSV (`frame,id,precedingId,x,xVelocity,length`)
/// with `factor` frames per step, vehicles driving in the positive
/// direction. Frames between steps interpolate linearly, so frame `t·factor`
/// holds step `t` exactly.
pub fn write_tracks_csv<W: Write>(w: W, pairs: &[SynthPair], factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::Config("frames per step must be positive".into()));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["frame", "id", "precedingId", "x", "xVelocity", "length"])?;
    for p in pairs {
        let seg = &p.segment;
        let n = seg.len();
        // (leader front, leader speed, follower front, follower speed) per step
        let mut rows = Vec::with_capacity(n);
        let mut front = 0.0;
        for (st, l) in seg.states.iter().zip(&seg.leader) {
            rows.push([front, l.v, front - VEHICLE_LENGTH - st.s, st.v]);
            front += l.v * seg.dt;
        }
        let frames = (n.saturating_sub(1)) * factor + usize::from(n > 0);
        let at = |f: usize| -> [f64; 4] {
            let (t, j) = (f / factor, f % factor);
            if j == 0 {
                return rows[t];
            }
            let w = j as f64 / factor as f64;
            std::array::from_fn(|k| rows[t][k] + w * (rows[t + 1][k] - rows[t][k]))
        };
        for (id, preceding, col) in [(seg.leader_id, 0, 0), (seg.follower_id, seg.leader_id, 2)] {
            for f in 0..frames {
                let r = at(f);
                out.write_record([
                    f.to_string(),
                    id.to_string(),
                    preceding.to_string(),
                    format!("{:.17e}", r[col]),
                    format!("{:.17e}", r[col + 1]),
                    VEHICLE_LENGTH.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes `follower_id` plus one column per parameter.
pub fn write_truth_csv<W: Write>(w: W, pairs: &[SynthPair]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let Some(first) = pairs.first() else {
        out.flush()?;
        return Ok(());
    };
    let mut header = vec!["follower_id".to_string()];
    header.extend(first.theta.kind().param_names().iter().map(|s| s.to_string()));
    out.write_record(&header)?;
    for p in pairs {
        let mut row = vec![p.segment.follower_id.to_string()];
        row.extend(p.theta.to_vec().iter().map(|x| format!("{x:.17e}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a file written by [`write_truth_csv`].
pub fn read_truth_csv(path: &Path, kind: ResidualKind) -> Result<Vec<(u64, ParamVector)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let names = kind.param_names();
    let headers = rdr.headers()?.clone();
    if headers.len() != names.len() + 1 || headers.iter().skip(1).zip(names).any(|(h, n)| h != *n) {
        return Err(Error::ModelMismatch(format!(
            "truth columns {:?} do not match the {kind} parameters",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    rdr.records()
        .enumerate()
        .map(|(k, rec)| {
            let rec = rec?;
            let bad = |what: &str| Error::Format(format!("row {}: bad {what}", k + 2));
            let id: u64 = rec[0].parse().map_err(|_| bad("follower_id"))?;
            let x: Vec<f64> = (1..rec.len())
                .map(|i| rec[i].parse::<f64>().map_err(|_| bad(names[i - 1])))
                .collect::<Result<_>>()?;
            Ok((id, ParamVector::from_slice(kind, &x)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{align_phase, downsample, extract_segments, read_tracks_csv};

    #[test]
    fn leader_profiles_respect_bounds() {
        let cfg = LeaderProfileConfig::default();
        let mut r = rng::from_seed(4);
        let v = leader_profile(2000, 0.2, &cfg, &mut r);
        assert!(v.iter().all(|x| *x >= 0.0 && x.is_finite()));
        for w in v.windows(2) {
            let a = (w[1] - w[0]) / 0.2;
            assert!(a >= cfg.a_min - 1e-9 && a <= cfg.a_max + 1e-9);
        }
    }

    #[test]
    fn generation_is_seeded_and_in_the_prior_box() {
        let cfg = SynthConfig {
            n_pairs: 6,
            steps: 50,
            ..SynthConfig::default()
        };
        let a = synth_pairs(&cfg, 11).unwrap();
        assert_eq!(a, synth_pairs(&cfg, 11).unwrap());
        assert_ne!(a, synth_pairs(&cfg, 12).unwrap());
        let prior = Prior::new(cfg.residual);
        assert!(a.iter().all(|p| prior.in_support(&p.theta) && p.segment.len() == 50));
    }

    #[test]
    fn track_file_round_trips_through_ingest() {
        let cfg = SynthConfig {
            n_pairs: 3,
            steps: 60,
            ..SynthConfig::default()
        };
        let pairs = synth_pairs(&cfg, 5).unwrap();
        for factor in [1, 5] {
            let mut buf = Vec::new();
            write_tracks_csv(&mut buf, &pairs, factor).unwrap();
            let tracks: Vec<_> = read_tracks_csv(buf.as_slice(), factor as f64 / cfg.dt)
                .unwrap()
                .iter()
                .map(|t| downsample(&align_phase(t, factor), factor).unwrap())
                .collect();
            let segs = extract_segments(&tracks, 1.0).unwrap();
            assert_eq!(segs.len(), 3);
            for (seg, p) in segs.iter().zip(&pairs) {
                assert_eq!(seg.follower_id, p.segment.follower_id);
                assert_eq!(seg.len(), p.segment.len());
                assert!((seg.dt - cfg.dt).abs() < 1e-12);
                for (a, b) in seg.states.iter().zip(&p.segment.states) {
                    assert!((a.s - b.s).abs() < 1e-9 && (a.v - b.v).abs() < 1e-12 && (a.dv - b.dv).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn truth_file_round_trips() {
        let cfg = SynthConfig {
            n_pairs: 4,
            steps: 10,
            residual: ResidualKind::Matern52,
            ..SynthConfig::default()
        };
        let pairs = synth_pairs(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        write_truth_csv(std::fs::File::create(&path).unwrap(), &pairs).unwrap();
        let back = read_truth_csv(&path, ResidualKind::Matern52).unwrap();
        for ((id, t), p) in back.iter().zip(&pairs) {
            assert_eq!(*id, p.segment.follower_id);
            assert_eq!(*t, p.theta);
        }
        assert!(read_truth_csv(&path, ResidualKind::IidGaussian).is_err());
    }
}
