//! Raw trajectory ingestion: CSV loading, downsampling, segment and window
//! extraction, and follower-stratified splits.
//!
//! Gaps follow the bumper-to-bumper convention: leader rear minus follower
//! front. Positions are mapped to the direction of travel so that gaps are
//! positive for both driving directions.

mod split;
mod tracks;

pub use split::{split_by_follower, Split, SplitAssignment};
pub use tracks::{align_phase, downsample, read_tracks, read_tracks_csv, Frame, RawTrack, DEFAULT_FRAME_RATE};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::trajectory::{finite_difference_accel, FollowerState, LeaderSample, Segment, Window};

pub const DEFAULT_T_MIN: f64 = 40.0;

/// Splits every follower track into maximal runs behind a single leader with
/// positive gaps and keeps runs lasting at least `t_min` seconds.
pub fn extract_segments(tracks: &[RawTrack], t_min: f64) -> Result<Vec<Segment>> {
    let Some(first) = tracks.first() else {
        return Ok(Vec::new());
    };
    let dt = first.dt;
    if let Some(bad) = tracks.iter().find(|t| (t.dt - dt).abs() > 1e-9 * dt.max(1.0)) {
        return Err(Error::Format(format!(
            "track {} has step {} s but track {} has {} s",
            bad.track_id, bad.dt, first.track_id, dt
        )));
    }
    let by_id: HashMap<u64, &RawTrack> = tracks.iter().map(|t| (t.track_id, t)).collect();
    let min_steps = (t_min / dt - 1e-9).ceil().max(1.0) as usize;

    let mut out = Vec::new();
    for follower in tracks {
        let mut run: Vec<(usize, usize)> = Vec::new();
        let mut run_leader: Option<u64> = None;
        let mut flush = |run: &mut Vec<(usize, usize)>, leader: Option<u64>| {
            if let Some(lid) = leader {
                if run.len() >= min_steps {
                    out.push(build_segment(follower, by_id[&lid], run, dt));
                }
            }
            run.clear();
        };
        for (i, f) in follower.frames.iter().enumerate() {
            let matched = f.preceding_id.and_then(|lid| {
                let leader = by_id.get(&lid)?;
                let j = leader.index_of(f.frame)?;
                let gap = leader.frames[j].rear() - f.position;
                (gap > 0.0).then_some((lid, j))
            });
            match matched {
                Some((lid, j)) if run_leader == Some(lid) => run.push((i, j)),
                Some((lid, j)) => {
                    flush(&mut run, run_leader);
                    run_leader = Some(lid);
                    run.push((i, j));
                }
                None => {
                    flush(&mut run, run_leader);
                    run_leader = None;
                }
            }
        }
        flush(&mut run, run_leader);
    }
    Ok(out)
}

fn build_segment(follower: &RawTrack, leader: &RawTrack, run: &[(usize, usize)], dt: f64) -> Segment {
    let v_lead: Vec<f64> = run.iter().map(|&(_, j)| leader.frames[j].speed).collect();
    let a_lead = finite_difference_accel(&v_lead, dt);
    let states = run
        .iter()
        .zip(&v_lead)
        .map(|(&(i, j), vl)| {
            let f = &follower.frames[i];
            FollowerState::new(leader.frames[j].rear() - f.position, f.speed, f.speed - vl)
        })
        .collect();
    Segment {
        follower_id: follower.track_id,
        leader_id: leader.track_id,
        dt,
        states,
        leader: v_lead
            .iter()
            .zip(&a_lead)
            .map(|(&v, &a)| LeaderSample { v, a })
            .collect(),
    }
}

/// Windows of `length` steps at offsets `0, stride, 2·stride, …`.
pub fn extract_windows(seg: &Segment, length: usize, stride: usize) -> Result<Vec<Window>> {
    if length == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    if length > seg.len() {
        return Err(Error::InsufficientLength {
            needed: length,
            available: seg.len(),
        });
    }
    Ok((0..=seg.len() - length)
        .step_by(stride)
        .map(|o| Window {
            offset: o,
            states: seg.states[o..o + length].to_vec(),
            leader: seg.leader[o..o + length].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_track(id: u64, leader: Option<u64>, n: usize, x0: f64, v: f64, dt: f64, length: f64) -> RawTrack {
        RawTrack {
            track_id: id,
            dt,
            frames: (0..n)
                .map(|k| Frame {
                    frame: k as i64,
                    time: k as f64 * dt,
                    position: x0 + v * k as f64 * dt,
                    speed: v,
                    preceding_id: leader,
                    length,
                })
                .collect(),
        }
    }

    fn segment(n: usize) -> Segment {
        Segment {
            follower_id: 1,
            leader_id: 2,
            dt: 0.2,
            states: (0..n).map(|t| FollowerState::new(10.0 + t as f64, 20.0, 0.0)).collect(),
            leader: (0..n)
                .map(|t| LeaderSample {
                    v: 20.0 + t as f64 * 0.01,
                    a: 0.05,
                })
                .collect(),
        }
    }

    #[test]
    fn leader_change_starts_new_segment() {
        let dt = 0.2;
        let mut f = pair_track(1, Some(2), 300, 0.0, 20.0, dt, 4.0);
        for fr in &mut f.frames[250..] {
            fr.preceding_id = Some(3);
        }
        let a = pair_track(2, None, 300, 30.0, 20.0, dt, 4.0);
        let b = pair_track(3, None, 300, 60.0, 20.0, dt, 4.0);
        let segs = extract_segments(&[f, a, b], 40.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].leader_id, 2);
        assert!((segs[0].duration() - 50.0).abs() < 1e-9);
        // bumper-to-bumper: 30 - 4 - 0
        assert!((segs[0].states[0].s - 26.0).abs() < 1e-9);
        assert!(segs[0].leader.iter().all(|l| l.a == 0.0));
    }

    #[test]
    fn no_leader_no_segments() {
        let t = pair_track(1, None, 600, 0.0, 20.0, 0.2, 4.0);
        assert!(extract_segments(&[t], 40.0).unwrap().is_empty());
        assert!(extract_segments(&[], 40.0).unwrap().is_empty());
    }

    #[test]
    fn continuous_pair_is_one_segment() {
        let f = pair_track(1, Some(2), 600, 0.0, 20.0, 0.2, 4.0);
        let l = pair_track(2, None, 600, 30.0, 20.0, 0.2, 4.0);
        let segs = extract_segments(&[f, l], 40.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert!((segs[0].duration() - 120.0).abs() < 1e-9);
        assert!(segs[0].kinematic_residual() < 1e-9);
    }

    #[test]
    fn nonpositive_gap_breaks_segment() {
        let f = pair_track(1, Some(2), 600, 0.0, 20.0, 0.2, 4.0);
        let mut l = pair_track(2, None, 600, 30.0, 20.0, 0.2, 4.0);
        l.frames[300].position = 3.0;
        let segs = extract_segments(&[f, l], 40.0).unwrap();
        assert_eq!(segs.iter().map(Segment::len).collect::<Vec<_>>(), vec![300, 299]);
    }

    #[test]
    fn mixed_rates_are_rejected() {
        let a = pair_track(1, None, 10, 0.0, 20.0, 0.2, 4.0);
        let b = pair_track(2, None, 10, 0.0, 20.0, 0.04, 4.0);
        assert!(matches!(extract_segments(&[a, b], 40.0), Err(Error::Format(_))));
    }

    #[test]
    fn window_offsets() {
        let w = extract_windows(&segment(200), 50, 20).unwrap();
        assert_eq!(w.len(), 8);
        assert_eq!(
            w.iter().map(|w| w.offset).collect::<Vec<_>>(),
            (0..=140).step_by(20).collect::<Vec<_>>()
        );
        assert_eq!(extract_windows(&segment(50), 50, 7).unwrap().len(), 1);
        assert!(matches!(
            extract_windows(&segment(40), 50, 10),
            Err(Error::InsufficientLength {
                needed: 50,
                available: 40
            })
        ));
    }

    #[test]
    fn tiling_reconstructs_prefix() {
        let seg = segment(173);
        let w = extract_windows(&seg, 25, 25).unwrap();
        let states: Vec<_> = w.iter().flat_map(|w| w.states.clone()).collect();
        let leader: Vec<_> = w.iter().flat_map(|w| w.leader.clone()).collect();
        assert_eq!(states, seg.states[..150]);
        assert_eq!(leader, seg.leader[..150]);
        assert_eq!(w[3].init(), seg.states[75]);
    }
}
