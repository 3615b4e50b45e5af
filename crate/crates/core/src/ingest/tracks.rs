use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE: f64 = 25.0;

const REQUIRED: [&str; 5] = ["frame", "id", "precedingId", "x", "xVelocity"];

/// One sampled frame of a vehicle, with `position` the front bumper along the
/// direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame: i64,
    pub time: f64,
    pub position: f64,
    pub speed: f64,
    pub preceding_id: Option<u64>,
    pub length: f64,
}

impl Frame {
    pub fn rear(&self) -> f64 {
        self.position - self.length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrack {
    pub track_id: u64,
    pub dt: f64,
    pub frames: Vec<Frame>,
}

impl RawTrack {
    pub fn index_of(&self, frame: i64) -> Option<usize> {
        self.frames.binary_search_by_key(&frame, |f| f.frame).ok()
    }
}

/// Keeps every `factor`-th frame starting from the first.
pub fn downsample(track: &RawTrack, factor: usize) -> Result<RawTrack> {
    if factor == 0 {
        return Err(Error::Config("downsampling factor must be at least 1".into()));
    }
    if track.frames.is_empty() {
        return Err(Error::EmptyInput(format!("track {}", track.track_id)));
    }
    Ok(RawTrack {
        track_id: track.track_id,
        dt: track.dt * factor as f64,
        frames: track.frames.iter().step_by(factor).copied().collect(),
    })
}

/// Drops leading frames until the frame number is a multiple of `factor`,
/// so that tracks downsampled independently stay time-aligned.
pub fn align_phase(track: &RawTrack, factor: usize) -> RawTrack {
    let f = factor.max(1) as i64;
    let start = track
        .frames
        .iter()
        .position(|fr| fr.frame.rem_euclid(f) == 0)
        .unwrap_or(track.frames.len());
    RawTrack {
        track_id: track.track_id,
        dt: track.dt,
        frames: track.frames[start..].to_vec(),
    }
}

pub fn read_tracks(path: &Path, frame_rate: f64) -> Result<Vec<RawTrack>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_tracks_csv(std::fs::File::open(path)?, frame_rate)
}

/// Parses a per-frame CSV into one track per vehicle ID, sorted by ID.
pub fn read_tracks_csv<R: Read>(reader: R, frame_rate: f64) -> Result<Vec<RawTrack>> {
    if !(frame_rate > 0.0) {
        return Err(Error::Config(format!("frame rate must be positive, got {frame_rate}")));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "missing required column(s): {}",
            missing.join(", ")
        )));
    }
    let idx: Vec<usize> = REQUIRED.iter().map(|c| col(c).unwrap()).collect();
    let length_col = col("length");
    if length_col.is_none() {
        log::warn!("no `length` column; vehicle lengths treated as zero");
    }

    let mut rows: BTreeMap<u64, Vec<(i64, f64, f64, Option<u64>, f64)>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        let field = |i: usize, name: &str| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Format(format!("row {line}: missing field `{name}`")))
        };
        let num = |i: usize, name: &str| -> Result<f64> {
            let raw = field(i, name)?;
            let x: f64 = raw
                .parse()
                .map_err(|_| Error::Format(format!("row {line}: `{name}` is not a number: {raw:?}")))?;
            if !x.is_finite() {
                return Err(Error::Format(format!("row {line}: `{name}` is not finite")));
            }
            Ok(x)
        };
        let int = |i: usize, name: &str| -> Result<i64> {
            let raw = field(i, name)?;
            raw.parse()
                .map_err(|_| Error::Format(format!("row {line}: `{name}` is not an integer: {raw:?}")))
        };
        let frame = int(idx[0], "frame")?;
        let id = int(idx[1], "id")?;
        let prec = int(idx[2], "precedingId")?;
        if id < 0 || prec < 0 {
            return Err(Error::Format(format!("row {line}: negative vehicle id")));
        }
        let length = match length_col {
            Some(c) => num(c, "length")?,
            None => 0.0,
        };
        if length < 0.0 {
            return Err(Error::Format(format!("row {line}: negative vehicle length")));
        }
        rows.entry(id as u64).or_default().push((
            frame,
            num(idx[3], "x")?,
            num(idx[4], "xVelocity")?,
            (prec > 0).then_some(prec as u64),
            length,
        ));
    }

    let dt = 1.0 / frame_rate;
    rows.into_iter()
        .map(|(id, mut r)| {
            r.sort_by_key(|x| x.0);
            if let Some(w) = r.windows(2).find(|w| w[1].0 != w[0].0 + 1) {
                return Err(Error::Format(format!(
                    "track {id}: frames {} and {} are not consecutive",
                    w[0].0, w[1].0
                )));
            }
            let forward = r.iter().map(|x| x.2).sum::<f64>() >= 0.0;
            let frames = r
                .iter()
                .map(|&(frame, x, xv, prec, length)| Frame {
                    frame,
                    time: frame as f64 * dt,
                    position: if forward { x + length } else { -x },
                    speed: xv.abs(),
                    preceding_id: prec,
                    length,
                })
                .collect();
            Ok(RawTrack {
                track_id: id,
                dt,
                frames,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(n: usize) -> RawTrack {
        RawTrack {
            track_id: 1,
            dt: 0.04,
            frames: (0..n)
                .map(|k| Frame {
                    frame: k as i64 + 3,
                    time: (k + 3) as f64 * 0.04,
                    position: k as f64,
                    speed: 25.0,
                    preceding_id: None,
                    length: 4.0,
                })
                .collect(),
        }
    }

    #[test]
    fn downsample_keeps_every_factor_th_frame() {
        let t = track(10);
        let d = downsample(&t, 5).unwrap();
        assert_eq!(d.frames.len(), 2);
        assert!((d.dt - 0.2).abs() < 1e-12);
        assert!((d.frames[1].time - d.frames[0].time - 0.2).abs() < 1e-12);
        assert_eq!(downsample(&t, 1).unwrap(), t);
        assert!(matches!(downsample(&track(0), 5), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn phase_alignment_drops_leading_frames() {
        let a = align_phase(&track(10), 5);
        assert_eq!(a.frames[0].frame, 5);
        assert_eq!(a.frames.len(), 8);
    }

    #[test]
    fn csv_parsing_and_direction() {
        let csv = "frame,id,precedingId,x,xVelocity,length,lane\n\
                   1,7,0,100.0,-20.0,4.5,1\n\
                   2,7,0,99.2,-20.0,4.5,1\n\
                   1,8,7,10.0,25.0,5.0,2\n";
        let t = read_tracks_csv(csv.as_bytes(), 25.0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].track_id, 7);
        assert_eq!(t[0].frames[0].position, -100.0);
        assert_eq!(t[0].frames[0].speed, 20.0);
        assert_eq!(t[0].frames[0].preceding_id, None);
        assert_eq!(t[1].frames[0].position, 15.0);
        assert_eq!(t[1].frames[0].preceding_id, Some(7));
    }

    #[test]
    fn csv_errors_name_the_problem() {
        let e = read_tracks_csv("frame,id,x,xVelocity\n1,2,3,4\n".as_bytes(), 25.0).unwrap_err();
        assert!(e.to_string().contains("precedingId"));
        let e = read_tracks_csv("frame,id,precedingId,x,xVelocity\n1,2,0,abc,4\n".as_bytes(), 25.0).unwrap_err();
        assert!(e.to_string().contains("row 2"));
        let e = read_tracks_csv(
            "frame,id,precedingId,x,xVelocity\n1,2,0,1,4\n3,2,0,1,4\n".as_bytes(),
            25.0,
        )
        .unwrap_err();
        assert!(e.to_string().contains("not consecutive"));
    }

    #[test]
    fn missing_length_is_zero() {
        let t = read_tracks_csv("frame,id,precedingId,x,xVelocity\n1,2,0,5,4\n".as_bytes(), 25.0).unwrap();
        assert_eq!(t[0].frames[0].length, 0.0);
        assert_eq!(t[0].frames[0].position, 5.0);
    }
}
