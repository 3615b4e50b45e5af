//! Columnar trajectory files.
//!
//! A file starts with `# key=value` metadata lines followed by a CSV table
//! with one row per step:
//!
//! ```text
//! # dt=0.2
//! # t_min=40
//! segment,follower_id,leader_id,step,s,v,dv,v_lead,a_lead
//! 0,12,11,0,23.1,21.4,0.3,21.1,-0.05
//! ```
//!
//! Simulated rollouts use the same layout with provenance keys in the header.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trajectory::{FollowerState, LeaderSample, Segment};

pub type Metadata = BTreeMap<String, String>;

const COLUMNS: [&str; 9] = [
    "segment",
    "follower_id",
    "leader_id",
    "step",
    "s",
    "v",
    "dv",
    "v_lead",
    "a_lead",
];

pub fn write_segments<W: Write>(mut w: W, meta: &Metadata, segments: &[Segment]) -> Result<()> {
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Format(format!("invalid metadata entry {k:?}")));
        }
        writeln!(w, "# {k}={v}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(COLUMNS)?;
    for (i, seg) in segments.iter().enumerate() {
        for (t, (st, l)) in seg.states.iter().zip(&seg.leader).enumerate() {
            out.write_record([
                i.to_string(),
                seg.follower_id.to_string(),
                seg.leader_id.to_string(),
                t.to_string(),
                st.s.to_string(),
                st.v.to_string(),
                st.dv.to_string(),
                l.v.to_string(),
                l.a.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_segments<R: Read>(r: R) -> Result<(Metadata, Vec<Segment>)> {
    let mut r = BufReader::new(r);
    let mut meta = Metadata::new();
    let mut line = String::new();
    loop {
        let buf = r.fill_buf()?;
        if buf.first() != Some(&b'#') {
            break;
        }
        line.clear();
        r.read_line(&mut line)?;
        let body = line.trim_start_matches('#').trim();
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed metadata line {line:?}")))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let dt: f64 = meta
        .get("dt")
        .ok_or_else(|| Error::Format("metadata lacks `dt`".into()))?
        .parse()
        .map_err(|_| Error::Format("metadata `dt` is not a number".into()))?;

    let mut rdr = csv::Reader::from_reader(r);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != COLUMNS {
        return Err(Error::Format(format!("unexpected columns {headers:?}")));
    }
    let mut segments: Vec<Segment> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("data row {row}: bad `{}` value {:?}", COLUMNS[i], &rec[i])))
        };
        let int = |i: usize| -> Result<u64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("data row {row}: bad `{}` value {:?}", COLUMNS[i], &rec[i])))
        };
        let idx = int(0)? as usize;
        if idx == segments.len() {
            segments.push(Segment {
                follower_id: int(1)?,
                leader_id: int(2)?,
                dt,
                states: Vec::new(),
                leader: Vec::new(),
            });
        } else if idx + 1 != segments.len() {
            return Err(Error::Format(format!(
                "data row {row}: segment index {idx} out of order"
            )));
        }
        let seg = segments.last_mut().unwrap();
        if int(3)? as usize != seg.states.len() {
            return Err(Error::Format(format!("data row {row}: step out of order")));
        }
        seg.states.push(FollowerState::new(parse(4)?, parse(5)?, parse(6)?));
        seg.leader.push(LeaderSample {
            v: parse(7)?,
            a: parse(8)?,
        });
    }
    Ok((meta, segments))
}

pub fn save_segments(path: &Path, meta: &Metadata, segments: &[Segment]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_segments(&mut w, meta, segments)?;
    w.flush()?;
    Ok(())
}

pub fn load_segments(path: &Path) -> Result<(Metadata, Vec<Segment>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_segments(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let segs = vec![
            Segment {
                follower_id: 4,
                leader_id: 9,
                dt: 0.2,
                states: vec![FollowerState::new(12.345678901234567, 0.1 + 0.2, -1e-17); 3],
                leader: vec![LeaderSample { v: 1.0 / 3.0, a: -2.5 }; 3],
            },
            Segment {
                follower_id: 5,
                leader_id: 4,
                dt: 0.2,
                states: vec![FollowerState::new(1.0, 2.0, 3.0)],
                leader: vec![LeaderSample { v: 4.0, a: 5.0 }],
            },
        ];
        let mut meta = Metadata::new();
        meta.insert("dt".into(), "0.2".into());
        meta.insert("seed".into(), "7".into());
        let mut buf = Vec::new();
        write_segments(&mut buf, &meta, &segs).unwrap();
        let (m, back) = read_segments(buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back, segs);
    }

    #[test]
    fn missing_dt_is_rejected() {
        let text = "segment,follower_id,leader_id,step,s,v,dv,v_lead,a_lead\n";
        assert!(read_segments(text.as_bytes()).is_err());
    }
}
