use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::trajectory::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Follower ID to split, ordered by ID.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment(pub BTreeMap<u64, Split>);

impl SplitAssignment {
    pub fn get(&self, follower_id: u64) -> Option<Split> {
        self.0.get(&follower_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.0.values().filter(|s| **s == split).count()
    }

    pub fn select<'a>(&self, segments: &'a [Segment], split: Split) -> Vec<&'a Segment> {
        segments
            .iter()
            .filter(|s| self.get(s.follower_id) == Some(split))
            .collect()
    }
}

/// Seeded shuffle of the unique follower IDs followed by a prefix cut with
/// rounded counts; every split with a nonzero ratio receives at least one ID.
pub fn split_by_follower(segments: &[Segment], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let ids: BTreeSet<u64> = segments.iter().map(|s| s.follower_id).collect();
    let mut ids: Vec<u64> = ids.into_iter().collect();
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if ids.len() < nonzero {
        return Err(Error::InsufficientData(format!(
            "{} follower IDs cannot fill {nonzero} nonempty splits",
            ids.len()
        )));
    }
    ids.shuffle(&mut rng::from_seed(seed));

    let n = ids.len();
    let mut counts = [0usize; 3];
    counts[0] = (ratios[0] * n as f64).round() as usize;
    counts[1] = ((ratios[1] * n as f64).round() as usize).min(n - counts[0].min(n));
    counts[0] = counts[0].min(n);
    counts[2] = n - counts[0] - counts[1];
    if ratios[2] == 0.0 && counts[2] > 0 {
        counts[0] += counts[2];
        counts[2] = 0;
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }

    let mut map = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, c) in Split::ALL.iter().zip(counts) {
        for id in it.by_ref().take(c) {
            map.insert(id, *split);
        }
    }
    Ok(SplitAssignment(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{FollowerState, LeaderSample};

    fn segs(ids: impl IntoIterator<Item = u64>) -> Vec<Segment> {
        ids.into_iter()
            .map(|id| Segment {
                follower_id: id,
                leader_id: 1000 + id,
                dt: 0.2,
                states: vec![FollowerState::new(10.0, 10.0, 0.0)],
                leader: vec![LeaderSample { v: 10.0, a: 0.0 }],
            })
            .collect()
    }

    #[test]
    fn ten_ids_split_six_one_three() {
        let a = split_by_follower(&segs(1..=10), [0.6, 0.1, 0.3], 0).unwrap();
        assert_eq!(a.0.len(), 10);
        assert_eq!(
            (a.count(Split::Train), a.count(Split::Val), a.count(Split::Test)),
            (6, 1, 3)
        );
        let b = split_by_follower(&segs(1..=10), [0.6, 0.1, 0.3], 0).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn all_train() {
        let a = split_by_follower(&segs(1..=7), [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(a.count(Split::Train), 7);
    }

    #[test]
    fn too_few_ids() {
        assert!(matches!(
            split_by_follower(&segs([1, 2]), [0.6, 0.1, 0.3], 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(split_by_follower(&segs([1, 2, 3]), [0.6, 0.1, 0.3], 0).is_ok());
        assert!(matches!(
            split_by_follower(&segs([1]), [0.5, 0.1, 0.3], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn segments_of_one_follower_share_a_split() {
        let mut s = segs(1..=20);
        s.extend(segs(1..=20));
        let a = split_by_follower(&s, [0.6, 0.1, 0.3], 5).unwrap();
        let total: usize = Split::ALL.iter().map(|sp| a.select(&s, *sp).len()).sum();
        assert_eq!(total, 40);
    }
}
