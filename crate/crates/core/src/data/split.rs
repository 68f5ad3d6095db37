use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ClipPair;
use crate::error::{Error, Result};

/// Song-disjoint train/validation/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ClipPair>,
    pub val: Vec<ClipPair>,
    pub test: Vec<ClipPair>,
    pub ratios: [f64; 3],
}

impl DatasetSplit {
    pub fn parts(&self) -> [&[ClipPair]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Shuffle songs with `seed`, then hand each song to the split whose pair
/// count is furthest below its target (ties go to the earlier split).
///
/// Once the songs left are only just enough to give every still-empty split
/// one song, they are dealt to the empty splits in order, so no split ends
/// up empty.
pub fn split_by_song(pairs: &[ClipPair], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6
    {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let mut songs: BTreeMap<&str, Vec<&ClipPair>> = BTreeMap::new();
    for p in pairs {
        songs.entry(p.song_id.as_str()).or_default().push(p);
    }
    if songs.len() < 3 {
        return Err(Error::Config(format!(
            "song-disjoint splitting needs at least 3 songs, found {}",
            songs.len()
        )));
    }
    let mut order: Vec<&str> = songs.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = pairs.len() as f64;
    let mut counts = [0usize; 3];
    let mut parts: [Vec<ClipPair>; 3] = Default::default();
    for (pos, song) in order.iter().enumerate() {
        let remaining = order.len() - pos;
        let empty: Vec<usize> = (0..3).filter(|&s| counts[s] == 0).collect();
        let target = if remaining <= empty.len() {
            empty[0]
        } else {
            let deficit = |s: usize| ratios[s] * total - counts[s] as f64;
            (0..3).fold(0, |best, s| if deficit(s) > deficit(best) + 1e-9 { s } else { best })
        };
        let clips = &songs[song];
        counts[target] += clips.len();
        parts[target].extend(clips.iter().map(|&p| p.clone()));
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit {
        train,
        val,
        test,
        ratios,
    })
}
