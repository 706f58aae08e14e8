use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AudioSegment, Result, SignalError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r > 0.0)) {
            return Err(SignalError::InvalidRatios(format!(
                "all ratios must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SignalError::InvalidRatios(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Indices into the segment list, grouped by split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitAssignment {
    /// Parent track ids of each split, in train/val/test order.
    pub fn track_sets(&self, segments: &[AudioSegment]) -> [BTreeSet<String>; 3] {
        let ids = |idx: &[usize]| {
            idx.iter()
                .map(|&i| segments[i].parent_track_id.clone())
                .collect::<BTreeSet<_>>()
        };
        [ids(&self.train), ids(&self.val), ids(&self.test)]
    }
}

/// Allocates `n` items to three parts as close as possible (in L1) to the
/// requested ratios with every part non-empty. Ties between equal remainders
/// are broken with `rng`.
pub(crate) fn allocate_counts(n: usize, ratios: [f64; 3], rng: &mut ChaCha8Rng) -> [usize; 3] {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, x) in counts.iter_mut().zip(&ideal) {
        *c = x.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.shuffle(rng);
    // stable sort keeps the shuffled order among equal remainders
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    // every split needs at least one item; borrow from the part with most slack
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3)
                .filter(|&j| counts[j] > 1)
                .max_by(|&a, &b| {
                    let sa = counts[a] as f64 - ideal[a];
                    let sb = counts[b] as f64 - ideal[b];
                    sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
                })
                .expect("n >= 3 guarantees a donor");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Shuffles the tracks of every class with `seed` and allocates whole tracks
/// to train/val/test, so no recording contributes to more than one split.
pub fn split_track_disjoint(
    segments: &[AudioSegment],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    let mut by_class: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for s in segments {
        by_class
            .entry(s.label)
            .or_default()
            .insert(s.parent_track_id.as_str());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (&class, tracks) in &by_class {
        if tracks.len() < 3 {
            return Err(SignalError::ClassTooSmall {
                class,
                tracks: tracks.len(),
            });
        }
        let mut tracks: Vec<&str> = tracks.iter().copied().collect();
        tracks.shuffle(&mut rng);
        let counts = allocate_counts(tracks.len(), ratios.as_array(), &mut rng);
        let mut it = tracks.into_iter();
        for (split, &count) in counts.iter().enumerate() {
            for id in it.by_ref().take(count) {
                split_of.insert(id, split);
            }
        }
    }
    let mut out = SplitAssignment {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (i, s) in segments.iter().enumerate() {
        match split_of[s.parent_track_id.as_str()] {
            0 => out.train.push(i),
            1 => out.val.push(i),
            _ => out.test.push(i),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::AudioSegment;

    fn segments(classes: usize, tracks: usize, per_track: usize) -> Vec<AudioSegment> {
        let mut out = Vec::new();
        for c in 0..classes {
            for t in 0..tracks {
                for k in 0..per_track {
                    out.push(AudioSegment {
                        parent_track_id: format!("c{c}-t{t:02}"),
                        index: k,
                        offset: k as f64,
                        duration: 1.0,
                        samples: vec![0.0; 4],
                        sample_rate: 4,
                        label: c,
                    });
                }
            }
        }
        out
    }

    /// Brute force: every allocation with all parts >= 1 that minimizes the
    /// L1 distance to the ideal fractional counts.
    fn optimal_allocations(n: usize, r: [f64; 3]) -> Vec<[usize; 3]> {
        let mut best = f64::INFINITY;
        let mut all = Vec::new();
        for a in 1..n {
            for b in 1..n - a {
                let c = n - a - b;
                if c == 0 {
                    continue;
                }
                let d = (a as f64 - r[0] * n as f64).abs()
                    + (b as f64 - r[1] * n as f64).abs()
                    + (c as f64 - r[2] * n as f64).abs();
                if d < best - 1e-12 {
                    best = d;
                    all.clear();
                }
                if (d - best).abs() <= 1e-12 {
                    all.push([a, b, c]);
                }
            }
        }
        all
    }

    #[test]
    fn allocation_matches_rounding_oracle() {
        let ratio_sets = [[0.7, 0.15, 0.15], [0.8, 0.1, 0.1], [0.5, 0.25, 0.25], [0.6, 0.3, 0.1]];
        for r in ratio_sets {
            for n in 3..40 {
                for seed in 0..4 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let got = allocate_counts(n, r, &mut rng);
                    let ok = optimal_allocations(n, r);
                    assert!(ok.contains(&got), "n={n} r={r:?}: {got:?} not in {ok:?}");
                }
            }
        }
    }

    #[test]
    fn ten_tracks_per_class() {
        let segs = segments(3, 10, 2);
        let split = split_track_disjoint(&segs, SplitRatios::default(), 5).unwrap();
        let sets = split.track_sets(&segs);
        for class in 0..3 {
            let prefix = format!("c{class}-");
            let counts: Vec<usize> = sets
                .iter()
                .map(|s| s.iter().filter(|id| id.starts_with(&prefix)).count())
                .collect();
            assert!(counts == vec![7, 1, 2] || counts == vec![7, 2, 1], "{counts:?}");
        }
    }

    #[test]
    fn disjoint_and_complete() {
        let segs = segments(4, 8, 3);
        for seed in 0..20 {
            let split = split_track_disjoint(&segs, SplitRatios::default(), seed).unwrap();
            let [a, b, c] = split.track_sets(&segs);
            assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            let mut all: Vec<usize> = split
                .train
                .iter()
                .chain(&split.val)
                .chain(&split.test)
                .copied()
                .collect();
            all.sort();
            assert_eq!(all, (0..segs.len()).collect::<Vec<_>>());
            assert_eq!(split, split_track_disjoint(&segs, SplitRatios::default(), seed).unwrap());
        }
    }

    #[test]
    fn small_class_is_named() {
        let mut segs = segments(2, 5, 1);
        segs.retain(|s| !(s.label == 1 && s.parent_track_id >= "c1-t02".to_string()));
        match split_track_disjoint(&segs, SplitRatios::default(), 0) {
            Err(SignalError::ClassTooSmall { class: 1, tracks: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_ratios() {
        let segs = segments(1, 4, 1);
        let r = SplitRatios {
            train: 0.7,
            val: 0.2,
            test: 0.2,
        };
        assert!(matches!(
            split_track_disjoint(&segs, r, 0),
            Err(SignalError::InvalidRatios(_))
        ));
    }
}
