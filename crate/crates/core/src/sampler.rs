//! Stochastic snippet sampling.
//!
//! A snippet is a window of `m` consecutive frames identified by its 0-based
//! start index. Target videos get `r` snippets per visit whose starts are
//! pairwise at least `min_gap` apart, and repeated visits within one epoch
//! avoid starts already used for that video. Source videos get a single
//! uniformly drawn snippet.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// A window `[start, start + length)` of frames of one video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SnippetRef {
    /// Index of the video within its dataset.
    pub video: usize,
    pub start: usize,
    pub length: usize,
}

impl SnippetRef {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Rejection attempts before falling back to a randomized greedy sweep.
pub const MAX_REJECTIONS: usize = 100;

/// Number of distinct `m`-frame snippets in an `n`-frame video.
pub fn snippet_count(n: usize, m: usize) -> Result<usize> {
    if m == 0 || n < m {
        bail!(Argument, "cannot take {m}-frame snippets from a {n}-frame video");
    }
    Ok(n - m + 1)
}

/// Fails unless `r` starts with pairwise gap `min_gap` fit in an `n`-frame
/// video, i.e. `(r − 1)·min_gap ≤ n − m`.
pub fn check_target_feasible(n: usize, r: usize, m: usize, min_gap: usize) -> Result<()> {
    if r == 0 {
        bail!(Config, "r must be at least 1");
    }
    let last_start = snippet_count(n, m).map_err(|e| crate::Error::Config(alloc::format!("{e}")))? - 1;
    if (r - 1) * min_gap > last_start {
        bail!(
            Config,
            "cannot place {r} snippets of {m} frames at least {min_gap} apart in a {n}-frame video"
        );
    }
    Ok(())
}

/// Per-video record of snippet starts already used during the current epoch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EpochSamplingState {
    used: BTreeMap<usize, BTreeSet<usize>>,
}

impl EpochSamplingState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset_epoch(&mut self) {
        self.used.clear();
    }

    pub fn used_starts(&self, video: usize) -> Option<&BTreeSet<usize>> {
        self.used.get(&video)
    }

    pub fn is_empty(&self) -> bool {
        self.used.values().all(BTreeSet::is_empty)
    }
}

fn gaps_ok(starts: &[usize], min_gap: usize) -> bool {
    starts.iter().enumerate().all(|(i, &a)| {
        starts[i + 1..]
            .iter()
            .all(|&b| a != b && a.abs_diff(b) >= min_gap)
    })
}

/// Leftmost-first greedy selection over sorted candidates. It finds the
/// largest gap-respecting subset, so it also decides feasibility.
fn greedy_sorted(candidates: &[usize], min_gap: usize, r: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(r);
    for &c in candidates {
        if chosen.len() == r {
            break;
        }
        if chosen.last().is_none_or(|&last| c >= last + min_gap.max(1)) {
            chosen.push(c);
        }
    }
    chosen
}

fn pick_starts<R: Rng + ?Sized>(
    candidates: &[usize],
    r: usize,
    min_gap: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    if candidates.len() < r || greedy_sorted(candidates, min_gap, r).len() < r {
        return None;
    }
    for _ in 0..MAX_REJECTIONS {
        let draw: Vec<usize> = candidates.choose_multiple(rng, r).copied().collect();
        if gaps_ok(&draw, min_gap) {
            return Some(draw);
        }
    }
    // Randomized greedy sweep: visit candidates in random order and keep those
    // compatible with what has been chosen so far.
    let mut order = candidates.to_vec();
    order.shuffle(rng);
    let mut chosen: Vec<usize> = Vec::with_capacity(r);
    for c in order {
        if chosen.iter().all(|&s| s.abs_diff(c) >= min_gap.max(1)) {
            chosen.push(c);
            if chosen.len() == r {
                return Some(chosen);
            }
        }
    }
    Some(greedy_sorted(candidates, min_gap, r))
}

/// Draws `r` snippets of `m` frames from target video `video` (with `n`
/// frames), pairwise at least `min_gap` apart, avoiding this epoch's used
/// starts. When the unused starts can no longer host `r` snippets, the video's
/// used set is cleared and sampling proceeds over all starts.
pub fn sample_target_snippets<R: Rng + ?Sized>(
    video: usize,
    n: usize,
    r: usize,
    m: usize,
    min_gap: usize,
    state: &mut EpochSamplingState,
    rng: &mut R,
) -> Result<Vec<SnippetRef>> {
    check_target_feasible(n, r, m, min_gap)?;
    let last_start = n - m;
    let used = state.used.entry(video).or_default();
    let unused: Vec<usize> = (0..=last_start).filter(|s| !used.contains(s)).collect();
    let starts = match pick_starts(&unused, r, min_gap, rng) {
        Some(s) => s,
        None => {
            used.clear();
            let all: Vec<usize> = (0..=last_start).collect();
            match pick_starts(&all, r, min_gap, rng) {
                Some(s) => s,
                None => bail!(Config, "no feasible snippet placement for video {video}"),
            }
        }
    };
    used.extend(starts.iter().copied());
    Ok(starts
        .into_iter()
        .map(|start| SnippetRef {
            video,
            start,
            length: m,
        })
        .collect())
}

/// One uniformly random `m`-frame snippet of an `n`-frame source video.
pub fn sample_source_snippet<R: Rng + ?Sized>(
    video: usize,
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<SnippetRef> {
    let count = snippet_count(n, m)?;
    Ok(SnippetRef {
        video,
        start: rng.random_range(0..count),
        length: m,
    })
}

/// Fixed snippets used when stochastic sampling is disabled: `r` snippets at
/// starts `0, min_gap, 2·min_gap, …`, identical on every visit.
pub fn sequential_target_snippets(
    video: usize,
    n: usize,
    r: usize,
    m: usize,
    min_gap: usize,
) -> Result<Vec<SnippetRef>> {
    check_target_feasible(n, r, m, min_gap)?;
    Ok((0..r)
        .map(|l| SnippetRef {
            video,
            start: l * min_gap,
            length: m,
        })
        .collect())
}
