//! Greedy nearest-neighbour reordering that makes consecutive frames similar.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::DenseVector;

use super::{FrameDataset, Ordering};

pub const DEFAULT_BUFFER_SIZE: usize = 1000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Reorders `ds` into a temporally smooth stream.
///
/// After a random permutation the first frame becomes current and the next
/// `buffer_size` frames form the candidate buffer. The candidate closest to
/// the current frame (Euclidean, lowest slot on ties) is emitted and becomes
/// current; its slot is refilled from the remaining frames, or dropped once
/// they run out.
pub fn temporal_reshuffle<R: Rng + ?Sized>(
    ds: &FrameDataset,
    buffer_size: usize,
    rng: &mut R,
) -> Result<FrameDataset> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot reshuffle an empty dataset".into()));
    }
    if buffer_size == 0 {
        return Err(Error::InvalidArgument("buffer size must be >= 1".into()));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(rng);
    let frames = ds.frames();

    let split = (1 + buffer_size).min(perm.len());
    let mut buffer: Vec<usize> = perm[1..split].to_vec();
    let mut pool = perm[split..].iter().copied();
    let mut order = Vec::with_capacity(perm.len());
    let mut current = perm[0];
    order.push(current);
    while !buffer.is_empty() {
        let cur = frames[current].as_slice();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (slot, &cand) in buffer.iter().enumerate() {
            let d = sq_dist(cur, &frames[cand]);
            if d < best_d {
                best_d = d;
                best = slot;
            }
        }
        current = buffer[best];
        order.push(current);
        match pool.next() {
            Some(next) => buffer[best] = next,
            None => {
                buffer.remove(best);
            }
        }
    }
    ds.select(&order, Ordering::Temporal)
}

/// Mean Euclidean distance between consecutive frames.
pub fn mean_adjacent_distance(frames: &[DenseVector]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    frames
        .windows(2)
        .map(|w| sq_dist(&w[0], &w[1]).sqrt())
        .sum::<f64>()
        / (frames.len() - 1) as f64
}
