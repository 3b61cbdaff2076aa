//! Frame datasets: IDX files, temporal reordering and synthetic fixtures.

mod idx;
mod reshuffle;
mod synth;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use reshuffle::{mean_adjacent_distance, temporal_reshuffle, DEFAULT_BUFFER_SIZE};
pub use synth::{
    gen_random_network, gen_random_network_with, gen_random_stream, RANDOM_NET_DIMS,
    RANDOM_NET_FACTORS,
};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::tensor::DenseVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    Original,
    Temporal,
}

/// An ordered stream of equal-width frames with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDataset {
    frames: Vec<DenseVector>,
    labels: Option<Vec<u8>>,
    ordering: Ordering,
}

impl FrameDataset {
    pub fn new(frames: Vec<DenseVector>, labels: Option<Vec<u8>>, ordering: Ordering) -> Result<Self> {
        if let Some(first) = frames.first() {
            for f in &frames {
                check_len("FrameDataset frame width", first.len(), f.len())?;
            }
        }
        if let Some(l) = &labels {
            check_len("FrameDataset labels", frames.len(), l.len())?;
        }
        Ok(Self {
            frames,
            labels,
            ordering,
        })
    }

    pub fn frames(&self) -> &[DenseVector] {
        &self.frames
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn ordering(&self) -> Ordering {
        self.ordering
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    /// The frames at `indices`, in that order.
    pub fn select(&self, indices: &[usize], ordering: Ordering) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "frame index {bad} out of range for {} frames",
                self.len()
            )));
        }
        Ok(Self {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            ordering,
        })
    }

    /// The first `n` frames (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            frames: self.frames[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            ordering: self.ordering,
        }
    }

    /// Splits off the last `n` frames.
    pub fn split_tail(&self, n: usize) -> (Self, Self) {
        let cut = self.len() - n.min(self.len());
        let part = |r: std::ops::Range<usize>| Self {
            frames: self.frames[r.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[r].to_vec()),
            ordering: self.ordering,
        };
        (part(0..cut), part(cut..self.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shapes() {
        let f = |v: &[f64]| DenseVector::from(v);
        assert!(FrameDataset::new(vec![f(&[1.0]), f(&[1.0, 2.0])], None, Ordering::Original).is_err());
        assert!(FrameDataset::new(vec![f(&[1.0])], Some(vec![1, 2]), Ordering::Original).is_err());
        let ds = FrameDataset::new(vec![f(&[1.0]), f(&[2.0]), f(&[3.0])], Some(vec![0, 1, 2]), Ordering::Original)
            .unwrap();
        assert_eq!(ds.width(), 1);
        let s = ds.select(&[2, 0], Ordering::Temporal).unwrap();
        assert_eq!(s.labels(), Some(&[2u8, 0][..]));
        assert_eq!(s.frames()[0][0], 3.0);
        assert!(ds.select(&[3], Ordering::Original).is_err());
        let (a, b) = ds.split_tail(1);
        assert_eq!((a.len(), b.len()), (2, 1));
        assert_eq!(b.labels(), Some(&[2u8][..]));
        assert_eq!(ds.head(10).len(), 3);
    }
}
