//! Synthetic networks and input streams.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::network::{Activation, LayerSpec, NetworkSpec};
use crate::quantize::ScaleVector;
use crate::tensor::{DenseMatrix, DenseVector};

use super::{FrameDataset, Ordering};

pub const RANDOM_NET_DIMS: [usize; 4] = [100, 100, 100, 100];

/// Per-weight-matrix multipliers. Their product is 1, so a ReLU net computes
/// the same function after scaling, but the first layer is too coarse for
/// `k = 1` and the second too fine.
pub const RANDOM_NET_FACTORS: [f64; 3] = [0.5, 8.0, 0.25];

/// The toy ReLU network with a linear readout and mis-scaled weights.
pub fn gen_random_network<R: Rng + ?Sized>(rng: &mut R) -> NetworkSpec {
    gen_random_network_with(rng, &RANDOM_NET_DIMS, &RANDOM_NET_FACTORS)
        .expect("fixture dimensions are valid")
}

/// Glorot-uniform weights times `factors[l]`, zero biases, ReLU hidden layers
/// and an identity readout.
pub fn gen_random_network_with<R: Rng + ?Sized>(
    rng: &mut R,
    dims: &[usize],
    factors: &[f64],
) -> Result<NetworkSpec> {
    if dims.len() < 2 || factors.len() != dims.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} dims need {} factors, got {}",
            dims.len(),
            dims.len().saturating_sub(1),
            factors.len()
        )));
    }
    let n = factors.len();
    let layers = dims
        .windows(2)
        .zip(factors)
        .enumerate()
        .map(|(l, (w, f))| {
            let r = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let weights = (0..w[0] * w[1]).map(|_| f * rng.random_range(-r..r)).collect();
            let act = if l + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            };
            LayerSpec::new(
                DenseMatrix::new(w[0], w[1], weights)?,
                DenseVector::zeros(w[1]),
                act,
                ScaleVector::default(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkSpec::new(layers)
}

/// Gaussian AR(1) stream `x_t = α·x_{t−1} + √(1−α²)·n_t` with unit marginal
/// variance. `α = 0` gives independent frames, `α = 1` a constant stream.
pub fn gen_random_stream<R: Rng + ?Sized>(
    rng: &mut R,
    n_frames: usize,
    d: usize,
    alpha: f64,
) -> Result<FrameDataset> {
    if n_frames == 0 || d == 0 {
        return Err(Error::InvalidArgument("stream needs at least one frame and unit".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("smoothness {alpha} outside [0, 1]")));
    }
    let innovation = (1.0 - alpha * alpha).sqrt();
    let mut frames: Vec<DenseVector> = Vec::with_capacity(n_frames);
    let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    frames.push(x.clone().into());
    for _ in 1..n_frames {
        for v in x.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v = alpha * *v + innovation * n;
        }
        frames.push(x.clone().into());
    }
    FrameDataset::new(frames, None, Ordering::Temporal)
}
