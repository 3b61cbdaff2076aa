//! Runs the four executors side by side over one stream.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{
    forward_original, forward_rounding, forward_sigma_delta, forward_temporal_diff, NetworkSpec,
    SigmaDeltaRuntime, TemporalDiffRuntime,
};
use crate::tensor::{DenseVector, OpLedger};

pub const SIGMA_DELTA_TOLERANCE: f64 = 1e-4;
pub const TEMPORAL_DIFF_TOLERANCE: f64 = 1e-6;

/// `max|a − b| / max(1, max|b|)`.
pub fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(1.0, f64::max);
    diff / scale
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub frames: usize,
    /// Worst per-frame deviation of sigma-delta from rounding.
    pub sigma_delta_vs_rounding: f64,
    /// Worst per-frame deviation of temporal-difference from original.
    pub temporal_diff_vs_original: f64,
    pub original: OpLedger,
    pub temporal_diff: OpLedger,
    pub rounding: OpLedger,
    pub sigma_delta: OpLedger,
    /// Sigma-delta operations after the first frame.
    pub sigma_delta_after_first: u64,
}

impl EquivalenceReport {
    pub fn passes(&self) -> bool {
        self.sigma_delta_vs_rounding < SIGMA_DELTA_TOLERANCE
            && self.temporal_diff_vs_original < TEMPORAL_DIFF_TOLERANCE
    }
}

pub fn equivalence_check(net: &NetworkSpec, frames: &[DenseVector]) -> Result<EquivalenceReport> {
    let mut report = EquivalenceReport {
        frames: frames.len(),
        ..EquivalenceReport::default()
    };
    let mut td = TemporalDiffRuntime::new(net);
    let mut sd = SigmaDeltaRuntime::new(net);
    for (t, x) in frames.iter().enumerate() {
        let orig = forward_original(net, x, &mut report.original)?.output;
        let tdo = forward_temporal_diff(net, &mut td, x, &mut report.temporal_diff)?;
        let round = forward_rounding(net, x, &mut report.rounding)?.output;
        let mut ledger = OpLedger::default();
        let sdo = forward_sigma_delta(net, &mut sd, x, &mut ledger)?.output;
        if t > 0 {
            report.sigma_delta_after_first += ledger.total();
        }
        report.sigma_delta += ledger;
        report.sigma_delta_vs_rounding = report
            .sigma_delta_vs_rounding
            .max(relative_deviation(&sdo, &round));
        report.temporal_diff_vs_original = report
            .temporal_diff_vs_original
            .max(relative_deviation(&tdo, &orig));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_random_network, gen_random_stream};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deviation_metric() {
        assert_eq!(relative_deviation(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_deviation(&[0.5], &[0.0]), 0.5);
        assert_eq!(relative_deviation(&[10.0, 0.0], &[20.0, 0.0]), 0.5);
    }

    #[test]
    fn random_fixture_passes() {
        let net = gen_random_network(&mut ChaCha8Rng::seed_from_u64(1));
        let s = gen_random_stream(&mut ChaCha8Rng::seed_from_u64(2), 100, 100, 0.8).unwrap();
        let r = equivalence_check(&net, s.frames()).unwrap();
        assert!(r.passes(), "{r:?}");
        assert_eq!(r.frames, 100);
        assert!(r.sigma_delta.total() < r.rounding.total());
    }

    #[test]
    fn constant_stream_is_free_after_first_frame() {
        let net = gen_random_network(&mut ChaCha8Rng::seed_from_u64(1));
        let s = gen_random_stream(&mut ChaCha8Rng::seed_from_u64(3), 20, 100, 1.0).unwrap();
        let r = equivalence_check(&net, s.frames()).unwrap();
        assert_eq!(r.sigma_delta_after_first, 0);
        assert!(r.sigma_delta.total() > 0);
    }
}
