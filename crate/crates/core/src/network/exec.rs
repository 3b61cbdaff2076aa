use crate::cost::{LayerActivity, LayerCounts};
use crate::error::{check_len, Error, Result};
use crate::quantize::{round_half_up, Herder, TemporalDiff, TemporalIntegrator};
use crate::tensor::{
    dense_affine, dense_matvec, sparse_accumulate_into, DenseVector, OpLedger, SparseEventList,
};

use super::NetworkSpec;

/// Output of one frame plus the layer activity it produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Pass {
    pub output: DenseVector,
    pub activity: LayerActivity,
}

fn counts(net: &NetworkSpec, l: usize, input: &[f64], l1: u64, discretized: bool) -> LayerCounts {
    LayerCounts {
        width: net.layers[l].d_in(),
        fan_out: net.layers[l].d_out(),
        nonzero: input.iter().filter(|v| **v != 0.0).count() as u64,
        l1,
        discretized,
    }
}

/// Plain dense forward pass.
pub fn forward_original(net: &NetworkSpec, x: &[f64], ledger: &mut OpLedger) -> Result<Pass> {
    check_len("forward_original input", net.input_width(), x.len())?;
    let mut activity = LayerActivity::with_frames(1);
    let mut a = x.to_vec();
    for (l, layer) in net.layers.iter().enumerate() {
        activity.layers.push(counts(net, l, &a, 0, false));
        let mut u = dense_affine(&a, &layer.weights, &layer.bias, ledger)?.into_vec();
        layer.activation.apply(&mut u);
        a = u;
    }
    Ok(Pass {
        output: a.into(),
        activity,
    })
}

/// Stateless rounding network: each layer input `a` is sent as the events
/// `round(k·a)` against `W/k`, then bias and activation are applied.
pub fn forward_rounding(net: &NetworkSpec, x: &[f64], ledger: &mut OpLedger) -> Result<Pass> {
    check_len("forward_rounding input", net.input_width(), x.len())?;
    let mut activity = LayerActivity::with_frames(1);
    let mut a = x.to_vec();
    for (l, layer) in net.layers.iter().enumerate() {
        let mut u = if net.is_discretized(l) {
            let s: Vec<i64> = a
                .iter()
                .enumerate()
                .map(|(i, v)| round_half_up(v * layer.scale.get(i)) as i64)
                .collect();
            let events = SparseEventList::from_counts(&s);
            activity
                .layers
                .push(counts(net, l, &a, events.n_events(), true));
            let mut u = layer.bias.to_vec();
            ledger.int_adds += layer.d_out() as u64;
            sparse_accumulate_into(&events, net.scaled_weights(l), &mut u, ledger)?;
            u
        } else {
            activity.layers.push(counts(net, l, &a, 0, false));
            dense_affine(&a, &layer.weights, &layer.bias, ledger)?.into_vec()
        };
        layer.activation.apply(&mut u);
        a = u;
    }
    Ok(Pass {
        output: a.into(),
        activity,
    })
}

/// Per-layer `Δ_T` / `Σ_T` state of the temporal-difference network.
#[derive(Clone, Debug)]
pub struct TemporalDiffRuntime {
    layers: Vec<(TemporalDiff, TemporalIntegrator)>,
}

impl TemporalDiffRuntime {
    pub fn new(net: &NetworkSpec) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        TemporalDiff::new(l.d_in()),
                        TemporalIntegrator::starting_at(&l.bias),
                    )
                })
                .collect(),
        }
    }

    pub fn reset(&mut self, net: &NetworkSpec) {
        *self = Self::new(net);
    }

    fn check(&self, net: &NetworkSpec) -> Result<()> {
        check_len("temporal-difference runtime depth", net.depth(), self.layers.len())?;
        for (layer, (diff, acc)) in net.layers.iter().zip(&self.layers) {
            check_len("temporal-difference runtime width", layer.d_in(), diff.width())?;
            check_len("temporal-difference runtime width", layer.d_out(), acc.value().len())?;
        }
        Ok(())
    }
}

/// Temporal-difference network: layers exchange exact activation changes and
/// integrate after each linear map. Same function as [`forward_original`].
pub fn forward_temporal_diff(
    net: &NetworkSpec,
    runtime: &mut TemporalDiffRuntime,
    x: &[f64],
    ledger: &mut OpLedger,
) -> Result<DenseVector> {
    check_len("forward_temporal_diff input", net.input_width(), x.len())?;
    runtime.check(net)?;
    let mut a = x.to_vec();
    for (layer, (diff, acc)) in net.layers.iter().zip(runtime.layers.iter_mut()) {
        let delta = diff.step(&a)?;
        let v = dense_matvec(&delta, &layer.weights, ledger)?;
        let mut u = acc.step(&v)?.into_vec();
        layer.activation.apply(&mut u);
        a = u;
    }
    Ok(a.into())
}

#[derive(Clone, Debug)]
struct SigmaDeltaLayer {
    diff: TemporalDiff,
    herd: Herder,
    u: Vec<f64>,
    scaled_input: Vec<f64>,
    events: Vec<i64>,
}

/// Streaming state of a sigma-delta network: per layer the `Δ_T` of the
/// scaled input, the herding residual, and the integrated pre-activation `u`
/// (bias pre-loaded at reset).
#[derive(Clone, Debug)]
pub struct SigmaDeltaRuntime {
    layers: Vec<SigmaDeltaLayer>,
    frames: u64,
}

impl SigmaDeltaRuntime {
    pub fn new(net: &NetworkSpec) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| SigmaDeltaLayer {
                    diff: TemporalDiff::new(l.d_in()),
                    herd: Herder::new(l.d_in()),
                    u: l.bias.to_vec(),
                    scaled_input: vec![0.0; l.d_in()],
                    events: vec![0; l.d_in()],
                })
                .collect(),
            frames: 0,
        }
    }

    /// Sequence boundary.
    pub fn reset(&mut self, net: &NetworkSpec) {
        *self = Self::new(net);
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    /// Integrated pre-activations, one vector per layer.
    pub fn pre_activations(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().map(|l| l.u.as_slice())
    }

    /// Rebuilds every accumulator from a rounding pass on `x`, discarding float
    /// drift accumulated over long streams. The state afterwards is what an
    /// exact-arithmetic runtime would hold after a stream ending in `x`.
    pub fn resync(&mut self, net: &NetworkSpec, x: &[f64]) -> Result<()> {
        check_len("resync input", net.input_width(), x.len())?;
        self.check(net)?;
        let mut scratch = OpLedger::default();
        let mut a = x.to_vec();
        for (l, (layer, st)) in net.layers.iter().zip(self.layers.iter_mut()).enumerate() {
            let mut u = if net.is_discretized(l) {
                let z = layer.scale.apply(&a);
                let s: Vec<i64> = z.iter().map(|v| round_half_up(*v) as i64).collect();
                let phi: Vec<f64> = z.iter().zip(&s).map(|(z, s)| z - *s as f64).collect();
                st.diff.set_last(&z);
                st.herd.set_residual(&phi);
                let mut u = layer.bias.to_vec();
                sparse_accumulate_into(
                    &SparseEventList::from_counts(&s),
                    net.scaled_weights(l),
                    &mut u,
                    &mut scratch,
                )?;
                st.u.copy_from_slice(&u);
                u
            } else {
                dense_affine(&a, &layer.weights, &layer.bias, &mut scratch)?.into_vec()
            };
            layer.activation.apply(&mut u);
            a = u;
        }
        Ok(())
    }

    fn check(&self, net: &NetworkSpec) -> Result<()> {
        if self.layers.len() != net.depth()
            || self
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(st, l)| st.u.len() != l.d_out() || st.diff.width() != l.d_in())
        {
            return Err(Error::InvalidNetwork(format!(
                "sigma-delta runtime was built for a different network (dims {:?})",
                net.dims()
            )));
        }
        Ok(())
    }
}

/// Sigma-delta network frame: each layer herds the change of its scaled
/// input into integer events and adds `events · W/k` into its running
/// pre-activation. Outputs equal [`forward_rounding`] on the current frame.
pub fn forward_sigma_delta(
    net: &NetworkSpec,
    runtime: &mut SigmaDeltaRuntime,
    x: &[f64],
    ledger: &mut OpLedger,
) -> Result<Pass> {
    check_len("forward_sigma_delta input", net.input_width(), x.len())?;
    runtime.check(net)?;
    let mut activity = LayerActivity::with_frames(1);
    let mut a = x.to_vec();
    for (l, (layer, st)) in net.layers.iter().zip(runtime.layers.iter_mut()).enumerate() {
        let mut u = if net.is_discretized(l) {
            for (i, (z, v)) in st.scaled_input.iter_mut().zip(&a).enumerate() {
                *z = v * layer.scale.get(i);
            }
            let delta = st.diff.step(&st.scaled_input)?;
            st.herd.step_into(&delta, &mut st.events)?;
            let events = SparseEventList::from_counts(&st.events);
            activity
                .layers
                .push(counts(net, l, &a, events.n_events(), true));
            sparse_accumulate_into(&events, net.scaled_weights(l), &mut st.u, ledger)?;
            st.u.clone()
        } else {
            activity.layers.push(counts(net, l, &a, 0, false));
            dense_affine(&a, &layer.weights, &layer.bias, ledger)?.into_vec()
        };
        layer.activation.apply(&mut u);
        a = u;
    }
    runtime.frames += 1;
    Ok(Pass {
        output: a.into(),
        activity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, LayerSpec};
    use crate::quantize::ScaleVector;
    use crate::tensor::DenseMatrix;

    fn hand_net() -> NetworkSpec {
        NetworkSpec::new(vec![
            LayerSpec::new(
                DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap(),
                vec![0.5, 0.0].into(),
                Activation::Relu,
                ScaleVector::Layer(1.0),
            )
            .unwrap(),
            LayerSpec::new(
                DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 1.0]]).unwrap(),
                vec![0.0, -1.0].into(),
                Activation::Identity,
                ScaleVector::Layer(1.0),
            )
            .unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn original_hand_computed() {
        // x = [1, 2]: u1 = [1 + 4 + 0.5, -1 + 1] = [5.5, 0] -> relu [5.5, 0]
        // u2 = [5.5, 11 - 1] = [5.5, 10]
        let mut ledger = OpLedger::default();
        let pass = forward_original(&hand_net(), &[1.0, 2.0], &mut ledger).unwrap();
        assert_eq!(pass.output.as_slice(), &[5.5, 10.0]);
        assert_eq!(ledger.total(), 16);
        assert_eq!(pass.activity.layers[1].nonzero, 1);
    }

    #[test]
    fn zero_net_gives_zero() {
        let net = NetworkSpec::new(vec![LayerSpec::new(
            DenseMatrix::zeros(3, 2),
            DenseVector::zeros(2),
            Activation::Relu,
            ScaleVector::Layer(1.0),
        )
        .unwrap()])
        .unwrap();
        let out = forward_original(&net, &[1.0, -2.0, 3.0], &mut OpLedger::default()).unwrap();
        assert_eq!(out.output.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn rounding_hand_trace() {
        let net = hand_net();
        let mut ledger = OpLedger::default();
        // s0 = [2, 1]; u1 = [4.5, -1.5] -> relu [4.5, 0] -> s1 = [5, 0]; u2 = [5, 9]
        let got = forward_rounding(&net, &[2.0, 1.0], &mut ledger).unwrap();
        assert_eq!(got.activity.layers[0].l1, 3);
        assert_eq!(got.activity.layers[1].l1, 5);
        assert_eq!(got.output.as_slice(), &[5.0, 9.0]);
        // 3 events into width 2, 5 into width 2, plus 2 + 2 bias adds
        assert_eq!(ledger.int_adds, 3 * 2 + 5 * 2 + 4);
    }

    #[test]
    fn rounding_is_lossless_on_integers() {
        let net = NetworkSpec::new(vec![
            LayerSpec::new(
                DenseMatrix::from_rows(&[vec![1.0, -2.0, 0.0], vec![3.0, 1.0, -1.0]]).unwrap(),
                vec![1.0, 0.0, -2.0].into(),
                Activation::Identity,
                ScaleVector::Layer(1.0),
            )
            .unwrap(),
            LayerSpec::new(
                DenseMatrix::from_rows(&[vec![2.0], vec![-1.0], vec![4.0]]).unwrap(),
                vec![3.0].into(),
                Activation::Identity,
                ScaleVector::Layer(1.0),
            )
            .unwrap(),
        ])
        .unwrap();
        for x in [[1.0, 2.0], [-3.0, 0.0], [5.0, -4.0]] {
            let want = forward_original(&net, &x, &mut OpLedger::default()).unwrap();
            let got = forward_rounding(&net, &x, &mut OpLedger::default()).unwrap();
            assert_eq!(want.output, got.output);
        }
    }

    #[test]
    fn sigma_delta_repeated_frame_is_free() {
        let net = hand_net();
        let mut rt = SigmaDeltaRuntime::new(&net);
        let mut ledger = OpLedger::default();
        let first = forward_sigma_delta(&net, &mut rt, &[0.7, 1.3], &mut ledger).unwrap();
        let round = forward_rounding(&net, &[0.7, 1.3], &mut OpLedger::default()).unwrap();
        assert_eq!(first.output, round.output);
        let before = ledger;
        let second = forward_sigma_delta(&net, &mut rt, &[0.7, 1.3], &mut ledger).unwrap();
        assert_eq!(second.output, first.output);
        assert_eq!(ledger, before);
        assert_eq!(second.activity.layers[0].l1, 0);
        assert_eq!(rt.frames(), 2);
    }

    #[test]
    fn runtime_mismatch_is_rejected() {
        let net = hand_net();
        let other = NetworkSpec::new(vec![LayerSpec::new(
            DenseMatrix::zeros(2, 3),
            DenseVector::zeros(3),
            Activation::Relu,
            ScaleVector::Layer(1.0),
        )
        .unwrap()])
        .unwrap();
        let mut rt = SigmaDeltaRuntime::new(&other);
        assert!(matches!(
            forward_sigma_delta(&net, &mut rt, &[0.0, 0.0], &mut OpLedger::default()),
            Err(Error::InvalidNetwork(_))
        ));
        let mut td = TemporalDiffRuntime::new(&other);
        assert!(forward_temporal_diff(&net, &mut td, &[0.0, 0.0], &mut OpLedger::default()).is_err());
        assert!(matches!(
            forward_rounding(&net, &[0.0], &mut OpLedger::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn resync_matches_history() {
        let net = hand_net();
        let frames = [[0.2, 1.9], [1.4, -0.3], [2.6, 0.8]];
        let mut streamed = SigmaDeltaRuntime::new(&net);
        for f in &frames {
            forward_sigma_delta(&net, &mut streamed, f, &mut OpLedger::default()).unwrap();
        }
        let mut synced = SigmaDeltaRuntime::new(&net);
        synced.resync(&net, &frames[2]).unwrap();
        for (a, b) in streamed.pre_activations().zip(synced.pre_activations()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let next = [0.9, 0.1];
        let a = forward_sigma_delta(&net, &mut streamed, &next, &mut OpLedger::default()).unwrap();
        let b = forward_sigma_delta(&net, &mut synced, &next, &mut OpLedger::default()).unwrap();
        assert_eq!(a.activity, b.activity);
    }

    #[test]
    fn dense_readout_flag() {
        let net = hand_net().with_discretized_readout(false);
        let mut ledger = OpLedger::default();
        let pass = forward_rounding(&net, &[0.7, 1.3], &mut ledger).unwrap();
        assert!(!pass.activity.layers[1].discretized);
        assert_eq!(ledger.float_mults, 4);
        let mut rt = SigmaDeltaRuntime::new(&net);
        let sd = forward_sigma_delta(&net, &mut rt, &[0.7, 1.3], &mut OpLedger::default()).unwrap();
        assert_eq!(sd.output, pass.output);
    }
}
