//! Fully-connected network specification, the four executors (original,
//! temporal-difference, rounding, sigma-delta) and scale baking.

mod exec;
mod format;

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub use exec::{
    forward_original, forward_rounding, forward_sigma_delta, forward_temporal_diff, Pass,
    SigmaDeltaRuntime, TemporalDiffRuntime,
};
pub use format::{read_network, write_network, FORMAT_VERSION, MAGIC};

use crate::error::{check_len, Error, Result};
use crate::quantize::ScaleVector;
use crate::tensor::{DenseMatrix, DenseVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softmax,
}

impl Activation {
    pub fn apply(self, u: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => u.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Softmax => softmax_in_place(u),
        }
    }

    /// `k·h(x) = h(k·x)` for `k > 0`.
    pub fn is_homogeneous(self) -> bool {
        matches!(self, Activation::Identity | Activation::Relu)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Softmax => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Softmax),
            _ => None,
        }
    }
}

pub(crate) fn softmax_in_place(u: &mut [f64]) {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in u.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    u.iter_mut().for_each(|v| *v /= sum);
}

/// One linear map plus nonlinearity; `scale` discretizes this layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
    pub activation: Activation,
    pub scale: ScaleVector,
}

impl LayerSpec {
    pub fn new(
        weights: DenseMatrix,
        bias: DenseVector,
        activation: Activation,
        scale: ScaleVector,
    ) -> Result<Self> {
        check_len("LayerSpec bias", weights.cols(), bias.len())?;
        scale.validate(weights.rows())?;
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::InvalidNetwork("non-finite parameters".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
            scale,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.cols()
    }
}

/// An immutable feed-forward network. Cheap to share across threads.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    discretize_readout: bool,
    scaled: OnceLock<Vec<DenseMatrix>>,
}

impl PartialEq for NetworkSpec {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.discretize_readout == other.discretize_readout
    }
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {i} outputs {} units but layer {} takes {}",
                    pair[0].d_out(),
                    i + 1,
                    pair[1].d_in()
                )));
            }
        }
        if let Some(i) = layers[..layers.len() - 1]
            .iter()
            .position(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::InvalidNetwork(format!(
                "softmax is only allowed on the final layer (found on layer {i})"
            )));
        }
        Ok(Self {
            layers,
            discretize_readout: true,
            scaled: OnceLock::new(),
        })
    }

    /// Whether the input of the last linear map is discretized (default) or
    /// computed densely every frame.
    pub fn with_discretized_readout(mut self, on: bool) -> Self {
        self.discretize_readout = on;
        self
    }

    pub fn discretize_readout(&self) -> bool {
        self.discretize_readout
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `[d_0, d_1, ..., d_L]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].d_in())
            .chain(self.layers.iter().map(LayerSpec::d_out))
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn scales(&self) -> Vec<ScaleVector> {
        self.layers.iter().map(|l| l.scale.clone()).collect()
    }

    /// Whether layer `l` receives its input as integer events.
    pub fn is_discretized(&self, l: usize) -> bool {
        self.discretize_readout || l + 1 < self.layers.len()
    }

    /// Same weights, new per-layer input scales.
    pub fn with_scales(&self, scales: &[ScaleVector]) -> Result<Self> {
        check_len("NetworkSpec::with_scales", self.layers.len(), scales.len())?;
        let layers = self
            .layers
            .iter()
            .zip(scales)
            .map(|(l, k)| {
                LayerSpec::new(l.weights.clone(), l.bias.clone(), l.activation, k.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkSpec::new(layers)?.with_discretized_readout(self.discretize_readout))
    }

    /// `W_l / k_l` (row `i` divided by `k_l[i]`), computed once per network.
    pub fn scaled_weights(&self, l: usize) -> &DenseMatrix {
        &self.scaled.get_or_init(|| {
            self.layers
                .iter()
                .map(|layer| {
                    let inv: Vec<f64> = layer
                        .scale
                        .expand(layer.d_in())
                        .iter()
                        .map(|k| 1.0 / k)
                        .collect();
                    layer
                        .weights
                        .rescaled(&inv, &vec![1.0; layer.d_out()])
                        .expect("shapes validated at construction")
                })
                .collect()
        })[l]
    }
}

/// A network whose discretization scales were folded into its parameters.
///
/// Every layer of `net` has `k = 1`. The first layer's scale cannot be folded
/// into anything upstream, so callers multiply raw inputs by `input_scale`
/// (see [`BakedNetwork::scale_input`]) before running `net`.
#[derive(Clone, Debug, PartialEq)]
pub struct BakedNetwork {
    pub net: NetworkSpec,
    pub input_scale: ScaleVector,
}

impl BakedNetwork {
    pub fn scale_input(&self, x: &[f64]) -> Result<DenseVector> {
        self.input_scale.validate(x.len())?;
        Ok(self.input_scale.apply(x).into())
    }
}

/// Folds scales into weights and biases: `W' = W·k_{l+1}/k_l`, `b' = k_{l+1}·b`
/// (with `k_{L+1} = 1`). Requires homogeneous hidden activations.
pub fn bake_scales(net: &NetworkSpec) -> Result<BakedNetwork> {
    let n = net.depth();
    if let Some((i, l)) = net.layers[..n - 1]
        .iter()
        .enumerate()
        .find(|(_, l)| !l.activation.is_homogeneous())
    {
        return Err(Error::Unsupported(format!(
            "cannot bake scales through {:?} activation on hidden layer {i}",
            l.activation
        )));
    }
    let mut layers = Vec::with_capacity(n);
    for (l, layer) in net.layers.iter().enumerate() {
        let inv_in: Vec<f64> = layer
            .scale
            .expand(layer.d_in())
            .iter()
            .map(|k| 1.0 / k)
            .collect();
        let k_out = match net.layers.get(l + 1) {
            Some(next) => next.scale.expand(layer.d_out()),
            None => vec![1.0; layer.d_out()],
        };
        let weights = layer.weights.rescaled(&inv_in, &k_out)?;
        let bias: Vec<f64> = layer.bias.iter().zip(&k_out).map(|(b, k)| b * k).collect();
        layers.push(LayerSpec::new(
            weights,
            bias.into(),
            layer.activation,
            ScaleVector::Layer(1.0),
        )?);
    }
    Ok(BakedNetwork {
        net: NetworkSpec::new(layers)?.with_discretized_readout(net.discretize_readout),
        input_scale: net.layers[0].scale.clone(),
    })
}
