//! Gradient-based search for the quantization scales `k_l`.
//!
//! The loss is `L_error + λ·L_comp` where `L_error` compares the rounding
//! network's output to the original network's and `L_comp` counts the
//! additions of one rounding pass. Scales are trained as `κ = log k`. Rounding
//! is passed straight through on the backward pass, and each `κ_l` sees only
//! its own layer's computational term.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::LayerActivity;
use crate::error::{check_len, Error, Result};
use crate::network::{forward_original, Activation, NetworkSpec};
use crate::quantize::{round_half_up, ScaleVector};
use crate::tensor::{DenseVector, OpLedger};

const KL_FLOOR: f64 = 1e-12;

/// How the quantizer behaves in the training forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    /// `round(k·a)` forward, identity backward.
    StraightThrough,
    /// `k·a + ε`, `ε ~ U(−½, ½)`.
    UniformNoise,
    /// No quantization at all. The error gradient is then exactly zero.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// `D_KL(f_true ‖ f_round)`.
    Kl,
    /// Squared Euclidean distance.
    L2,
}

impl Distance {
    /// KL for softmax readouts, L2 otherwise.
    pub fn for_output(act: Activation) -> Self {
        match act {
            Activation::Softmax => Distance::Kl,
            _ => Distance::L2,
        }
    }
}

/// `κ_l = log k_l` per layer: one entry for a layer-wide scale, `d_l` entries
/// for unitwise scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogScales {
    kappa: Vec<Vec<f64>>,
}

impl LogScales {
    pub fn zeros(net: &NetworkSpec, unitwise: bool) -> Self {
        Self {
            kappa: net
                .layers()
                .iter()
                .map(|l| vec![0.0; if unitwise { l.d_in() } else { 1 }])
                .collect(),
        }
    }

    /// Logs of the scales currently stored in `net`.
    pub fn from_net(net: &NetworkSpec) -> Self {
        Self {
            kappa: net
                .layers()
                .iter()
                .map(|l| match &l.scale {
                    ScaleVector::Layer(k) => vec![k.ln()],
                    ScaleVector::Unit(ks) => ks.iter().map(|k| k.ln()).collect(),
                })
                .collect(),
        }
    }

    /// Layerwise scales `k_l`.
    pub fn from_layer_scales(ks: &[f64]) -> Result<Self> {
        if let Some(k) = ks.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::InvalidScale(*k));
        }
        Self::from_kappas(ks.iter().map(|k| vec![k.ln()]).collect())
    }

    pub fn from_kappas(kappa: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self { kappa };
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("log-scales {:?}", s.kappa)));
        }
        Ok(s)
    }

    pub fn kappas(&self) -> &[Vec<f64>] {
        &self.kappa
    }

    pub fn depth(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_finite(&self) -> bool {
        self.kappa.iter().flatten().all(|v| v.is_finite())
    }

    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        check_len("LogScales depth", net.depth(), self.depth())?;
        for (l, (ks, layer)) in self.kappa.iter().zip(net.layers()).enumerate() {
            if ks.len() != 1 && ks.len() != layer.d_in() {
                return Err(Error::InvalidArgument(format!(
                    "layer {l}: {} log-scales for {} inputs",
                    ks.len(),
                    layer.d_in()
                )));
            }
        }
        Ok(())
    }

    pub fn scales(&self) -> Result<Vec<ScaleVector>> {
        self.kappa
            .iter()
            .map(|ks| match ks.as_slice() {
                [k] => ScaleVector::layer(k.exp()),
                _ => ScaleVector::unit(ks.iter().map(|k| k.exp()).collect()),
            })
            .collect()
    }

    /// Geometric mean of `k` per layer (the scale itself for layerwise scales).
    pub fn layer_k(&self) -> Vec<f64> {
        self.kappa
            .iter()
            .map(|ks| (ks.iter().sum::<f64>() / ks.len() as f64).exp())
            .collect()
    }

    /// `net` with these scales installed.
    pub fn apply(&self, net: &NetworkSpec) -> Result<NetworkSpec> {
        self.check(net)?;
        net.with_scales(&self.scales()?)
    }

    fn k(&self, l: usize, i: usize) -> f64 {
        let ks = &self.kappa[l];
        if ks.len() == 1 { ks[0] } else { ks[i] }.exp()
    }
}

/// `D(y_round, y_true)`.
pub fn error_loss(y_round: &[f64], y_true: &[f64], distance: Distance) -> Result<f64> {
    check_len("error_loss", y_true.len(), y_round.len())?;
    match distance {
        Distance::L2 => Ok(y_round
            .iter()
            .zip(y_true)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()),
        Distance::Kl => {
            check_probability("f_round", y_round)?;
            check_probability("f_true", y_true)?;
            Ok(y_true
                .iter()
                .zip(y_round)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p.ln() - q.max(KL_FLOOR).ln()))
                .sum())
        }
    }
}

fn check_probability(name: &str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotAProbability(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// `∂D/∂y_round`.
fn error_grad(y_round: &[f64], y_true: &[f64], distance: Distance) -> Vec<f64> {
    match distance {
        Distance::L2 => y_round
            .iter()
            .zip(y_true)
            .map(|(a, b)| 2.0 * (a - b))
            .collect(),
        Distance::Kl => y_round
            .iter()
            .zip(y_true)
            .map(|(q, p)| if *q > KL_FLOOR { -p / q } else { 0.0 })
            .collect(),
    }
}

/// `Σ_l |s_l|_L1 · d_{l+1}` over every layer whose input is discretized.
pub fn comp_loss(activity: &LayerActivity) -> f64 {
    activity
        .layers
        .iter()
        .filter(|c| c.discretized)
        .map(|c| (c.l1 * c.fan_out as u64) as f64)
        .sum()
}

/// Settings for one gradient evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradConfig {
    pub lambda: f64,
    pub surrogate: Surrogate,
    /// `None` picks from the output activation.
    pub distance: Option<Distance>,
}

impl GradConfig {
    pub fn distance_for(&self, net: &NetworkSpec) -> Distance {
        self.distance
            .unwrap_or_else(|| Distance::for_output(net.output_activation()))
    }
}

/// Losses and `∂/∂κ` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad {
    pub output: DenseVector,
    pub error: f64,
    /// Computed from the true rounding of every discretized layer.
    pub comp: f64,
    pub error_grad: Vec<Vec<f64>>,
    pub comp_grad: Vec<Vec<f64>>,
}

impl SampleGrad {
    /// `∂L_error/∂κ + λ·∂L_comp,l/∂κ_l`.
    pub fn total(&self, lambda: f64) -> Vec<Vec<f64>> {
        self.error_grad
            .iter()
            .zip(&self.comp_grad)
            .map(|(e, c)| e.iter().zip(c).map(|(e, c)| e + lambda * c).collect())
            .collect()
    }
}

/// Gradient of the tradeoff loss for input `x`. Noise for
/// [`Surrogate::UniformNoise`] is drawn from `rng` layer by layer, unit by
/// unit, so re-seeding reproduces the same draw.
pub fn grad_kappa<R: Rng + ?Sized>(
    net: &NetworkSpec,
    x: &[f64],
    kappas: &LogScales,
    cfg: &GradConfig,
    rng: &mut R,
) -> Result<SampleGrad> {
    let y_true = forward_original(net, x, &mut OpLedger::default())?.output;
    grad_against(net, x, &y_true, kappas, cfg, rng)
}

struct LayerTape {
    a: Vec<f64>,
    a_hat: Vec<f64>,
    /// Surrogate quantizer output `q = Q(k·a)`.
    q: Vec<f64>,
    u: Vec<f64>,
}

fn grad_against<R: Rng + ?Sized>(
    net: &NetworkSpec,
    x: &[f64],
    y_true: &[f64],
    kappas: &LogScales,
    cfg: &GradConfig,
    rng: &mut R,
) -> Result<SampleGrad> {
    check_len("grad_kappa input", net.input_width(), x.len())?;
    kappas.check(net)?;
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda {}", cfg.lambda)));
    }
    let distance = cfg.distance_for(net);
    let layers = net.layers();

    let mut tape: Vec<LayerTape> = Vec::with_capacity(layers.len());
    let mut comp = 0.0;
    let mut a = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let (a_hat, q) = if net.is_discretized(l) {
            let mut a_hat = Vec::with_capacity(a.len());
            let mut q = Vec::with_capacity(a.len());
            let mut l1 = 0.0;
            for (i, v) in a.iter().enumerate() {
                let k = kappas.k(l, i);
                let z = k * v;
                let r = round_half_up(z);
                l1 += r.abs();
                let qi = match cfg.surrogate {
                    Surrogate::StraightThrough => r,
                    Surrogate::UniformNoise => z + rng.random_range(-0.5..0.5),
                    Surrogate::Identity => z,
                };
                q.push(qi);
                a_hat.push(qi / k);
            }
            comp += l1 * layer.d_out() as f64;
            (a_hat, q)
        } else {
            (a.clone(), Vec::new())
        };
        let mut u = layer.bias.to_vec();
        for (ai, row) in a_hat.iter().zip(layer.weights.as_slice().chunks_exact(layer.d_out())) {
            if *ai != 0.0 {
                for (uj, w) in u.iter_mut().zip(row) {
                    *uj += ai * w;
                }
            }
        }
        let mut next = u.clone();
        layer.activation.apply(&mut next);
        tape.push(LayerTape { a, a_hat, q, u });
        a = next;
    }
    let y = a;
    let error = error_loss(&y, y_true, distance)?;
    if !error.is_finite() || !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "forward pass gave L_error={error}, log-scales {:?}",
            kappas.kappas()
        )));
    }

    let g_y = error_grad(&y, y_true, distance);
    let last = layers.len() - 1;
    let mut g_u = match layers[last].activation {
        Activation::Identity => g_y,
        Activation::Relu => relu_backward(&g_y, &tape[last].u),
        Activation::Softmax => {
            let dot: f64 = g_y.iter().zip(&y).map(|(g, p)| g * p).sum();
            y.iter().zip(&g_y).map(|(p, g)| p * (g - dot)).collect()
        }
    };

    let mut error_grad = vec![Vec::new(); layers.len()];
    let mut comp_grad = vec![Vec::new(); layers.len()];
    for l in (0..layers.len()).rev() {
        let n_kappa = kappas.kappas()[l].len();
        error_grad[l] = vec![0.0; n_kappa];
        comp_grad[l] = vec![0.0; n_kappa];
        let t = &tape[l];
        let discretized = net.is_discretized(l);
        if l == 0 && !discretized {
            break;
        }
        // Rounding passes the gradient straight through, so ∂â/∂a = 1.
        let g_a = layers[l].weights.mul_transposed(&g_u)?;
        if discretized {
            let fan_out = layers[l].d_out() as f64;
            for i in 0..t.a.len() {
                let slot = if n_kappa == 1 { 0 } else { i };
                // â = Q(k·a)/k with Q' = 1 gives ∂â/∂κ = a − â.
                error_grad[l][slot] += g_a[i] * (t.a[i] - t.a_hat[i]);
                let k_a = kappas.k(l, i) * t.a[i];
                if t.q[i] != 0.0 {
                    comp_grad[l][slot] += fan_out * t.q[i].signum() * k_a;
                }
            }
        }
        if l > 0 {
            g_u = match layers[l - 1].activation {
                Activation::Relu => relu_backward(&g_a, &tape[l - 1].u),
                _ => g_a,
            };
        }
    }

    let finite = |g: &[Vec<f64>]| g.iter().flatten().all(|v| v.is_finite());
    if !finite(&error_grad) || !finite(&comp_grad) {
        return Err(Error::NonFinite(format!(
            "gradient at log-scales {:?} (L_error={error})",
            kappas.kappas()
        )));
    }
    Ok(SampleGrad {
        output: y.into(),
        error,
        comp,
        error_grad,
        comp_grad,
    })
}

fn relu_backward(g: &[f64], u: &[f64]) -> Vec<f64> {
    g.iter()
        .zip(u)
        .map(|(g, u)| if *u > 0.0 { *g } else { 0.0 })
        .collect()
}

/// `κ ← κ − η·g`.
pub fn update_scales(kappas: &LogScales, grads: &[Vec<f64>], eta: f64) -> Result<LogScales> {
    check_len("update_scales depth", kappas.depth(), grads.len())?;
    let mut next = kappas.kappa.clone();
    for (ks, gs) in next.iter_mut().zip(grads) {
        check_len("update_scales layer", ks.len(), gs.len())?;
        for (k, g) in ks.iter_mut().zip(gs) {
            *k -= eta * g;
        }
    }
    LogScales::from_kappas(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffConfig {
    pub lambda: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub surrogate: Surrogate,
    pub distance: Option<Distance>,
    /// Train one scale per input unit instead of per layer.
    pub unitwise: bool,
    pub seed: u64,
    /// Stop after this many updates even if epochs remain.
    pub max_steps: Option<usize>,
    /// Abort when `L_error` stays above `divergence_factor ×` its initial
    /// value for `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TradeoffConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            eta: 0.01,
            epochs: 1,
            batch_size: 32,
            surrogate: Surrogate::StraightThrough,
            distance: None,
            unitwise: false,
            seed: 0,
            max_steps: None,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

impl TradeoffConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be finite and > 0");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be >= 1");
        }
        if self.divergence_factor <= 1.0 || self.divergence_patience == 0 {
            return bad("divergence factor must exceed 1 with nonzero patience");
        }
        Ok(())
    }

    fn grad_config(&self) -> GradConfig {
        GradConfig {
            lambda: self.lambda,
            surrogate: self.surrogate,
            distance: self.distance,
        }
    }
}

/// Batch means recorded before each update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lambda: f64,
    pub l_error: f64,
    pub l_comp: f64,
    /// Per-layer scale (geometric mean for unitwise scales) used at this step.
    pub k: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimized {
    pub scales: LogScales,
    pub trace: Vec<TraceRow>,
}

/// Trains the scales of `net` on `frames`, starting from the scales in `net`
/// (unitwise starts from their per-layer values broadcast to every unit).
pub fn optimize(net: &NetworkSpec, frames: &[DenseVector], cfg: &TradeoffConfig) -> Result<Optimized> {
    let mut init = LogScales::from_net(net);
    if cfg.unitwise {
        for (ks, layer) in init.kappa.iter_mut().zip(net.layers()) {
            if ks.len() == 1 {
                *ks = vec![ks[0]; layer.d_in()];
            }
        }
    } else {
        for ks in &mut init.kappa {
            if ks.len() > 1 {
                *ks = vec![ks.iter().sum::<f64>() / ks.len() as f64];
            }
        }
    }
    optimize_from(net, frames, init, cfg)
}

pub fn optimize_from(
    net: &NetworkSpec,
    frames: &[DenseVector],
    init: LogScales,
    cfg: &TradeoffConfig,
) -> Result<Optimized> {
    cfg.validate()?;
    init.check(net)?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no training frames".into()));
    }
    for f in frames {
        check_len("optimize frame", net.input_width(), f.len())?;
    }
    let targets: Vec<DenseVector> = frames
        .par_iter()
        .map(|x| forward_original(net, x, &mut OpLedger::default()).map(|p| p.output))
        .collect::<Result<_>>()?;

    let gcfg = cfg.grad_config();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut kappas = init;
    let mut trace = Vec::new();
    let mut initial_error = None;
    let mut above = 0usize;
    let mut step = 0usize;

    'epochs: for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let grads: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(((step as u64) << 32) | i as u64);
                    grad_against(net, &frames[i], &targets[i], &kappas, &gcfg, &mut rng)
                })
                .collect::<Result<_>>()?;
            let n = grads.len() as f64;
            let l_error = grads.iter().map(|g| g.error).sum::<f64>() / n;
            let l_comp = grads.iter().map(|g| g.comp).sum::<f64>() / n;
            trace.push(TraceRow {
                step,
                lambda: cfg.lambda,
                l_error,
                l_comp,
                k: kappas.layer_k(),
            });

            let initial = *initial_error.get_or_insert(l_error);
            if l_error > cfg.divergence_factor * initial {
                above += 1;
                if above >= cfg.divergence_patience {
                    return Err(Error::Diverged {
                        step,
                        lambda: cfg.lambda,
                        error: l_error,
                        initial,
                    });
                }
            } else {
                above = 0;
            }

            let mut mean = grads[0].total(cfg.lambda);
            for g in &grads[1..] {
                for (m, t) in mean.iter_mut().zip(g.total(cfg.lambda)) {
                    m.iter_mut().zip(t).for_each(|(m, t)| *m += t);
                }
            }
            mean.iter_mut().flatten().for_each(|m| *m /= n);
            kappas = update_scales(&kappas, &mean, cfg.eta)?;
            step += 1;
        }
    }
    Ok(Optimized {
        scales: kappas,
        trace,
    })
}

fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Writes `step,lambda,L_error,L_comp,k0,k1,...`.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let depth = rows.first().map_or(0, |r| r.k.len());
    let mut header = vec![
        "step".to_string(),
        "lambda".into(),
        "L_error".into(),
        "L_comp".into(),
    ];
    header.extend((0..depth).map(|l| format!("k{l}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.lambda.to_string(),
            r.l_error.to_string(),
            r.l_comp.to_string(),
        ];
        rec.extend(r.k.iter().map(|k| k.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_rounding, LayerSpec};
    use crate::tensor::DenseMatrix;
    use rand_distr::{Distribution, Normal};

    fn random_net(dims: &[usize], out: Activation, seed: u64) -> NetworkSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let std = (2.0 / w[0] as f64).sqrt();
                let weights: Vec<f64> =
                    (0..w[0] * w[1]).map(|_| std * normal.sample(&mut rng)).collect();
                let bias: Vec<f64> = (0..w[1]).map(|_| 0.1 * normal.sample(&mut rng)).collect();
                let act = if l + 2 == dims.len() { out } else { Activation::Relu };
                LayerSpec::new(
                    DenseMatrix::new(w[0], w[1], weights).unwrap(),
                    bias.into(),
                    act,
                    ScaleVector::default(),
                )
                .unwrap()
            })
            .collect();
        NetworkSpec::new(layers).unwrap()
    }

    #[test]
    fn error_loss_examples() {
        assert_eq!(error_loss(&[1.0, 0.0], &[0.0, 0.0], Distance::L2).unwrap(), 1.0);
        assert_eq!(error_loss(&[0.3, 0.2], &[0.3, 0.2], Distance::L2).unwrap(), 0.0);
        let u = [0.25; 4];
        assert_eq!(error_loss(&u, &u, Distance::Kl).unwrap(), 0.0);
        let kl = error_loss(&[0.5, 0.5], &[1.0, 0.0], Distance::Kl).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            error_loss(&[0.7, 0.7], &[0.5, 0.5], Distance::Kl),
            Err(Error::NotAProbability(_))
        ));
        assert!(error_loss(&[1.0], &[1.0, 0.0], Distance::L2).is_err());
    }

    #[test]
    fn kl_floors_vanishing_probabilities() {
        let kl = error_loss(&[1.0, 0.0], &[0.5, 0.5], Distance::Kl).unwrap();
        assert!((kl - (0.5 * (0.5f64).ln() + 0.5 * (0.5 / KL_FLOOR).ln())).abs() < 1e-9);
    }

    #[test]
    fn comp_loss_matches_sigma_delta_formula() {
        let net = random_net(&[6, 5, 3], Activation::Identity, 3);
        let pass = forward_rounding(&net, &[0.9, 2.2, -1.4, 0.0, 3.0, 0.5], &mut OpLedger::default()).unwrap();
        assert_eq!(
            comp_loss(&pass.activity),
            crate::cost::flops_sigma_delta(&pass.activity) as f64
        );
        let mut a = LayerActivity::with_frames(1);
        a.layers.push(crate::cost::LayerCounts {
            width: 4,
            fan_out: 3,
            nonzero: 1,
            l1: 2,
            discretized: true,
        });
        assert_eq!(comp_loss(&a), 6.0);
        a.layers[0].l1 = 0;
        assert_eq!(comp_loss(&a), 0.0);
    }

    #[test]
    fn forward_matches_rounding_executor() {
        let net = random_net(&[8, 7, 5], Activation::Softmax, 5);
        let kappas = LogScales::from_layer_scales(&[3.0, 0.7]).unwrap();
        let scaled = kappas.apply(&net).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let cfg = GradConfig {
            lambda: 0.0,
            surrogate: Surrogate::StraightThrough,
            distance: None,
        };
        let g = grad_kappa(&net, &x, &kappas, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pass = forward_rounding(&scaled, &x, &mut OpLedger::default()).unwrap();
        for (a, b) in g.output.iter().zip(pass.output.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.comp, comp_loss(&pass.activity));
    }

    fn fd_check(net: &NetworkSpec, kappas: &LogScales, x: &[f64], seed: u64) {
        let cfg = GradConfig {
            lambda: 0.0,
            surrogate: Surrogate::UniformNoise,
            distance: None,
        };
        let eval = |k: &LogScales| {
            grad_kappa(net, x, k, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        let g = eval(kappas);
        let h = 1e-5;
        for l in 0..kappas.depth() {
            for j in 0..kappas.kappas()[l].len() {
                let mut plus = kappas.kappas().to_vec();
                let mut minus = kappas.kappas().to_vec();
                plus[l][j] += h;
                minus[l][j] -= h;
                let fp = eval(&LogScales::from_kappas(plus).unwrap()).error;
                let fm = eval(&LogScales::from_kappas(minus).unwrap()).error;
                let fd = (fp - fm) / (2.0 * h);
                let an = g.error_grad[l][j];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale < 1e-4, "layer {l}/{j}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn error_gradient_matches_finite_differences() {
        let net = random_net(&[5, 6, 4, 3], Activation::Softmax, 11);
        let kappas = LogScales::from_layer_scales(&[2.0, 1.5, 0.8]).unwrap();
        fd_check(&net, &kappas, &[0.2, -0.4, 1.0, 0.3, 0.9], 1);
        let net = random_net(&[4, 5, 2], Activation::Identity, 12);
        let kappas = LogScales::from_kappas(vec![vec![0.1, -0.3, 0.5, 0.0], vec![0.4; 5]]).unwrap();
        fd_check(&net, &kappas, &[1.2, 0.4, -0.7, 0.1], 2);
    }

    #[test]
    fn identity_surrogate_has_no_error_gradient() {
        let net = random_net(&[4, 3, 2], Activation::Identity, 2);
        let kappas = LogScales::zeros(&net, false);
        let cfg = GradConfig {
            lambda: 1.0,
            surrogate: Surrogate::Identity,
            distance: None,
        };
        let g = grad_kappa(&net, &[0.5, 1.0, 2.0, 0.1], &kappas, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(g.error_grad.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(g.error, 0.0);
    }

    #[test]
    fn zero_activations_give_zero_comp_gradient() {
        let net = random_net(&[4, 3, 2], Activation::Identity, 4);
        let zero = NetworkSpec::new(
            net.layers()
                .iter()
                .map(|l| {
                    LayerSpec::new(
                        DenseMatrix::zeros(l.d_in(), l.d_out()),
                        DenseVector::zeros(l.d_out()),
                        l.activation,
                        ScaleVector::default(),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let cfg = GradConfig {
            lambda: 1.0,
            surrogate: Surrogate::StraightThrough,
            distance: None,
        };
        let g = grad_kappa(&zero, &[0.0; 4], &LogScales::zeros(&zero, false), &cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(g.comp_grad.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(g.comp, 0.0);
    }

    #[test]
    fn large_lambda_step_reduces_computation() {
        let net = random_net(&[10, 12, 6], Activation::Identity, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<DenseVector> = (0..16)
            .map(|_| (0..10).map(|_| rng.random_range(0.0..3.0)).collect::<Vec<_>>().into())
            .collect();
        let cfg = TradeoffConfig {
            lambda: 1e3,
            eta: 1e-4,
            batch_size: 16,
            max_steps: Some(1),
            ..TradeoffConfig::default()
        };
        let start = LogScales::from_layer_scales(&[4.0, 4.0]).unwrap();
        let comp_at = |k: &LogScales| -> f64 {
            let n = k.apply(&net).unwrap();
            frames
                .iter()
                .map(|x| comp_loss(&forward_rounding(&n, x, &mut OpLedger::default()).unwrap().activity))
                .sum()
        };
        let out = optimize_from(&net, &frames, start.clone(), &cfg).unwrap();
        assert!(out.scales.layer_k().iter().zip(start.layer_k()).all(|(a, b)| a < &b));
        assert!(comp_at(&out.scales) < comp_at(&start));
    }

    #[test]
    fn update_rule() {
        let k = LogScales::from_kappas(vec![vec![0.0], vec![0.5, -0.5]]).unwrap();
        assert_eq!(update_scales(&k, &[vec![0.0], vec![0.0, 0.0]], 0.1).unwrap(), k);
        let next = update_scales(&k, &[vec![1.0], vec![0.0, 0.0]], 0.1).unwrap();
        assert!((next.kappas()[0][0] + 0.1).abs() < 1e-15);
        assert!((next.scales().unwrap()[0].get(0) - (-0.1f64).exp()).abs() < 1e-15);
        assert!(update_scales(&k, &[vec![f64::INFINITY], vec![0.0, 0.0]], 0.1).is_err());
        assert!(update_scales(&k, &[vec![1.0]], 0.1).is_err());
        let mut cur = k;
        let mut prev = cur.layer_k()[0];
        for _ in 0..5 {
            cur = update_scales(&cur, &[vec![50.0], vec![0.0, 0.0]], 0.01).unwrap();
            assert!(cur.layer_k()[0] < prev);
            prev = cur.layer_k()[0];
        }
    }

    #[test]
    fn optimize_is_deterministic_and_traced() {
        let net = random_net(&[6, 8, 3], Activation::Softmax, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<DenseVector> = (0..40)
            .map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>().into())
            .collect();
        let cfg = TradeoffConfig {
            lambda: 1e-3,
            eta: 0.05,
            epochs: 2,
            batch_size: 8,
            surrogate: Surrogate::UniformNoise,
            seed: 77,
            ..TradeoffConfig::default()
        };
        let a = optimize(&net, &frames, &cfg).unwrap();
        let b = optimize(&net, &frames, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 10);
        assert!(a.scales.layer_k().iter().all(|k| *k > 0.0));
        let mut buf = Vec::new();
        write_trace_csv(&a.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,lambda,L_error,L_comp,k0,k1\n"));
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn divergence_is_detected() {
        let net = random_net(&[6, 8, 3], Activation::Identity, 1);
        let frames: Vec<DenseVector> = vec![vec![1.0, 2.0, 0.5, 1.5, 0.3, 2.5].into(); 4];
        let cfg = TradeoffConfig {
            lambda: 1.0,
            eta: 0.01,
            epochs: 400,
            batch_size: 4,
            divergence_patience: 5,
            ..TradeoffConfig::default()
        };
        let start = LogScales::from_layer_scales(&[100.0, 100.0]).unwrap();
        let r = optimize_from(&net, &frames, start, &cfg);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn config_validation() {
        let ok = TradeoffConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TradeoffConfig { lambda: -1.0, ..ok.clone() },
            TradeoffConfig { eta: 0.0, ..ok.clone() },
            TradeoffConfig { batch_size: 0, ..ok.clone() },
            TradeoffConfig { lambda: f64::NAN, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
