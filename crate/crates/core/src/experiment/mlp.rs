//! Plain backprop trainer for ReLU classifiers with a softmax readout.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::network::{Activation, LayerSpec, NetworkSpec};
use crate::quantize::ScaleVector;
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, annealed to zero on a cosine schedule.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random translation of square images by up to this many pixels.
    pub max_shift: usize,
    /// Frames taken from the end of the training set for model selection.
    pub validation: usize,
    /// Stop when validation accuracy has not improved for this many epochs.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200, 200],
            classes: 10,
            epochs: 40,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_shift: 2,
            validation: 500,
            patience: Some(10),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpReport {
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub history: Vec<EpochStats>,
}

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    d_in: usize,
    d_out: usize,
}

struct Grads {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

/// Trains a `[width, hidden.., classes]` ReLU/softmax net on a labelled dataset.
pub fn train_mlp(train: &FrameDataset, cfg: &MlpConfig) -> Result<(NetworkSpec, MlpReport)> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::InvalidArgument("training set has no labels".into()))?;
    if let Some(bad) = labels.iter().find(|l| **l as usize >= cfg.classes) {
        return Err(Error::InvalidArgument(format!("label {bad} >= {} classes", cfg.classes)));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.validation >= train.len() {
        return Err(Error::InvalidArgument(
            "need epochs, batch size >= 1 and fewer validation frames than training frames".into(),
        ));
    }
    let (fit, val) = train.split_tail(cfg.validation);
    let fit_labels = fit.labels().expect("labels survive split");
    let val_labels = val.labels().expect("labels survive split");
    let width = train.width();
    let side = (width as f64).sqrt() as usize;
    let shift = if side * side == width { cfg.max_shift } else { 0 };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![width];
    dims.extend(&cfg.hidden);
    dims.push(cfg.classes);
    let mut layers: Vec<Layer> = dims
        .windows(2)
        .map(|d| {
            let r = (6.0 / d[0] as f64).sqrt();
            Layer {
                w: (0..d[0] * d[1]).map(|_| rng.random_range(-r..r)).collect(),
                b: vec![0.0; d[1]],
                d_in: d[0],
                d_out: d[1],
            }
        })
        .collect();
    let mut velocity = zero_grads(&layers);
    let mut grads = zero_grads(&layers);

    let steps_per_epoch = fit.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut best = (snapshot(&layers), 0usize, -1.0f64);
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut image = vec![0.0; width];
    let mut acts: Vec<Vec<f64>> = dims.iter().map(|d| vec![0.0; *d]).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.w.iter_mut().flatten().for_each(|g| *g = 0.0);
            grads.b.iter_mut().flatten().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = fit.frames()[i].as_slice();
                if shift > 0 {
                    let dx = rng.random_range(0..=2 * shift) as isize - shift as isize;
                    let dy = rng.random_range(0..=2 * shift) as isize - shift as isize;
                    translate(x, side, dx, dy, &mut image);
                } else {
                    image.copy_from_slice(x);
                }
                loss += backprop(&layers, &image, fit_labels[i] as usize, &mut acts, &mut grads);
            }
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            let n = batch.len() as f64;
            for (l, layer) in layers.iter_mut().enumerate() {
                for ((w, g), v) in layer.w.iter_mut().zip(&grads.w[l]).zip(velocity.w[l].iter_mut()) {
                    *v = cfg.momentum * *v + g / n + cfg.weight_decay * *w;
                    *w -= lr * *v;
                }
                for ((b, g), v) in layer.b.iter_mut().zip(&grads.b[l]).zip(velocity.b[l].iter_mut()) {
                    *v = cfg.momentum * *v + g / n;
                    *b -= lr * *v;
                }
            }
            step += 1;
        }
        let correct = val
            .frames()
            .iter()
            .zip(val_labels)
            .filter(|(x, y)| predict(&layers, x, &mut acts) == **y as usize)
            .count();
        let val_accuracy = if val.is_empty() {
            0.0
        } else {
            correct as f64 / val.len() as f64
        };
        history.push(EpochStats {
            epoch,
            loss: loss / fit.len() as f64,
            val_accuracy,
        });
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        if val_accuracy >= best.2 {
            best = (snapshot(&layers), epoch, val_accuracy);
        } else if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }

    let (weights, best_epoch, val_accuracy) = best;
    let n_layers = weights.len();
    let specs = weights
        .into_iter()
        .enumerate()
        .map(|(l, layer)| {
            let act = if l + 1 == n_layers {
                Activation::Softmax
            } else {
                Activation::Relu
            };
            LayerSpec::new(
                DenseMatrix::new(layer.d_in, layer.d_out, layer.w)?,
                layer.b.into(),
                act,
                ScaleVector::default(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        NetworkSpec::new(specs)?,
        MlpReport {
            best_epoch,
            val_accuracy,
            history,
        },
    ))
}

fn zero_grads(layers: &[Layer]) -> Grads {
    Grads {
        w: layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
        b: layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
    }
}

fn snapshot(layers: &[Layer]) -> Vec<Layer> {
    layers
        .iter()
        .map(|l| Layer {
            w: l.w.clone(),
            b: l.b.clone(),
            d_in: l.d_in,
            d_out: l.d_out,
        })
        .collect()
}

/// Shifts a `side × side` image by `(dx, dy)` pixels with zero fill.
fn translate(x: &[f64], side: usize, dx: isize, dy: isize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..side as isize {
        let sr = r - dy;
        if sr < 0 || sr >= side as isize {
            continue;
        }
        for c in 0..side as isize {
            let sc = c - dx;
            if sc >= 0 && sc < side as isize {
                out[(r * side as isize + c) as usize] = x[(sr * side as isize + sc) as usize];
            }
        }
    }
}

/// Fills `acts` with post-activations; the last entry holds softmax probabilities.
fn forward(layers: &[Layer], x: &[f64], acts: &mut [Vec<f64>]) {
    acts[0].copy_from_slice(x);
    for (l, layer) in layers.iter().enumerate() {
        let (lo, hi) = acts.split_at_mut(l + 1);
        let (a, u) = (&lo[l], &mut hi[0]);
        u.copy_from_slice(&layer.b);
        for (ai, row) in a.iter().zip(layer.w.chunks_exact(layer.d_out)) {
            if *ai != 0.0 {
                for (uj, w) in u.iter_mut().zip(row) {
                    *uj += ai * w;
                }
            }
        }
        if l + 1 == layers.len() {
            crate::network::softmax_in_place(u);
        } else {
            u.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
}

fn predict(layers: &[Layer], x: &[f64], acts: &mut [Vec<f64>]) -> usize {
    forward(layers, x, acts);
    argmax(acts.last().expect("at least one layer"))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
        .0
}

/// Accumulates cross-entropy gradients for one sample and returns its loss.
fn backprop(layers: &[Layer], x: &[f64], label: usize, acts: &mut [Vec<f64>], grads: &mut Grads) -> f64 {
    forward(layers, x, acts);
    let p = acts.last().expect("at least one layer");
    let loss = -p[label].max(1e-300).ln();
    let mut delta: Vec<f64> = p.clone();
    delta[label] -= 1.0;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let a = &acts[l];
        for (g, d) in grads.b[l].iter_mut().zip(&delta) {
            *g += d;
        }
        for (ai, grow) in a.iter().zip(grads.w[l].chunks_exact_mut(layer.d_out)) {
            if *ai != 0.0 {
                for (g, d) in grow.iter_mut().zip(&delta) {
                    *g += ai * d;
                }
            }
        }
        if l > 0 {
            delta = a
                .iter()
                .zip(layer.w.chunks_exact(layer.d_out))
                .map(|(ai, row)| {
                    if *ai > 0.0 {
                        row.iter().zip(&delta).map(|(w, d)| w * d).sum()
                    } else {
                        0.0
                    }
                })
                .collect();
        }
    }
    loss
}
