//! Streaming quantizers: temporal difference/integration, herding, and
//! scaled rounding.
//!
//! All rounding goes through [`round_half_up`]. Herding relies on
//! `round(y − n) = round(y) − n` for integer `n`; round-half-up has that
//! property at exact ties, round-half-away-from-zero does not
//! (`round(−0.5) = −1` but `round(0.5) − 1 = 0`).

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{check_len, Error, Result};
use crate::tensor::DenseVector;

/// `floor(x + ½)`, computed without the spurious carry that `(x + 0.5).floor()`
/// produces just below a tie (e.g. `0.49999999999999994`).
#[inline]
pub fn round_half_up(x: f64) -> f64 {
    let r = x.round();
    if r - x == -0.5 {
        r + 1.0
    } else {
        r
    }
}

/// `Δ_T`: emits `x − x_last`, starting from `x_last = 0`.
#[derive(Clone, Debug)]
pub struct TemporalDiff {
    last: Vec<f64>,
}

impl TemporalDiff {
    pub fn new(width: usize) -> Self {
        Self {
            last: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.last.len()
    }

    pub fn last(&self) -> &[f64] {
        &self.last
    }

    pub fn step(&mut self, x: &[f64]) -> Result<DenseVector> {
        check_len("temporal_diff", self.last.len(), x.len())?;
        let out = x.iter().zip(&self.last).map(|(x, l)| x - l).collect::<Vec<_>>();
        self.last.copy_from_slice(x);
        Ok(out.into())
    }

    /// Sequence boundary: forget the previous input.
    pub fn reset(&mut self) {
        self.last.fill(0.0);
    }

    pub(crate) fn set_last(&mut self, x: &[f64]) {
        self.last.copy_from_slice(x);
    }
}

/// `Σ_T`: running sum of everything seen since the last reset.
#[derive(Clone, Debug)]
pub struct TemporalIntegrator {
    sum: Vec<f64>,
}

impl TemporalIntegrator {
    pub fn new(width: usize) -> Self {
        Self {
            sum: vec![0.0; width],
        }
    }

    /// Integrator whose running sum starts at `initial` instead of zero.
    pub fn starting_at(initial: &[f64]) -> Self {
        Self {
            sum: initial.to_vec(),
        }
    }

    pub fn value(&self) -> &[f64] {
        &self.sum
    }

    pub fn step(&mut self, x: &[f64]) -> Result<DenseVector> {
        check_len("temporal_integrate", self.sum.len(), x.len())?;
        self.sum.iter_mut().zip(x).for_each(|(s, x)| *s += x);
        Ok(self.sum.clone().into())
    }

    pub fn reset(&mut self) {
        self.sum.fill(0.0);
    }
}

/// Herding (discrete-time bidirectional sigma-delta modulation).
///
/// The residual `φ` stays in `[−½, ½)` after every step.
#[derive(Clone, Debug)]
pub struct Herder {
    phi: Vec<f64>,
}

impl Herder {
    pub fn new(width: usize) -> Self {
        Self {
            phi: vec![0.0; width],
        }
    }

    pub fn residual(&self) -> &[f64] {
        &self.phi
    }

    pub fn step(&mut self, x: &[f64]) -> Result<Vec<i64>> {
        let mut out = vec![0; self.phi.len()];
        self.step_into(x, &mut out)?;
        Ok(out)
    }

    pub fn step_into(&mut self, x: &[f64], out: &mut [i64]) -> Result<()> {
        check_len("herd", self.phi.len(), x.len())?;
        check_len("herd output", self.phi.len(), out.len())?;
        for ((phi, x), s) in self.phi.iter_mut().zip(x).zip(out.iter_mut()) {
            *phi += x;
            let r = round_half_up(*phi);
            *phi -= r;
            *s = r as i64;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.phi.fill(0.0);
    }

    pub(crate) fn set_residual(&mut self, phi: &[f64]) {
        self.phi.copy_from_slice(phi);
    }
}

/// Closed form of herding applied to a temporal difference:
/// `s_t = round(u_t) − round(u_{t−1})`.
#[derive(Clone, Debug)]
pub struct DeltaHerder {
    prev: Vec<i64>,
}

impl DeltaHerder {
    pub fn new(width: usize) -> Self {
        Self {
            prev: vec![0; width],
        }
    }

    pub fn previous(&self) -> &[i64] {
        &self.prev
    }

    pub fn step(&mut self, u: &[f64]) -> Result<Vec<i64>> {
        check_len("delta_herd_closed_form", self.prev.len(), u.len())?;
        Ok(u
            .iter()
            .zip(self.prev.iter_mut())
            .map(|(u, prev)| {
                let r = round_half_up(*u) as i64;
                let s = r - *prev;
                *prev = r;
                s
            })
            .collect())
    }

    pub fn reset(&mut self) {
        self.prev.fill(0);
    }
}

/// Discretization scale for one layer input: one scalar, or one per unit.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaleVector {
    Layer(f64),
    Unit(Vec<f64>),
}

impl Default for ScaleVector {
    fn default() -> Self {
        ScaleVector::Layer(1.0)
    }
}

impl ScaleVector {
    pub fn layer(k: f64) -> Result<Self> {
        check_scale(k)?;
        Ok(ScaleVector::Layer(k))
    }

    pub fn unit(ks: Vec<f64>) -> Result<Self> {
        ks.iter().try_for_each(|&k| check_scale(k))?;
        Ok(ScaleVector::Unit(ks))
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        match self {
            ScaleVector::Layer(k) => check_scale(*k),
            ScaleVector::Unit(ks) => {
                check_len("ScaleVector width", width, ks.len())?;
                ks.iter().try_for_each(|&k| check_scale(k))
            }
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            ScaleVector::Layer(k) => *k,
            ScaleVector::Unit(ks) => ks[i],
        }
    }

    pub fn is_unit(&self) -> bool {
        matches!(self, ScaleVector::Unit(_))
    }

    pub fn is_one(&self) -> bool {
        match self {
            ScaleVector::Layer(k) => *k == 1.0,
            ScaleVector::Unit(ks) => ks.iter().all(|&k| k == 1.0),
        }
    }

    /// Expanded to one entry per unit.
    pub fn expand(&self, width: usize) -> Vec<f64> {
        (0..width).map(|i| self.get(i)).collect()
    }

    /// `k ⊙ x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ScaleVector::Layer(k) => x.iter().map(|v| v * k).collect(),
            ScaleVector::Unit(ks) => x.iter().zip(ks).map(|(v, k)| v * k).collect(),
        }
    }
}

fn check_scale(k: f64) -> Result<()> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidScale(k))
    }
}

/// `round(x·k)/k`; per-element error at most `1/(2k)`.
pub fn scaled_round(x: &[f64], k: &ScaleVector) -> Result<DenseVector> {
    k.validate(x.len())?;
    Ok(x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let k = k.get(i);
            round_half_up(v * k) / k
        })
        .collect::<Vec<_>>()
        .into())
}

/// Training-time stand-in for [`scaled_round`]: `(x·k + ε)/k` with
/// `ε ~ U(−½, ½)` drawn fresh per element.
pub fn noisy_round_surrogate<R: Rng + ?Sized>(
    x: &[f64],
    k: &ScaleVector,
    rng: &mut R,
) -> Result<DenseVector> {
    let dist = Uniform::new(-0.5, 0.5).expect("valid range");
    let eps: Vec<f64> = (0..x.len()).map(|_| dist.sample(rng)).collect();
    noisy_round_with(x, k, &eps)
}

/// [`noisy_round_surrogate`] with the noise supplied by the caller.
pub fn noisy_round_with(x: &[f64], k: &ScaleVector, eps: &[f64]) -> Result<DenseVector> {
    k.validate(x.len())?;
    check_len("noisy_round noise", x.len(), eps.len())?;
    Ok(x
        .iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (v, e))| {
            let k = k.get(i);
            (v * k + e) / k
        })
        .collect::<Vec<_>>()
        .into())
}
