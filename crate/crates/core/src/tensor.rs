//! Dense and event-sparse kernels with operation counting.
//!
//! Matrices are stored input-major: a `DenseMatrix` of shape `rows × cols`
//! maps a row vector of width `rows` to one of width `cols` (`y = x·W`).
//! Row `i` is therefore the fan-out of input unit `i`, which is what an
//! event for unit `i` adds into the accumulator.

use std::ops::{Add, AddAssign, Deref, Index};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A real-valued activation vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.0.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for DenseVector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Row-major `rows × cols` real matrix (`rows` = input width).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("DenseMatrix::new", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("DenseMatrix::from_rows", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Entry `(i, j)` becomes `W[i, j] · row_factor[i] · col_factor[j]`.
    pub fn rescaled(&self, row_factor: &[f64], col_factor: &[f64]) -> Result<Self> {
        check_len("DenseMatrix::rescaled rows", self.rows, row_factor.len())?;
        check_len("DenseMatrix::rescaled cols", self.cols, col_factor.len())?;
        let mut out = self.clone();
        for (i, row) in out.data.chunks_exact_mut(self.cols).enumerate() {
            for (w, c) in row.iter_mut().zip(col_factor) {
                *w *= row_factor[i] * c;
            }
        }
        Ok(out)
    }

    /// `W · g`, the backward pass of `x·W` with respect to `x`. Uncounted.
    pub fn mul_transposed(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_len("DenseMatrix::mul_transposed", self.cols, g.len())?;
        Ok(self
            .data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(g).map(|(w, g)| w * g).sum())
            .collect())
    }
}

/// Exact operation counts by numeric class.
///
/// The integer/float split records which kernel produced an operation: the
/// event path (`sparse_accumulate`, bias loads of discretized layers) counts
/// `int_*`, dense kernels count `float_*`. Energy pricing is chosen separately
/// in [`crate::cost::energy`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpLedger {
    pub float_adds: u64,
    pub float_mults: u64,
    pub int_adds: u64,
    pub int_mults: u64,
}

impl OpLedger {
    pub fn adds(&self) -> u64 {
        self.float_adds + self.int_adds
    }

    pub fn mults(&self) -> u64 {
        self.float_mults + self.int_mults
    }

    pub fn total(&self) -> u64 {
        self.adds() + self.mults()
    }

    pub fn merge(&mut self, other: &OpLedger) {
        *self += *other;
    }
}

impl Add for OpLedger {
    type Output = OpLedger;

    fn add(mut self, rhs: OpLedger) -> OpLedger {
        self += rhs;
        self
    }
}

impl AddAssign for OpLedger {
    fn add_assign(&mut self, rhs: OpLedger) {
        self.float_adds += rhs.float_adds;
        self.float_mults += rhs.float_mults;
        self.int_adds += rhs.int_adds;
        self.int_mults += rhs.int_mults;
    }
}

/// One compressed run of unit events for a single input index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub index: usize,
    pub count: i64,
}

/// Signed integer activation changes, stored as `(index, count)` pairs.
///
/// The event count `N` is the L1 norm of the encoded vector. Unit events are
/// never materialized; [`SparseEventList::unit_events`] expands lazily.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseEventList {
    width: usize,
    events: Vec<Event>,
}

impl SparseEventList {
    pub fn empty(width: usize) -> Self {
        Self {
            width,
            events: Vec::new(),
        }
    }

    pub fn from_counts(counts: &[i64]) -> Self {
        let events = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(index, &count)| Event { index, count })
            .collect();
        Self {
            width: counts.len(),
            events,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Total number of unit events `N = |v|_L1`.
    pub fn n_events(&self) -> u64 {
        self.events.iter().map(|e| e.count.unsigned_abs()).sum()
    }

    pub fn reconstruct(&self) -> Vec<i64> {
        let mut v = vec![0; self.width];
        for e in &self.events {
            v[e.index] += e.count;
        }
        v
    }

    /// The `(index, ±1)` unit-event sequence.
    pub fn unit_events(&self) -> impl Iterator<Item = (usize, i8)> + '_ {
        self.events.iter().flat_map(|e| {
            let sign = if e.count < 0 { -1 } else { 1 };
            std::iter::repeat_n((e.index, sign), e.count.unsigned_abs() as usize)
        })
    }
}

/// Decomposes an integer-valued vector into events.
pub fn to_events(v: &[f64]) -> Result<SparseEventList> {
    let mut counts = Vec::with_capacity(v.len());
    for (index, &value) in v.iter().enumerate() {
        if !value.is_finite() || value.fract() != 0.0 || value.abs() > i64::MAX as f64 {
            return Err(Error::NonInteger { index, value });
        }
        counts.push(value as i64);
    }
    Ok(SparseEventList::from_counts(&counts))
}

/// `x·W + b`. Counts `d_in·d_out` mults and `d_in·d_out` adds: the
/// `(d_in − 1)·d_out` reduction adds plus `d_out` bias adds.
pub fn dense_affine(
    x: &[f64],
    w: &DenseMatrix,
    b: &[f64],
    ledger: &mut OpLedger,
) -> Result<DenseVector> {
    check_len("dense_affine input", w.rows, x.len())?;
    check_len("dense_affine bias", w.cols, b.len())?;
    let mut out = b.to_vec();
    for (xi, row) in x.iter().zip(w.data.chunks_exact(w.cols)) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    let ops = (w.rows * w.cols) as u64;
    ledger.float_mults += ops;
    ledger.float_adds += ops;
    Ok(DenseVector(out))
}

/// `x·W` without bias, dense, counting `d_in·d_out` mults and
/// `(d_in − 1)·d_out` adds.
pub fn dense_matvec(x: &[f64], w: &DenseMatrix, ledger: &mut OpLedger) -> Result<DenseVector> {
    check_len("dense_matvec input", w.rows, x.len())?;
    let mut out = vec![0.0; w.cols];
    for (xi, row) in x.iter().zip(w.data.chunks_exact(w.cols)) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    ledger.float_mults += (w.rows * w.cols) as u64;
    ledger.float_adds += (w.rows.saturating_sub(1) * w.cols) as u64;
    Ok(DenseVector(out))
}

/// `u + Σ_n s_n · W[i_n, ·]` as a sequence of row additions.
pub fn sparse_accumulate(
    events: &SparseEventList,
    w: &DenseMatrix,
    u: &DenseVector,
    ledger: &mut OpLedger,
) -> Result<DenseVector> {
    let mut out = u.clone();
    sparse_accumulate_into(events, w, &mut out.0, ledger)?;
    Ok(out)
}

/// In-place form of [`sparse_accumulate`]. Adds `N·d_out` to `ledger.int_adds`.
pub fn sparse_accumulate_into(
    events: &SparseEventList,
    w: &DenseMatrix,
    u: &mut [f64],
    ledger: &mut OpLedger,
) -> Result<()> {
    check_len("sparse_accumulate target", w.cols, u.len())?;
    if let Some(e) = events.events.iter().find(|e| e.index >= w.rows) {
        return Err(Error::IndexOutOfRange {
            index: e.index,
            rows: w.rows,
        });
    }
    #[cfg(debug_assertions)]
    let reference = (w.rows * w.cols <= 4096).then(|| dense_reference(events, w, u));

    for e in &events.events {
        let row = w.row(e.index);
        match e.count {
            1 => u.iter_mut().zip(row).for_each(|(o, r)| *o += r),
            -1 => u.iter_mut().zip(row).for_each(|(o, r)| *o -= r),
            c => {
                let c = c as f64;
                u.iter_mut().zip(row).for_each(|(o, r)| *o += c * r);
            }
        }
    }
    ledger.int_adds += events.n_events() * w.cols as u64;

    #[cfg(debug_assertions)]
    if let Some(reference) = reference {
        for (a, b) in u.iter().zip(&reference) {
            debug_assert!(
                (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                "sparse accumulation diverged from dense product: {a} vs {b}"
            );
        }
    }
    Ok(())
}

#[cfg(debug_assertions)]
fn dense_reference(events: &SparseEventList, w: &DenseMatrix, u: &[f64]) -> Vec<f64> {
    let v = events.reconstruct();
    let mut out = u.to_vec();
    for (i, &c) in v.iter().enumerate().filter(|(i, _)| *i < w.rows) {
        for (o, r) in out.iter_mut().zip(w.row(i)) {
            *o += c as f64 * r;
        }
    }
    out
}
